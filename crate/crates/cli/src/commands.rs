//! Command implementations. Everything is reproducible bit-for-bit from
//! `(config, seed)`: scene seeds, epoch shuffles and augmentation draws
//! all derive from the master seed and absolute epoch index, never from
//! ambient state.

use std::io::Write;
use std::path::{Path, PathBuf};

use semfuse_core::cgfe::{CgfeModel, CgfeOptim, Modality, SrLossRecord};
use semfuse_core::checkpoint::{load_cgfe, load_fusion, save_cgfe, save_fusion, TrainMeta};
use semfuse_core::datamodel::{
    crop_pair, hflip_pair, load_pair, luminance, save_gray01, save_label_png, save_rgb01,
    synth_scene, to_signed, argmax_decode, DatasetSplit, ImagePair, LabelMap, SplitRole,
};
use semfuse_core::error::{Error, Result};
use semfuse_core::fusion::{
    extract_backbone, BackboneFeatures, FusionModel, FusionOptim, GeoLossRecord,
};
use semfuse_core::metrics::{cc, miou, nabf, psnr, ssimx};
use semfuse_core::rng::SeededRng;
use semfuse_core::Tensor;

use crate::config::RunConfig;

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Generate a synthetic FMB-style dataset (train + test splits) under the
/// configured data root, with a manifest recording every scene seed.
pub fn cmd_synth(cfg: &RunConfig) -> Result<PathBuf> {
    let palette = cfg.palette()?;
    let stride = cfg.net_config().stride();
    let mut manifest = String::from("split,id,scene_seed\n");
    for (role, count, offset) in [
        (SplitRole::Train, cfg.synth_train, 0u64),
        (SplitRole::Test, cfg.synth_test, 1 << 20),
    ] {
        for i in 0..count {
            let scene_seed = cfg
                .seed
                .wrapping_mul(1_000_003)
                .wrapping_add(offset + i as u64);
            let pair = synth_scene(scene_seed, (cfg.size, cfg.size), &palette, stride)?;
            let id = format!("{i:05}");
            let base = cfg.data_root.join(role.dir_name());
            save_gray01(&base.join("Infrared").join(format!("{id}.png")), &pair.ir)?;
            save_rgb01(&base.join("Visible").join(format!("{id}.png")), &pair.vis)?;
            save_label_png(
                &base.join("Label").join(format!("{id}.png")),
                pair.label.as_ref().expect("synthetic scenes are labelled"),
            )?;
            manifest.push_str(&format!("{},{id},{scene_seed}\n", role.dir_name()));
        }
    }
    std::fs::create_dir_all(&cfg.data_root)?;
    std::fs::write(cfg.data_root.join("manifest.txt"), manifest)?;
    Ok(cfg.data_root.clone())
}

/// Deterministic pair order for one epoch, plus per-item augmentation
/// draws when enabled.
fn epoch_plan(
    cfg: &RunConfig,
    n: usize,
    stream_tag: u64,
    epoch: u64,
) -> (Vec<usize>, Vec<bool>, Vec<(u64, u64)>) {
    let mut rng = SeededRng::stream(cfg.seed, (stream_tag << 56) ^ epoch);
    let mut order: Vec<usize> = (0..n).collect();
    rng.shuffle(&mut order);
    let flips = if cfg.flip {
        (0..n).map(|_| rng.below(2) == 1).collect()
    } else {
        vec![false; n]
    };
    let crops = if cfg.crop {
        (0..n).map(|_| (rng.next_u64(), rng.next_u64())).collect()
    } else {
        vec![(0, 0); n]
    };
    (order, flips, crops)
}

fn prepare_pair(cfg: &RunConfig, pair: ImagePair, flip: bool, crop_draw: (u64, u64)) -> Result<ImagePair> {
    let mut pair = pair;
    if cfg.crop {
        let (h, w) = pair.size();
        if h > cfg.size && w >= cfg.size || w > cfg.size && h >= cfg.size {
            let y0 = (crop_draw.0 % (h - cfg.size + 1) as u64) as usize;
            let x0 = (crop_draw.1 % (w - cfg.size + 1) as u64) as usize;
            pair = crop_pair(&pair, y0, x0, cfg.size, cfg.size)?;
        }
    }
    if flip {
        pair = hflip_pair(&pair);
    }
    Ok(pair)
}

fn append_csv(path: &Path, header: &str, row: Option<&str>) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    let fresh = !path.is_file();
    let mut file = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)?;
    if fresh {
        writeln!(file, "{header}")?;
    }
    if let Some(row) = row {
        writeln!(file, "{row}")?;
    }
    Ok(())
}

const CGFE_CSV_HEADER: &str =
    "epoch,adv_g,adv_f,cycle,l_cg,l_sere,str_ssim,str_sobel,l_str,total,loss_dx,loss_dy";

fn cgfe_csv_row(epoch: usize, r: &SrLossRecord) -> String {
    format!(
        "{},{},{},{},{},{},{},{},{},{},{},{}",
        epoch,
        r.adv_g,
        r.adv_f,
        r.cycle,
        r.l_cg,
        r.l_sere,
        r.str_ssim,
        r.str_sobel,
        r.l_str,
        r.total,
        r.loss_dx,
        r.loss_dy
    )
}

/// Train one modality's extractor; writes a checkpoint and a per-epoch
/// loss CSV. `resume` continues an interrupted run exactly.
pub fn cmd_train_cgfe(
    cfg: &RunConfig,
    modality: Modality,
    resume: Option<&Path>,
) -> Result<PathBuf> {
    let palette = cfg.palette()?;
    let net = cfg.net_config();
    let hyper = cfg.train_hyper();
    let split = DatasetSplit::discover(&cfg.data_root, SplitRole::Train)?;
    if split.ids.is_empty() {
        return Err(Error::Config(format!(
            "no training pairs under {}",
            cfg.data_root.display()
        )));
    }
    let (mut model, mut optim, start_epoch, mut steps_done) = match resume {
        Some(path) => {
            let (model, optim, meta) = load_cgfe(path)?;
            if model.modality != modality {
                return Err(Error::Config(format!(
                    "resume checkpoint is for modality {}, requested {}",
                    model.modality.tag(),
                    modality.tag()
                )));
            }
            if model.cfg != net {
                return Err(Error::Config(
                    "resume checkpoint scale does not match the configuration".into(),
                ));
            }
            let e = meta.epochs_done as usize;
            (model, optim, e, meta.steps_done)
        }
        None => {
            let model = CgfeModel::<f32>::new(modality, net, palette.clone(), cfg.seed)?;
            let optim = CgfeOptim::new(cfg.adam(), &model);
            (model, optim, 0, 0)
        }
    };

    let csv_path = cfg
        .out_dir
        .join(format!("cgfe_{}_loss.csv", modality.tag()));
    if start_epoch == 0 {
        std::fs::create_dir_all(&cfg.out_dir)?;
        std::fs::remove_file(&csv_path).ok();
        append_csv(&csv_path, CGFE_CSV_HEADER, None)?;
    }
    let stream_tag = match modality {
        Modality::Ir => 1,
        Modality::Vis => 2,
    };
    for epoch in start_epoch..cfg.epochs_cgfe {
        let (order, flips, crops) = epoch_plan(cfg, split.ids.len(), stream_tag, epoch as u64);
        let mut epoch_sum = SrLossRecord::default();
        let mut batches = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let mut pairs = Vec::with_capacity(chunk.len());
            for &i in chunk {
                let pair = load_pair(&split, &split.ids[i], &palette)?;
                pairs.push(prepare_pair(cfg, pair, flips[i], crops[i])?);
            }
            let refs: Vec<&ImagePair> = pairs.iter().collect();
            let rec = model.train_step(&refs, &hyper, &mut optim)?;
            steps_done += 1;
            batches += 1;
            epoch_sum = add_sr(&epoch_sum, &rec);
        }
        let mean = scale_sr(&epoch_sum, 1.0 / batches as f64);
        append_csv(&csv_path, CGFE_CSV_HEADER, Some(&cgfe_csv_row(epoch, &mean)))?;
    }

    let ckpt = cfg
        .out_dir
        .join(format!("cgfe_{}.ckpt", modality.tag()));
    save_cgfe(
        &ckpt,
        &model,
        &optim,
        &TrainMeta {
            seed: cfg.seed,
            epochs_done: cfg.epochs_cgfe as u64,
            steps_done,
        },
    )?;
    Ok(ckpt)
}

fn add_sr(a: &SrLossRecord, b: &SrLossRecord) -> SrLossRecord {
    SrLossRecord {
        adv_g: a.adv_g + b.adv_g,
        adv_f: a.adv_f + b.adv_f,
        cycle: a.cycle + b.cycle,
        l_cg: a.l_cg + b.l_cg,
        l_sere: a.l_sere + b.l_sere,
        str_ssim: a.str_ssim + b.str_ssim,
        str_sobel: a.str_sobel + b.str_sobel,
        l_str: a.l_str + b.l_str,
        total: a.total + b.total,
        lambda: b.lambda,
        loss_dx: a.loss_dx + b.loss_dx,
        loss_dy: a.loss_dy + b.loss_dy,
    }
}

fn scale_sr(a: &SrLossRecord, s: f64) -> SrLossRecord {
    SrLossRecord {
        adv_g: a.adv_g * s,
        adv_f: a.adv_f * s,
        cycle: a.cycle * s,
        l_cg: a.l_cg * s,
        l_sere: a.l_sere * s,
        str_ssim: a.str_ssim * s,
        str_sobel: a.str_sobel * s,
        l_str: a.l_str * s,
        total: a.total * s,
        lambda: a.lambda,
        loss_dx: a.loss_dx * s,
        loss_dy: a.loss_dy * s,
    }
}

const FUSION_CSV_HEADER: &str =
    "epoch,ssim_term,mse_vis,mse_ir,total,sigma_omega,sigma_gamma";

/// Train the fusion head against two frozen extractor checkpoints.
pub fn cmd_train_fusion(
    cfg: &RunConfig,
    ir_ckpt: &Path,
    vis_ckpt: &Path,
    resume: Option<&Path>,
) -> Result<PathBuf> {
    let palette = cfg.palette()?;
    let hyper = cfg.fusion_hyper();
    let (cgfe_ir, _, _) = load_cgfe(ir_ckpt)?;
    let (cgfe_vi, _, _) = load_cgfe(vis_ckpt)?;
    if cgfe_ir.modality != Modality::Ir || cgfe_vi.modality != Modality::Vis {
        return Err(Error::Config(
            "checkpoint modalities must be infrared then visible".into(),
        ));
    }
    if cgfe_ir.cfg != cgfe_vi.cfg {
        return Err(Error::Config(format!(
            "extractor scales differ: {:?} vs {:?}",
            cgfe_ir.cfg, cgfe_vi.cfg
        )));
    }
    if cgfe_ir.palette != cgfe_vi.palette || cgfe_ir.palette != palette {
        return Err(Error::Config("palette mismatch between checkpoints and config".into()));
    }
    if cgfe_ir.cfg != cfg.net_config() {
        return Err(Error::Config(
            "checkpoint scale does not match the configuration".into(),
        ));
    }

    let split = DatasetSplit::discover(&cfg.data_root, SplitRole::Train)?;
    if split.ids.is_empty() {
        return Err(Error::Config(format!(
            "no training pairs under {}",
            cfg.data_root.display()
        )));
    }

    let (mut model, mut optim, start_epoch, mut steps_done) = match resume {
        Some(path) => {
            let (model, optim, pal, meta) = load_fusion(path)?;
            if model.cfg != cfg.net_config() || pal != palette {
                return Err(Error::Config(
                    "resume checkpoint does not match the configuration".into(),
                ));
            }
            (model, optim, meta.epochs_done as usize, meta.steps_done)
        }
        None => {
            let mut model = FusionModel::<f32>::new(cfg.net_config(), cfg.seed)?;
            model.gates.entries[0].1 = Tensor::scalar(cfg.omega_init as f32);
            model.gates.entries[1].1 = Tensor::scalar(cfg.gamma_init as f32);
            let optim = FusionOptim::new(cfg.adam(), &model);
            (model, optim, 0, 0)
        }
    };

    let csv_path = cfg.out_dir.join("fusion_loss.csv");
    if start_epoch == 0 {
        std::fs::create_dir_all(&cfg.out_dir)?;
        std::fs::remove_file(&csv_path).ok();
        append_csv(&csv_path, FUSION_CSV_HEADER, None)?;
    }

    // The extractors are frozen, so their taps and segmentations per image
    // never change across epochs; cache them when augmentation is off and
    // the cache fits in memory. Results are identical either way.
    const CACHE_BUDGET_BYTES: usize = 1_500_000_000;
    let cache: Option<Vec<BackboneFeatures<f32>>> = if !cfg.flip && !cfg.crop {
        let mut feats = Vec::with_capacity(split.ids.len());
        let mut fits = true;
        for id in &split.ids {
            let pair = load_pair(&split, id, &palette)?;
            let f = extract_backbone(&cgfe_ir, &cgfe_vi, &pair)?;
            if f.approx_bytes() * split.ids.len() > CACHE_BUDGET_BYTES {
                fits = false;
                break;
            }
            feats.push(f);
        }
        fits.then_some(feats)
    } else {
        None
    };

    for epoch in start_epoch..cfg.epochs_fusion {
        let (order, flips, crops) = epoch_plan(cfg, split.ids.len(), 3, epoch as u64);
        let mut sum = GeoLossRecord::default();
        let mut batches = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let rec = if let Some(cache) = &cache {
                let refs: Vec<&BackboneFeatures<f32>> =
                    chunk.iter().map(|&i| &cache[i]).collect();
                model.train_step_cached(&refs, &hyper, &mut optim)?
            } else {
                let mut pairs = Vec::with_capacity(chunk.len());
                for &i in chunk {
                    let pair = load_pair(&split, &split.ids[i], &palette)?;
                    pairs.push(prepare_pair(cfg, pair, flips[i], crops[i])?);
                }
                let refs: Vec<&ImagePair> = pairs.iter().collect();
                model.train_step(&cgfe_ir, &cgfe_vi, &refs, &hyper, &mut optim)?
            };
            steps_done += 1;
            batches += 1;
            sum.ssim_term += rec.ssim_term;
            sum.mse_vis_term += rec.mse_vis_term;
            sum.mse_ir_term += rec.mse_ir_term;
            sum.total += rec.total;
        }
        let s = 1.0 / batches as f64;
        let row = format!(
            "{},{},{},{},{},{},{}",
            epoch,
            sum.ssim_term * s,
            sum.mse_vis_term * s,
            sum.mse_ir_term * s,
            sum.total * s,
            sigmoid(model.omega() as f64),
            sigmoid(model.gamma() as f64),
        );
        append_csv(&csv_path, FUSION_CSV_HEADER, Some(&row))?;
    }

    let ckpt = cfg.out_dir.join("fusion.ckpt");
    save_fusion(
        &ckpt,
        &model,
        &optim,
        &palette,
        &TrainMeta {
            seed: cfg.seed,
            epochs_done: cfg.epochs_fusion as u64,
            steps_done,
        },
    )?;
    Ok(ckpt)
}

pub struct FuseSummary {
    pub written: usize,
    pub failures: Vec<(String, String)>,
}

/// Fuse every pair of a split. Failing pairs are reported and skipped;
/// the remaining pairs are still processed. Scale and palette come from
/// the checkpoints themselves.
#[allow(clippy::too_many_arguments)]
pub fn cmd_fuse(
    fusion_ckpt: &Path,
    ir_ckpt: &Path,
    vis_ckpt: &Path,
    input_root: &Path,
    role: SplitRole,
    out_dir: &Path,
    dump_masks: bool,
) -> Result<FuseSummary> {
    let (cgfe_ir, _, _) = load_cgfe(ir_ckpt)?;
    let (cgfe_vi, _, _) = load_cgfe(vis_ckpt)?;
    let (fm, _, palette, _) = load_fusion(fusion_ckpt)?;
    if cgfe_ir.modality != Modality::Ir || cgfe_vi.modality != Modality::Vis {
        return Err(Error::Config(
            "checkpoint modalities must be infrared then visible".into(),
        ));
    }
    if fm.cfg != cgfe_ir.cfg || fm.cfg != cgfe_vi.cfg {
        return Err(Error::Config("checkpoint scales differ".into()));
    }
    let split = DatasetSplit::discover(input_root, role)?;
    std::fs::create_dir_all(out_dir)?;
    let mut summary = FuseSummary {
        written: 0,
        failures: Vec::new(),
    };
    for id in &split.ids {
        let attempt = (|| -> Result<()> {
            let pair = load_pair(&split, id, &palette)?;
            let (rgb, mask) = fm.fuse_pair(&cgfe_ir, &cgfe_vi, &pair)?;
            save_rgb01(&out_dir.join(format!("{id}.png")), &rgb)?;
            if dump_masks {
                let lm = LabelMap::new(mask.h, mask.w, mask.data().to_vec());
                save_label_png(&out_dir.join("masks").join(format!("{id}.png")), &lm)?;
            }
            Ok(())
        })();
        match attempt {
            Ok(()) => summary.written += 1,
            Err(e) => {
                eprintln!("fuse {id}: {e}");
                summary.failures.push((id.clone(), e.to_string()));
            }
        }
    }
    Ok(summary)
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// Evaluate fused images against their sources; one CSV row per pair plus
/// a summary row of column means (degenerate entries excluded). The mIoU
/// column appears when labels plus a segmentation source (a visible-branch
/// extractor checkpoint, or a directory of stored predictions) are given.
#[allow(clippy::too_many_arguments)]
pub fn cmd_evaluate(
    cfg: &RunConfig,
    fused_dir: &Path,
    source_root: &Path,
    role: SplitRole,
    seg_ckpt: Option<&Path>,
    pred_dir: Option<&Path>,
    report_path: &Path,
) -> Result<PathBuf> {
    let palette = cfg.palette()?;
    let split = DatasetSplit::discover(source_root, role)?;
    if !fused_dir.is_dir() {
        return Err(Error::NotFound(fused_dir.to_path_buf()));
    }
    let mut fused_ids = Vec::new();
    for entry in std::fs::read_dir(fused_dir)? {
        let path = entry?.path();
        if path.is_file() && path.extension().and_then(|e| e.to_str()) == Some("png") {
            if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                fused_ids.push(stem.to_string());
            }
        }
    }
    fused_ids.sort();
    for id in &fused_ids {
        if !split.ids.contains(id) {
            return Err(Error::Alignment(format!(
                "fused image {id} has no source pair"
            )));
        }
    }
    for id in &split.ids {
        if !fused_ids.contains(id) {
            return Err(Error::Alignment(format!(
                "source pair {id} has no fused image"
            )));
        }
    }

    let seg_model = match seg_ckpt {
        Some(path) => {
            let (m, _, _) = load_cgfe(path)?;
            if m.modality != Modality::Vis {
                return Err(Error::Config(
                    "segmentation scoring needs a visible-branch checkpoint (3-channel input)"
                        .into(),
                ));
            }
            Some(m)
        }
        None => None,
    };
    let want_miou = seg_model.is_some() || pred_dir.is_some();

    let header = if want_miou {
        "id,ssimx,cc,psnr,nabf,miou"
    } else {
        "id,ssimx,cc,psnr,nabf"
    };
    let mut rows: Vec<String> = Vec::new();
    let mut cols: Vec<Vec<Option<f64>>> = vec![Vec::new(); if want_miou { 5 } else { 4 }];

    for id in &fused_ids {
        let fused = semfuse_core::datamodel::load_rgb01(&fused_dir.join(format!("{id}.png")))?;
        let pair = load_pair(&split, id, &palette)?;
        let (fh, fw, _) = {
            let (c, h, w) = fused.chw();
            (h, w, c)
        };
        if (fh, fw) != pair.size() {
            return Err(Error::Alignment(format!(
                "{id}: fused image size {fh}x{fw} differs from source {:?}",
                pair.size()
            )));
        }
        let fused_y = luminance(&fused);
        let vis_y = luminance(&pair.vis);
        let degenerate_ok = |r: semfuse_core::error::Result<f64>| -> Result<Option<f64>> {
            match r {
                Ok(v) => Ok(Some(v)),
                Err(Error::DegenerateInput(_)) => Ok(None),
                Err(e) => Err(e),
            }
        };
        let m_ssimx = degenerate_ok(ssimx(&fused_y, &pair.ir, &vis_y))?;
        let m_cc = degenerate_ok(cc(&fused_y, &pair.ir, &vis_y))?;
        let m_psnr = degenerate_ok(psnr(&fused_y, &pair.ir, &vis_y))?;
        let m_nabf = degenerate_ok(nabf(&fused_y, &pair.ir, &vis_y))?;

        let m_miou = if want_miou {
            let truth = pair.label.as_ref().ok_or_else(|| {
                Error::Config(format!("{id}: mIoU requested but no label present"))
            })?;
            let pred: LabelMap = if let Some(model) = &seg_model {
                let seg = model.segment(&to_signed(&fused.cast::<f32>())?)?;
                argmax_decode(&seg)
            } else {
                let dir = pred_dir.expect("pred_dir checked by want_miou");
                semfuse_core::datamodel::load_label(
                    &dir.join(format!("{id}.png")),
                    palette.n(),
                )?
            };
            let (_, m) = miou(&pred, truth, palette.n())?;
            Some(m)
        } else {
            None
        };

        let mut cells = vec![
            id.clone(),
            fmt_opt(m_ssimx),
            fmt_opt(m_cc),
            fmt_opt(m_psnr),
            fmt_opt(m_nabf),
        ];
        for (k, v) in [m_ssimx, m_cc, m_psnr, m_nabf].into_iter().enumerate() {
            cols[k].push(v);
        }
        if want_miou {
            cells.push(fmt_opt(m_miou));
            cols[4].push(m_miou);
        }
        rows.push(cells.join(","));
    }

    let mean_cell = |vals: &[Option<f64>]| -> Option<f64> {
        let defined: Vec<f64> = vals.iter().flatten().copied().collect();
        if defined.is_empty() {
            None
        } else {
            Some(defined.iter().sum::<f64>() / defined.len() as f64)
        }
    };
    let mut summary = vec!["mean".to_string()];
    for col in &cols {
        summary.push(fmt_opt(mean_cell(col)));
    }
    rows.push(summary.join(","));

    if let Some(dir) = report_path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    let mut text = String::from(header);
    text.push('\n');
    for row in rows {
        text.push_str(&row);
        text.push('\n');
    }
    std::fs::write(report_path, text)?;
    Ok(report_path.to_path_buf())
}
