//! End-to-end command behavior: resume equivalence, per-pair fault
//! isolation in fusion, report alignment and identity metrics.

use std::path::{Path, PathBuf};

use semfuse::commands::{cmd_evaluate, cmd_fuse, cmd_synth, cmd_train_cgfe, cmd_train_fusion};
use semfuse::config::{Preset, RunConfig};
use semfuse_core::cgfe::Modality;
use semfuse_core::datamodel::{save_gray01, save_rgb01, DatasetSplit, SplitRole};
use semfuse_core::error::Error;
use semfuse_core::rng::SeededRng;
use semfuse_core::Tensor;

fn tiny_cfg(base: &Path, seed: u64) -> RunConfig {
    let mut cfg = RunConfig::preset_defaults(Preset::Toy);
    cfg.data_root = base.join("data");
    cfg.out_dir = base.join("out");
    cfg.size = 64;
    cfg.synth_train = 4;
    cfg.synth_test = 2;
    cfg.epochs_cgfe = 2;
    cfg.epochs_fusion = 2;
    cfg.batch_size = 2;
    cfg.seed = seed;
    cfg.validate().unwrap();
    cfg
}

fn temp_base(tag: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("semfuse-{tag}-{}", std::process::id()));
    std::fs::remove_dir_all(&dir).ok();
    dir
}

#[test]
fn resumed_training_matches_uninterrupted_run() {
    let base = temp_base("resume");
    // uninterrupted: 4 epochs
    let full = {
        let mut cfg = tiny_cfg(&base.join("full"), 3);
        cfg.epochs_cgfe = 4;
        cmd_synth(&cfg).unwrap();
        cmd_train_cgfe(&cfg, Modality::Ir, None).unwrap()
    };
    // interrupted: 2 epochs, then resume to 4
    let resumed = {
        let mut cfg = tiny_cfg(&base.join("split"), 3);
        cfg.epochs_cgfe = 2;
        cmd_synth(&cfg).unwrap();
        let ckpt = cmd_train_cgfe(&cfg, Modality::Ir, None).unwrap();
        cfg.epochs_cgfe = 4;
        cmd_train_cgfe(&cfg, Modality::Ir, Some(&ckpt)).unwrap()
    };
    assert_eq!(
        std::fs::read(&full).unwrap(),
        std::fs::read(&resumed).unwrap(),
        "resumed checkpoint must be byte-identical to the uninterrupted run"
    );
    // loss CSVs agree row for row
    let full_csv = std::fs::read_to_string(base.join("full/out/cgfe_ir_loss.csv")).unwrap();
    let resumed_csv = std::fs::read_to_string(base.join("split/out/cgfe_ir_loss.csv")).unwrap();
    assert_eq!(full_csv, resumed_csv);
    std::fs::remove_dir_all(&base).ok();
}

#[test]
fn modalities_write_distinct_checkpoints() {
    let base = temp_base("modal");
    let cfg = tiny_cfg(&base, 5);
    cmd_synth(&cfg).unwrap();
    let ir = cmd_train_cgfe(&cfg, Modality::Ir, None).unwrap();
    let vis = cmd_train_cgfe(&cfg, Modality::Vis, None).unwrap();
    assert_ne!(ir, vis);
    assert_ne!(std::fs::read(&ir).unwrap(), std::fs::read(&vis).unwrap());
    std::fs::remove_dir_all(&base).ok();
}

#[test]
fn fuse_isolates_a_corrupt_pair_and_processes_the_rest() {
    let base = temp_base("corrupt");
    let mut cfg = tiny_cfg(&base, 7);
    cfg.synth_test = 3;
    cmd_synth(&cfg).unwrap();
    let ir = cmd_train_cgfe(&cfg, Modality::Ir, None).unwrap();
    let vis = cmd_train_cgfe(&cfg, Modality::Vis, None).unwrap();
    let fusion = cmd_train_fusion(&cfg, &ir, &vis, None).unwrap();

    // wreck one visible file
    std::fs::write(cfg.data_root.join("test/Visible/00001.png"), b"not a png").unwrap();

    let out = cfg.out_dir.join("fused");
    let summary = cmd_fuse(&fusion, &ir, &vis, &cfg.data_root, SplitRole::Test, &out, false).unwrap();
    assert_eq!(summary.written, 2);
    assert_eq!(summary.failures.len(), 1);
    assert_eq!(summary.failures[0].0, "00001");
    assert!(out.join("00000.png").is_file());
    assert!(!out.join("00001.png").exists());
    assert!(out.join("00002.png").is_file());
    std::fs::remove_dir_all(&base).ok();
}

#[test]
fn evaluate_rejects_misaligned_ids_by_name() {
    let base = temp_base("align");
    let cfg = tiny_cfg(&base, 9);
    cmd_synth(&cfg).unwrap();
    // fused dir missing one id
    let fused = base.join("fused");
    std::fs::create_dir_all(&fused).unwrap();
    let split = DatasetSplit::discover(&cfg.data_root, SplitRole::Test).unwrap();
    let first = &split.ids[0];
    std::fs::copy(
        cfg.data_root.join(format!("test/Visible/{first}.png")),
        fused.join(format!("{first}.png")),
    )
    .unwrap();
    let err = cmd_evaluate(
        &cfg,
        &fused,
        &cfg.data_root,
        SplitRole::Test,
        None,
        None,
        &base.join("report.csv"),
    )
    .unwrap_err();
    match err {
        Error::Alignment(msg) => assert!(msg.contains("00001"), "message must name the id: {msg}"),
        other => panic!("expected an alignment error, got {other}"),
    }
    std::fs::remove_dir_all(&base).ok();
}

#[test]
fn evaluating_sources_against_themselves_hits_identity_rows() {
    let base = temp_base("ident");
    let cfg = tiny_cfg(&base, 11);
    // hand-built dataset where the visible luminance equals the infrared
    // plane exactly (gray visible = replicated infrared channels)
    let mut rng = SeededRng::new(40);
    let test_dir = cfg.data_root.join("test");
    let fused_dir = base.join("fused");
    for id in ["00000", "00001"] {
        let ir = Tensor::<f32>::new(
            vec![1, 32, 32],
            (0..1024).map(|_| (rng.below(256) as f32) / 255.0).collect(),
        );
        let mut vis = Tensor::<f32>::zeros(&[3, 32, 32]);
        for c in 0..3 {
            for p in 0..1024 {
                vis.data_mut()[c * 1024 + p] = ir.data()[p];
            }
        }
        save_gray01(&test_dir.join(format!("Infrared/{id}.png")), &ir).unwrap();
        save_rgb01(&test_dir.join(format!("Visible/{id}.png")), &vis).unwrap();
        save_rgb01(&fused_dir.join(format!("{id}.png")), &vis).unwrap();
    }
    let report = base.join("report.csv");
    cmd_evaluate(
        &cfg,
        &fused_dir,
        &cfg.data_root,
        SplitRole::Test,
        None,
        None,
        &report,
    )
    .unwrap();
    let text = std::fs::read_to_string(&report).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "id,ssimx,cc,psnr,nabf");
    assert_eq!(lines.len(), 4); // header + 2 rows + summary
    for row in &lines[1..3] {
        let cells: Vec<&str> = row.split(',').collect();
        let ssimx: f64 = cells[1].parse().unwrap();
        let ccv: f64 = cells[2].parse().unwrap();
        let psnr: f64 = cells[3].parse().unwrap();
        let nabf: f64 = cells[4].parse().unwrap();
        assert!((ssimx - 2.0).abs() < 1e-9, "identity ssimx: {row}");
        assert!((ccv - 1.0).abs() < 1e-9);
        assert_eq!(psnr, 100.0, "identity psnr hits the cap");
        assert_eq!(nabf, 0.0);
    }
    // summary row = column means of the per-image rows
    let summary: Vec<&str> = lines[3].split(',').collect();
    assert_eq!(summary[0], "mean");
    for col in 1..5 {
        let mean_of_rows: f64 = (1..3)
            .map(|r| lines[r].split(',').nth(col).unwrap().parse::<f64>().unwrap())
            .sum::<f64>()
            / 2.0;
        let reported: f64 = summary[col].parse().unwrap();
        assert!(
            (mean_of_rows - reported).abs() < 1e-9,
            "summary col {col}: {reported} vs {mean_of_rows}"
        );
    }

    // column order is stable across runs
    let report2 = base.join("report2.csv");
    cmd_evaluate(
        &cfg,
        &fused_dir,
        &cfg.data_root,
        SplitRole::Test,
        None,
        None,
        &report2,
    )
    .unwrap();
    assert_eq!(text, std::fs::read_to_string(&report2).unwrap());
    std::fs::remove_dir_all(&base).ok();
}

#[test]
fn synth_dataset_roundtrips_and_keeps_thermal_contrast() {
    let base = temp_base("synthio");
    let cfg = tiny_cfg(&base, 13);
    cmd_synth(&cfg).unwrap();
    // re-running is byte-identical
    let before: Vec<u8> = std::fs::read(cfg.data_root.join("train/Infrared/00000.png")).unwrap();
    cmd_synth(&cfg).unwrap();
    let after: Vec<u8> = std::fs::read(cfg.data_root.join("train/Infrared/00000.png")).unwrap();
    assert_eq!(before, after);

    let manifest = std::fs::read_to_string(cfg.data_root.join("manifest.txt")).unwrap();
    assert!(manifest.starts_with("split,id,scene_seed"));
    assert_eq!(manifest.lines().count(), 1 + cfg.synth_train + cfg.synth_test);

    let palette = cfg.palette().unwrap();
    let split = DatasetSplit::discover(&cfg.data_root, SplitRole::Train).unwrap();
    assert_eq!(split.ids.len(), cfg.synth_train);
    for id in &split.ids {
        let pair = semfuse_core::datamodel::load_pair(&split, id, &palette).unwrap();
        let label = pair.label.as_ref().expect("synthetic labels round-trip");
        let (mut th, mut thn, mut bg, mut bgn) = (0.0, 0usize, 0.0, 0usize);
        for (p, &c) in label.data.iter().enumerate() {
            if palette.is_thermal(c) {
                th += pair.ir.data()[p] as f64;
                thn += 1;
            } else {
                bg += pair.ir.data()[p] as f64;
                bgn += 1;
            }
        }
        assert!(thn > 0 && bgn > 0);
        assert!(th / thn as f64 > bg / bgn as f64, "{id}: thermal contrast after IO");
    }
    std::fs::remove_dir_all(&base).ok();
}
