//! Checkpoint format: a fixed magic and version, a JSON manifest
//! describing the build configuration, palette, training counters and
//! every parameter blob (name, group, shape), followed by the raw
//! little-endian f32 blobs in manifest order. Parameters round-trip
//! bit-for-bit; a version mismatch is rejected, never coerced.
//!
//! All randomness in a run derives from (seed, epoch), so the manifest's
//! counters are the complete RNG state needed for exact resumption.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::cgfe::{CgfeModel, CgfeOptim, Modality, NetConfig};
use crate::datamodel::LabelPalette;
use crate::error::{Error, Result};
use crate::fusion::{FusionModel, FusionOptim};
use crate::netblocks::ParamSet;
use crate::optim::{Adam, AdamConfig};
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"SFCK";
const VERSION: u32 = 1;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainMeta {
    pub seed: u64,
    pub epochs_done: u64,
    pub steps_done: u64,
}

#[derive(Serialize, Deserialize)]
struct AdamMeta {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    steps: Vec<(String, u64)>,
}

#[derive(Serialize, Deserialize)]
struct BlobInfo {
    group: String,
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    kind: String,
    dtype: String,
    modality: Option<String>,
    net: NetConfig,
    palette: LabelPalette,
    meta: TrainMeta,
    adam: AdamMeta,
    blobs: Vec<BlobInfo>,
}

/// Header information without the blobs (for compatibility checks).
#[derive(Clone, Debug)]
pub struct CheckpointInfo {
    pub kind: String,
    pub modality: Option<Modality>,
    pub net: NetConfig,
    pub palette: LabelPalette,
    pub meta: TrainMeta,
}

struct Payload<'a> {
    group: &'a str,
    name: String,
    tensor: &'a Tensor<f32>,
}

fn gather<'a>(group: &'a str, set: &'a ParamSet<f32>) -> Vec<Payload<'a>> {
    set.entries
        .iter()
        .map(|(name, tensor)| Payload {
            group,
            name: name.clone(),
            tensor,
        })
        .collect()
}

fn gather_moments<'a>(
    group: &'a str,
    set: &'a ParamSet<f32>,
    moments: &'a [Tensor<f32>],
) -> Vec<Payload<'a>> {
    set.entries
        .iter()
        .zip(moments)
        .map(|((name, _), tensor)| Payload {
            group,
            name: name.clone(),
            tensor,
        })
        .collect()
}

fn write_file(path: &Path, mut manifest: Manifest, payloads: Vec<Payload<'_>>) -> Result<()> {
    manifest.blobs = payloads
        .iter()
        .map(|p| BlobInfo {
            group: p.group.to_string(),
            name: p.name.clone(),
            shape: p.tensor.shape().to_vec(),
        })
        .collect();
    let manifest_bytes = serde_json::to_vec(&manifest)
        .map_err(|e| Error::Checkpoint(format!("manifest encoding: {e}")))?;
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    out.write_all(MAGIC)?;
    out.write_all(&VERSION.to_le_bytes())?;
    out.write_all(&(manifest_bytes.len() as u64).to_le_bytes())?;
    out.write_all(&manifest_bytes)?;
    for p in &payloads {
        for v in p.tensor.data() {
            out.write_all(&v.to_le_bytes())?;
        }
    }
    out.flush()?;
    Ok(())
}

struct Loaded {
    manifest: Manifest,
    blobs: Vec<Tensor<f32>>,
}

fn read_file(path: &Path) -> Result<Loaded> {
    if !path.is_file() {
        return Err(Error::NotFound(path.to_path_buf()));
    }
    let mut file = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut magic = [0u8; 4];
    file.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Checkpoint(format!(
            "{}: not a checkpoint (bad magic)",
            path.display()
        )));
    }
    let mut v4 = [0u8; 4];
    file.read_exact(&mut v4)?;
    let version = u32::from_le_bytes(v4);
    if version != VERSION {
        return Err(Error::Checkpoint(format!(
            "{}: version {version} is not supported (expected {VERSION})",
            path.display()
        )));
    }
    let mut l8 = [0u8; 8];
    file.read_exact(&mut l8)?;
    let mlen = u64::from_le_bytes(l8) as usize;
    let mut manifest_bytes = vec![0u8; mlen];
    file.read_exact(&mut manifest_bytes)?;
    let manifest: Manifest = serde_json::from_slice(&manifest_bytes)
        .map_err(|e| Error::Checkpoint(format!("{}: manifest: {e}", path.display())))?;
    if manifest.dtype != "f32" {
        return Err(Error::Checkpoint(format!(
            "{}: unsupported dtype {}",
            path.display(),
            manifest.dtype
        )));
    }
    let mut blobs = Vec::with_capacity(manifest.blobs.len());
    for info in &manifest.blobs {
        let numel: usize = info.shape.iter().product();
        let mut bytes = vec![0u8; numel * 4];
        file.read_exact(&mut bytes)?;
        let data = bytes
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        blobs.push(Tensor::new(info.shape.clone(), data));
    }
    Ok(Loaded { manifest, blobs })
}

fn restore_set(
    loaded: &Loaded,
    cursor: &mut usize,
    group: &str,
    expect: &ParamSet<f32>,
) -> Result<ParamSet<f32>> {
    let mut entries = Vec::with_capacity(expect.entries.len());
    for (name, tensor) in &expect.entries {
        let info = loaded
            .manifest
            .blobs
            .get(*cursor)
            .ok_or_else(|| Error::Checkpoint("truncated blob table".into()))?;
        if info.group != group || &info.name != name || info.shape != tensor.shape() {
            return Err(Error::Checkpoint(format!(
                "blob mismatch: expected {group}/{name} {:?}, found {}/{} {:?}",
                tensor.shape(),
                info.group,
                info.name,
                info.shape
            )));
        }
        entries.push((name.clone(), loaded.blobs[*cursor].clone()));
        *cursor += 1;
    }
    Ok(ParamSet { entries })
}

fn restore_moments(
    loaded: &Loaded,
    cursor: &mut usize,
    group: &str,
    expect: &ParamSet<f32>,
) -> Result<Vec<Tensor<f32>>> {
    Ok(restore_set(loaded, cursor, group, expect)?
        .entries
        .into_iter()
        .map(|(_, t)| t)
        .collect())
}

fn adam_config(meta: &AdamMeta) -> AdamConfig {
    AdamConfig {
        lr: meta.lr,
        beta1: meta.beta1,
        beta2: meta.beta2,
        eps: meta.eps,
    }
}

fn adam_step(meta: &AdamMeta, group: &str) -> Result<u64> {
    meta.steps
        .iter()
        .find(|(g, _)| g == group)
        .map(|(_, s)| *s)
        .ok_or_else(|| Error::Checkpoint(format!("missing optimizer step for {group}")))
}

/// Peek at kind, scale and counters without loading blobs into models.
pub fn inspect(path: &Path) -> Result<CheckpointInfo> {
    let loaded = read_file(path)?;
    let modality = match loaded.manifest.modality.as_deref() {
        Some("ir") => Some(Modality::Ir),
        Some("vis") => Some(Modality::Vis),
        None => None,
        Some(other) => {
            return Err(Error::Checkpoint(format!("unknown modality {other}")))
        }
    };
    Ok(CheckpointInfo {
        kind: loaded.manifest.kind,
        modality,
        net: loaded.manifest.net,
        palette: loaded.manifest.palette,
        meta: loaded.manifest.meta,
    })
}

pub fn save_cgfe(
    path: &Path,
    model: &CgfeModel<f32>,
    optim: &CgfeOptim<f32>,
    meta: &TrainMeta,
) -> Result<()> {
    let mut payloads = Vec::new();
    payloads.extend(gather("g", &model.params_g));
    payloads.extend(gather("f", &model.params_f));
    payloads.extend(gather("dx", &model.params_dx));
    payloads.extend(gather("dy", &model.params_dy));
    payloads.extend(gather_moments("g.m", &model.params_g, &optim.g.m));
    payloads.extend(gather_moments("g.v", &model.params_g, &optim.g.v));
    payloads.extend(gather_moments("f.m", &model.params_f, &optim.f.m));
    payloads.extend(gather_moments("f.v", &model.params_f, &optim.f.v));
    payloads.extend(gather_moments("dx.m", &model.params_dx, &optim.dx.m));
    payloads.extend(gather_moments("dx.v", &model.params_dx, &optim.dx.v));
    payloads.extend(gather_moments("dy.m", &model.params_dy, &optim.dy.m));
    payloads.extend(gather_moments("dy.v", &model.params_dy, &optim.dy.v));
    let manifest = Manifest {
        kind: "cgfe".into(),
        dtype: "f32".into(),
        modality: Some(model.modality.tag().into()),
        net: model.cfg,
        palette: model.palette.clone(),
        meta: meta.clone(),
        adam: AdamMeta {
            lr: optim.g.cfg.lr,
            beta1: optim.g.cfg.beta1,
            beta2: optim.g.cfg.beta2,
            eps: optim.g.cfg.eps,
            steps: vec![
                ("g".into(), optim.g.step),
                ("f".into(), optim.f.step),
                ("dx".into(), optim.dx.step),
                ("dy".into(), optim.dy.step),
            ],
        },
        blobs: Vec::new(),
    };
    write_file(path, manifest, payloads)
}

pub fn load_cgfe(path: &Path) -> Result<(CgfeModel<f32>, CgfeOptim<f32>, TrainMeta)> {
    let loaded = read_file(path)?;
    if loaded.manifest.kind != "cgfe" {
        return Err(Error::Checkpoint(format!(
            "{}: expected a stage-one checkpoint, found {}",
            path.display(),
            loaded.manifest.kind
        )));
    }
    let modality = match loaded.manifest.modality.as_deref() {
        Some("ir") => Modality::Ir,
        Some("vis") => Modality::Vis,
        other => {
            return Err(Error::Checkpoint(format!(
                "{}: bad modality {other:?}",
                path.display()
            )))
        }
    };
    let mut model = CgfeModel::<f32>::new(
        modality,
        loaded.manifest.net,
        loaded.manifest.palette.clone(),
        0,
    )?;
    let mut cursor = 0;
    model.params_g = restore_set(&loaded, &mut cursor, "g", &model.params_g)?;
    model.params_f = restore_set(&loaded, &mut cursor, "f", &model.params_f)?;
    model.params_dx = restore_set(&loaded, &mut cursor, "dx", &model.params_dx)?;
    model.params_dy = restore_set(&loaded, &mut cursor, "dy", &model.params_dy)?;
    let cfg = adam_config(&loaded.manifest.adam);
    let gm = restore_moments(&loaded, &mut cursor, "g.m", &model.params_g)?;
    let gv = restore_moments(&loaded, &mut cursor, "g.v", &model.params_g)?;
    let fm = restore_moments(&loaded, &mut cursor, "f.m", &model.params_f)?;
    let fv = restore_moments(&loaded, &mut cursor, "f.v", &model.params_f)?;
    let dxm = restore_moments(&loaded, &mut cursor, "dx.m", &model.params_dx)?;
    let dxv = restore_moments(&loaded, &mut cursor, "dx.v", &model.params_dx)?;
    let dym = restore_moments(&loaded, &mut cursor, "dy.m", &model.params_dy)?;
    let dyv = restore_moments(&loaded, &mut cursor, "dy.v", &model.params_dy)?;
    let optim = CgfeOptim {
        g: Adam::restore(cfg, adam_step(&loaded.manifest.adam, "g")?, gm, gv),
        f: Adam::restore(cfg, adam_step(&loaded.manifest.adam, "f")?, fm, fv),
        dx: Adam::restore(cfg, adam_step(&loaded.manifest.adam, "dx")?, dxm, dxv),
        dy: Adam::restore(cfg, adam_step(&loaded.manifest.adam, "dy")?, dym, dyv),
    };
    Ok((model, optim, loaded.manifest.meta))
}

pub fn save_fusion(
    path: &Path,
    model: &FusionModel<f32>,
    optim: &FusionOptim<f32>,
    palette: &LabelPalette,
    meta: &TrainMeta,
) -> Result<()> {
    let mut payloads = Vec::new();
    payloads.extend(gather("frb_ir", &model.params_frb_ir));
    payloads.extend(gather("frb_vi", &model.params_frb_vi));
    payloads.extend(gather("proj_ir", &model.params_proj_ir));
    payloads.extend(gather("proj_vi", &model.params_proj_vi));
    payloads.extend(gather("gates", &model.gates));
    payloads.extend(gather_moments("frb_ir.m", &model.params_frb_ir, &optim.frb_ir.m));
    payloads.extend(gather_moments("frb_ir.v", &model.params_frb_ir, &optim.frb_ir.v));
    payloads.extend(gather_moments("frb_vi.m", &model.params_frb_vi, &optim.frb_vi.m));
    payloads.extend(gather_moments("frb_vi.v", &model.params_frb_vi, &optim.frb_vi.v));
    payloads.extend(gather_moments("proj_ir.m", &model.params_proj_ir, &optim.proj_ir.m));
    payloads.extend(gather_moments("proj_ir.v", &model.params_proj_ir, &optim.proj_ir.v));
    payloads.extend(gather_moments("proj_vi.m", &model.params_proj_vi, &optim.proj_vi.m));
    payloads.extend(gather_moments("proj_vi.v", &model.params_proj_vi, &optim.proj_vi.v));
    payloads.extend(gather_moments("gates.m", &model.gates, &optim.gates.m));
    payloads.extend(gather_moments("gates.v", &model.gates, &optim.gates.v));
    let manifest = Manifest {
        kind: "fusion".into(),
        dtype: "f32".into(),
        modality: None,
        net: model.cfg,
        palette: palette.clone(),
        meta: meta.clone(),
        adam: AdamMeta {
            lr: optim.frb_ir.cfg.lr,
            beta1: optim.frb_ir.cfg.beta1,
            beta2: optim.frb_ir.cfg.beta2,
            eps: optim.frb_ir.cfg.eps,
            steps: vec![
                ("frb_ir".into(), optim.frb_ir.step),
                ("frb_vi".into(), optim.frb_vi.step),
                ("proj_ir".into(), optim.proj_ir.step),
                ("proj_vi".into(), optim.proj_vi.step),
                ("gates".into(), optim.gates.step),
            ],
        },
        blobs: Vec::new(),
    };
    write_file(path, manifest, payloads)
}

pub fn load_fusion(
    path: &Path,
) -> Result<(FusionModel<f32>, FusionOptim<f32>, LabelPalette, TrainMeta)> {
    let loaded = read_file(path)?;
    if loaded.manifest.kind != "fusion" {
        return Err(Error::Checkpoint(format!(
            "{}: expected a fusion checkpoint, found {}",
            path.display(),
            loaded.manifest.kind
        )));
    }
    let mut model = FusionModel::<f32>::new(loaded.manifest.net, 0)?;
    let mut cursor = 0;
    model.params_frb_ir = restore_set(&loaded, &mut cursor, "frb_ir", &model.params_frb_ir)?;
    model.params_frb_vi = restore_set(&loaded, &mut cursor, "frb_vi", &model.params_frb_vi)?;
    model.params_proj_ir = restore_set(&loaded, &mut cursor, "proj_ir", &model.params_proj_ir)?;
    model.params_proj_vi = restore_set(&loaded, &mut cursor, "proj_vi", &model.params_proj_vi)?;
    model.gates = restore_set(&loaded, &mut cursor, "gates", &model.gates)?;
    let cfg = adam_config(&loaded.manifest.adam);
    let m1 = restore_moments(&loaded, &mut cursor, "frb_ir.m", &model.params_frb_ir)?;
    let v1 = restore_moments(&loaded, &mut cursor, "frb_ir.v", &model.params_frb_ir)?;
    let m2 = restore_moments(&loaded, &mut cursor, "frb_vi.m", &model.params_frb_vi)?;
    let v2 = restore_moments(&loaded, &mut cursor, "frb_vi.v", &model.params_frb_vi)?;
    let m3 = restore_moments(&loaded, &mut cursor, "proj_ir.m", &model.params_proj_ir)?;
    let v3 = restore_moments(&loaded, &mut cursor, "proj_ir.v", &model.params_proj_ir)?;
    let m4 = restore_moments(&loaded, &mut cursor, "proj_vi.m", &model.params_proj_vi)?;
    let v4 = restore_moments(&loaded, &mut cursor, "proj_vi.v", &model.params_proj_vi)?;
    let m5 = restore_moments(&loaded, &mut cursor, "gates.m", &model.gates)?;
    let v5 = restore_moments(&loaded, &mut cursor, "gates.v", &model.gates)?;
    let optim = FusionOptim {
        frb_ir: Adam::restore(cfg, adam_step(&loaded.manifest.adam, "frb_ir")?, m1, v1),
        frb_vi: Adam::restore(cfg, adam_step(&loaded.manifest.adam, "frb_vi")?, m2, v2),
        proj_ir: Adam::restore(cfg, adam_step(&loaded.manifest.adam, "proj_ir")?, m3, v3),
        proj_vi: Adam::restore(cfg, adam_step(&loaded.manifest.adam, "proj_vi")?, m4, v4),
        gates: Adam::restore(cfg, adam_step(&loaded.manifest.adam, "gates")?, m5, v5),
    };
    Ok((model, optim, loaded.manifest.palette, loaded.manifest.meta))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_cfg() -> NetConfig {
        NetConfig {
            n_classes: 14,
            base_ch: 4,
            unet_depth: 2,
            resnet_blocks: 2,
            disc_layers: 1,
            frb_reduction: 4,
        }
    }

    #[test]
    fn cgfe_checkpoint_roundtrips_bitwise() {
        let dir = std::env::temp_dir().join(format!("semfuse-ck-{}", std::process::id()));
        let palette = LabelPalette::fmb();
        let model = CgfeModel::<f32>::new(Modality::Ir, tiny_cfg(), palette, 123).unwrap();
        let optim = CgfeOptim::new(AdamConfig::default(), &model);
        let meta = TrainMeta {
            seed: 123,
            epochs_done: 3,
            steps_done: 15,
        };
        let path = dir.join("cgfe_ir.ckpt");
        save_cgfe(&path, &model, &optim, &meta).unwrap();
        let (loaded, loaded_opt, loaded_meta) = load_cgfe(&path).unwrap();
        assert_eq!(loaded.params_g, model.params_g);
        assert_eq!(loaded.params_f, model.params_f);
        assert_eq!(loaded.params_dx, model.params_dx);
        assert_eq!(loaded.params_dy, model.params_dy);
        assert_eq!(loaded.params_g.hash64(), model.params_g.hash64());
        assert_eq!(loaded_opt.g.step, 0);
        assert_eq!(loaded_meta.steps_done, 15);

        let info = inspect(&path).unwrap();
        assert_eq!(info.kind, "cgfe");
        assert_eq!(info.modality, Some(Modality::Ir));
        assert_eq!(info.net, tiny_cfg());
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn version_mismatch_is_rejected() {
        let dir = std::env::temp_dir().join(format!("semfuse-ckv-{}", std::process::id()));
        let palette = LabelPalette::fmb();
        let model = FusionModel::<f32>::new(tiny_cfg(), 9).unwrap();
        let optim = FusionOptim::new(AdamConfig::default(), &model);
        let meta = TrainMeta {
            seed: 9,
            epochs_done: 0,
            steps_done: 0,
        };
        let path = dir.join("fusion.ckpt");
        save_fusion(&path, &model, &optim, &palette, &meta).unwrap();

        let (f2, o2, pal2, _) = load_fusion(&path).unwrap();
        assert_eq!(f2.gates, model.gates);
        assert_eq!(pal2, palette);
        assert_eq!(o2.gates.step, 0);

        // flip the version field (bytes 4..8)
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[4] = 0xFF;
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(load_fusion(&path), Err(Error::Checkpoint(_))));

        // and a bad magic
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[0] = b'X';
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(load_fusion(&path), Err(Error::Checkpoint(_))));
        std::fs::remove_dir_all(&dir).ok();
    }
}
