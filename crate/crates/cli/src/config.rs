//! Run configuration: a flat `key = value` text file over preset defaults,
//! with explicit command-line overrides on top. Unknown keys are rejected.

use std::path::{Path, PathBuf};

use semfuse_core::cgfe::{NetConfig, TrainHyper};
use semfuse_core::datamodel::LabelPalette;
use semfuse_core::error::{Error, Result};
use semfuse_core::fusion::FusionHyper;
use semfuse_core::optim::AdamConfig;
use semfuse_core::OhemConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Preset {
    Paper,
    Toy,
}

impl Preset {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "paper" => Ok(Preset::Paper),
            "toy" => Ok(Preset::Toy),
            other => Err(Error::Config(format!(
                "unknown preset {other:?} (expected paper|toy)"
            ))),
        }
    }
}

/// Everything a run needs. Defaults come from the preset; see
/// [`RunConfig::load`] for the file format.
#[derive(Clone, Debug)]
pub struct RunConfig {
    pub preset: Preset,
    pub data_root: PathBuf,
    pub out_dir: PathBuf,
    pub size: usize,
    pub n_classes: usize,
    pub class_names: Vec<String>,
    pub thermal_ids: Vec<u8>,
    pub base_ch: usize,
    pub unet_depth: usize,
    pub resnet_blocks: usize,
    pub disc_layers: usize,
    pub frb_reduction: usize,
    pub lambda_sere: f64,
    pub mu: f64,
    pub rho: f64,
    pub eta: f64,
    pub omega_init: f64,
    pub gamma_init: f64,
    pub lr: f64,
    pub beta1: f64,
    pub batch_size: usize,
    pub epochs_cgfe: usize,
    pub epochs_fusion: usize,
    pub cycle_weight: f64,
    pub ohem_threshold: f64,
    pub ohem_min_frac: f64,
    pub reverse_cycle: bool,
    pub flip: bool,
    pub crop: bool,
    pub seed: u64,
    pub synth_train: usize,
    pub synth_test: usize,
}

impl RunConfig {
    pub fn preset_defaults(preset: Preset) -> Self {
        let fmb = LabelPalette::fmb();
        let (size, base_ch, unet_depth, frb_reduction, epochs, batch) = match preset {
            Preset::Paper => (256, 64, 7, 64, 400, 4),
            // batch 1 maximizes optimizer steps within the desk-scale
            // epoch budget at unchanged per-epoch compute
            Preset::Toy => (128, 16, 3, 4, 50, 1),
        };
        Self {
            preset,
            data_root: PathBuf::from("data"),
            out_dir: PathBuf::from("out"),
            size,
            n_classes: fmb.n(),
            class_names: fmb.names().to_vec(),
            thermal_ids: fmb.thermal_ids().to_vec(),
            base_ch,
            unet_depth,
            resnet_blocks: 7,
            disc_layers: 3,
            frb_reduction,
            lambda_sere: 80.0,
            mu: 100.0,
            rho: 50.0,
            eta: 40.0,
            omega_init: 0.5,
            gamma_init: 0.5,
            lr: 2e-4,
            beta1: 0.5,
            batch_size: batch,
            epochs_cgfe: epochs,
            epochs_fusion: epochs,
            cycle_weight: 10.0,
            ohem_threshold: 0.7,
            ohem_min_frac: 1.0 / 16.0,
            reverse_cycle: false,
            flip: false,
            crop: false,
            seed: 0,
            synth_train: 20,
            synth_test: 4,
        }
    }

    /// Parse a flat key-value file. Lines are `key = value`; `#` starts a
    /// comment. A `preset` key switches the defaults for every key not
    /// explicitly set. Unknown keys are errors.
    pub fn load(path: &Path) -> Result<Self> {
        if !path.is_file() {
            return Err(Error::NotFound(path.to_path_buf()));
        }
        let text = std::fs::read_to_string(path)?;
        let mut pairs = Vec::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                return Err(Error::Config(format!(
                    "{}:{}: expected `key = value`, got {raw:?}",
                    path.display(),
                    lineno + 1
                )));
            };
            pairs.push((k.trim().to_string(), v.trim().to_string()));
        }
        let preset = match pairs.iter().find(|(k, _)| k == "preset") {
            Some((_, v)) => Preset::parse(v)?,
            None => Preset::Toy,
        };
        let mut cfg = Self::preset_defaults(preset);
        for (k, v) in &pairs {
            cfg.set(k, v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
            v.parse().map_err(|_| {
                Error::Config(format!("key {key}: cannot parse {v:?}"))
            })
        }
        fn flag(key: &str, v: &str) -> Result<bool> {
            match v {
                "true" | "1" | "on" => Ok(true),
                "false" | "0" | "off" => Ok(false),
                _ => Err(Error::Config(format!("key {key}: expected a boolean, got {v:?}"))),
            }
        }
        match key {
            "preset" => self.preset = Preset::parse(value)?,
            "data_root" => self.data_root = PathBuf::from(value),
            "out_dir" => self.out_dir = PathBuf::from(value),
            "size" => self.size = num(key, value)?,
            "n_classes" => self.n_classes = num(key, value)?,
            "class_names" => {
                self.class_names = value.split(',').map(|s| s.trim().to_string()).collect()
            }
            "thermal_ids" => {
                self.thermal_ids = value
                    .split(',')
                    .map(|s| num::<u8>(key, s.trim()))
                    .collect::<Result<_>>()?
            }
            "base_ch" => self.base_ch = num(key, value)?,
            "unet_depth" => self.unet_depth = num(key, value)?,
            "resnet_blocks" => self.resnet_blocks = num(key, value)?,
            "disc_layers" => self.disc_layers = num(key, value)?,
            "frb_reduction" => self.frb_reduction = num(key, value)?,
            "lambda_sere" => self.lambda_sere = num(key, value)?,
            "mu" => self.mu = num(key, value)?,
            "rho" => self.rho = num(key, value)?,
            "eta" => self.eta = num(key, value)?,
            "omega_init" => self.omega_init = num(key, value)?,
            "gamma_init" => self.gamma_init = num(key, value)?,
            "lr" => self.lr = num(key, value)?,
            "beta1" => self.beta1 = num(key, value)?,
            "batch_size" => self.batch_size = num(key, value)?,
            "epochs_cgfe" => self.epochs_cgfe = num(key, value)?,
            "epochs_fusion" => self.epochs_fusion = num(key, value)?,
            "cycle_weight" => self.cycle_weight = num(key, value)?,
            "ohem_threshold" => self.ohem_threshold = num(key, value)?,
            "ohem_min_frac" => self.ohem_min_frac = num(key, value)?,
            "reverse_cycle" => self.reverse_cycle = flag(key, value)?,
            "flip" => self.flip = flag(key, value)?,
            "crop" => self.crop = flag(key, value)?,
            "seed" => self.seed = num(key, value)?,
            "synth_train" => self.synth_train = num(key, value)?,
            "synth_test" => self.synth_test = num(key, value)?,
            other => {
                return Err(Error::Config(format!("unknown config key {other:?}")));
            }
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("size", self.size as f64),
            ("n_classes", self.n_classes as f64),
            ("base_ch", self.base_ch as f64),
            ("unet_depth", self.unet_depth as f64),
            ("resnet_blocks", self.resnet_blocks as f64),
            ("disc_layers", self.disc_layers as f64),
            ("frb_reduction", self.frb_reduction as f64),
            ("mu", self.mu),
            ("rho", self.rho),
            ("eta", self.eta),
            ("lr", self.lr),
            ("batch_size", self.batch_size as f64),
            ("cycle_weight", self.cycle_weight),
            ("ohem_threshold", self.ohem_threshold),
            ("ohem_min_frac", self.ohem_min_frac),
        ];
        for (k, v) in positive {
            if v <= 0.0 {
                return Err(Error::Config(format!("{k} must be positive, got {v}")));
            }
        }
        if self.lambda_sere < 0.0 {
            return Err(Error::Config("lambda_sere must be non-negative".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) {
            return Err(Error::Config(format!(
                "beta1 must lie in [0,1), got {}",
                self.beta1
            )));
        }
        let net = self.net_config();
        if self.size % net.stride() != 0 {
            return Err(Error::Config(format!(
                "size {} is not divisible by the network stride {}",
                self.size,
                net.stride()
            )));
        }
        if net.tap_channels() % self.frb_reduction != 0 {
            return Err(Error::Config(format!(
                "tap channel total {} is not divisible by frb_reduction {}",
                net.tap_channels(),
                self.frb_reduction
            )));
        }
        self.palette()?;
        Ok(())
    }

    pub fn net_config(&self) -> NetConfig {
        NetConfig {
            n_classes: self.n_classes,
            base_ch: self.base_ch,
            unet_depth: self.unet_depth,
            resnet_blocks: self.resnet_blocks,
            disc_layers: self.disc_layers,
            frb_reduction: self.frb_reduction,
        }
    }

    pub fn palette(&self) -> Result<LabelPalette> {
        if self.class_names.len() != self.n_classes {
            return Err(Error::Config(format!(
                "{} class names for n_classes = {}",
                self.class_names.len(),
                self.n_classes
            )));
        }
        LabelPalette::new(self.class_names.clone(), self.thermal_ids.clone())
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            beta1: self.beta1,
            ..AdamConfig::default()
        }
    }

    pub fn train_hyper(&self) -> TrainHyper {
        TrainHyper {
            lambda_sere: self.lambda_sere,
            cycle_weight: self.cycle_weight,
            ohem: OhemConfig {
                threshold: self.ohem_threshold,
                min_kept_frac: self.ohem_min_frac,
            },
            reverse_cycle: self.reverse_cycle,
            adam: self.adam(),
        }
    }

    pub fn fusion_hyper(&self) -> FusionHyper {
        FusionHyper {
            mu: self.mu,
            rho: self.rho,
            eta: self.eta,
            adam: self.adam(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn file_overrides_and_unknown_key_rejection() {
        let dir = std::env::temp_dir().join(format!("semfuse-cfg-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("run.cfg");
        std::fs::write(
            &path,
            "# toy run\npreset = toy\nseed = 9\nbatch_size = 2\nlambda_sere = 40 # override\n",
        )
        .unwrap();
        let cfg = RunConfig::load(&path).unwrap();
        assert_eq!(cfg.seed, 9);
        assert_eq!(cfg.batch_size, 2);
        assert_eq!(cfg.lambda_sere, 40.0);
        assert_eq!(cfg.base_ch, 16);

        std::fs::write(&path, "preset = toy\nlearning_rate = 0.1\n").unwrap();
        assert!(matches!(RunConfig::load(&path), Err(Error::Config(_))));

        std::fs::write(&path, "size = 100\n").unwrap();
        assert!(matches!(RunConfig::load(&path), Err(Error::Config(_))));
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn paper_preset_matches_published_scale() {
        let cfg = RunConfig::preset_defaults(Preset::Paper);
        assert_eq!(cfg.base_ch, 64);
        assert_eq!(cfg.unet_depth, 7);
        assert_eq!(cfg.resnet_blocks, 7);
        assert_eq!(cfg.frb_reduction, 64);
        assert_eq!(cfg.epochs_cgfe, 400);
        assert_eq!(cfg.epochs_fusion, 400);
        assert_eq!(cfg.lambda_sere, 80.0);
        assert_eq!((cfg.mu, cfg.rho, cfg.eta), (100.0, 50.0, 40.0));
        assert_eq!((cfg.omega_init, cfg.gamma_init), (0.5, 0.5));
        assert_eq!(cfg.lr, 2e-4);
        assert_eq!(cfg.beta1, 0.5);
        assert_eq!(cfg.net_config().tap_channels(), 832);
        assert_eq!(cfg.net_config().tap_channels() / cfg.frb_reduction, 13);
        cfg.validate().unwrap();
    }
}
