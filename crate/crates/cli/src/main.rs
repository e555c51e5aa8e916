use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use semfuse::commands;
use semfuse::config::{Preset, RunConfig};
use semfuse_core::cgfe::Modality;
use semfuse_core::datamodel::SplitRole;
use semfuse_core::error::{Error, Result};

/// Two-stage infrared/visible image fusion: synthetic data generation,
/// extractor and fusion training, inference, and evaluation.
///
/// Worker parallelism is capped by the HSF_NUM_THREADS environment
/// variable (default: all available cores).
#[derive(Parser)]
#[command(name = "semfuse", version, about)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args)]
struct Common {
    /// Flat key-value config file; defaults come from the preset.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Scale preset used when no config file is given.
    #[arg(long, value_parser = ["paper", "toy"])]
    preset: Option<String>,
    /// Master seed override.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory override.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Dataset root override.
    #[arg(long)]
    data: Option<PathBuf>,
}

impl Common {
    fn build(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(path) => RunConfig::load(path)?,
            None => {
                let preset = match &self.preset {
                    Some(p) => Preset::parse(p)?,
                    None => Preset::Toy,
                };
                RunConfig::preset_defaults(preset)
            }
        };
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        if let Some(out) = &self.out {
            cfg.out_dir = out.clone();
        }
        if let Some(data) = &self.data {
            cfg.data_root = data.clone();
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn parse_modality(s: &str) -> Result<Modality> {
    match s {
        "ir" => Ok(Modality::Ir),
        "vis" => Ok(Modality::Vis),
        other => Err(Error::Config(format!(
            "unknown modality {other:?} (expected ir|vis)"
        ))),
    }
}

fn parse_role(s: &str) -> Result<SplitRole> {
    match s {
        "train" => Ok(SplitRole::Train),
        "test" => Ok(SplitRole::Test),
        other => Err(Error::Config(format!(
            "unknown split {other:?} (expected train|test)"
        ))),
    }
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic labelled dataset in the FMB directory layout.
    Synth {
        #[command(flatten)]
        common: Common,
    },
    /// Train one modality's extractor (stage one).
    TrainCgfe {
        #[command(flatten)]
        common: Common,
        /// Which modality to train: ir | vis.
        #[arg(long, value_parser = ["ir", "vis"])]
        modality: String,
        /// Continue from an existing checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Train the fusion head against two frozen extractors (stage two).
    TrainFusion {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        ir_ckpt: PathBuf,
        #[arg(long)]
        vis_ckpt: PathBuf,
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Fuse every pair of a split into RGB PNGs.
    Fuse {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        fusion_ckpt: PathBuf,
        #[arg(long)]
        ir_ckpt: PathBuf,
        #[arg(long)]
        vis_ckpt: PathBuf,
        /// Input dataset root (defaults to the configured data root).
        #[arg(long)]
        input: Option<PathBuf>,
        #[arg(long, default_value = "test", value_parser = ["train", "test"])]
        split: String,
        /// Also write the thermal masks as grayscale PNGs.
        #[arg(long)]
        dump_masks: bool,
    },
    /// Compute the metric report for a directory of fused images.
    Evaluate {
        #[command(flatten)]
        common: Common,
        /// Directory of fused PNGs named by pair id.
        #[arg(long)]
        fused: PathBuf,
        /// Source dataset root (defaults to the configured data root).
        #[arg(long)]
        source: Option<PathBuf>,
        #[arg(long, default_value = "test", value_parser = ["train", "test"])]
        split: String,
        /// Visible-branch extractor checkpoint used to score fused images
        /// for mIoU.
        #[arg(long)]
        seg_ckpt: Option<PathBuf>,
        /// Directory of stored label predictions (alternative to
        /// --seg-ckpt).
        #[arg(long)]
        pred_dir: Option<PathBuf>,
        /// Report CSV path (defaults to <out>/metrics.csv).
        #[arg(long)]
        report: Option<PathBuf>,
    },
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.cmd {
        Cmd::Synth { common } => {
            let cfg = common.build()?;
            let root = commands::cmd_synth(&cfg)?;
            println!(
                "wrote {} train + {} test pairs under {}",
                cfg.synth_train,
                cfg.synth_test,
                root.display()
            );
            Ok(ExitCode::SUCCESS)
        }
        Cmd::TrainCgfe {
            common,
            modality,
            resume,
        } => {
            let cfg = common.build()?;
            let modality = parse_modality(&modality)?;
            let ckpt = commands::cmd_train_cgfe(&cfg, modality, resume.as_deref())?;
            println!("checkpoint: {}", ckpt.display());
            Ok(ExitCode::SUCCESS)
        }
        Cmd::TrainFusion {
            common,
            ir_ckpt,
            vis_ckpt,
            resume,
        } => {
            let cfg = common.build()?;
            let ckpt =
                commands::cmd_train_fusion(&cfg, &ir_ckpt, &vis_ckpt, resume.as_deref())?;
            println!("checkpoint: {}", ckpt.display());
            Ok(ExitCode::SUCCESS)
        }
        Cmd::Fuse {
            common,
            fusion_ckpt,
            ir_ckpt,
            vis_ckpt,
            input,
            split,
            dump_masks,
        } => {
            let cfg = common.build()?;
            let role = parse_role(&split)?;
            let input = input.unwrap_or_else(|| cfg.data_root.clone());
            let out = cfg.out_dir.join("fused");
            let summary = commands::cmd_fuse(
                &fusion_ckpt,
                &ir_ckpt,
                &vis_ckpt,
                &input,
                role,
                &out,
                dump_masks,
            )?;
            println!(
                "fused {} pairs into {} ({} failed)",
                summary.written,
                out.display(),
                summary.failures.len()
            );
            if summary.failures.is_empty() {
                Ok(ExitCode::SUCCESS)
            } else {
                Ok(ExitCode::FAILURE)
            }
        }
        Cmd::Evaluate {
            common,
            fused,
            source,
            split,
            seg_ckpt,
            pred_dir,
            report,
        } => {
            let cfg = common.build()?;
            let role = parse_role(&split)?;
            let source = source.unwrap_or_else(|| cfg.data_root.clone());
            let report = report.unwrap_or_else(|| cfg.out_dir.join("metrics.csv"));
            let path = commands::cmd_evaluate(
                &cfg,
                &fused,
                &source,
                role,
                seg_ckpt.as_deref(),
                pred_dir.as_deref(),
                &report,
            )?;
            println!("report: {}", path.display());
            Ok(ExitCode::SUCCESS)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
