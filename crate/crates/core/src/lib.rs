//! Two-stage infrared/visible image fusion.
//!
//! Stage one trains one CycleGAN-style extractor per modality: a U-net
//! generator maps images into a per-class semantic domain, a resnet
//! generator maps semantic maps back to images, and two discriminators
//! (pixel-level for the image domain, patch-level for the semantic domain)
//! drive the adversarial objective. Stage two freezes both extractors,
//! collects five intermediate features from each reconstruction path,
//! refines them, and blends the two modalities with trainable per-region
//! weights gated by a thermal mask derived from the infrared segmentation.
//!
//! The crate also ships reference implementations of the evaluation
//! metrics (SSIM and its two-source variant, correlation coefficient,
//! PSNR, the gradient-based fusion-artifact measure, mIoU) and a
//! deterministic synthetic-scene generator for desk-scale experiments.

pub mod cgfe;
pub mod checkpoint;
pub mod datamodel;
pub mod error;
pub mod fusion;
mod lossops;
pub mod metrics;
pub mod netblocks;
pub mod optim;
pub mod par;
pub mod rng;
pub mod scalar;
pub mod tape;
pub mod tensor;

pub use lossops::OhemConfig;
pub use par::worker_threads;

pub use error::{Error, Result};
pub use scalar::Scalar;
pub use tensor::Tensor;
