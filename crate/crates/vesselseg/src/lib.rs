//! Multi-task volumetric vessel segmentation from a source MRI modality,
//! trained with an auxiliary contrast-enhanced modality that is only
//! available during training.
//!
//! The crate covers the full stack: volume I/O and preprocessing, patch
//! sampling and augmentation, the single-decoder and dual-decoder networks
//! with layerwise feature fusion, the uncertainty-weighted multi-task loss,
//! the four training regimes, sliding-window inference, global and
//! thickness-stratified evaluation, a classical vesselness baseline, and a
//! synthetic vascular phantom generator for desk-scale verification.

pub mod augment;
pub mod edt;
pub mod error;
pub mod frangi;
pub mod infer;
pub mod io;
pub mod loss;
pub mod manifest;
pub mod metrics;
pub mod nn;
pub mod optim;
pub mod patch;
pub mod rng;
pub mod skeleton;
pub mod synth;
pub mod train;
pub mod vesselstats;
pub mod volume;

pub use error::{Error, Result};
pub use volume::{Sample, Volume, VolumeKind};
