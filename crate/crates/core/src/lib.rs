//! Synthesizing camera images from WiFi channel state information.
//!
//! The crate covers the whole path from recorded CSI packet logs and camera
//! frames to trained multimodal VAEs and their evaluation:
//!
//! * [`csi_ingest`] parses logs and manifests, trims, pairs and splits.
//! * [`dataset_windows`] stores the paired dataset and cuts amplitude windows.
//! * [`latent_core`] holds the Gaussian posterior algebra and the objective.
//! * [`models`] defines the image encoder/decoder and the CSI encoder.
//! * [`training`] runs optimization, multi-run selection and grid search.
//! * [`metrics_eval`] computes PSNR, SSIM, RMSE and FID reports.
//! * [`harness`] drives ablations, video export and synthetic data.

pub mod csi_ingest;
pub mod dataset_windows;
mod error;
pub mod harness;
pub mod latent_core;
pub mod metrics_eval;
pub mod models;
pub mod nn;
pub mod training;

pub use error::{Error, Result};
