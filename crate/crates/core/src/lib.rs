//! Masked diffusion posterior sampling (MDPS) for unsupervised anomaly
//! detection.
//!
//! A denoiser trained only on normal images acts as the prior. For a test
//! image `y` and a mask `m` of suspected anomalous pixels, [`mdps`] draws
//! normal reconstructions that agree with `y` exactly outside the mask and are
//! guided towards it inside. [`perception`] compares each reconstruction with
//! `y` and [`scoring`] turns the averaged difference maps into pixel and image
//! scores, running the two-pass mask refinement.

pub mod data;
pub mod diffusion;
mod error;
pub mod eval;
pub mod image;
pub mod mdps;
pub mod oracle;
pub mod perception;
pub mod rng;
pub mod schedule;
pub mod scoring;

pub use error::{Error, Result};
pub use image::{ImageTensor, MaskImage, ScoreMap, ValueRange};
pub use rng::Rng;
pub use schedule::NoiseSchedule;
