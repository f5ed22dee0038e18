//! Mixed Gaussian and impulse noise removal.
//!
//! The denoiser alternates between re-estimating a per-pixel fidelity weight
//! from the current residual and a split-Bregman low-rank step on groups of
//! similar patches. See the README for the command-line front end.

pub mod cli;
pub mod error;
pub mod image;
pub mod init;
pub mod linalg;
pub mod metrics;
pub mod noise;
pub mod patch;
pub mod solver;

pub use error::{Error, Result};
pub use image::{load_image, save_image, ImageGrid, Plane, Pos};
pub use init::{initialize, InitConfig, NoiseKind};
pub use noise::{synthesize, CorruptionMask, NoiseLabel, NoiseSpec};
pub use metrics::{psnr, ssim};
pub use solver::{denoise, DenoiseReport, SolverConfig, WeightRule};
