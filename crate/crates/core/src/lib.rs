//! Low-dose TEM denoising toolkit: image I/O, preprocessing, synthetic data,
//! a small autodiff engine with a U-Net denoiser, training, evaluation and
//! latency benchmarking.
//!
//! The examples are the quickest way in:
//!
//! - `synth_dataset`: generate paired low/high-dose phantoms with ground truth
//! - `train_denoiser`: train a narrow U-Net and print its loss curve
//! - `denoise_image`: denoise one exposure with a saved or fresh checkpoint
//! - `evaluate`: MAE/PSNR against the undenoised baseline, histograms
//! - `metrology`: particle diameters and separability from line profiles
//! - `bench_latency`: single-image inference timing
//! - `autodiff`: the tape engine on a hand-built graph
//!
//! ```bash
//! cargo run --release --example train_denoiser
//! ```

pub mod benchkit;
pub mod cli;
pub mod error;
pub mod evalkit;
pub mod imgstore;
pub mod preprocess;
pub mod synthgen;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
