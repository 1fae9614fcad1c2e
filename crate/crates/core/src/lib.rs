//! Core library for the LISA gaze estimator: geometry, network layers,
//! spectral fusion, semantic disentanglement, losses, synthetic data, and
//! the training/evaluation harness.

pub mod backbone;
pub mod ckpt;
pub mod config;
pub mod error;
pub mod fam;
pub mod fft;
pub mod geometry;
pub mod head;
pub mod losses;
pub mod model;
pub mod nn;
pub mod plot;
pub mod sdm;
pub mod synth;
pub mod train;

pub use error::{Error, Result};
