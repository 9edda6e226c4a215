//! Two-stage cloud detection for multispectral remote sensing imagery.
//!
//! Stage one is an encoder-decoder segmentation network whose encoder stacks
//! CNN-SSM hybrid perception blocks around a dual-scale Mamba block; stage
//! two re-predicts low-confidence pixels with an uncertainty-guided
//! refinement decoder, and the two masks are fused per pixel.
//!
//! The crate is self-contained: it ships its own reverse-mode autodiff over
//! `ndarray`, a deterministic synthetic scene generator for desk-scale
//! experiments, training/evaluation tooling, and a CLI (`cloudmamba`).

pub mod blocks;
pub mod config;
pub mod error;
pub mod gradcheck;
pub mod net;
pub mod params;
pub mod refine;
pub mod ssm;
pub mod tensor;

pub use error::{Error, Result};
