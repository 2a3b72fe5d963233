//! Two-stage real-world single-image super-resolution.
//!
//! Stage one trains a degradation generator that turns clean bicubic
//! downscales into realistic low-resolution images. Stage two trains a
//! sine-activated Encoder-Resnet-Decoder super-resolver on the synthesized
//! pairs. The crate also ships the classical degradation simulator, noise
//! estimation, metrics, and the data pipeline that feeds both stages.

pub mod config;
pub mod data;
pub mod degradation;
pub mod error;
pub mod evaluation;
pub mod imageio;
pub mod losses;
pub mod lr_model;
pub mod nets;
pub mod sr_model;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use tensor::{Real, Tensor};
