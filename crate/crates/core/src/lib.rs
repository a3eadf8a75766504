//! Staged L∞ adversarial perturbation pipeline with a self-contained toy
//! vision-language testbed.
//!
//! The crate has three layers:
//! - the perturbation engine ([`perturb`]) and differentiable objectives
//!   ([`objective`]): projection, sign-gradient PGD, budget splitting,
//!   task cross-entropy and the KL objective on the contrastive model's
//!   output distribution;
//! - the testbed ([`data`], [`nn`], [`model`], [`train`]): a synthetic
//!   shapes+captions dataset, a small contrastive image-text model and
//!   dense-task models derived from its backbone, all with exact input
//!   gradients;
//! - attacks and evaluation ([`attack`], [`eval`], [`report`]): the four
//!   attack strategies, task metrics, attack success rates and the
//!   comparison tables.

pub mod attack;
pub mod data;
pub mod error;
pub mod eval;
pub mod image_tensor;
pub mod model;
pub mod nn;
pub mod objective;
pub mod perturb;
pub mod report;
pub mod seed;
pub mod train;

pub use error::{Error, Result};
pub use image_tensor::{ImageTensor, PixelField};
