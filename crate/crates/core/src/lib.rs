//! Latent flow-matching prior with classifier-guided posterior sampling for
//! discrete sequence design.
//!
//! Pipeline: a β-VAE embeds fixed-length token sequences into `R^l`, a
//! flow-matching model learns the latent distribution, and sampling
//! integrates the flow while steering each step with the gradient of a
//! fitness predictor evaluated at the one-step estimate of the endpoint.

#![allow(clippy::neg_cmp_op_on_partial_ord)] // `!(x > 0.0)` also rejects NaN

pub mod checkpoint;
pub mod error;
pub mod eval;
pub mod flow;
pub mod landscape;
pub mod net;
pub mod predictor;
pub mod sampler;
pub mod seq;
pub mod task;
pub mod vae;

pub use error::{Error, ErrorKind, Result};
