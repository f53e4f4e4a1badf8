//! Domain generalization for multi-domain image classification with a
//! variational autoencoder.
//!
//! The library trains an encoder/decoder/classifier jointly on pooled source
//! domains under the objective `recon + beta*kl + alpha*cls`, runs the
//! leave-one-domain-out protocol with training-domain-validation and oracle
//! model selection, and ships the comparison algorithms (ERM, Fishr, SWAD,
//! DRGen) plus the ablation presets and result aggregation used to produce
//! accuracy tables.
//!
//! Entry points:
//! - [`losses`]: the objective terms and their gradients.
//! - [`model`]: the probabilistic encoder/decoder/head.
//! - [`data`]: synthetic multi-domain generation, manifests, resampling.
//! - [`harness`]: splits, training loop, evaluation, protocol grid.
//! - [`baselines`]: Fishr gradient-variance penalty and SWAD averaging.
//! - [`report`]: aggregation into mean +/- std tables and rendering.
//! - [`cli`]: the `vaedg` command-line surface.
//!
//! Runnable walkthroughs live under `examples/`.

pub mod baselines;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod harness;
pub mod losses;
pub mod model;
pub mod nn;
pub mod report;
pub mod rng;
pub mod verify;

pub use error::{Error, Result};
pub use losses::{LatentPosterior, LossBreakdown, PosteriorBatch};
pub use model::{ForwardOutputs, LatentMode, Model, ModelConfig};
