//! Gradient-field auto-regressive selection of part groups out of mixed 3D part sets.
//!
//! A mixed part set contains the scattered parts of several shapes. This crate
//! learns, via denoising score matching on a variance-exploding SDE, the gradient
//! field of the conditional distribution over binary part-selection vectors, and
//! then auto-regressively samples one group at a time until the set is empty:
//!
//! 1. [`partenc`] encodes every part point cloud into a feature row (shared MLP +
//!    max pooling, so the encoding is permutation invariant within a part).
//! 2. [`scorefield`] evaluates the selection score network: an edge-convolution
//!    GNN over the complete part graph (plus an MLP ablation and a deterministic
//!    BCE head ablation).
//! 3. [`sde`] defines the forward perturbation kernel and the score-matching loss;
//!    [`train`] runs the optimization loop over teacher trajectories.
//! 4. [`sampler`] integrates the reverse-time SDE (predictor-corrector or
//!    Euler-Maruyama) and thresholds the result into a boolean selection.
//! 5. [`grouping`] drives the auto-regressive loop and the zero-shot noisy-part
//!    removal pass; [`evalkit`] scores predictions against ground truth with
//!    Jaccard matching; [`synthdata`] generates the synthetic benchmark sets.
//!
//! Everything runs on a small self-contained f64 tensor engine with reverse-mode
//! gradients ([`ndcore`]); no GPU or external ML runtime is required.
//!
//! The `gfars` binary wires these pieces into `gen-data`, `train`, `group`,
//! `eval`, `ablate` and `denoise` subcommands; the `examples/` directory holds
//! one runnable walkthrough per capability.

pub mod cli;
pub mod config;
pub mod error;
pub mod evalkit;
pub mod grouping;
pub mod ndcore;
pub mod partenc;
pub mod sampler;
pub mod scorefield;
pub mod sde;
pub mod seeding;
pub mod synthdata;
pub mod train;

pub use error::{Error, Result};
pub use ndcore::{ModelParams, Tensor};
