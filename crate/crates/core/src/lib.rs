//! Dendritic spiking neural networks.
//!
//! A dendritic spiking neuron (DendSN) has `B` passive dendritic branches
//! feeding a leaky integrate-and-fire soma. Each branch integrates its own
//! input with a leak, passes through a nonlinearity, and is weighted by a
//! per-time-step, per-branch strength before the soma sums it.
//!
//! Module map:
//! - [`tensor`]: dense storage and the reverse-mode autodiff tape
//! - [`neuron`]: branch dynamics (sequential and matrix-product forms),
//!   activations, the soma and its surrogate gradient
//! - [`strength`]: branch strength matrices (fixed, learnable, PFA, MDA)
//! - [`layers`]: channel folding, weight/neuron blocks, networks, checkpoints
//! - [`modulation`]: task-context gating (DBG variants and the XdG baseline)
//! - [`training`]: loss, Adam, the STBP training loop and evaluation
//! - [`data`]: IDX ingestion, permuted tasks, Gaussian noise, FGSM
//! - [`metrics`]: average accuracy, mCE/rmCE, rmAE
//! - [`bench`]: sequential vs. parallel dendritic update timing
//! - [`config`] and [`experiment`]: the experiment runner behind the CLI

pub mod bench;
pub mod config;
pub mod data;
pub mod error;
pub mod experiment;
pub mod layers;
pub mod metrics;
pub mod modulation;
pub mod neuron;
pub mod strength;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use tensor::{Graph, Tensor, Var};
