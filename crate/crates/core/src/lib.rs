//! Dynamic soft-label training.
//!
//! Instead of fixing one-hot training targets, this crate treats the labels
//! themselves as learnable parameters and optimizes them jointly with the
//! classifier. Each step simulates a one-step-lookahead SGD update of the
//! model as a function of the label parameters, measures the resulting loss
//! on a trusted held-out (meta) set, and descends the label parameters along
//! that meta-gradient before taking the real model step.
//!
//! Two label parameterizations are supported:
//!
//! - **class mode**: one smoothing scalar per class, clamped to `[0, 1]`,
//!   spreading its mass uniformly over non-target classes;
//! - **instance mode**: a free logit row per training instance, realized
//!   through a softmax, able to move mass onto any class (and thereby to
//!   correct mislabeled instances).
//!
//! Module map:
//!
//! - [`ndcore`]: dense `f64` tensors and a seeded, portable RNG.
//! - [`netcore`]: small differentiable classifiers (dense / conv layers) with
//!   reverse-mode parameter gradients and a forward-mode logit JVP.
//! - [`labelbank`]: the learnable label parameters and their realization into
//!   probability rows.
//! - [`metaloop`]: the alternating meta-training loop, with three
//!   interchangeable meta-gradient routes (closed form, lookahead backprop,
//!   finite differences).
//! - [`datasets`]: synthetic generators, IDX/CIFAR binary readers, split and
//!   fold management, label-noise injection.
//! - [`noisytools`]: label-correction metrics and the entropy curriculum.
//! - [`distill`]: temperature scaling, student training from teacher
//!   predictions or converged labels, cross-architecture label transfer.
//! - [`baselines`]: one-hot / label-smoothing / confidence-penalty / static
//!   label reference trainers sharing the meta loop's batching scaffold.

pub mod baselines;
pub mod datasets;
pub mod distill;
mod error;
pub mod labelbank;
pub mod metaloop;
pub mod ndcore;
pub mod netcore;
pub mod noisytools;

pub use error::{Error, Result};
