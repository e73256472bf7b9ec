//! Iterative self-training of linear classifiers on two-cluster Gaussian
//! mixtures: a finite-size simulator, the asymptotic saddle-point solver that
//! predicts it, closed-form squared-loss dynamics, and hyperparameter search.

// `!(x > 0.0)` is used on purpose so that NaN fails validation
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod analytic;
pub mod compare;
pub mod error;
pub mod gmm;
pub mod hyperopt;
pub mod io;
pub mod losses;
pub mod replica;
pub mod rng;
pub mod simulator;
pub mod special;
pub mod stats;

pub use error::{Error, Result};
