//! Learning a paired training set with a controlled dynamical system and
//! fine-tuning the control on newly added samples without forgetting.
//!
//! A piecewise-constant control steers every input point of an ensemble so
//! that the read-out Euler endpoint of its trajectory matches the paired
//! target. When the ensemble grows, gradient updates for the new samples are
//! projected onto the kernel of the memorized samples' endpoint Jacobians,
//! which pins the already-learned endpoints to first order. Joint training
//! (the folded method) and penalty-method fine-tuning are included as
//! baselines, along with a wall-time probe of the folded method's
//! per-iteration scaling.

pub mod baselines;
pub mod dynamics;
pub mod endpoint_jacobian;
pub mod ensemble;
pub mod error;
pub mod kernel_projection;
pub mod tuner;

pub use error::{Error, Result};
