//! Desk-scale driving policy stack: procedural scenes, rule/expert hybrid
//! rewards, conditional VQ scene tokens, an autoregressive state-token
//! predictor, a Q-guided diffusion action head and a residual trajectory
//! refiner, with open-loop evaluation on top.

// `!(x > 0.0)` style checks are deliberate: they reject NaN as well.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod autodiff;
pub mod checkpoint;
pub mod cvqvae;
pub mod error;
pub mod eval;
pub mod nn;
pub mod oracle;
pub mod pipeline;
pub mod policy;
pub mod refine;
pub mod reward;
pub mod rng;
pub mod scene;
pub mod tensor;

pub use error::{Error, Result};
