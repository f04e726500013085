//! Desk-scale generative recommendation with GFlowNet fine-tuning.
//!
//! The crate covers the whole pipeline: a synthetic recommendation universe
//! with ground-truth utilities, residual k-means item tokenization, a
//! matrix-factorization collaborative model, an autoregressive token policy
//! with a flow head and log-partition scalar, trajectory samplers, the
//! behavior-aware reward model, detailed/trajectory balance objectives, the
//! training loop and constrained beam-search evaluation.

pub mod autodiff;
pub mod collab;
pub mod config;
pub mod error;
pub mod eval;
pub mod objectives;
pub mod pipeline;
pub mod policy;
pub mod reward;
pub mod sampler;
pub mod synth;
pub mod tokenizer;
pub mod trainer;
pub(crate) mod util;

pub use error::{Error, Result};
