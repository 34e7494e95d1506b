//! Memory-failure prediction from DRAM correctable-error logs.
//!
//! The pipeline ingests CE logs ([`ce_model`]), extracts binary spatial
//! descriptors from the multi-level fault matrices ([`bsfe`]), builds
//! windowed time-patch samples ([`hierarchy`]) for a gradient-boosted
//! classifier ([`patch_classifier`]), mines per-event fault rules with a
//! DIMM-centric decision tree ([`dimm_tree`]), and scores everything under
//! a streaming-safe, lead-time-aware protocol ([`eval`]). A deterministic
//! synthetic corpus ([`synth`]) exercises the whole chain at desk scale,
//! and [`baselines`] provides the reference time-point predictors.
//!
//! Data-parallel inner loops (featurization, corpus generation, batch
//! scoring) run on rayon under the default `parallel` feature and fall back
//! to plain iteration without it; results are identical either way.

pub mod baselines;
pub mod bsfe;
pub mod ce_model;
pub mod dimm_tree;
mod error;
pub mod eval;
pub mod hierarchy;
pub mod par;
pub mod patch_classifier;
pub mod synth;

pub use error::{Error, Result};
