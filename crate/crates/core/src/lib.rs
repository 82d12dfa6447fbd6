//! Desk-scale laboratory for pretraining phase transitions in small decoder-only
//! transformers and their effect on psychometric predictive power.
//!
//! - [`tensor`]: dense tensors and reverse-mode differentiation
//! - [`model`]: GPT-2 style decoder with attention tracing, ablation and noise injection
//! - [`data`]: tokenization, CoNLL-U, reading-time tables, synthetic corpora
//! - [`training`]: causal-LM training with syntactic/copying regularizers
//! - [`metrics`]: prefix-matching score, UAS, head SAS score, ICL score, breakthroughs
//! - [`stats`]: reading-time regressions, ΔLL, permutation tests, correlations
//! - [`harness`]: experiment plans, run ledgers and report emission

pub mod data;
pub mod error;
pub mod harness;
pub mod metrics;
pub mod model;
pub mod seed;
pub mod stats;
pub mod training;
pub mod tensor;

pub use error::{Error, Result};
