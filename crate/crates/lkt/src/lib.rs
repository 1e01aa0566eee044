//! Text-based knowledge tracing at desk scale.
//!
//! Student interaction histories are rendered as token sequences in which
//! each interaction's correctness appears as a `[CORRECT]`/`[INCORRECT]`
//! token. A compact transformer encoder is trained to predict the
//! correctness hidden behind `[MASK]` tokens; a recurrent baseline over
//! numeric (question, response) sequences is provided for comparison,
//! together with cross-validation, cold-start/zero-shot transfer
//! protocols, and attention/perturbation interpretability tools.

pub mod cli;
pub mod dataset;
pub mod error;
pub mod evaluation;
pub mod interpret;
pub mod models;
pub mod training;
pub mod numerics;
pub mod seed;
pub mod tokenizer;

pub use error::{Error, Result};
