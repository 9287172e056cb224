//! A small laboratory for data-adaptive positional encoding (DAPE).
//!
//! The crate bundles everything needed to compare DAPE against static
//! positional encodings at desk scale: a reverse-mode tensor engine,
//! every compared encoding, a pre-norm transformer that runs either as a
//! causal language model or as an encoder with answer placeholders, the
//! Chomsky-hierarchy formal-language tasks, and the evaluation and
//! training harness.

pub mod error;
pub mod eval;
pub mod harness;
pub mod model;
pub mod params;
pub mod pos_enc;
pub mod tasks;
pub mod tensor;

pub use error::{Error, Result};
