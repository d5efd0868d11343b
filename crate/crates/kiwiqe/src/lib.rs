//! KiwiQE: sentence- and word-level machine translation quality estimation.
//!
//! A small, self-contained QE stack: a transformer encoder trained from
//! scratch, a scalar-mix (or head-mix) representation feeding a sentence
//! regression head and an OK/BAD word tagger, attention-based explainers,
//! prediction ensembling with per-language weight search, and the shared-task
//! metric battery.

pub mod data;
pub mod encoder;
pub mod ensemble;
pub mod error;
pub mod explain;
pub mod metrics;
pub mod numerics;
pub mod qe_model;
pub mod synthetic;
pub mod training;

pub use error::{KiwiError, Result};
