//! Multi-domain machine translation workbench.
//!
//! Contrasts two ways of telling an encoder-decoder transformer which domain
//! to translate into: prepending a domain tag to the source, and adding a
//! learned per-domain vector to the top encoder output. The crate contains a
//! small reverse-mode autodiff engine, the transformer, a synthetic
//! multi-domain corpus generator, the training regimes, and the evaluation
//! harness (BLEU, paired bootstrap, label-ablation matrices, robustness
//! summaries, CSV and SVG reports).

pub mod data;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod model;
pub mod numfmt;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
