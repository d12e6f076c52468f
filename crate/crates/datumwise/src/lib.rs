//! Datum-wise transformer detector for synthetic tabular data.
//!
//! A row is serialized as a set of `column:value` datums. Each datum is
//! encoded character by character with a datum-local positional
//! encoding and run through a datum transformer; the pooled datum
//! states then enter a row transformer with no positional encoding at
//! all, so the classifier is invariant to column order and agnostic to
//! table schema. An optional domain-adversarial head (behind gradient
//! reversal) discourages table-specific features. A flat-text baseline
//! (one global character sequence per row) is included for comparison.

// Link an external BLAS for ndarray's matrix products.
extern crate blas_src;

pub mod cli;
pub mod error;
pub mod ingest;
pub mod metrics;
pub mod model;
pub mod tokenizer;
pub mod train;
