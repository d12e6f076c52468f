//! The datum-wise transformer and the flat-text baseline: architecture
//! configuration, parameters, forward passes, and model-file IO.

mod forward;
mod io;
mod params;

pub use forward::{
    assemble_datum_batch, assemble_flat_batch, bind_params, forward_datum_wise,
    forward_flat_text, score_rows, BnUpdate, DatumBatch, DomainPath, FlatBatch, RowForward,
    TapeBind, EVAL_BATCH_SIZE,
};
pub use io::{load_model, save_model, ModelFile};
pub use params::{init_datum_wise_params, init_flat_text_params, ParamEntry, ParamStore};

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Which of the two architectures a parameter set belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ModelKind {
    #[serde(rename = "datum-wise")]
    DatumWise,
    #[serde(rename = "flat-text")]
    FlatText,
}

impl std::fmt::Display for ModelKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ModelKind::DatumWise => write!(f, "datum-wise"),
            ModelKind::FlatText => write!(f, "flat-text"),
        }
    }
}

impl std::str::FromStr for ModelKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "datum-wise" => Ok(ModelKind::DatumWise),
            "flat-text" => Ok(ModelKind::FlatText),
            other => Err(Error::usage(format!("unknown model kind: {}", other))),
        }
    }
}

/// Architecture hyperparameters. The defaults are the reference
/// configuration: 192-dim embeddings, 3 attention layers with 6 heads
/// in each transformer, feed-forward width 4x.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub d_model: usize,
    pub datum_layers: usize,
    pub row_layers: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    pub dropout: f64,
    pub max_datum_len: usize,
    pub max_datums: usize,
    pub max_row_chars: usize,
    pub vocab_size: usize,
    pub num_domains: usize,
    /// Datum-local positional encoding toggle; disabling it collapses
    /// datums to bags of characters (kept for ablation tests).
    pub use_positional_encoding: bool,
}

impl ModelConfig {
    pub fn with_vocab(vocab_size: usize) -> Self {
        ModelConfig {
            d_model: 192,
            datum_layers: 3,
            row_layers: 3,
            heads: 6,
            ffn_dim: 768,
            dropout: 0.1,
            max_datum_len: 64,
            max_datums: 64,
            max_row_chars: 1024,
            vocab_size,
            num_domains: 1,
            use_positional_encoding: true,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.heads
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.heads == 0 || self.d_model % self.heads != 0 {
            return Err(Error::data(format!(
                "d_model {} must be a positive multiple of heads {}",
                self.d_model, self.heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::data("dropout must be in [0, 1)"));
        }
        if self.num_domains < 1 {
            return Err(Error::data("num_domains must be >= 1"));
        }
        if self.datum_layers == 0 || self.row_layers == 0 || self.ffn_dim == 0 {
            return Err(Error::data("layer counts and ffn_dim must be positive"));
        }
        if self.max_datum_len < 2 || self.max_row_chars < 2 {
            return Err(Error::data("length limits must be at least 2"));
        }
        if self.vocab_size < crate::tokenizer::NUM_SPECIALS as usize {
            return Err(Error::data("vocab_size smaller than the special tokens"));
        }
        Ok(())
    }
}

/// Fixed sinusoidal positional table: PE[p, 2i] = sin(p / 10000^(2i/d)),
/// PE[p, 2i+1] = cos(p / 10000^(2i/d)). Applied only WITHIN datums
/// (positions restart at every datum) and never in the row transformer.
pub fn positional_encoding(length: usize, d_model: usize) -> Array2<f64> {
    assert!(length >= 1, "positional_encoding: length must be >= 1");
    let mut pe = Array2::<f64>::zeros((length, d_model));
    for p in 0..length {
        let mut i = 0;
        while 2 * i < d_model {
            let freq = 1.0 / 10000f64.powf(2.0 * i as f64 / d_model as f64);
            let angle = p as f64 * freq;
            pe[[p, 2 * i]] = angle.sin();
            if 2 * i + 1 < d_model {
                pe[[p, 2 * i + 1]] = angle.cos();
            }
            i += 1;
        }
    }
    pe
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn positional_encoding_row_zero() {
        let pe = positional_encoding(4, 8);
        for i in 0..4 {
            assert_eq!(pe[[0, 2 * i]], 0.0, "sin(0) at even dims");
            assert_eq!(pe[[0, 2 * i + 1]], 1.0, "cos(0) at odd dims");
        }
    }

    #[test]
    fn positional_encoding_first_position() {
        let pe = positional_encoding(2, 8);
        assert!((pe[[1, 0]] - 1f64.sin()).abs() < 1e-15);
        assert!((pe[[1, 1]] - 1f64.cos()).abs() < 1e-15);
    }

    #[test]
    fn positional_encoding_decreasing_frequency() {
        let pe = positional_encoding(3, 192);
        // Higher dims oscillate slower: angle at dim pair i is p/10000^(2i/d).
        assert!(pe[[1, 190]].abs() < pe[[1, 0]].abs());
    }

    #[test]
    fn config_validation() {
        let mut cfg = ModelConfig::with_vocab(50);
        cfg.validate().unwrap();
        assert_eq!(cfg.head_dim(), 32);
        cfg.heads = 5;
        assert!(cfg.validate().is_err());
        cfg.heads = 6;
        cfg.dropout = 1.0;
        assert!(cfg.validate().is_err());
        cfg.dropout = 0.1;
        cfg.num_domains = 0;
        assert!(cfg.validate().is_err());
    }
}
