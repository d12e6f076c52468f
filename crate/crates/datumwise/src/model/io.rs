//! Self-contained model files.
//!
//! Layout: 4-byte magic `DWM1`, a little-endian u32 header length, a
//! JSON header (kind, config, embedded vocabulary text and its SHA-256,
//! tensor manifest), then the tensor data as little-endian f64 in
//! manifest order. Embedding the vocabulary makes a saved model
//! sufficient for scoring on its own.

use std::io::{Read, Write};
use std::path::Path;

use ndarray::ArrayD;
use serde::{Deserialize, Serialize};

use super::{ModelConfig, ModelKind, ParamStore};
use crate::error::{Error, Result};
use crate::tokenizer::CharVocab;

const MAGIC: &[u8; 4] = b"DWM1";
const FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct TensorInfo {
    name: String,
    shape: Vec<usize>,
    trainable: bool,
}

#[derive(Serialize, Deserialize)]
struct Header {
    format_version: u32,
    kind: ModelKind,
    config: ModelConfig,
    vocab_text: String,
    vocab_sha256: String,
    tensors: Vec<TensorInfo>,
}

/// A fully loaded model: everything needed to score rows.
#[derive(Debug)]
pub struct ModelFile {
    pub kind: ModelKind,
    pub config: ModelConfig,
    pub vocab: CharVocab,
    pub params: ParamStore,
}

pub fn save_model(
    path: &Path,
    kind: ModelKind,
    config: &ModelConfig,
    vocab: &CharVocab,
    params: &ParamStore,
) -> Result<()> {
    let header = Header {
        format_version: FORMAT_VERSION,
        kind,
        config: config.clone(),
        vocab_text: vocab.to_file_string(),
        vocab_sha256: vocab.sha256_hex(),
        tensors: params
            .iter()
            .map(|(name, entry)| TensorInfo {
                name: name.clone(),
                shape: entry.value.shape().to_vec(),
                trainable: entry.trainable,
            })
            .collect(),
    };
    let header_bytes = serde_json::to_vec(&header)
        .map_err(|e| Error::data(format!("cannot encode model header: {}", e)))?;
    let mut file = std::fs::File::create(path).map_err(|e| Error::io(path.to_path_buf(), e))?;
    let mut write = |bytes: &[u8]| {
        file.write_all(bytes)
            .map_err(|e| Error::io(path.to_path_buf(), e))
    };
    write(MAGIC)?;
    write(&(header_bytes.len() as u32).to_le_bytes())?;
    write(&header_bytes)?;
    for (_, entry) in params.iter() {
        for v in entry.value.iter() {
            write(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn load_model(path: &Path) -> Result<ModelFile> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path.to_path_buf(), e))?;
    let mut cursor = std::io::Cursor::new(&bytes);
    let mut magic = [0u8; 4];
    cursor
        .read_exact(&mut magic)
        .map_err(|_| Error::data(format!("{}: not a model file (too short)", path.display())))?;
    if &magic != MAGIC {
        return Err(Error::data(format!(
            "{}: not a model file (bad magic)",
            path.display()
        )));
    }
    let mut len_bytes = [0u8; 4];
    cursor
        .read_exact(&mut len_bytes)
        .map_err(|_| Error::data(format!("{}: truncated model header", path.display())))?;
    let header_len = u32::from_le_bytes(len_bytes) as usize;
    let mut header_bytes = vec![0u8; header_len];
    cursor
        .read_exact(&mut header_bytes)
        .map_err(|_| Error::data(format!("{}: truncated model header", path.display())))?;
    let header: Header = serde_json::from_slice(&header_bytes)
        .map_err(|e| Error::data(format!("{}: bad model header: {}", path.display(), e)))?;
    if header.format_version != FORMAT_VERSION {
        return Err(Error::data(format!(
            "{}: unsupported model format version {}",
            path.display(),
            header.format_version
        )));
    }
    let vocab = CharVocab::from_file_string(&header.vocab_text)?;
    if vocab.sha256_hex() != header.vocab_sha256 {
        return Err(Error::data(format!(
            "{}: vocabulary checksum mismatch",
            path.display()
        )));
    }
    header.config.validate()?;
    if header.config.vocab_size != vocab.size() {
        return Err(Error::data(format!(
            "{}: config says vocab_size {} but embedded vocabulary has {} entries",
            path.display(),
            header.config.vocab_size,
            vocab.size()
        )));
    }

    let mut params = ParamStore::new();
    for info in &header.tensors {
        let count: usize = info.shape.iter().product();
        let mut data = Vec::with_capacity(count);
        let mut buf = [0u8; 8];
        for _ in 0..count {
            cursor.read_exact(&mut buf).map_err(|_| {
                Error::data(format!(
                    "{}: truncated tensor data for {}",
                    path.display(),
                    info.name
                ))
            })?;
            data.push(f64::from_le_bytes(buf));
        }
        let value = ArrayD::from_shape_vec(ndarray::IxDyn(&info.shape), data)
            .map_err(|e| Error::data(format!("{}: bad tensor shape: {}", path.display(), e)))?;
        params.insert(&info.name, value, info.trainable);
    }
    if cursor.position() != bytes.len() as u64 {
        return Err(Error::data(format!(
            "{}: {} trailing bytes after tensor data",
            path.display(),
            bytes.len() as u64 - cursor.position()
        )));
    }
    Ok(ModelFile {
        kind: header.kind,
        config: header.config,
        vocab,
        params,
    })
}
