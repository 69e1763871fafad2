//! Checkpoint container: model config, id-ordered vocabulary, and raw
//! little-endian f32 parameter bytes (base64) in one JSON file, so a
//! save/load round trip is bit-exact.

use super::vocab::Vocabulary;
use super::{param_names, ModelConfig, TransformerParams};
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use serde::{Deserialize, Serialize};
use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

pub const CHECKPOINT_FORMAT: &str = "dyncot-checkpoint-v1";

#[derive(Serialize, Deserialize)]
struct ParamBlockFile {
    name: String,
    shape: Vec<usize>,
    data: String,
}

#[derive(Serialize, Deserialize)]
struct CheckpointFile {
    format: String,
    config: ModelConfig,
    image_symbols: usize,
    vocab: Vec<String>,
    params: Vec<ParamBlockFile>,
}

fn encode(t: &Tensor<f32>) -> String {
    let mut bytes = Vec::with_capacity(t.numel() * 4);
    for &v in t.data() {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    B64.encode(bytes)
}

fn decode(block: &ParamBlockFile) -> Result<Tensor<f32>> {
    let bytes = B64
        .decode(&block.data)
        .map_err(|e| Error::Config(format!("parameter {}: bad base64: {e}", block.name)))?;
    if bytes.len() % 4 != 0 {
        return Err(Error::Config(format!(
            "parameter {}: byte length {} is not a multiple of 4",
            block.name,
            bytes.len()
        )));
    }
    let data: Vec<f32> = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Tensor::new(block.shape.clone(), data)
}

pub fn save_checkpoint(
    path: &Path,
    cfg: &ModelConfig,
    vocab: &Vocabulary,
    params: &TransformerParams<f32>,
) -> Result<()> {
    let names = param_names(cfg);
    let tensors = params.tensors();
    let blocks = names
        .into_iter()
        .zip(tensors)
        .map(|(name, t)| ParamBlockFile {
            name,
            shape: t.shape().to_vec(),
            data: encode(t),
        })
        .collect();
    let file = CheckpointFile {
        format: CHECKPOINT_FORMAT.to_string(),
        config: cfg.clone(),
        image_symbols: vocab.image_symbols(),
        vocab: vocab.tokens().to_vec(),
        params: blocks,
    };
    let ctx = || format!("writing checkpoint {}", path.display());
    let w = BufWriter::new(File::create(path).map_err(|e| Error::io(ctx(), e))?);
    serde_json::to_writer(w, &file).map_err(|e| Error::json(ctx(), e))
}

pub fn load_checkpoint(path: &Path) -> Result<(ModelConfig, Vocabulary, TransformerParams<f32>)> {
    let ctx = || format!("reading checkpoint {}", path.display());
    let r = BufReader::new(File::open(path).map_err(|e| Error::io(ctx(), e))?);
    let file: CheckpointFile = serde_json::from_reader(r).map_err(|e| Error::json(ctx(), e))?;
    if file.format != CHECKPOINT_FORMAT {
        return Err(Error::Config(format!(
            "checkpoint format {:?}, this build reads {CHECKPOINT_FORMAT:?}",
            file.format
        )));
    }
    file.config.validate()?;
    if file.vocab.len() != file.config.vocab_size {
        return Err(Error::Config(format!(
            "checkpoint vocab holds {} tokens but config says {}",
            file.vocab.len(),
            file.config.vocab_size
        )));
    }
    let vocab = Vocabulary::from_id_ordered(file.vocab, file.image_symbols)?;
    let names = param_names(&file.config);
    if file.params.len() != names.len() {
        return Err(Error::Config(format!(
            "checkpoint has {} parameter blocks, expected {}",
            file.params.len(),
            names.len()
        )));
    }
    let mut tensors = Vec::with_capacity(names.len());
    for (block, want) in file.params.iter().zip(&names) {
        if block.name != *want {
            return Err(Error::Config(format!(
                "checkpoint block {:?} out of order, expected {want:?}",
                block.name
            )));
        }
        tensors.push(decode(block)?);
    }
    let params = TransformerParams::from_tensors(&file.config, tensors)?;
    Ok((file.config, vocab, params))
}
