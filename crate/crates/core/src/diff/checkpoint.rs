//! Checkpoint directory: `tensors.bin` holds every parameter as a codec blob,
//! back to back; `tensors.jsonl` indexes them by name, shape and byte offset;
//! `model.json` carries the seed and the model configuration.
//!
//! Values are narrowed to `f32` on save, so a reloaded set is the `f32`
//! rounding of the trained one.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::params::ParameterSet;
use crate::corpus::codec::{self, FeatureMatrix};
use crate::error::{Error, Result};

pub const TENSORS_FILE: &str = "tensors.bin";
pub const INDEX_FILE: &str = "tensors.jsonl";
pub const MODEL_FILE: &str = "model.json";

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct IndexLine {
    name: String,
    shape: [usize; 2],
    offset: usize,
    bytes: usize,
}

#[derive(Serialize, Deserialize)]
struct ModelFile {
    seed: u64,
    model: serde_json::Value,
}

pub struct Checkpoint {
    pub params: ParameterSet,
    pub model: serde_json::Value,
}

pub fn save_checkpoint(dir: &Path, params: &ParameterSet, model: &serde_json::Value) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::ingest(dir, e))?;
    let mut blob = Vec::new();
    let mut index = Vec::new();
    for (name, m) in params.iter() {
        let bytes = codec::encode_features(&FeatureMatrix::from_matrix(m))?;
        let line = IndexLine {
            name: name.to_string(),
            shape: [m.rows(), m.cols()],
            offset: blob.len(),
            bytes: bytes.len(),
        };
        index.push(serde_json::to_string(&line).expect("index line serializes"));
        blob.extend_from_slice(&bytes);
    }
    let write = |file: &str, bytes: &[u8]| {
        let path = dir.join(file);
        fs::File::create(&path)
            .and_then(|mut f| f.write_all(bytes))
            .map_err(|e| Error::ingest(&path, e))
    };
    write(TENSORS_FILE, &blob)?;
    let mut jsonl = index.join("\n");
    jsonl.push('\n');
    write(INDEX_FILE, jsonl.as_bytes())?;
    let model = ModelFile {
        seed: params.seed(),
        model: model.clone(),
    };
    write(
        MODEL_FILE,
        serde_json::to_string_pretty(&model).expect("model serializes").as_bytes(),
    )
}

pub fn load_checkpoint(dir: &Path) -> Result<Checkpoint> {
    let model_path = dir.join(MODEL_FILE);
    let text = fs::read_to_string(&model_path).map_err(|e| Error::ingest(&model_path, e))?;
    let model: ModelFile = serde_json::from_str(&text)
        .map_err(|e| Error::format(MODEL_FILE, "checkpoint model object", e))?;
    let blob_path = dir.join(TENSORS_FILE);
    let blob = fs::read(&blob_path).map_err(|e| Error::ingest(&blob_path, e))?;
    let index_path = dir.join(INDEX_FILE);
    let file = fs::File::open(&index_path).map_err(|e| Error::ingest(&index_path, e))?;
    let mut params = ParameterSet::new(model.seed);
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::ingest(&index_path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let entry: IndexLine = serde_json::from_str(&line)
            .map_err(|e| Error::format(format!("{INDEX_FILE}:{}", n + 1), "index record", e))?;
        let end = entry.offset + entry.bytes;
        if end > blob.len() {
            return Err(Error::format(
                entry.name,
                format!("{end} bytes in {TENSORS_FILE}"),
                blob.len(),
            ));
        }
        let m = codec::decode_features(&blob[entry.offset..end])?;
        if [m.rows(), m.cols()] != entry.shape {
            return Err(Error::format(
                entry.name,
                format!("{:?}", entry.shape),
                format!("[{}, {}]", m.rows(), m.cols()),
            ));
        }
        params.insert(entry.name, m.to_matrix())?;
    }
    Ok(Checkpoint {
        params,
        model: model.model,
    })
}
