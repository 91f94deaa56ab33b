//! Layout of the output directory and loaders for what earlier verbs wrote.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::Serialize;
use vcmr_core::config::RunConfig;
use vcmr_core::corpus::{load_corpus, FeatureCorpus};
use vcmr_core::diff::checkpoint::{load_checkpoint, save_checkpoint};
use vcmr_core::diff::ParameterSet;
use vcmr_core::localizer::Localizer;
use vcmr_core::retriever::{CorpusIndex, ModelConfig, Retriever};
use vcmr_core::{Error, Execution, Result};

pub const CORPUS_DIR: &str = "corpus";
pub const RETRIEVER_DIR: &str = "retriever";
pub const LOCALIZER_DIR: &str = "localizer";
pub const INDEX_DIR: &str = "index";
pub const TRAIN_LOG: &str = "train_log.jsonl";
pub const RETRIEVAL_FILE: &str = "retrieval.jsonl";
pub const SVMR_FILE: &str = "svmr.jsonl";
pub const VCMR_FILE: &str = "vcmr.jsonl";
pub const EVAL_FILE: &str = "eval.jsonl";
pub const BENCH_FILE: &str = "bench.jsonl";

pub fn io_err(path: &Path, e: std::io::Error) -> Error {
    Error::Ingest {
        path: path.to_path_buf(),
        source: e,
    }
}

pub fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| io_err(dir, e))
}

pub fn write_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut out = String::new();
    for r in rows {
        out.push_str(&serde_json::to_string(r).expect("row serializes"));
        out.push('\n');
    }
    fs::write(path, out).map_err(|e| io_err(path, e))
}

pub fn append_jsonl(path: &Path, line: &str) -> Result<()> {
    fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .and_then(|mut f| writeln!(f, "{line}"))
        .map_err(|e| io_err(path, e))
}

pub fn corpus(cfg: &RunConfig) -> Result<FeatureCorpus> {
    load_corpus(cfg.require_corpus()?)
}

pub fn model_config(cfg: &RunConfig, corpus: &FeatureCorpus) -> ModelConfig {
    cfg.model.clone().for_corpus(corpus)
}

pub fn save_model(dir: &Path, params: &ParameterSet, model: &ModelConfig) -> Result<()> {
    save_checkpoint(dir, params, &serde_json::to_value(model).expect("model config serializes"))
}

fn load_model(dir: &Path, what: &str) -> Result<(ModelConfig, ParameterSet)> {
    if !dir.exists() {
        return Err(Error::MissingRequired(format!("{what} checkpoint at {}", dir.display())));
    }
    let ck = load_checkpoint(dir)?;
    let cfg: ModelConfig = serde_json::from_value(ck.model)
        .map_err(|e| Error::Format {
            field: dir.display().to_string(),
            expected: "model configuration".into(),
            found: e.to_string(),
        })?;
    Ok((cfg, ck.params))
}

pub fn retriever(out: &Path) -> Result<(Retriever, ParameterSet)> {
    let (cfg, params) = load_model(&out.join(RETRIEVER_DIR), "retriever")?;
    Ok((Retriever::for_params(cfg, &params)?, params))
}

pub fn localizer(out: &Path) -> Result<(Localizer, ParameterSet)> {
    let (cfg, params) = load_model(&out.join(LOCALIZER_DIR), "localizer")?;
    Ok((Localizer::for_params(cfg, &params)?, params))
}

/// The dumped index if `build-index` ran, otherwise one built in memory.
pub fn index(
    out: &Path,
    cfg: &RunConfig,
    corpus: &FeatureCorpus,
    retriever: (&Retriever, &ParameterSet),
    exec: Execution,
) -> Result<CorpusIndex> {
    let dir = out.join(INDEX_DIR);
    if dir.exists() {
        return CorpusIndex::load(&dir);
    }
    log::info!("no index at {}, encoding the corpus", dir.display());
    build_index(cfg, corpus, retriever, exec)
}

pub fn build_index(
    cfg: &RunConfig,
    corpus: &FeatureCorpus,
    retriever: (&Retriever, &ParameterSet),
    exec: Execution,
) -> Result<CorpusIndex> {
    let enc = retriever.0.encode_corpus(retriever.1, corpus, exec)?;
    let ids: Vec<String> = corpus.videos().iter().map(|v| v.video_id.clone()).collect();
    CorpusIndex::build(cfg.index_mode, &ids, &enc)
}

pub fn path(out: &Path, file: &str) -> PathBuf {
    out.join(file)
}
