use std::collections::HashMap;
use std::fs;

use serde::{Deserialize, Serialize};
use serde_json::json;
use vcmr_core::corpus::{synthesize_corpus, write_corpus, QueryRecord, SynthConfig};
use vcmr_core::eval::{self, bench_localization, bench_retrieval, EvalReport, MomentTask, MomentTruth};
use vcmr_core::gradsuite::{run_gradient_suite, GRADIENT_TOLERANCE};
use vcmr_core::localizer;
use vcmr_core::pipeline::{self, read_predictions, write_predictions, MomentPrediction};
use vcmr_core::retriever::IndexMode;
use vcmr_core::training;
use vcmr_core::{Error, Result};

use crate::artifacts::{self as art, path};
use crate::{Common, GenArgs};

fn print_json(v: &serde_json::Value) {
    println!("{}", serde_json::to_string(v).expect("json prints"));
}

pub fn gen(common: &Common, g: &GenArgs) -> Result<()> {
    let cfg = common.run_config()?;
    let synth = SynthConfig::new(
        cfg.retriever_train.seed,
        g.videos,
        g.frames,
        g.dim,
        g.events,
        g.queries,
    )
    .with_noise(g.noise)
    .with_query_len(g.query_len)
    .with_subtitles(g.subtitles)
    .with_val_queries(g.val_queries);
    let corpus = synthesize_corpus(&synth)?;
    let manifest = write_corpus(&corpus, &common.out.join(art::CORPUS_DIR))?;
    print_json(&json!({
        "manifest": manifest.display().to_string(),
        "videos": corpus.videos().len(),
        "queries": corpus.queries().len(),
    }));
    Ok(())
}

pub fn ingest(common: &Common) -> Result<()> {
    let cfg = common.run_config()?;
    let corpus = art::corpus(&cfg)?;
    print_json(&json!({
        "videos": corpus.videos().len(),
        "queries": corpus.queries().len(),
        "train_queries": corpus.split_indices(vcmr_core::corpus::Split::Train).len(),
        "val_queries": corpus.split_indices(vcmr_core::corpus::Split::Val).len(),
        "frame_dim": corpus.frame_dim(),
        "subtitle_dim": corpus.subtitle_dim(),
        "query_dim": corpus.query_dim(),
        "max_frames": corpus.max_frames(),
    }));
    Ok(())
}

pub fn train_retriever(common: &Common) -> Result<()> {
    let cfg = common.run_config()?;
    let corpus = art::corpus(&cfg)?;
    let dir = common.out.join(art::RETRIEVER_DIR);
    art::ensure_dir(&dir)?;
    let mut tc = cfg.retriever_train.clone();
    tc.checkpoint_dir = Some(dir.join("epochs"));
    let trained = training::train_retriever(&corpus, art::model_config(&cfg, &corpus), &tc, &cfg.loss, |s| {
        log::debug!("retriever step {} loss {:.6}", s.step, s.l);
    })?;
    art::save_model(&dir, &trained.params, &trained.model.config)?;
    art::write_jsonl(&dir.join(art::TRAIN_LOG), &trained.log)?;
    print_json(&json!({
        "checkpoint": dir.display().to_string(),
        "steps": trained.log.len(),
        "final_loss": trained.log.last().map(|s| s.l),
    }));
    Ok(())
}

pub fn train_localizer(common: &Common) -> Result<()> {
    let cfg = common.run_config()?;
    let corpus = art::corpus(&cfg)?;
    let (retriever, rparams) = art::retriever(&common.out)?;
    let dir = common.out.join(art::LOCALIZER_DIR);
    art::ensure_dir(&dir)?;
    let mut tc = cfg.localizer_train.clone();
    tc.checkpoint_dir = Some(dir.join("epochs"));
    let trained = localizer::train_localizer(
        &corpus,
        art::model_config(&cfg, &corpus),
        (&retriever, &rparams),
        &tc,
        &cfg.localizer,
        common.exec(),
        |s| log::debug!("localizer step {} loss {:.6}", s.step, s.l),
    )?;
    art::save_model(&dir, &trained.params, &trained.model.config)?;
    art::write_jsonl(&dir.join(art::TRAIN_LOG), &trained.log)?;
    print_json(&json!({
        "checkpoint": dir.display().to_string(),
        "steps": trained.log.len(),
        "final_loss": trained.log.last().map(|s| s.l),
    }));
    Ok(())
}

pub fn build_index(common: &Common) -> Result<()> {
    let cfg = common.run_config()?;
    let corpus = art::corpus(&cfg)?;
    let (retriever, rparams) = art::retriever(&common.out)?;
    let index = art::build_index(&cfg, &corpus, (&retriever, &rparams), common.exec())?;
    let dir = common.out.join(art::INDEX_DIR);
    if dir.exists() {
        fs::remove_dir_all(&dir).map_err(|e| art::io_err(&dir, e))?;
    }
    let payload = index.dump(&dir)?;
    print_json(&json!({
        "index": dir.display().to_string(),
        "mode": index.mode(),
        "videos": index.len(),
        "vector_count": index.vector_count(),
        "memory_bytes": index.memory_bytes(),
        "payload_bytes": payload,
    }));
    Ok(())
}

fn split_queries<'a>(corpus: &'a vcmr_core::corpus::FeatureCorpus, cfg: &vcmr_core::config::RunConfig) -> Result<Vec<&'a QueryRecord>> {
    let qs: Vec<&QueryRecord> = corpus
        .split_indices(cfg.split)
        .into_iter()
        .map(|i| &corpus.queries()[i])
        .collect();
    if qs.is_empty() {
        return Err(Error::Argument(format!("split {} has no queries", cfg.split)));
    }
    Ok(qs)
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RankLine {
    query_id: String,
    rank: usize,
    video_id: String,
    score: f64,
}

pub fn retrieve(common: &Common) -> Result<()> {
    let cfg = common.run_config()?;
    let corpus = art::corpus(&cfg)?;
    let (retriever, rparams) = art::retriever(&common.out)?;
    let index = art::index(&common.out, &cfg, &corpus, (&retriever, &rparams), common.exec())?;
    let queries = split_queries(&corpus, &cfg)?;
    let ranked = vcmr_core::parallel::map(common.exec(), &queries, |q| {
        pipeline::retrieve_videos((&retriever, &rparams), &index, q, index.len())
    });
    let mut rows = Vec::new();
    for (q, r) in queries.iter().zip(ranked) {
        for (rank, (video_id, score)) in r?.into_iter().enumerate() {
            rows.push(RankLine {
                query_id: q.query_id.clone(),
                rank: rank + 1,
                video_id,
                score,
            });
        }
    }
    art::ensure_dir(&common.out)?;
    let file = path(&common.out, art::RETRIEVAL_FILE);
    art::write_jsonl(&file, &rows)?;
    print_json(&json!({"predictions": file.display().to_string(), "queries": queries.len()}));
    Ok(())
}

pub fn localize(common: &Common) -> Result<()> {
    let cfg = common.run_config()?;
    let corpus = art::corpus(&cfg)?;
    let (localizer, lparams) = art::localizer(&common.out)?;
    let queries = split_queries(&corpus, &cfg)?;
    let preds = vcmr_core::parallel::map(common.exec(), &queries, |q| {
        pipeline::svmr((&localizer, &lparams), &corpus, q, &cfg.inference)
    });
    write_moment_dump(common, art::SVMR_FILE, &queries, preds)
}

pub fn vcmr(common: &Common) -> Result<()> {
    let cfg = common.run_config()?;
    let corpus = art::corpus(&cfg)?;
    let (retriever, rparams) = art::retriever(&common.out)?;
    let (localizer, lparams) = art::localizer(&common.out)?;
    let index = art::index(&common.out, &cfg, &corpus, (&retriever, &rparams), common.exec())?;
    let queries = split_queries(&corpus, &cfg)?;
    let preds = vcmr_core::parallel::map(common.exec(), &queries, |q| {
        pipeline::vcmr(
            (&retriever, &rparams),
            &index,
            (&localizer, &lparams),
            &corpus,
            q,
            &cfg.inference,
            vcmr_core::Execution::Sequential,
        )
    });
    write_moment_dump(common, art::VCMR_FILE, &queries, preds)
}

fn write_moment_dump(
    common: &Common,
    file: &str,
    queries: &[&QueryRecord],
    preds: Vec<Result<Vec<MomentPrediction>>>,
) -> Result<()> {
    let mut grouped = Vec::with_capacity(queries.len());
    for (q, p) in queries.iter().zip(preds) {
        grouped.push((q.query_id.clone(), p?));
    }
    art::ensure_dir(&common.out)?;
    let file = path(&common.out, file);
    write_predictions(&file, &grouped)?;
    print_json(&json!({"predictions": file.display().to_string(), "queries": queries.len()}));
    Ok(())
}

fn read_rankings(file: &std::path::Path) -> Result<HashMap<String, Vec<String>>> {
    let text = fs::read_to_string(file).map_err(|e| art::io_err(file, e))?;
    let mut out: HashMap<String, Vec<(usize, String)>> = HashMap::new();
    for (n, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let r: RankLine = serde_json::from_str(line).map_err(|e| Error::Format {
            field: format!("{}:{}", file.display(), n + 1),
            expected: "ranking record".into(),
            found: e.to_string(),
        })?;
        out.entry(r.query_id).or_default().push((r.rank, r.video_id));
    }
    Ok(out
        .into_iter()
        .map(|(q, mut v)| {
            v.sort();
            (q, v.into_iter().map(|x| x.1).collect())
        })
        .collect())
}

pub fn eval(common: &Common, oracle: bool) -> Result<()> {
    let cfg = common.run_config()?;
    let corpus = art::corpus(&cfg)?;
    let queries = split_queries(&corpus, &cfg)?;
    let mut report = EvalReport::new(cfg.split, queries.len(), cfg.echo());
    let mut found = false;

    let ranking_file = path(&common.out, art::RETRIEVAL_FILE);
    if ranking_file.exists() {
        let mut ranks = read_rankings(&ranking_file)?;
        let rankings: Vec<Vec<String>> = queries.iter().map(|q| ranks.remove(&q.query_id).unwrap_or_default()).collect();
        let truth: Vec<String> = queries.iter().map(|q| q.video_id.clone()).collect();
        report.add_vr(&rankings, &truth);
        found = true;
    }
    let truth: Vec<MomentTruth> = queries
        .iter()
        .map(|q| MomentTruth {
            video_id: q.video_id.clone(),
            span: q.moment.inclusive(),
        })
        .collect();
    for (task, file) in [(MomentTask::Svmr, art::SVMR_FILE), (MomentTask::Vcmr, art::VCMR_FILE)] {
        let file = path(&common.out, file);
        if !file.exists() {
            continue;
        }
        let mut by_query: HashMap<String, Vec<MomentPrediction>> = read_predictions(&file)?.into_iter().collect();
        let preds: Vec<Vec<MomentPrediction>> = queries
            .iter()
            .map(|q| by_query.remove(&q.query_id).unwrap_or_default())
            .collect();
        report.add_moment(task, &preds, &truth);
        found = true;
    }
    if oracle {
        let overlap = eval::event_oracle_overlap(&corpus, cfg.split, cfg.model.strategy, &eval::IOUS, common.exec())?;
        for (mu, v) in eval::IOUS.iter().zip(overlap) {
            report.metrics.insert(format!("event oracle IoU>{mu}"), (v * 100.0).round() / 100.0);
        }
        found = true;
    }
    if !found {
        return Err(Error::MissingRequired(format!(
            "prediction dumps in {} (run retrieve, localize or vcmr first)",
            common.out.display()
        )));
    }
    art::append_jsonl(&path(&common.out, art::EVAL_FILE), &report.to_jsonl())?;
    print!("{}", report.table());
    Ok(())
}

pub fn bench(common: &Common, repetitions: usize, parallel: bool) -> Result<()> {
    let cfg = common.run_config()?;
    let corpus = art::corpus(&cfg)?;
    let (retriever, rparams) = art::retriever(&common.out)?;
    let exec = common.exec();
    let queries = split_queries(&corpus, &cfg)?;
    let encoded: Vec<_> = vcmr_core::parallel::map(exec, &queries, |q| {
        retriever.encode_query(&rparams, &q.token_features.to_matrix())
    })
    .into_iter()
    .collect::<Result<_>>()?;
    let enc = retriever.encode_corpus(&rparams, &corpus, exec)?;
    let ids: Vec<String> = corpus.videos().iter().map(|v| v.video_id.clone()).collect();
    let localizer = art::localizer(&common.out).ok();
    art::ensure_dir(&common.out)?;
    for mode in [IndexMode::Event, IndexMode::Frame] {
        let index = vcmr_core::retriever::CorpusIndex::build(mode, &ids, &enc)?;
        let scan = if parallel {
            vcmr_core::Execution::Parallel
        } else {
            vcmr_core::Execution::Sequential
        };
        let mut report = bench_retrieval(&index, &encoded, repetitions, scan)?;
        if let Some((l, p)) = &localizer {
            report.localization_latency_ms = Some(bench_localization((l, p), &corpus, &queries, 1)?);
        }
        let line = serde_json::to_string(&report).expect("report serializes");
        art::append_jsonl(&path(&common.out, art::BENCH_FILE), &line)?;
        println!("{line}");
    }
    Ok(())
}

pub fn gradcheck(common: &Common, seed: u64) -> Result<()> {
    let results = run_gradient_suite(seed, common.exec())?;
    let mut failed = Vec::new();
    for r in &results {
        println!(
            "{:<18} params={:<6} max_rel_error={:.3e} {}",
            r.loss,
            r.parameters,
            r.max_rel_error,
            if r.passed() { "ok" } else { "FAIL" }
        );
        if !r.passed() {
            failed.push(r.loss.clone());
        }
    }
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Error::Numeric(format!(
            "gradient check above {GRADIENT_TOLERANCE:e} for {}",
            failed.join(", ")
        )))
    }
}
