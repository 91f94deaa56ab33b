use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::codec::{read_features, write_features, FeatureMatrix};
use super::{FeatureCorpus, Moment, QueryRecord, Split, VideoRecord, DEFAULT_FRAME_DURATION_S};
use crate::error::{Error, Result};
use crate::parallel::{self, Execution};

pub const VIDEOS_FILE: &str = "videos.jsonl";
pub const QUERIES_FILE: &str = "queries.jsonl";

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct VideoLine {
    video_id: String,
    num_frames: usize,
    feature_file: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    subtitle_feature_file: Option<String>,
    #[serde(default = "default_duration")]
    frame_duration_s: f64,
}

fn default_duration() -> f64 {
    DEFAULT_FRAME_DURATION_S
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct QueryLine {
    query_id: String,
    video_id: String,
    token_feature_file: String,
    moment: Moment,
    #[serde(default)]
    split: Split,
}

fn read_jsonl<T: serde::de::DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let file = fs::File::open(path).map_err(|e| Error::ingest(path, e))?;
    let mut out = Vec::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::ingest(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec = serde_json::from_str(&line).map_err(|e| {
            Error::format(
                format!("{}:{}", path.display(), n + 1),
                "a JSON record",
                e,
            )
        })?;
        out.push(rec);
    }
    Ok(out)
}

/// Loads `videos.jsonl` at `manifest` (or inside it, when it is a directory) and the
/// sibling `queries.jsonl` if present.
pub fn load_corpus(manifest: &Path) -> Result<FeatureCorpus> {
    let videos = if manifest.is_dir() {
        manifest.join(VIDEOS_FILE)
    } else {
        manifest.to_path_buf()
    };
    let dir = videos.parent().map(Path::to_path_buf).unwrap_or_default();
    let queries = dir.join(QUERIES_FILE);
    load_corpus_files(&videos, queries.exists().then_some(queries.as_path()))
}

/// Loads an explicit video manifest and optional queries file; feature paths are
/// resolved relative to each file's directory.
pub fn load_corpus_files(videos_path: &Path, queries_path: Option<&Path>) -> Result<FeatureCorpus> {
    if !videos_path.exists() {
        return Err(Error::ingest(
            videos_path,
            std::io::Error::new(std::io::ErrorKind::NotFound, "manifest not found"),
        ));
    }
    let base = videos_path.parent().map(Path::to_path_buf).unwrap_or_default();
    let lines: Vec<VideoLine> = read_jsonl(videos_path)?;
    let videos = parallel::map(Execution::Parallel, &lines, |l| load_video(&base, l));
    let videos = videos.into_iter().collect::<Result<Vec<_>>>()?;

    let queries = match queries_path {
        Some(qp) => {
            let qbase = qp.parent().map(Path::to_path_buf).unwrap_or_default();
            let lines: Vec<QueryLine> = read_jsonl(qp)?;
            parallel::map(Execution::Parallel, &lines, |l| {
                Ok(QueryRecord {
                    query_id: l.query_id.clone(),
                    video_id: l.video_id.clone(),
                    token_features: read_features(&qbase.join(&l.token_feature_file))?,
                    moment: l.moment,
                    split: l.split,
                })
            })
            .into_iter()
            .collect::<Result<Vec<_>>>()?
        }
        None => Vec::new(),
    };
    FeatureCorpus::new(videos, queries)
}

fn load_video(base: &Path, l: &VideoLine) -> Result<VideoRecord> {
    let frames = read_features(&base.join(&l.feature_file))?;
    if frames.rows() != l.num_frames {
        return Err(Error::format(
            format!("{}.num_frames", l.video_id),
            l.num_frames,
            frames.rows(),
        ));
    }
    let subs = l
        .subtitle_feature_file
        .as_ref()
        .map(|f| read_features(&base.join(f)))
        .transpose()?;
    Ok(VideoRecord {
        video_id: l.video_id.clone(),
        frame_features: frames,
        subtitle_features: subs,
        frame_duration_s: l.frame_duration_s,
    })
}

fn write_jsonl<T: Serialize>(path: &Path, records: &[T]) -> Result<()> {
    let mut buf = Vec::new();
    for r in records {
        serde_json::to_writer(&mut buf, r).expect("serializable record");
        buf.push(b'\n');
    }
    let mut f = fs::File::create(path).map_err(|e| Error::ingest(path, e))?;
    f.write_all(&buf).map_err(|e| Error::ingest(path, e))
}

fn write_matrix(dir: &Path, rel: &str, m: &FeatureMatrix) -> Result<String> {
    write_features(m, &dir.join(rel))?;
    Ok(rel.to_string())
}

/// Writes the corpus under `dir` and returns the path of its video manifest.
pub fn write_corpus(corpus: &FeatureCorpus, dir: &Path) -> Result<PathBuf> {
    for sub in ["features", "queries"] {
        let p = dir.join(sub);
        fs::create_dir_all(&p).map_err(|e| Error::ingest(&p, e))?;
    }
    let mut vlines = Vec::with_capacity(corpus.videos().len());
    for (i, v) in corpus.videos().iter().enumerate() {
        let feature_file = write_matrix(dir, &format!("features/v{i:06}.evtf"), &v.frame_features)?;
        let subtitle_feature_file = v
            .subtitle_features
            .as_ref()
            .map(|s| write_matrix(dir, &format!("features/v{i:06}.sub.evtf"), s))
            .transpose()?;
        vlines.push(VideoLine {
            video_id: v.video_id.clone(),
            num_frames: v.num_frames(),
            feature_file,
            subtitle_feature_file,
            frame_duration_s: v.frame_duration_s,
        });
    }
    let mut qlines = Vec::with_capacity(corpus.queries().len());
    for (i, q) in corpus.queries().iter().enumerate() {
        qlines.push(QueryLine {
            query_id: q.query_id.clone(),
            video_id: q.video_id.clone(),
            token_feature_file: write_matrix(dir, &format!("queries/q{i:06}.evtf"), &q.token_features)?,
            moment: q.moment,
            split: q.split,
        });
    }
    let manifest = dir.join(VIDEOS_FILE);
    write_jsonl(&manifest, &vlines)?;
    write_jsonl(&dir.join(QUERIES_FILE), &qlines)?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_record_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let frames = FeatureMatrix::new(4, 8, (0..32).map(|v| v as f32 * 0.25).collect()).unwrap();
        let video = VideoRecord {
            video_id: "clip".into(),
            frame_features: frames,
            subtitle_features: None,
            frame_duration_s: 1.5,
        };
        let query = QueryRecord {
            query_id: "q0".into(),
            video_id: "clip".into(),
            token_features: FeatureMatrix::new(2, 8, vec![0.5; 16]).unwrap(),
            moment: Moment::new(1, 3),
            split: Split::Train,
        };
        let corpus = FeatureCorpus::new(vec![video], vec![query]).unwrap();
        let manifest = write_corpus(&corpus, dir.path()).unwrap();
        let loaded = load_corpus(&manifest).unwrap();
        assert_eq!(loaded.videos().len(), 1);
        assert_eq!(loaded.queries().len(), 1);
        assert!(loaded.bits_eq(&corpus));
    }

    #[test]
    fn header_row_mismatch_is_format_error() {
        let dir = tempfile::tempdir().unwrap();
        let m = FeatureMatrix::zeros(3, 2);
        write_features(&m, &dir.path().join("f.evtf")).unwrap();
        fs::write(
            dir.path().join(VIDEOS_FILE),
            r#"{"video_id":"a","num_frames":4,"feature_file":"f.evtf","frame_duration_s":1.5}"#,
        )
        .unwrap();
        match load_corpus(dir.path()) {
            Err(Error::Format { field, expected, found }) => {
                assert_eq!(field, "a.num_frames");
                assert_eq!((expected.as_str(), found.as_str()), ("4", "3"));
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn missing_files_are_ingest_errors() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(
            load_corpus(&dir.path().join("nope.jsonl")),
            Err(Error::Ingest { .. })
        ));
        fs::write(
            dir.path().join(VIDEOS_FILE),
            r#"{"video_id":"a","num_frames":4,"feature_file":"missing.evtf"}"#,
        )
        .unwrap();
        assert!(matches!(load_corpus(dir.path()), Err(Error::Ingest { .. })));
    }
}
