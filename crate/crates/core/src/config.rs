//! Run configuration: one flat JSON object, optionally overridden key by key.
//!
//! Every key has a documented default, so an empty file is a valid config.
//! Unknown keys, values of the wrong type and a strategy parameter given for a
//! different strategy are rejected.

use std::path::{Path, PathBuf};

use serde_json::{Map, Value};

use crate::corpus::Split;
use crate::diff::nn::AnchorSize;
use crate::diff::optim::OptimizerKind;
use crate::error::{Error, Result};
use crate::events::Strategy;
use crate::localizer::LocalizerWeights;
use crate::pipeline::InferenceConfig;
use crate::retriever::{IndexMode, ModelConfig};
use crate::training::{LossWeights, TrainConfig};

pub const KEYS: &[&str] = &[
    "corpus",
    "strategy",
    "delta",
    "k",
    "beta",
    "window",
    "dim",
    "layers",
    "heads",
    "ff_mult",
    "frame_anchors",
    "event_anchors",
    "conv_kernel",
    "epochs",
    "batch_size",
    "lr",
    "optimizer",
    "clip_norm",
    "seed",
    "checkpoint_every",
    "localizer_epochs",
    "localizer_batch_size",
    "localizer_lr",
    "temperature",
    "omega",
    "lambda",
    "gamma",
    "negatives",
    "negative_pool",
    "top_k",
    "l_max",
    "top_n",
    "nms_threshold",
    "max_predictions",
    "split",
    "index_mode",
];

pub const LOCALIZER_BATCH_SIZE: usize = 8;

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub corpus: Option<PathBuf>,
    pub model: ModelConfig,
    pub retriever_train: TrainConfig,
    pub localizer_train: TrainConfig,
    pub loss: LossWeights,
    pub localizer: LocalizerWeights,
    pub inference: InferenceConfig,
    pub split: Split,
    pub index_mode: IndexMode,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self::from_map(Map::new()).expect("defaults are valid")
    }
}

fn mismatch(key: &str, detail: impl Into<String>) -> Error {
    Error::TypeMismatch {
        key: key.to_string(),
        detail: detail.into(),
    }
}

struct Reader {
    map: Map<String, Value>,
}

impl Reader {
    fn raw(&self, key: &str) -> Option<&Value> {
        self.map.get(key).filter(|v| !v.is_null())
    }

    fn has(&self, key: &str) -> bool {
        self.raw(key).is_some()
    }

    fn f64(&self, key: &str, default: f64) -> Result<f64> {
        match self.raw(key) {
            None => Ok(default),
            Some(v) => v.as_f64().ok_or_else(|| mismatch(key, format!("expected a number, found {v}"))),
        }
    }

    fn positive_f64(&self, key: &str, default: f64) -> Result<f64> {
        let v = self.f64(key, default)?;
        if v > 0.0 && v.is_finite() {
            Ok(v)
        } else {
            Err(mismatch(key, format!("must be > 0, found {v}")))
        }
    }

    fn non_negative_f64(&self, key: &str, default: f64) -> Result<f64> {
        let v = self.f64(key, default)?;
        if v >= 0.0 && v.is_finite() {
            Ok(v)
        } else {
            Err(mismatch(key, format!("must be >= 0, found {v}")))
        }
    }

    fn usize(&self, key: &str, default: usize) -> Result<usize> {
        match self.raw(key) {
            None => Ok(default),
            Some(v) => v
                .as_u64()
                .map(|n| n as usize)
                .ok_or_else(|| mismatch(key, format!("expected a non-negative integer, found {v}"))),
        }
    }

    fn positive_usize(&self, key: &str, default: usize) -> Result<usize> {
        match self.usize(key, default)? {
            0 => Err(mismatch(key, "must be >= 1")),
            n => Ok(n),
        }
    }

    fn opt_usize(&self, key: &str) -> Result<Option<usize>> {
        if self.has(key) {
            self.positive_usize(key, 1).map(Some)
        } else {
            Ok(None)
        }
    }

    fn string(&self, key: &str) -> Result<Option<String>> {
        match self.raw(key) {
            None => Ok(None),
            Some(Value::String(s)) => Ok(Some(s.clone())),
            Some(v) => Err(mismatch(key, format!("expected a string, found {v}"))),
        }
    }

    fn parsed<T: std::str::FromStr<Err = String>>(&self, key: &str, default: T) -> Result<T> {
        match self.string(key)? {
            None => Ok(default),
            Some(s) => s.parse().map_err(|e: String| mismatch(key, e)),
        }
    }

    fn anchors(&self, key: &str, default: Vec<AnchorSize>) -> Result<Vec<AnchorSize>> {
        match self.raw(key) {
            None => Ok(default),
            Some(v) => {
                let list: Vec<AnchorSize> = serde_json::from_value(v.clone())
                    .map_err(|e| mismatch(key, format!("expected a list of sizes or \"all\": {e}")))?;
                if list.is_empty() {
                    return Err(mismatch(key, "needs at least one anchor size"));
                }
                Ok(list)
            }
        }
    }
}

impl RunConfig {
    /// Builds a config from a flat key map.
    pub fn from_map(map: Map<String, Value>) -> Result<Self> {
        if let Some(k) = map.keys().find(|k| !KEYS.contains(&k.as_str())) {
            return Err(Error::UnknownKey(k.clone()));
        }
        let r = Reader { map };
        let strategy_name = r.string("strategy")?.unwrap_or_else(|| "convolution".into());
        let params: &[&str] = match strategy_name.as_str() {
            "convolution" => &["delta"],
            "kmeans" => &["k", "beta"],
            "window" => &["window"],
            other => {
                return Err(mismatch(
                    "strategy",
                    format!("unknown strategy `{other}` (convolution | kmeans | window)"),
                ))
            }
        };
        for key in ["delta", "k", "beta", "window"] {
            if r.has(key) && !params.contains(&key) {
                return Err(mismatch(key, format!("not a parameter of strategy `{strategy_name}`")));
            }
        }
        let strategy = match strategy_name.as_str() {
            "convolution" => Strategy::Convolution {
                delta: r.non_negative_f64("delta", 0.3)?,
            },
            "kmeans" => Strategy::Kmeans {
                k: r.positive_usize("k", 10)?,
                beta: r.f64("beta", 1.0)?,
            },
            _ => Strategy::Window {
                w: r.positive_usize("window", 5)?,
            },
        };

        let d = ModelConfig::default();
        let model = ModelConfig {
            dim: r.positive_usize("dim", d.dim)?,
            layers: r.positive_usize("layers", d.layers)?,
            heads: r.positive_usize("heads", d.heads)?,
            ff_mult: r.positive_usize("ff_mult", d.ff_mult)?,
            frame_anchors: r.anchors("frame_anchors", d.frame_anchors)?,
            event_anchors: r.anchors("event_anchors", d.event_anchors)?,
            strategy,
            conv_kernel: r.positive_usize("conv_kernel", d.conv_kernel)?,
            ..d
        };
        if !model.dim.is_multiple_of(model.heads) {
            return Err(mismatch("heads", format!("dim {} not divisible by {}", model.dim, model.heads)));
        }
        if model.conv_kernel.is_multiple_of(2) {
            return Err(mismatch("conv_kernel", "must be odd"));
        }

        let t = TrainConfig::default();
        let clip_norm = if r.has("clip_norm") {
            Some(r.positive_f64("clip_norm", 1.0)?)
        } else {
            None
        };
        let retriever_train = TrainConfig {
            epochs: r.usize("epochs", t.epochs)?,
            batch_size: r.positive_usize("batch_size", t.batch_size)?,
            lr: r.positive_f64("lr", t.lr)?,
            optimizer: r.parsed("optimizer", OptimizerKind::default())?,
            clip_norm,
            seed: r.usize("seed", 0)? as u64,
            checkpoint_every: r.usize("checkpoint_every", 0)?,
            checkpoint_dir: None,
        };
        let localizer_train = TrainConfig {
            epochs: r.usize("localizer_epochs", retriever_train.epochs)?,
            batch_size: r.positive_usize("localizer_batch_size", LOCALIZER_BATCH_SIZE)?,
            lr: r.positive_f64("localizer_lr", retriever_train.lr)?,
            ..retriever_train.clone()
        };
        let lw = LossWeights::default();
        let loss = LossWeights {
            temperature: r.positive_f64("temperature", lw.temperature)?,
            omega: r.non_negative_f64("omega", lw.omega)?,
            lambda: r.non_negative_f64("lambda", lw.lambda)?,
        };
        let lo = LocalizerWeights::default();
        let localizer = LocalizerWeights {
            gamma: r.non_negative_f64("gamma", lo.gamma)?,
            negatives: r.usize("negatives", lo.negatives)?,
            negative_pool: r.positive_usize("negative_pool", lo.negative_pool)?,
        };
        let inf = InferenceConfig::default();
        let nms_threshold = r.f64("nms_threshold", inf.nms_threshold)?;
        if !(0.0..=1.0).contains(&nms_threshold) {
            return Err(mismatch("nms_threshold", "must lie in [0, 1]"));
        }
        let inference = InferenceConfig {
            top_k: r.positive_usize("top_k", inf.top_k)?,
            l_max: r.opt_usize("l_max")?,
            top_n: r.positive_usize("top_n", inf.top_n)?,
            nms_threshold,
            temperature: loss.temperature,
            max_predictions: r.positive_usize("max_predictions", inf.max_predictions)?,
        };
        Ok(Self {
            corpus: r.string("corpus")?.map(PathBuf::from),
            model,
            retriever_train,
            localizer_train,
            loss,
            localizer,
            inference,
            split: r.parsed("split", Split::Train)?,
            index_mode: r.parsed("index_mode", IndexMode::Event)?,
        })
    }

    /// Reads `path` (if any) and applies `overrides` on top. Override values are
    /// parsed as JSON when possible and taken as strings otherwise.
    pub fn load(path: Option<&Path>, overrides: &[(String, String)]) -> Result<Self> {
        let mut map = match path {
            Some(p) => read_map(p)?,
            None => Map::new(),
        };
        for (k, v) in overrides {
            let value = serde_json::from_str(v).unwrap_or_else(|_| Value::String(v.clone()));
            map.insert(k.clone(), value);
        }
        Self::from_map(map)
    }

    pub fn require_corpus(&self) -> Result<&Path> {
        self.corpus
            .as_deref()
            .ok_or_else(|| Error::MissingRequired("corpus".into()))
    }

    /// Effective settings as a flat object with the config file's keys.
    pub fn echo(&self) -> Value {
        let mut m = Map::new();
        let mut put = |k: &str, v: Value| {
            m.insert(k.to_string(), v);
        };
        if let Some(c) = &self.corpus {
            put("corpus", Value::String(c.display().to_string()));
        }
        put("strategy", self.model.strategy.name().into());
        match self.model.strategy {
            Strategy::Convolution { delta } => put("delta", delta.into()),
            Strategy::Kmeans { k, beta } => {
                put("k", k.into());
                put("beta", beta.into());
            }
            Strategy::Window { w } => put("window", w.into()),
        }
        let m_ = &self.model;
        put("dim", m_.dim.into());
        put("layers", m_.layers.into());
        put("heads", m_.heads.into());
        put("ff_mult", m_.ff_mult.into());
        put("frame_anchors", serde_json::to_value(&m_.frame_anchors).expect("anchors"));
        put("event_anchors", serde_json::to_value(&m_.event_anchors).expect("anchors"));
        put("conv_kernel", m_.conv_kernel.into());
        let t = &self.retriever_train;
        put("epochs", t.epochs.into());
        put("batch_size", t.batch_size.into());
        put("lr", t.lr.into());
        put("optimizer", serde_json::to_value(t.optimizer).expect("optimizer"));
        if let Some(c) = t.clip_norm {
            put("clip_norm", c.into());
        }
        put("seed", t.seed.into());
        put("checkpoint_every", t.checkpoint_every.into());
        put("localizer_epochs", self.localizer_train.epochs.into());
        put("localizer_batch_size", self.localizer_train.batch_size.into());
        put("localizer_lr", self.localizer_train.lr.into());
        put("temperature", self.loss.temperature.into());
        put("omega", self.loss.omega.into());
        put("lambda", self.loss.lambda.into());
        put("gamma", self.localizer.gamma.into());
        put("negatives", self.localizer.negatives.into());
        put("negative_pool", self.localizer.negative_pool.into());
        let i = &self.inference;
        put("top_k", i.top_k.into());
        if let Some(l) = i.l_max {
            put("l_max", l.into());
        }
        put("top_n", i.top_n.into());
        put("nms_threshold", i.nms_threshold.into());
        put("max_predictions", i.max_predictions.into());
        put("split", self.split.to_string().into());
        put(
            "index_mode",
            serde_json::to_value(self.index_mode).expect("index mode"),
        );
        Value::Object(m)
    }
}

/// Parses a config file. Blank files are empty configs.
pub fn read_map(path: &Path) -> Result<Map<String, Value>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::ingest(path, e))?;
    if text.trim().is_empty() {
        return Ok(Map::new());
    }
    match serde_json::from_str::<Value>(&text) {
        Ok(Value::Object(m)) => Ok(m),
        Ok(other) => Err(Error::format(path.display().to_string(), "a JSON object", other)),
        Err(e) => Err(Error::format(path.display().to_string(), "a JSON object", e)),
    }
}
