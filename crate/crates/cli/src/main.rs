//! `vcmr`: generate or ingest a feature corpus, train the retriever and the
//! localizer, build the index, run inference, evaluate and benchmark.

mod artifacts;
mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use vcmr_core::config::RunConfig;
use vcmr_core::{Error, Execution, Result};

#[derive(Parser, Debug)]
#[command(name = "vcmr", version, about = "Event-aware video corpus moment retrieval")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct Common {
    /// Output directory for every artifact of this run.
    #[arg(long, default_value = "out")]
    pub out: PathBuf,
    /// Config file: one JSON object of settings.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override one config key, e.g. `--set epochs=50`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", value_parser = parse_pair)]
    pub overrides: Vec<(String, String)>,
    /// Shorthand for `--set corpus=PATH`.
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    /// Shorthand for `--set strategy=NAME`.
    #[arg(long)]
    pub strategy: Option<String>,
    #[arg(long)]
    pub delta: Option<f64>,
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long)]
    pub window: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub split: Option<String>,
    /// Run every data-parallel stage on the calling thread.
    #[arg(long)]
    pub sequential: bool,
}

impl Common {
    /// File values, then `--set`, then the typed shorthands.
    pub fn run_config(&self) -> Result<RunConfig> {
        let mut overrides = self.overrides.clone();
        let mut put = |k: &str, v: Option<String>| {
            if let Some(v) = v {
                overrides.push((k.to_string(), v));
            }
        };
        put("corpus", self.corpus.as_ref().map(|p| quoted(&p.display().to_string())));
        put("strategy", self.strategy.as_deref().map(quoted));
        put("delta", self.delta.map(|v| v.to_string()));
        put("k", self.k.map(|v| v.to_string()));
        put("window", self.window.map(|v| v.to_string()));
        put("seed", self.seed.map(|v| v.to_string()));
        put("split", self.split.as_deref().map(quoted));
        RunConfig::load(self.config.as_deref(), &overrides)
    }

    pub fn exec(&self) -> Execution {
        if self.sequential {
            Execution::Sequential
        } else {
            Execution::Parallel
        }
    }
}

fn quoted(s: &str) -> String {
    serde_json::Value::String(s.to_string()).to_string()
}

fn parse_pair(s: &str) -> std::result::Result<(String, String), String> {
    let (k, v) = s
        .split_once('=')
        .ok_or_else(|| format!("expected KEY=VALUE, found `{s}`"))?;
    Ok((k.trim().to_string(), v.to_string()))
}

#[derive(Args, Debug)]
pub struct GenArgs {
    #[arg(long, default_value_t = 8)]
    pub videos: usize,
    #[arg(long, default_value_t = 16)]
    pub frames: usize,
    #[arg(long, default_value_t = 32)]
    pub dim: usize,
    #[arg(long, default_value_t = 2)]
    pub events: usize,
    #[arg(long, default_value_t = 4)]
    pub queries: usize,
    #[arg(long, default_value_t = 0)]
    pub val_queries: usize,
    #[arg(long, default_value_t = 0.1)]
    pub noise: f64,
    #[arg(long, default_value_t = 4)]
    pub query_len: usize,
    #[arg(long)]
    pub subtitles: bool,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a block-structured synthetic corpus to `<out>/corpus`.
    Gen {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        gen: GenArgs,
    },
    /// Load and validate the configured corpus and print its summary.
    Ingest {
        #[command(flatten)]
        common: Common,
    },
    /// Train the retriever into `<out>/retriever`.
    TrainRetriever {
        #[command(flatten)]
        common: Common,
    },
    /// Train the localizer into `<out>/localizer` using the trained retriever's negatives.
    TrainLocalizer {
        #[command(flatten)]
        common: Common,
    },
    /// Encode the corpus and dump the index to `<out>/index`.
    BuildIndex {
        #[command(flatten)]
        common: Common,
    },
    /// Rank videos for every query of the split into `<out>/retrieval.jsonl`.
    Retrieve {
        #[command(flatten)]
        common: Common,
    },
    /// Single-video moment retrieval into `<out>/svmr.jsonl`.
    Localize {
        #[command(flatten)]
        common: Common,
    },
    /// Corpus moment retrieval into `<out>/vcmr.jsonl`.
    Vcmr {
        #[command(flatten)]
        common: Common,
    },
    /// Score the prediction dumps present in `<out>` against the split.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Also report the event-oracle overlap of the configured strategy.
        #[arg(long)]
        oracle: bool,
    },
    /// Event-mode against frame-mode retrieval latency and memory.
    Bench {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 20)]
        repetitions: usize,
        /// Scan the index with the data-parallel path instead of one thread.
        #[arg(long)]
        parallel: bool,
    },
    /// Finite-difference check of every training loss.
    Gradcheck {
        #[command(flatten)]
        common: Common,
        /// Seed of the small model and corpus the losses are checked on.
        #[arg(long = "suite-seed", default_value_t = vcmr_core::gradsuite::SUITE_SEED)]
        suite_seed: u64,
    },
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Gen { common, gen } => commands::gen(&common, &gen),
        Command::Ingest { common } => commands::ingest(&common),
        Command::TrainRetriever { common } => commands::train_retriever(&common),
        Command::TrainLocalizer { common } => commands::train_localizer(&common),
        Command::BuildIndex { common } => commands::build_index(&common),
        Command::Retrieve { common } => commands::retrieve(&common),
        Command::Localize { common } => commands::localize(&common),
        Command::Vcmr { common } => commands::vcmr(&common),
        Command::Eval { common, oracle } => commands::eval(&common, oracle),
        Command::Bench {
            common,
            repetitions,
            parallel,
        } => commands::bench(&common, repetitions, parallel),
        Command::Gradcheck { common, suite_seed } => commands::gradcheck(&common, suite_seed),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("VCMR_LOG", "warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let msg = e.render().to_string();
            let first = msg.lines().next().unwrap_or_default().trim_start_matches("error: ");
            eprintln!("error kind=UsageError msg={}", quoted(first));
            return ExitCode::from(2);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", error_line(&e));
            ExitCode::FAILURE
        }
    }
}

/// `error kind=<Kind> msg=<JSON string>` on one line.
pub fn error_line(e: &Error) -> String {
    format!("error kind={} msg={}", e.kind(), quoted(&e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use vcmr_core::events::Strategy;

    fn common(args: &[&str]) -> Common {
        let mut argv = vec!["vcmr", "ingest"];
        argv.extend_from_slice(args);
        match Cli::try_parse_from(argv).unwrap().command {
            Command::Ingest { common } => common,
            _ => unreachable!(),
        }
    }

    #[test]
    fn typed_flag_beats_file_value() {
        let dir = tempfile::tempdir().unwrap();
        let file = dir.path().join("run.json");
        std::fs::write(&file, r#"{"strategy": "window", "window": 5}"#).unwrap();
        let f = file.to_str().unwrap();
        let cfg = common(&["--config", f, "--window", "4"]).run_config().unwrap();
        assert_eq!(cfg.model.strategy, Strategy::Window { w: 4 });
        let cfg = common(&["--config", f]).run_config().unwrap();
        assert_eq!(cfg.model.strategy, Strategy::Window { w: 5 });
    }

    #[test]
    fn set_overrides_file_and_parses_json() {
        let cfg = common(&["--set", "epochs=7", "--set", "split=val", "--set", "frame_anchors=[2,\"all\"]"])
            .run_config()
            .unwrap();
        assert_eq!(cfg.retriever_train.epochs, 7);
        assert_eq!(cfg.split, vcmr_core::corpus::Split::Val);
        assert_eq!(cfg.model.frame_anchors.len(), 2);
    }

    #[test]
    fn malformed_pair_is_rejected_by_the_parser() {
        assert!(Cli::try_parse_from(["vcmr", "ingest", "--set", "epochs"]).is_err());
    }

    #[test]
    fn error_line_is_single_line_and_quoted() {
        let line = error_line(&Error::Argument("two\nlines".into()));
        assert_eq!(line.lines().count(), 1);
        assert!(line.starts_with("error kind=ArgumentError msg=\""));
    }
}
