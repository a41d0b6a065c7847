//! Plain-text `key=value` experiment configuration.
//!
//! One file drives the whole pipeline; a single `seed` key governs every
//! stochastic component (generation, training, the random baseline), each
//! drawing from its own stage-tagged stream so stages never replay each
//! other's randomness. Unknown keys are errors — silently ignoring a typo'd
//! key would run a different experiment than the one written down.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::corpus::Split;
use crate::encoder::TrainConfig;
use crate::filters::DEFAULT_DEDUP_THRESHOLD;
use crate::index::{DEFAULT_B, DEFAULT_K1};
use crate::methods::{Method, DEFAULT_FIRST_STAGE_K};
use crate::metrics::{MetricKind, Protocol};
use crate::rng::SplitMix64;
use crate::synthgen::SynthConfig;

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("{path}:{line}: expected key=value, got {text:?}")]
    Malformed { path: String, line: usize, text: String },
    #[error("{path}:{line}: unknown key {key:?}")]
    UnknownKey { path: String, line: usize, key: String },
    #[error("{path}:{line}: bad value for {key}: {message}")]
    BadValue { path: String, line: usize, key: String, message: String },
    #[error("cannot read {path}: {source}")]
    Io { path: String, source: std::io::Error },
}

/// Which corpus file pair the downstream stages (index/train/tune/eval)
/// operate on.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ActiveCorpus {
    Generated,
    Filtered,
}

impl FromStr for ActiveCorpus {
    type Err = String;

    fn from_str(s: &str) -> Result<ActiveCorpus, String> {
        match s {
            "generated" => Ok(ActiveCorpus::Generated),
            "filtered" => Ok(ActiveCorpus::Filtered),
            other => Err(format!("expected generated|filtered, got {other:?}")),
        }
    }
}

#[derive(Debug, Clone)]
pub struct ExperimentConfig {
    pub synth: SynthConfig,
    /// Reshuffle split assignment after generation.
    pub resplit: bool,
    pub frac_train: Option<f64>,
    pub frac_val: Option<f64>,

    pub dedup_threshold: f64,
    pub consensus: bool,

    pub k1: f64,
    pub b: f64,

    pub train: TrainConfig,

    pub tune_metric: MetricKind,
    pub tune_split: Split,
    /// Fixed score-fusion image weight; `None` means grid-search it.
    pub w_image: Option<f64>,

    pub eval_split: Split,
    pub protocols: Vec<Protocol>,
    pub methods: Vec<Method>,
    pub first_stage_k: usize,
    pub run_depth: usize,
    pub active_corpus: ActiveCorpus,

    pub seed: u64,
    pub threads: usize,
    pub out_dir: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> ExperimentConfig {
        ExperimentConfig {
            synth: SynthConfig::default(),
            resplit: false,
            frac_train: None,
            frac_val: None,
            dedup_threshold: DEFAULT_DEDUP_THRESHOLD,
            consensus: true,
            k1: DEFAULT_K1,
            b: DEFAULT_B,
            train: TrainConfig::default(),
            tune_metric: MetricKind::Ndcg,
            tune_split: Split::Val,
            w_image: None,
            eval_split: Split::Test,
            protocols: vec![Protocol::Distractor, Protocol::Full],
            methods: Method::ALL.to_vec(),
            first_stage_k: DEFAULT_FIRST_STAGE_K,
            run_depth: 100,
            active_corpus: ActiveCorpus::Generated,
            seed: 0,
            threads: 1,
            out_dir: PathBuf::from("runs"),
        }
    }
}

/// Stage-tagged seed derivation: the global seed plus a stage name yields
/// that stage's private seed, so e.g. generation and parameter init never
/// consume the same stream.
pub fn stage_seed(seed: u64, stage: &str) -> u64 {
    // FNV-1a over the stage name picks the derivation stream.
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &byte in stage.as_bytes() {
        h ^= u64::from(byte);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    SplitMix64::derive(seed, h).next_u64()
}

impl ExperimentConfig {
    pub fn from_file(path: &Path) -> Result<ExperimentConfig, ConfigError> {
        let mut cfg = ExperimentConfig::default();
        cfg.merge_file(path)?;
        Ok(cfg)
    }

    /// Applies every assignment in `path` on top of the current values.
    pub fn merge_file(&mut self, path: &Path) -> Result<(), ConfigError> {
        let display = path.display().to_string();
        let text = std::fs::read_to_string(path)
            .map_err(|source| ConfigError::Io { path: display.clone(), source })?;
        for (idx, raw) in text.lines().enumerate() {
            let line = idx + 1;
            let stripped = match raw.find('#') {
                Some(pos) => &raw[..pos],
                None => raw,
            }
            .trim();
            if stripped.is_empty() {
                continue;
            }
            let Some((key, value)) = stripped.split_once('=') else {
                return Err(ConfigError::Malformed {
                    path: display.clone(),
                    line,
                    text: stripped.to_string(),
                });
            };
            self.set(key.trim(), value.trim()).map_err(|e| match e {
                SetError::Unknown => ConfigError::UnknownKey {
                    path: display.clone(),
                    line,
                    key: key.trim().to_string(),
                },
                SetError::Bad(message) => ConfigError::BadValue {
                    path: display.clone(),
                    line,
                    key: key.trim().to_string(),
                    message,
                },
            })?;
        }
        Ok(())
    }

    /// Applies one assignment. Used by the file loader and by `--set`-style
    /// overrides.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), SetError> {
        match key {
            "n_queries_train" => self.synth.n_queries_train = parse(value)?,
            "n_queries_val" => self.synth.n_queries_val = parse(value)?,
            "n_queries_test" => self.synth.n_queries_test = parse(value)?,
            "candidates_per_query" => self.synth.candidates_per_query = parse(value)?,
            "n_pool" => self.synth.n_pool = parse(value)?,
            "embedding_dim" => self.synth.embedding_dim = parse(value)?,
            "n_entities" => self.synth.n_entities = parse(value)?,
            "n_events" => self.synth.n_events = parse(value)?,
            "vocab_size" => self.synth.vocab_size = parse(value)?,
            "frac_score1" => self.synth.frac_score1 = parse(value)?,
            "frac_score2" => self.synth.frac_score2 = parse(value)?,
            "noise_sigma" => self.synth.noise_sigma = parse(value)?,
            "resplit" => self.resplit = parse_bool(value)?,
            "frac_train" => self.frac_train = Some(parse(value)?),
            "frac_val" => self.frac_val = Some(parse(value)?),
            "dedup_threshold" => self.dedup_threshold = parse(value)?,
            "consensus" => self.consensus = parse_bool(value)?,
            "k1" => self.k1 = parse(value)?,
            "b" => self.b = parse(value)?,
            "epochs" => self.train.epochs = parse(value)?,
            "batch_size" => self.train.batch_size = parse(value)?,
            "lr" => self.train.lr = parse(value)?,
            "d_model" => self.train.d_model = parse(value)?,
            "d_out" => self.train.d_out = parse(value)?,
            "select_metric" => self.train.select_metric = parse(value)?,
            "learn_temperature" => self.train.learn_temperature = parse_bool(value)?,
            "tune_metric" => self.tune_metric = parse(value)?,
            "tune_split" => self.tune_split = parse(value)?,
            "w_image" => {
                let w: f64 = parse(value)?;
                if !(0.0..=1.0).contains(&w) {
                    return Err(SetError::Bad(format!("w_image {w} outside [0, 1]")));
                }
                self.w_image = Some(w);
            }
            "eval_split" => self.eval_split = parse(value)?,
            "protocols" => self.protocols = parse_list(value)?,
            "methods" => {
                self.methods = if value == "all" {
                    Method::ALL.to_vec()
                } else {
                    parse_list(value)?
                }
            }
            "first_stage_k" => self.first_stage_k = parse(value)?,
            "run_depth" => self.run_depth = parse(value)?,
            "active_corpus" => {
                self.active_corpus = value.parse().map_err(SetError::Bad)?;
            }
            "seed" => self.seed = parse(value)?,
            "threads" => self.threads = parse(value)?,
            "out_dir" => self.out_dir = PathBuf::from(value),
            _ => return Err(SetError::Unknown),
        }
        Ok(())
    }

    /// The seeds handed to each stage, all derived from the global seed.
    pub fn gen_seed(&self) -> u64 {
        stage_seed(self.seed, "gen")
    }

    pub fn resplit_seed(&self) -> u64 {
        stage_seed(self.seed, "resplit")
    }

    pub fn consensus_seed(&self) -> u64 {
        stage_seed(self.seed, "consensus")
    }

    pub fn train_seed(&self) -> u64 {
        stage_seed(self.seed, "train")
    }

    pub fn random_method_seed(&self) -> u64 {
        stage_seed(self.seed, "random-method")
    }

    // Canonical artifact paths under the output directory. Stages address
    // each other only through these.

    pub fn generated_records(&self) -> PathBuf {
        self.out_dir.join("corpus.records.jsonl")
    }

    pub fn generated_embeddings(&self) -> PathBuf {
        self.out_dir.join("corpus.embeddings.edf")
    }

    pub fn filtered_records(&self) -> PathBuf {
        self.out_dir.join("filtered.records.jsonl")
    }

    pub fn filtered_embeddings(&self) -> PathBuf {
        self.out_dir.join("filtered.embeddings.edf")
    }

    pub fn active_records(&self) -> PathBuf {
        match self.active_corpus {
            ActiveCorpus::Generated => self.generated_records(),
            ActiveCorpus::Filtered => self.filtered_records(),
        }
    }

    pub fn active_embeddings(&self) -> PathBuf {
        match self.active_corpus {
            ActiveCorpus::Generated => self.generated_embeddings(),
            ActiveCorpus::Filtered => self.filtered_embeddings(),
        }
    }

    pub fn gen_report_path(&self) -> PathBuf {
        self.out_dir.join("gen_report.json")
    }

    pub fn filter_report_path(&self) -> PathBuf {
        self.out_dir.join("filter_report.jsonl")
    }

    pub fn inverted_index_path(&self) -> PathBuf {
        self.out_dir.join("headlines.ivx")
    }

    pub fn dense_index_path(&self) -> PathBuf {
        self.out_dir.join("images.dfx")
    }

    pub fn checkpoint_path(&self) -> PathBuf {
        self.out_dir.join("encoder.ckpt")
    }

    pub fn train_history_path(&self) -> PathBuf {
        self.out_dir.join("train_history.jsonl")
    }

    pub fn weights_path(&self) -> PathBuf {
        self.out_dir.join("weights.kv")
    }

    pub fn reports_path(&self) -> PathBuf {
        self.out_dir.join("reports.jsonl")
    }

    pub fn run_file_path(&self, method: Method, protocol: Protocol) -> PathBuf {
        self.out_dir.join(format!("runs_{method}_{protocol}.txt"))
    }
}

#[derive(Debug)]
pub enum SetError {
    Unknown,
    Bad(String),
}

fn parse<T>(value: &str) -> Result<T, SetError>
where
    T: FromStr,
    T::Err: Display,
{
    value.parse().map_err(|e: T::Err| SetError::Bad(e.to_string()))
}

fn parse_bool(value: &str) -> Result<bool, SetError> {
    match value {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        other => Err(SetError::Bad(format!("expected true|false, got {other:?}"))),
    }
}

fn parse_list<T>(value: &str) -> Result<Vec<T>, SetError>
where
    T: FromStr,
    T::Err: Display,
{
    let items: Vec<T> = value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(parse)
        .collect::<Result<_, _>>()?;
    if items.is_empty() {
        return Err(SetError::Bad("empty list".to_string()));
    }
    Ok(items)
}

/// Writes tuned fusion weights as their own small key=value file, so the
/// tune stage has a durable, restartable artifact.
pub fn save_weights(path: &Path, w_image: f64, metric: MetricKind, value: f64) -> std::io::Result<()> {
    let text = format!("w_image={w_image}\nmetric={metric}\nvalue={value}\n");
    std::fs::write(path, text)
}

pub fn load_weights(path: &Path) -> Result<(f64, String, f64), ConfigError> {
    let display = path.display().to_string();
    let text = std::fs::read_to_string(path)
        .map_err(|source| ConfigError::Io { path: display.clone(), source })?;
    let mut map = BTreeMap::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        let stripped = raw.trim();
        if stripped.is_empty() {
            continue;
        }
        let Some((key, value)) = stripped.split_once('=') else {
            return Err(ConfigError::Malformed {
                path: display.clone(),
                line,
                text: stripped.to_string(),
            });
        };
        map.insert(key.trim().to_string(), value.trim().to_string());
    }
    let get = |key: &str| {
        map.get(key).cloned().ok_or_else(|| ConfigError::BadValue {
            path: display.clone(),
            line: 0,
            key: key.to_string(),
            message: "missing".to_string(),
        })
    };
    let w_image: f64 = get("w_image")?.parse().map_err(|e: std::num::ParseFloatError| {
        ConfigError::BadValue {
            path: display.clone(),
            line: 0,
            key: "w_image".to_string(),
            message: e.to_string(),
        }
    })?;
    let metric = get("metric")?;
    let value: f64 = get("value")?.parse().map_err(|e: std::num::ParseFloatError| {
        ConfigError::BadValue {
            path: display.clone(),
            line: 0,
            key: "value".to_string(),
            message: e.to_string(),
        }
    })?;
    Ok((w_image, metric, value))
}
