//! The experiment pipeline behind the CLI subcommands: gen, filter, index,
//! train, tune, eval, query, report.
//!
//! Stages talk to each other only through files at the canonical paths in
//! [`ExperimentConfig`], so any completed stage can be rerun — with
//! unchanged inputs every stage rewrites its outputs byte for byte
//! (reports carry no timestamps, all randomness is seeded, map iteration
//! never leaks into file order).

use std::collections::HashMap;
use std::io::Write;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::config::{load_weights, save_weights, ActiveCorpus, ConfigError, ExperimentConfig};
use crate::corpus::{load_corpus, save_corpus, Corpus, CorpusError};
use crate::encoder::{
    corpus_vocab, encode_corpus, load_checkpoint, save_checkpoint, train, CorpusEncodings,
    EncoderError, EncoderParams,
};
use crate::filters::{
    consensus_stage, dedup_bm25, filter_complexity, filter_entity_count, filter_query_image_sim,
    filter_query_text_sim, AnnotatorModel, FilterError, PipelineReport,
    ENTITY_COUNT_DROP_FRAC, IMAGE_SIM_DROP_FRAC, TEXT_SIM_DROP_FRAC,
};
use crate::fusion::{FusionError, FusionWeights};
use crate::index::{
    build_headline_index, bm25_topk, save_dense, save_inverted, DenseIndex, IndexError,
    RankedList,
};
use crate::methods::{build_scorer, tune_score_fusion, Method, MethodContext, MethodError};
use crate::metrics::{
    evaluate, load_reports, save_reports, save_run_file, MethodReport, MetricsError,
};
use crate::synthgen::{generate, resplit, SynthError};

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error("missing {what} at {path}: run `{hint}` first")]
    MissingArtifact { what: &'static str, path: PathBuf, hint: &'static str },
    #[error("query id {0} not present in the corpus")]
    UnknownQueryId(u64),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("corpus error: {0}")]
    Corpus(#[from] CorpusError),
    #[error("generation error: {0}")]
    Synth(#[from] SynthError),
    #[error("filter error: {0}")]
    Filter(#[from] FilterError),
    #[error("index error: {0}")]
    Index(#[from] IndexError),
    #[error("encoder error: {0}")]
    Encoder(#[from] EncoderError),
    #[error("metrics error: {0}")]
    Metrics(#[from] MetricsError),
    #[error("method error: {0}")]
    Method(#[from] MethodError),
    #[error("fusion error: {0}")]
    Fusion(#[from] FusionError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

fn ensure_out_dir(cfg: &ExperimentConfig) -> Result<(), PipelineError> {
    std::fs::create_dir_all(&cfg.out_dir)?;
    Ok(())
}

fn require(path: PathBuf, what: &'static str, hint: &'static str) -> Result<PathBuf, PipelineError> {
    if path.is_file() {
        Ok(path)
    } else {
        Err(PipelineError::MissingArtifact { what, path, hint })
    }
}

/// Loads the corpus the downstream stages operate on (generated or
/// filtered, per `active_corpus`).
pub fn load_active_corpus(cfg: &ExperimentConfig) -> Result<Corpus, PipelineError> {
    let hint = match cfg.active_corpus {
        ActiveCorpus::Generated => "gen",
        ActiveCorpus::Filtered => "filter",
    };
    let records = require(cfg.active_records(), "corpus records", hint)?;
    let embeddings = require(cfg.active_embeddings(), "corpus embeddings", hint)?;
    Ok(load_corpus(&records, &embeddings)?)
}

// ---------------------------------------------------------------------------
// gen

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GenReport {
    pub n_queries: usize,
    pub n_candidates: usize,
    pub n_judgments: usize,
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    pub frac_score1: f64,
    pub frac_score2: f64,
    pub frac_score3: f64,
}

fn gen_report(corpus: &Corpus) -> GenReport {
    let count = |s: u8| corpus.judgments.iter().filter(|j| j.score == s).count();
    let n = corpus.judgments.len();
    let frac = |c: usize| if n == 0 { 0.0 } else { c as f64 / n as f64 };
    let split_count = |s| corpus.queries.iter().filter(|q| q.split == s).count();
    GenReport {
        n_queries: corpus.queries.len(),
        n_candidates: corpus.candidates.len(),
        n_judgments: n,
        n_train: split_count(crate::corpus::Split::Train),
        n_val: split_count(crate::corpus::Split::Val),
        n_test: split_count(crate::corpus::Split::Test),
        frac_score1: frac(count(1)),
        frac_score2: frac(count(2)),
        frac_score3: frac(count(3)),
    }
}

/// Generates the corpus file pair plus a generation report.
pub fn cmd_gen(cfg: &ExperimentConfig) -> Result<GenReport, PipelineError> {
    ensure_out_dir(cfg)?;
    let mut synth = cfg.synth.clone();
    synth.seed = cfg.gen_seed();
    let mut corpus = generate(&synth)?;
    if cfg.resplit {
        let n = synth.n_queries() as f64;
        let frac_train = cfg
            .frac_train
            .unwrap_or(if n == 0.0 { 0.0 } else { synth.n_queries_train as f64 / n });
        let frac_val = cfg
            .frac_val
            .unwrap_or(if n == 0.0 { 0.0 } else { synth.n_queries_val as f64 / n });
        resplit(&mut corpus, cfg.resplit_seed(), frac_train, frac_val)?;
    }
    save_corpus(&corpus, &cfg.generated_records(), &cfg.generated_embeddings())?;
    let report = gen_report(&corpus);
    std::fs::write(
        cfg.gen_report_path(),
        serde_json::to_string_pretty(&report).expect("serialize gen report") + "\n",
    )?;
    Ok(report)
}

// ---------------------------------------------------------------------------
// filter

/// Runs the query-cleaning pipeline in its fixed order, then (optionally)
/// the simulated annotation consensus, and writes the filtered corpus plus
/// a line-delimited stage report.
pub fn cmd_filter(cfg: &ExperimentConfig) -> Result<PipelineReport, PipelineError> {
    ensure_out_dir(cfg)?;
    let records = require(cfg.generated_records(), "corpus records", "gen")?;
    let embeddings = require(cfg.generated_embeddings(), "corpus embeddings", "gen")?;
    let corpus = load_corpus(&records, &embeddings)?;

    let mut report = PipelineReport::default();
    let (corpus, stage) = filter_complexity(corpus)?;
    report.stages.push(stage);
    let (corpus, stage) = filter_entity_count(corpus, ENTITY_COUNT_DROP_FRAC)?;
    report.stages.push(stage);
    let (corpus, stage) = filter_query_image_sim(corpus, IMAGE_SIM_DROP_FRAC)?;
    report.stages.push(stage);
    let (corpus, stage) = filter_query_text_sim(corpus, TEXT_SIM_DROP_FRAC)?;
    report.stages.push(stage);
    let (mut corpus, stage) = dedup_bm25(corpus, cfg.dedup_threshold)?;
    report.stages.push(stage);

    if cfg.consensus {
        let model = AnnotatorModel { seed: cfg.consensus_seed(), ..AnnotatorModel::default() };
        let (filtered, stage, consensus) = consensus_stage(corpus, &model)?;
        corpus = filtered;
        report.stages.push(stage);
        report.consensus = Some(consensus);
    }

    save_corpus(&corpus, &cfg.filtered_records(), &cfg.filtered_embeddings())?;
    let mut out = std::fs::File::create(cfg.filter_report_path())?;
    for stage in &report.stages {
        writeln!(out, "{}", serde_json::to_string(stage).expect("serialize stage"))?;
    }
    if let Some(consensus) = &report.consensus {
        writeln!(out, "{}", serde_json::to_string(consensus).expect("serialize consensus"))?;
    }
    Ok(report)
}

// ---------------------------------------------------------------------------
// index

/// Builds and persists both retrieval indexes over the active corpus.
pub fn cmd_index(cfg: &ExperimentConfig) -> Result<(usize, usize), PipelineError> {
    ensure_out_dir(cfg)?;
    let corpus = load_active_corpus(cfg)?;
    let inverted = build_headline_index(&corpus, cfg.k1, cfg.b)?;
    save_inverted(&inverted, &cfg.inverted_index_path())?;
    let dense = DenseIndex::over_images(&corpus)?;
    save_dense(&dense, &cfg.dense_index_path())?;
    Ok((inverted.n_docs(), dense.len()))
}

// ---------------------------------------------------------------------------
// train

#[derive(Debug, Serialize, Deserialize)]
struct HistoryRow {
    epoch: usize,
    mean_loss: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    val_metric: Option<f64>,
    selected: bool,
}

#[derive(Debug)]
pub struct TrainSummary {
    pub selected_epoch: usize,
    pub epochs: usize,
    pub n_pairs: usize,
    pub n_dropped_pairs: usize,
    pub final_loss: f64,
}

/// Trains the encoder on the active corpus and writes the checkpoint plus
/// a per-epoch history file.
pub fn cmd_train(cfg: &ExperimentConfig) -> Result<TrainSummary, PipelineError> {
    ensure_out_dir(cfg)?;
    let corpus = load_active_corpus(cfg)?;
    let mut train_cfg = cfg.train.clone();
    train_cfg.seed = cfg.train_seed();
    let outcome = train(&corpus, &train_cfg)?;
    save_checkpoint(&outcome.params, &cfg.checkpoint_path())?;

    let mut out = std::fs::File::create(cfg.train_history_path())?;
    for stats in &outcome.history {
        let row = HistoryRow {
            epoch: stats.epoch,
            mean_loss: stats.mean_loss,
            val_metric: stats.val_metric,
            selected: stats.epoch == outcome.selected_epoch,
        };
        writeln!(out, "{}", serde_json::to_string(&row).expect("serialize history"))?;
    }
    Ok(TrainSummary {
        selected_epoch: outcome.selected_epoch,
        epochs: outcome.history.len(),
        n_pairs: outcome.n_pairs,
        n_dropped_pairs: outcome.n_dropped_pairs,
        final_loss: outcome.history.last().map(|s| s.mean_loss).unwrap_or(f64::NAN),
    })
}

/// Loads the trained parameters against the active corpus's vocabulary.
/// Always reads the checkpoint file, never an in-memory copy, so evaluation
/// sees exactly the f32-rounded weights a fresh process would.
fn load_trained(cfg: &ExperimentConfig, corpus: &Corpus) -> Result<EncoderParams, PipelineError> {
    let path = require(cfg.checkpoint_path(), "encoder checkpoint", "train")?;
    Ok(load_checkpoint(&path, corpus_vocab(corpus))?)
}

// ---------------------------------------------------------------------------
// tune

/// Resolves score-fusion weights and records them in the weights file.
/// With `w_image` pinned in the config the value is measured but not
/// searched; otherwise the two-stage grid search runs on the tune split
/// under the distractor protocol.
pub fn cmd_tune(cfg: &ExperimentConfig) -> Result<(FusionWeights, f64), PipelineError> {
    ensure_out_dir(cfg)?;
    let corpus = load_active_corpus(cfg)?;
    let params = load_trained(cfg, &corpus)?;
    let encodings = encode_corpus(&params, &corpus)?;

    let (weights, value) = match cfg.w_image {
        Some(w) => {
            let weights = FusionWeights::new(w);
            let mut ctx = MethodContext::new(&corpus);
            ctx.encodings = Some(&encodings);
            ctx.score_weights = weights;
            let scorer = build_scorer(Method::ScoreFusion, &ctx)?;
            let eval = evaluate(
                scorer.as_ref(),
                &corpus,
                cfg.tune_split,
                crate::metrics::Protocol::Distractor,
                cfg.threads,
                cfg.run_depth,
            )?;
            (weights, crate::metrics::metric_value(&eval.report, cfg.tune_metric))
        }
        None => tune_score_fusion(
            &corpus,
            &encodings,
            cfg.tune_split,
            crate::metrics::Protocol::Distractor,
            cfg.tune_metric,
        )?,
    };
    save_weights(&cfg.weights_path(), weights.w_image, cfg.tune_metric, value)?;
    Ok((weights, value))
}

/// Score-fusion weights for evaluation: the tuned artifact when present,
/// else the configured pin, else an even split.
fn resolve_weights(cfg: &ExperimentConfig) -> Result<FusionWeights, PipelineError> {
    if cfg.weights_path().is_file() {
        let (w, _, _) = load_weights(&cfg.weights_path())?;
        return Ok(FusionWeights::new(w));
    }
    Ok(cfg.w_image.map(FusionWeights::new).unwrap_or(FusionWeights::EVEN))
}

// ---------------------------------------------------------------------------
// eval

/// Evaluates every configured method under every configured protocol on
/// the eval split; writes the report file and one run file per
/// (method, protocol).
pub fn cmd_eval(cfg: &ExperimentConfig) -> Result<Vec<MethodReport>, PipelineError> {
    ensure_out_dir(cfg)?;
    let corpus = load_active_corpus(cfg)?;

    let needs_encoder = cfg.methods.iter().any(|m| m.needs_encodings());
    let encodings: Option<CorpusEncodings> = if needs_encoder {
        let params = load_trained(cfg, &corpus)?;
        Some(encode_corpus(&params, &corpus)?)
    } else {
        None
    };

    let mut ctx = MethodContext::new(&corpus);
    ctx.encodings = encodings.as_ref();
    ctx.score_weights = resolve_weights(cfg)?;
    ctx.first_stage_k = cfg.first_stage_k;
    ctx.seed = cfg.random_method_seed();

    let mut reports = Vec::new();
    for &method in &cfg.methods {
        let scorer = build_scorer(method, &ctx)?;
        for &protocol in &cfg.protocols {
            let eval = evaluate(
                scorer.as_ref(),
                &corpus,
                cfg.eval_split,
                protocol,
                cfg.threads,
                cfg.run_depth,
            )?;
            save_run_file(&eval.runs, &cfg.run_file_path(method, protocol))?;
            reports.push(eval.report);
        }
    }
    save_reports(&reports, &cfg.reports_path())?;
    Ok(reports)
}

// ---------------------------------------------------------------------------
// query

/// Ad-hoc BM25 lookup of a raw token string against the active corpus's
/// headlines.
pub fn query_text(cfg: &ExperimentConfig, text: &str, k: usize) -> Result<RankedList, PipelineError> {
    let corpus = load_active_corpus(cfg)?;
    let tokens: Vec<String> = text.split_whitespace().map(str::to_string).collect();
    let index = build_headline_index(&corpus, cfg.k1, cfg.b)?;
    Ok(bm25_topk(&index, 0, &tokens, k))
}

/// Runs one corpus query through any configured method.
pub fn query_by_id(
    cfg: &ExperimentConfig,
    query_id: u64,
    method: Method,
    k: usize,
) -> Result<RankedList, PipelineError> {
    let corpus = load_active_corpus(cfg)?;
    let query =
        corpus.query(query_id).ok_or(PipelineError::UnknownQueryId(query_id))?.clone();

    let encodings: Option<CorpusEncodings> = if method.needs_encodings() {
        let params = load_trained(cfg, &corpus)?;
        Some(encode_corpus(&params, &corpus)?)
    } else {
        None
    };
    let mut ctx = MethodContext::new(&corpus);
    ctx.encodings = encodings.as_ref();
    ctx.score_weights = resolve_weights(cfg)?;
    ctx.first_stage_k = cfg.first_stage_k;
    ctx.seed = cfg.random_method_seed();
    let scorer = build_scorer(method, &ctx)?;

    let pool: Vec<u64> = corpus.candidates.iter().map(|c| c.id).collect();
    let scores = scorer
        .score_pool(&query, &pool)
        .map_err(|message| MetricsError::Scorer { method: method.name().to_string(), message })?;
    Ok(RankedList::from_scores(query_id, pool.into_iter().zip(scores), k))
}

// ---------------------------------------------------------------------------
// report

/// Structural expectations checkable from a report file alone. Violations
/// are returned as human-readable lines; an empty list means the file
/// passes.
pub fn check_reports(reports: &[MethodReport]) -> Vec<String> {
    let mut violations = Vec::new();

    // The oracle scorer must sit at the ceiling.
    for r in reports {
        if r.method == Method::Oracle.name() && r.ndcg != 1.0 {
            violations.push(format!(
                "oracle NDCG is {} under {} (must be exactly 1)",
                r.ndcg, r.protocol
            ));
        }
    }

    // Every real method must degrade strictly from distractor to full
    // pool. The oracle ranks positives first in any pool and the random
    // floor is pool-agnostic noise, so neither is held to this.
    let mut by_key: HashMap<(&str, crate::metrics::Protocol), &MethodReport> = HashMap::new();
    for r in reports {
        by_key.insert((r.method.as_str(), r.protocol), r);
    }
    let mut methods: Vec<&str> = reports.iter().map(|r| r.method.as_str()).collect();
    methods.sort_unstable();
    methods.dedup();
    methods.retain(|&m| m != Method::Oracle.name() && m != Method::Random.name());
    for method in methods {
        let (Some(d), Some(f)) = (
            by_key.get(&(method, crate::metrics::Protocol::Distractor)),
            by_key.get(&(method, crate::metrics::Protocol::Full)),
        ) else {
            continue;
        };
        for (metric, dv, fv) in [
            ("R@1", d.r_at_1, f.r_at_1),
            ("R@5", d.r_at_5, f.r_at_5),
            ("R@10", d.r_at_10, f.r_at_10),
            ("mAP", d.map, f.map),
            ("NDCG", d.ndcg, f.ndcg),
        ] {
            if fv >= dv {
                violations.push(format!(
                    "{method}: {metric} does not degrade on the full pool ({fv} >= {dv})"
                ));
            }
        }
    }
    violations
}

/// Loads the report file for the `report` subcommand.
pub fn load_report_file(cfg: &ExperimentConfig) -> Result<Vec<MethodReport>, PipelineError> {
    let path = require(cfg.reports_path(), "report file", "eval")?;
    Ok(load_reports(&path)?)
}

// ---------------------------------------------------------------------------

/// Convenience wrapper for tests and the full-pipeline command path:
/// gen -> filter -> index -> train -> tune -> eval against one config.
pub fn run_all(cfg: &ExperimentConfig) -> Result<Vec<MethodReport>, PipelineError> {
    cmd_gen(cfg)?;
    cmd_filter(cfg)?;
    cmd_index(cfg)?;
    cmd_train(cfg)?;
    cmd_tune(cfg)?;
    cmd_eval(cfg)
}

/// Byte content of every artifact the pipeline writes, keyed by file name.
/// Used to assert byte-identical reruns.
pub fn artifact_bytes(cfg: &ExperimentConfig) -> Result<Vec<(String, Vec<u8>)>, PipelineError> {
    let mut paths: Vec<PathBuf> = vec![
        cfg.generated_records(),
        cfg.generated_embeddings(),
        cfg.gen_report_path(),
        cfg.filtered_records(),
        cfg.filtered_embeddings(),
        cfg.filter_report_path(),
        cfg.inverted_index_path(),
        cfg.dense_index_path(),
        cfg.checkpoint_path(),
        cfg.train_history_path(),
        cfg.weights_path(),
        cfg.reports_path(),
    ];
    for &method in &cfg.methods {
        for &protocol in &cfg.protocols {
            paths.push(cfg.run_file_path(method, protocol));
        }
    }
    let mut out = Vec::new();
    for path in paths {
        if path.is_file() {
            let name = path.file_name().expect("file name").to_string_lossy().into_owned();
            out.push((name, std::fs::read(&path)?));
        }
    }
    Ok(out)
}
