//! Rank metrics over graded judgments, and the evaluation harness that maps
//! a scoring method over a query split under a candidate-pool protocol.
//!
//! Graded scores are 1..3. Recall@k and mAP binarize (only score 3 counts as
//! a positive); NDCG uses gain `score - 1`, so score-1 candidates and
//! unjudged pool candidates contribute nothing. Queries without positives
//! are excluded from Recall/mAP means; queries whose judged gains are all
//! zero are excluded from the NDCG mean. Exclusions are counted, never
//! silently folded in.
//!
//! Two pool protocols:
//! * `distractor` — each query is ranked against the union of all judged
//!   candidates of the evaluated split;
//! * `full` — each query is ranked against the entire candidate pool,
//!   including unjudged soft negatives.
//!
//! Aggregation uses a pairwise summation over per-query values in query-id
//! order, so reported means are independent of how scoring was threaded.

use std::collections::{BTreeSet, HashMap};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::corpus::{binarize, CandidateId, Corpus, Query, QueryId, Split};
use crate::index::RankedList;
use crate::vecmath::pairwise_sum;

#[derive(Debug, thiserror::Error)]
pub enum MetricsError {
    #[error("no queries in split {0}")]
    EmptySplit(Split),
    #[error("scorer {method}: {message}")]
    Scorer { method: String, message: String },
    #[error("malformed report line {line}: {message}")]
    MalformedReport { line: usize, message: String },
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

/// Judged (candidate, score) pairs for one query.
pub type JudgedMap = HashMap<CandidateId, u8>;

#[derive(Debug, Clone, Default)]
pub struct Qrels {
    by_query: HashMap<QueryId, JudgedMap>,
}

impl Qrels {
    pub fn from_corpus(corpus: &Corpus) -> Qrels {
        let mut by_query: HashMap<QueryId, JudgedMap> = HashMap::new();
        for j in &corpus.judgments {
            by_query.entry(j.query_id).or_default().insert(j.candidate_id, j.score);
        }
        Qrels { by_query }
    }

    pub fn insert(&mut self, query_id: QueryId, candidate_id: CandidateId, score: u8) {
        self.by_query.entry(query_id).or_default().insert(candidate_id, score);
    }

    pub fn judged(&self, query_id: QueryId) -> Option<&JudgedMap> {
        self.by_query.get(&query_id)
    }

    pub fn n_positives(&self, query_id: QueryId) -> usize {
        self.by_query
            .get(&query_id)
            .map_or(0, |m| m.values().filter(|&&s| binarize(s) == 1).count())
    }

    pub fn query_ids(&self) -> Vec<QueryId> {
        let mut ids: Vec<QueryId> = self.by_query.keys().copied().collect();
        ids.sort_unstable();
        ids
    }
}

/// Fraction of the query's positives found in the top `k`. `None` when the
/// query has no positive at all.
pub fn recall_at_k(ranking: &[(CandidateId, f64)], judged: &JudgedMap, k: usize) -> Option<f64> {
    let n_pos = judged.values().filter(|&&s| binarize(s) == 1).count();
    if n_pos == 0 {
        return None;
    }
    let hits = ranking
        .iter()
        .take(k)
        .filter(|(id, _)| judged.get(id).is_some_and(|&s| binarize(s) == 1))
        .count();
    Some(hits as f64 / n_pos as f64)
}

/// Average precision over the binarized judgments: mean of Precision@n over
/// the ranks n holding positives. Assumes the ranking contains every judged
/// candidate (both protocols guarantee it). `None` without positives.
pub fn average_precision(ranking: &[(CandidateId, f64)], judged: &JudgedMap) -> Option<f64> {
    let n_pos = judged.values().filter(|&&s| binarize(s) == 1).count();
    if n_pos == 0 {
        return None;
    }
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (rank0, (id, _)) in ranking.iter().enumerate() {
        if judged.get(id).is_some_and(|&s| binarize(s) == 1) {
            hits += 1;
            sum += hits as f64 / (rank0 + 1) as f64;
        }
    }
    Some(sum / n_pos as f64)
}

fn gain(score: u8) -> f64 {
    (score - 1) as f64
}

/// NDCG with gain `score - 1` and discount `log2(1 + rank)`, rank 1-based.
/// Unjudged candidates in the ranking carry zero gain. The ideal ranking
/// orders *all* judged candidates by descending score, so a truncated or
/// incomplete ranking is penalized rather than renormalized away. `None`
/// when the ideal gain is zero (all judgments score 1).
pub fn ndcg(ranking: &[(CandidateId, f64)], judged: &JudgedMap) -> Option<f64> {
    let mut ideal_gains: Vec<f64> = judged.values().map(|&s| gain(s)).collect();
    ideal_gains.sort_unstable_by(|a, b| b.total_cmp(a));
    let idcg: f64 = ideal_gains
        .iter()
        .enumerate()
        .map(|(rank0, g)| g / ((rank0 + 2) as f64).log2())
        .sum();
    if idcg == 0.0 {
        return None;
    }
    let dcg: f64 = ranking
        .iter()
        .enumerate()
        .map(|(rank0, (id, _))| {
            let g = judged.get(id).map_or(0.0, |&s| gain(s));
            g / ((rank0 + 2) as f64).log2()
        })
        .sum();
    Some(dcg / idcg)
}

/// Best achievable Recall@k given per-query positive counts: the mean of
/// `min(k, +q) / +q` over queries with at least one positive.
pub fn upper_bound_recall(qrels: &Qrels, k: usize) -> f64 {
    let mut per_query = Vec::new();
    for qid in qrels.query_ids() {
        let n_pos = qrels.n_positives(qid);
        if n_pos > 0 {
            per_query.push(k.min(n_pos) as f64 / n_pos as f64);
        }
    }
    if per_query.is_empty() {
        return 0.0;
    }
    pairwise_sum(&per_query) / per_query.len() as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Protocol {
    Distractor,
    Full,
}

impl std::fmt::Display for Protocol {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Protocol::Distractor => write!(f, "distractor"),
            Protocol::Full => write!(f, "full"),
        }
    }
}

impl std::str::FromStr for Protocol {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "distractor" => Ok(Protocol::Distractor),
            "full" => Ok(Protocol::Full),
            other => Err(format!("unknown protocol {other:?} (want distractor|full)")),
        }
    }
}

/// Which metric an optimization step targets (weight tuning, checkpoint
/// selection).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MetricKind {
    RecallAt(usize),
    Map,
    Ndcg,
}

impl std::str::FromStr for MetricKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "map" => Ok(MetricKind::Map),
            "ndcg" => Ok(MetricKind::Ndcg),
            _ => {
                if let Some(k) = s.strip_prefix("r@") {
                    k.parse::<usize>()
                        .map(MetricKind::RecallAt)
                        .map_err(|e| format!("bad recall cutoff in {s:?}: {e}"))
                } else {
                    Err(format!("unknown metric {s:?} (want r@K|map|ndcg)"))
                }
            }
        }
    }
}

impl std::fmt::Display for MetricKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            MetricKind::RecallAt(k) => write!(f, "r@{k}"),
            MetricKind::Map => write!(f, "map"),
            MetricKind::Ndcg => write!(f, "ndcg"),
        }
    }
}

/// A retrieval method under evaluation: scores an aligned pool of candidate
/// ids for one query. Implementations must be pure per query so threading
/// cannot change results.
pub trait CandidateScorer: Sync {
    fn name(&self) -> &str;
    fn score_pool(&self, query: &Query, pool: &[CandidateId]) -> Result<Vec<f64>, String>;
}

/// Aggregated metrics for one (method, protocol) evaluation.
///
/// `runtime_ms` is informational and deliberately excluded from the
/// serialized record (`#[serde(skip)]`): report files must be byte-identical
/// across reruns of an unchanged pipeline.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct MethodReport {
    pub method: String,
    pub protocol: Protocol,
    pub split: Split,
    pub r_at_1: f64,
    pub r_at_5: f64,
    pub r_at_10: f64,
    pub map: f64,
    pub ndcg: f64,
    pub n_queries: usize,
    pub excluded_no_positives: usize,
    pub excluded_zero_ideal_gain: usize,
    #[serde(skip)]
    pub runtime_ms: u64,
}

/// The candidate pool a protocol ranks against, ascending ids.
pub fn protocol_pool(corpus: &Corpus, split: Split, protocol: Protocol) -> Vec<CandidateId> {
    match protocol {
        Protocol::Full => {
            let mut ids: Vec<CandidateId> = corpus.candidates.iter().map(|c| c.id).collect();
            ids.sort_unstable();
            ids
        }
        Protocol::Distractor => {
            let mut set = BTreeSet::new();
            for q in corpus.queries_in(split) {
                for &(cid, _) in corpus.judged(q.id) {
                    set.insert(cid);
                }
            }
            set.into_iter().collect()
        }
    }
}

/// Full ranking of a scored pool under the shared order (score descending,
/// id ascending).
pub fn rank_pool(pool: &[CandidateId], scores: &[f64]) -> Vec<(CandidateId, f64)> {
    debug_assert_eq!(pool.len(), scores.len());
    let mut ranking: Vec<(CandidateId, f64)> =
        pool.iter().copied().zip(scores.iter().copied()).collect();
    ranking.sort_unstable_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    ranking
}

struct PerQuery {
    r1: Option<f64>,
    r5: Option<f64>,
    r10: Option<f64>,
    ap: Option<f64>,
    ndcg: Option<f64>,
    top: RankedList,
}

fn eval_one(query: &Query, ranking: Vec<(CandidateId, f64)>, judged: &JudgedMap, run_depth: usize) -> PerQuery {
    PerQuery {
        r1: recall_at_k(&ranking, judged, 1),
        r5: recall_at_k(&ranking, judged, 5),
        r10: recall_at_k(&ranking, judged, 10),
        ap: average_precision(&ranking, judged),
        ndcg: ndcg(&ranking, judged),
        top: RankedList {
            query_id: query.id,
            entries: ranking.into_iter().take(run_depth).collect(),
        },
    }
}

fn mean_of(values: &[Option<f64>]) -> (f64, usize) {
    let present: Vec<f64> = values.iter().filter_map(|v| *v).collect();
    let excluded = values.len() - present.len();
    let mean = if present.is_empty() { 0.0 } else { pairwise_sum(&present) / present.len() as f64 };
    (mean, excluded)
}

pub struct Evaluation {
    pub report: MethodReport,
    /// Top of each query's ranking, in query-id order, for run files.
    pub runs: Vec<RankedList>,
}

/// Evaluates a scorer over the queries of `split` under `protocol`.
/// `threads <= 1` scores inline; any other value fans per-query scoring out
/// over a local pool. Results are identical either way.
pub fn evaluate(
    scorer: &dyn CandidateScorer,
    corpus: &Corpus,
    split: Split,
    protocol: Protocol,
    threads: usize,
    run_depth: usize,
) -> Result<Evaluation, MetricsError> {
    let started = Instant::now();
    let mut queries = corpus.queries_in(split);
    queries.sort_by_key(|q| q.id);
    if queries.is_empty() {
        return Err(MetricsError::EmptySplit(split));
    }
    let pool = protocol_pool(corpus, split, protocol);
    let qrels = Qrels::from_corpus(corpus);
    let empty = JudgedMap::new();

    let score_one = |q: &&Query| -> Result<PerQuery, MetricsError> {
        let scores = scorer.score_pool(q, &pool).map_err(|message| MetricsError::Scorer {
            method: scorer.name().to_string(),
            message,
        })?;
        let judged = qrels.judged(q.id).unwrap_or(&empty);
        Ok(eval_one(q, rank_pool(&pool, &scores), judged, run_depth))
    };

    let per_query: Vec<PerQuery> = if threads <= 1 {
        queries.iter().map(score_one).collect::<Result<_, _>>()?
    } else {
        use rayon::prelude::*;
        let pool_threads = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .map_err(|e| MetricsError::Scorer {
                method: scorer.name().to_string(),
                message: format!("thread pool: {e}"),
            })?;
        pool_threads.install(|| queries.par_iter().map(score_one).collect::<Result<_, _>>())?
    };

    let (r1, ex1) = mean_of(&per_query.iter().map(|p| p.r1).collect::<Vec<_>>());
    let (r5, _) = mean_of(&per_query.iter().map(|p| p.r5).collect::<Vec<_>>());
    let (r10, _) = mean_of(&per_query.iter().map(|p| p.r10).collect::<Vec<_>>());
    let (map, _) = mean_of(&per_query.iter().map(|p| p.ap).collect::<Vec<_>>());
    let (ndcg_mean, ex_ndcg) = mean_of(&per_query.iter().map(|p| p.ndcg).collect::<Vec<_>>());

    let report = MethodReport {
        method: scorer.name().to_string(),
        protocol,
        split,
        r_at_1: r1,
        r_at_5: r5,
        r_at_10: r10,
        map,
        ndcg: ndcg_mean,
        n_queries: queries.len(),
        excluded_no_positives: ex1,
        excluded_zero_ideal_gain: ex_ndcg,
        runtime_ms: started.elapsed().as_millis() as u64,
    };
    Ok(Evaluation { report, runs: per_query.into_iter().map(|p| p.top).collect() })
}

/// Pulls one metric out of a report, as a fraction in [0, 1].
pub fn metric_value(report: &MethodReport, kind: MetricKind) -> f64 {
    match kind {
        MetricKind::RecallAt(1) => report.r_at_1,
        MetricKind::RecallAt(5) => report.r_at_5,
        MetricKind::RecallAt(10) => report.r_at_10,
        MetricKind::RecallAt(k) => panic!("recall cutoff {k} not tracked by reports"),
        MetricKind::Map => report.map,
        MetricKind::Ndcg => report.ndcg,
    }
}

// ---------------------------------------------------------------------------
// Report and run-file IO

pub fn save_reports(reports: &[MethodReport], path: &Path) -> Result<(), MetricsError> {
    let mut w = BufWriter::new(File::create(path)?);
    for r in reports {
        writeln!(w, "{}", serde_json::to_string(r).expect("serialize report"))?;
    }
    w.flush()?;
    Ok(())
}

pub fn load_reports(path: &Path) -> Result<Vec<MethodReport>, MetricsError> {
    let r = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (idx, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rep: MethodReport =
            serde_json::from_str(&line).map_err(|e| MetricsError::MalformedReport {
                line: idx + 1,
                message: e.to_string(),
            })?;
        out.push(rep);
    }
    Ok(out)
}

/// Fixed-width table over the shared metric columns, values scaled to
/// percentages with one decimal.
pub fn format_table(reports: &[MethodReport]) -> String {
    let mut out = String::new();
    out.push_str(&format!(
        "{:<24} {:<10} {:<6} {:>6} {:>6} {:>6} {:>6} {:>6}\n",
        "method", "protocol", "split", "R@1", "R@5", "R@10", "mAP", "NDCG"
    ));
    for r in reports {
        out.push_str(&format!(
            "{:<24} {:<10} {:<6} {:>6.1} {:>6.1} {:>6.1} {:>6.1} {:>6.1}\n",
            r.method,
            r.protocol.to_string(),
            r.split.to_string(),
            r.r_at_1 * 100.0,
            r.r_at_5 * 100.0,
            r.r_at_10 * 100.0,
            r.map * 100.0,
            r.ndcg * 100.0,
        ));
    }
    out
}

/// Plain-text run file: `query_id candidate_id rank score`, rank 1-based.
pub fn save_run_file(runs: &[RankedList], path: &Path) -> Result<(), MetricsError> {
    let mut w = BufWriter::new(File::create(path)?);
    for run in runs {
        for (rank0, (cid, score)) in run.entries.iter().enumerate() {
            writeln!(w, "{} {} {} {}", run.query_id, cid, rank0 + 1, score)?;
        }
    }
    w.flush()?;
    Ok(())
}
