//! Query filtering pipeline and the simulated annotation stage.
//!
//! Every filter removes *queries* (together with their judgments); the
//! candidate pool is never touched. Filters are deterministic, preserve the
//! original query order among survivors, and report exact in/out counts per
//! stage.
//!
//! The percentile filters cut `floor(drop_frac * N)` queries of the current
//! corpus, where the fraction is read as an exact decimal (0.15 of 20 means
//! 3, even though `0.15_f64 * 20.0` lands a hair below). Ties on the sort
//! key are broken by removing larger query ids first.
//!
//! The consensus stage replays blind multi-annotator labeling over proposed
//! judgments: a task is accepted only by a round where nobody failed the
//! attention check and all labels agree; unresolved tasks are discarded
//! after `max_rounds`.

use std::collections::{HashMap, HashSet};

use serde::{Deserialize, Serialize};

use crate::corpus::{Corpus, CorpusError, Judgment, QueryId};
use crate::index::{build_inverted, IndexError, DEFAULT_B, DEFAULT_K1};
use crate::rng::SplitMix64;
use crate::vecmath::cosine;

/// Queries below this token count are too simple to keep (boundary
/// inclusive: exactly this many tokens survives).
pub const MIN_QUERY_TOKENS: usize = 10;
/// Fraction of queries removed for having the fewest entities.
pub const ENTITY_COUNT_DROP_FRAC: f64 = 0.20;
/// Fraction removed for the weakest query/source-image similarity.
pub const IMAGE_SIM_DROP_FRAC: f64 = 0.15;
/// Fraction removed for the *strongest* query/source-headline similarity —
/// those queries paraphrase their own answer text.
pub const TEXT_SIM_DROP_FRAC: f64 = 0.10;
/// Near-duplicate threshold for the BM25 dedup stage, as a fraction of the
/// query's self-score. Raw BM25 grows with corpus size through idf, so the
/// cutoff is expressed scale-free: drop a query when its best score against
/// an earlier kept query exceeds `threshold * score(query, itself)`. An
/// exact duplicate reaches ratio 1.0; queries sharing only an event and
/// filler tokens sit far below this default.
pub const DEFAULT_DEDUP_THRESHOLD: f64 = 0.85;

#[derive(Debug, thiserror::Error)]
pub enum FilterError {
    #[error("query {0} has no score-3 judgment to act as its source candidate")]
    MissingSourceCandidate(QueryId),
    #[error("corpus error: {0}")]
    Corpus(#[from] CorpusError),
    #[error("index error: {0}")]
    Index(#[from] IndexError),
}

/// In/out counts for one pipeline stage.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageReport {
    pub stage: String,
    pub n_in: usize,
    pub n_out: usize,
    pub n_removed: usize,
}

impl StageReport {
    fn new(stage: &str, n_in: usize, n_out: usize) -> StageReport {
        StageReport { stage: stage.to_string(), n_in, n_out, n_removed: n_in - n_out }
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct PipelineReport {
    pub stages: Vec<StageReport>,
    pub consensus: Option<ConsensusReport>,
}

/// `floor(frac * n)` with `frac` read as an exact decimal: values within
/// 1e-9 of an integer round to it instead of truncating one short.
pub fn exact_floor_frac(frac: f64, n: usize) -> usize {
    let x = frac * n as f64;
    let r = x.round();
    if (x - r).abs() < 1e-9 {
        r as usize
    } else {
        x.floor() as usize
    }
}

/// Rebuilds the corpus without the given queries (and their judgments).
fn remove_queries(corpus: Corpus, remove: &HashSet<QueryId>) -> Result<Corpus, CorpusError> {
    let Corpus { embedding_dim, queries, candidates, judgments, .. } = corpus;
    let queries = queries.into_iter().filter(|q| !remove.contains(&q.id)).collect();
    let judgments =
        judgments.into_iter().filter(|j| !remove.contains(&j.query_id)).collect();
    Corpus::new(embedding_dim, queries, candidates, judgments)
}

/// Keeps queries with at least [`MIN_QUERY_TOKENS`] tokens. Absolute
/// threshold, so reapplying is a no-op.
pub fn filter_complexity(corpus: Corpus) -> Result<(Corpus, StageReport), FilterError> {
    let n_in = corpus.queries.len();
    let remove: HashSet<QueryId> = corpus
        .queries
        .iter()
        .filter(|q| q.tokens.len() < MIN_QUERY_TOKENS)
        .map(|q| q.id)
        .collect();
    let corpus = remove_queries(corpus, &remove)?;
    let report = StageReport::new("complexity", n_in, corpus.queries.len());
    Ok((corpus, report))
}

/// Removes exactly `floor(drop_frac * N)` queries, picked by a sort key.
/// `ascending` removes the smallest keys; ties fall on larger ids first.
fn percentile_cut(
    corpus: Corpus,
    stage: &str,
    drop_frac: f64,
    ascending: bool,
    key: impl Fn(&Corpus, QueryId) -> Result<f64, FilterError>,
) -> Result<(Corpus, StageReport), FilterError> {
    let n_in = corpus.queries.len();
    let n_drop = exact_floor_frac(drop_frac, n_in);
    let mut keyed: Vec<(f64, QueryId)> = corpus
        .queries
        .iter()
        .map(|q| key(&corpus, q.id).map(|k| (k, q.id)))
        .collect::<Result<_, _>>()?;
    keyed.sort_by(|a, b| {
        let ord = if ascending { a.0.total_cmp(&b.0) } else { b.0.total_cmp(&a.0) };
        ord.then(b.1.cmp(&a.1))
    });
    let remove: HashSet<QueryId> = keyed[..n_drop].iter().map(|&(_, id)| id).collect();
    let corpus = remove_queries(corpus, &remove)?;
    let report = StageReport::new(stage, n_in, corpus.queries.len());
    Ok((corpus, report))
}

/// Drops the `drop_frac` of queries with the fewest entities.
pub fn filter_entity_count(
    corpus: Corpus,
    drop_frac: f64,
) -> Result<(Corpus, StageReport), FilterError> {
    percentile_cut(corpus, "entity_count", drop_frac, true, |c, qid| {
        Ok(c.query(qid).expect("listed query").entities.len() as f64)
    })
}

/// Drops the `drop_frac` of queries whose embedding is least similar to the
/// image of their source candidate (the lowest-id score-3 judgment).
pub fn filter_query_image_sim(
    corpus: Corpus,
    drop_frac: f64,
) -> Result<(Corpus, StageReport), FilterError> {
    percentile_cut(corpus, "query_image_sim", drop_frac, true, |c, qid| {
        let q = c.query(qid).expect("listed query");
        let src = c.source_candidate(qid).ok_or(FilterError::MissingSourceCandidate(qid))?;
        Ok(cosine(&q.embedding, &src.image_embedding))
    })
}

/// Drops the `drop_frac` of queries whose token list is *most* similar to
/// their source candidate's headline under TF-IDF cosine — those queries
/// restate their answer text nearly verbatim. Document frequencies are
/// fitted over all query token lists plus all candidate headlines.
pub fn filter_query_text_sim(
    corpus: Corpus,
    drop_frac: f64,
) -> Result<(Corpus, StageReport), FilterError> {
    // idf(t) = ln((1 + N) / (1 + df)) + 1 over the whole text collection.
    fn doc_terms(tokens: &[String]) -> HashSet<&str> {
        tokens.iter().map(String::as_str).collect()
    }
    fn vectorize<'a>(
        tokens: &'a [String],
        df: &HashMap<&str, usize>,
        n_docs: usize,
    ) -> HashMap<&'a str, f64> {
        let mut tf: HashMap<&str, f64> = HashMap::new();
        for t in tokens {
            *tf.entry(t).or_insert(0.0) += 1.0;
        }
        let mut norm2 = 0.0;
        for (t, w) in tf.iter_mut() {
            let d = df.get(*t).copied().unwrap_or(0) as f64;
            *w *= ((1.0 + n_docs as f64) / (1.0 + d)).ln() + 1.0;
            norm2 += *w * *w;
        }
        if norm2 > 0.0 {
            let inv = 1.0 / norm2.sqrt();
            for w in tf.values_mut() {
                *w *= inv;
            }
        }
        tf
    }
    fn sparse_cos(a: &HashMap<&str, f64>, b: &HashMap<&str, f64>) -> f64 {
        let (small, big) = if a.len() <= b.len() { (a, b) } else { (b, a) };
        small.iter().map(|(t, w)| w * big.get(t).copied().unwrap_or(0.0)).sum()
    }

    let n_docs = corpus.queries.len() + corpus.candidates.len();
    let mut df: HashMap<&str, usize> = HashMap::new();
    for q in &corpus.queries {
        for t in doc_terms(&q.tokens) {
            *df.entry(t).or_insert(0) += 1;
        }
    }
    for c in &corpus.candidates {
        for t in doc_terms(&c.headline_tokens) {
            *df.entry(t).or_insert(0) += 1;
        }
    }

    let mut sims: HashMap<QueryId, f64> = HashMap::new();
    for q in &corpus.queries {
        let src = corpus
            .source_candidate(q.id)
            .ok_or(FilterError::MissingSourceCandidate(q.id))?;
        let qv = vectorize(&q.tokens, &df, n_docs);
        let hv = vectorize(&src.headline_tokens, &df, n_docs);
        sims.insert(q.id, sparse_cos(&qv, &hv));
    }
    percentile_cut(corpus, "query_text_sim", drop_frac, false, move |_, qid| {
        Ok(sims[&qid])
    })
}

/// Greedy near-duplicate removal: queries are scanned in ascending id order
/// and dropped when their best BM25 score against any earlier *kept* query
/// exceeds `threshold` times their self-score. Term statistics come from an
/// index over all query token lists, so a drop cannot change another
/// query's score scale.
pub fn dedup_bm25(
    corpus: Corpus,
    threshold: f64,
) -> Result<(Corpus, StageReport), FilterError> {
    let n_in = corpus.queries.len();
    if n_in == 0 {
        let report = StageReport::new("dedup_bm25", 0, 0);
        return Ok((corpus, report));
    }
    let index = build_inverted(
        corpus.queries.iter().map(|q| (q.id, q.tokens.as_slice())),
        DEFAULT_K1,
        DEFAULT_B,
    )?;
    let mut order: Vec<usize> = (0..corpus.queries.len()).collect();
    order.sort_by_key(|&i| corpus.queries[i].id);
    let mut kept: Vec<QueryId> = Vec::new();
    let mut remove: HashSet<QueryId> = HashSet::new();
    for i in order {
        let q = &corpus.queries[i];
        let best = index
            .score_pool(&q.tokens, &kept)
            .into_iter()
            .fold(f64::NEG_INFINITY, f64::max);
        let self_score = index.score_pool(&q.tokens, &[q.id])[0];
        if self_score > 0.0 && best > threshold * self_score {
            remove.insert(q.id);
        } else {
            kept.push(q.id);
        }
    }
    let corpus = remove_queries(corpus, &remove)?;
    let report = StageReport::new("dedup_bm25", n_in, corpus.queries.len());
    Ok((corpus, report))
}

// ---------------------------------------------------------------------------
// Simulated annotation

pub const DEFAULT_N_ANNOTATORS: usize = 3;
pub const DEFAULT_MAX_ROUNDS: usize = 2;
pub const DEFAULT_P_CORRECT: f64 = 0.97;
pub const DEFAULT_P_ATTENTION_FAIL: f64 = 0.02;

/// Error model for one blind annotator: an attention-check failure voids
/// the label outright; otherwise the true label is reported with
/// `p_correct`, else one of the two wrong grades uniformly.
#[derive(Debug, Clone, PartialEq)]
pub struct AnnotatorModel {
    pub n_annotators: usize,
    pub max_rounds: usize,
    pub p_correct: f64,
    pub p_attention_fail: f64,
    pub seed: u64,
}

impl Default for AnnotatorModel {
    fn default() -> Self {
        AnnotatorModel {
            n_annotators: DEFAULT_N_ANNOTATORS,
            max_rounds: DEFAULT_MAX_ROUNDS,
            p_correct: DEFAULT_P_CORRECT,
            p_attention_fail: DEFAULT_P_ATTENTION_FAIL,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConsensusReport {
    pub n_tasks: usize,
    pub n_accepted: usize,
    pub n_discarded: usize,
    /// Fraction of valid (non-voided) labels, across every round of the
    /// accepted tasks, that agree with the accepted label.
    pub conformity_rate: f64,
}

/// Replays consensus labeling over proposed judgments, whose scores act as
/// the ground truth the annotators try to reproduce. Returns the accepted
/// judgments (scores as agreed by the annotators) in proposal order.
///
/// A round accepts iff no annotator is voided by the attention check and
/// all labels are unanimous; otherwise the task is re-posted until
/// `max_rounds` is exhausted, then discarded.
pub fn consensus(
    proposals: &[Judgment],
    model: &AnnotatorModel,
) -> (Vec<Judgment>, ConsensusReport) {
    assert!(model.n_annotators >= 1 && model.max_rounds >= 1, "degenerate annotator model");
    let mut accepted = Vec::new();
    let mut n_valid_labels = 0usize;
    let mut n_agreeing_labels = 0usize;
    for (task_idx, proposal) in proposals.iter().enumerate() {
        let mut rng = SplitMix64::derive(model.seed, task_idx as u64);
        // (round, label) for every non-voided vote of this task.
        let mut valid_votes: Vec<u8> = Vec::new();
        let mut outcome: Option<u8> = None;
        for _round in 0..model.max_rounds {
            let mut voided = false;
            let mut labels = Vec::with_capacity(model.n_annotators);
            for _ in 0..model.n_annotators {
                if rng.chance(model.p_attention_fail) {
                    voided = true;
                    continue;
                }
                let label = if rng.chance(model.p_correct) {
                    proposal.score
                } else {
                    let wrong: Vec<u8> =
                        (1..=3).filter(|&s| s != proposal.score).collect();
                    *rng.choose(&wrong)
                };
                labels.push(label);
            }
            valid_votes.extend(&labels);
            if !voided && labels.windows(2).all(|w| w[0] == w[1]) {
                outcome = Some(labels[0]);
                break;
            }
        }
        if let Some(label) = outcome {
            accepted.push(Judgment {
                query_id: proposal.query_id,
                candidate_id: proposal.candidate_id,
                score: label,
            });
            n_valid_labels += valid_votes.len();
            n_agreeing_labels += valid_votes.iter().filter(|&&l| l == label).count();
        }
    }
    let report = ConsensusReport {
        n_tasks: proposals.len(),
        n_accepted: accepted.len(),
        n_discarded: proposals.len() - accepted.len(),
        conformity_rate: if n_valid_labels == 0 {
            0.0
        } else {
            n_agreeing_labels as f64 / n_valid_labels as f64
        },
    };
    (accepted, report)
}

/// Applies consensus to a corpus' own judgments and rebuilds it with the
/// accepted ones. Queries left without any judgment are removed.
pub fn consensus_stage(
    corpus: Corpus,
    model: &AnnotatorModel,
) -> Result<(Corpus, StageReport, ConsensusReport), FilterError> {
    let n_in = corpus.queries.len();
    let (accepted, consensus_report) = consensus(&corpus.judgments, model);
    let with_judgments: HashSet<QueryId> = accepted.iter().map(|j| j.query_id).collect();
    let Corpus { embedding_dim, queries, candidates, .. } = corpus;
    let queries = queries.into_iter().filter(|q| with_judgments.contains(&q.id)).collect();
    let corpus = Corpus::new(embedding_dim, queries, candidates, accepted)?;
    let report = StageReport::new("consensus", n_in, corpus.queries.len());
    Ok((corpus, report, consensus_report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::Split;
    use crate::synthgen::{generate, SynthConfig};

    fn test_corpus(n: usize) -> Corpus {
        generate(&SynthConfig {
            n_queries_train: n,
            n_queries_val: 0,
            n_queries_test: 0,
            n_pool: n * 8,
            ..SynthConfig::default()
        })
        .unwrap()
    }

    #[test]
    fn exact_floor_handles_decimal_fractions() {
        // 0.15 * 20 is 2.999… in floating point; the exact answer is 3.
        assert_eq!(exact_floor_frac(0.15, 20), 3);
        assert_eq!(exact_floor_frac(0.20, 10), 2);
        assert_eq!(exact_floor_frac(0.10, 7), 0);
        assert_eq!(exact_floor_frac(0.15, 7), 1);
        assert_eq!(exact_floor_frac(0.0, 100), 0);
        // Brute comparison against integer arithmetic for percent fractions.
        for pct in [10usize, 15, 20, 25, 50] {
            for n in 0..=1000 {
                assert_eq!(
                    exact_floor_frac(pct as f64 / 100.0, n),
                    pct * n / 100,
                    "pct={pct} n={n}"
                );
            }
        }
    }

    #[test]
    fn complexity_filter_is_inclusive_and_idempotent() {
        let mut corpus = test_corpus(30);
        // Shorten some token lists around the boundary.
        for (i, q) in corpus.queries.iter_mut().enumerate() {
            match i % 3 {
                0 => q.tokens.truncate(9),
                1 => q.tokens.truncate(10),
                _ => {}
            }
        }
        let n = corpus.queries.len();
        let (corpus, report) = filter_complexity(corpus).unwrap();
        assert_eq!(report.n_in, n);
        assert_eq!(report.n_removed, n.div_ceil(3));
        assert!(corpus.queries.iter().all(|q| q.tokens.len() >= 10));
        // Exactly-10-token queries survived.
        assert!(corpus.queries.iter().any(|q| q.tokens.len() == 10));
        let n_after = corpus.queries.len();
        let (_, report2) = filter_complexity(corpus).unwrap();
        assert_eq!(report2.n_in, n_after);
        assert_eq!(report2.n_removed, 0);
    }

    #[test]
    fn entity_count_cut_removes_exact_floor_with_id_tiebreak() {
        let corpus = test_corpus(20);
        let before: Vec<(QueryId, usize)> =
            corpus.queries.iter().map(|q| (q.id, q.entities.len())).collect();
        let (filtered, report) = filter_entity_count(corpus, 0.20).unwrap();
        assert_eq!(report.n_removed, 4);
        assert_eq!(filtered.queries.len(), 16);
        // Recompute the expected victims independently.
        let mut expect = before.clone();
        expect.sort_by(|a, b| a.1.cmp(&b.1).then(b.0.cmp(&a.0)));
        let victims: HashSet<QueryId> = expect[..4].iter().map(|&(id, _)| id).collect();
        for q in &filtered.queries {
            assert!(!victims.contains(&q.id));
        }
        // Survivor order is the original order.
        let surviving: Vec<QueryId> = before
            .iter()
            .map(|&(id, _)| id)
            .filter(|id| !victims.contains(id))
            .collect();
        let got: Vec<QueryId> = filtered.queries.iter().map(|q| q.id).collect();
        assert_eq!(got, surviving);
    }

    #[test]
    fn image_sim_cut_drops_the_least_similar() {
        let corpus = test_corpus(40);
        let sims: HashMap<QueryId, f64> = corpus
            .queries
            .iter()
            .map(|q| {
                let src = corpus.source_candidate(q.id).unwrap();
                (q.id, cosine(&q.embedding, &src.image_embedding))
            })
            .collect();
        let (filtered, report) = filter_query_image_sim(corpus, 0.15).unwrap();
        assert_eq!(report.n_removed, 6);
        let kept_min =
            filtered.queries.iter().map(|q| sims[&q.id]).fold(f64::INFINITY, f64::min);
        let removed_max = sims
            .iter()
            .filter(|(id, _)| filtered.query(**id).is_none())
            .map(|(_, &s)| s)
            .fold(f64::NEG_INFINITY, f64::max);
        assert!(removed_max <= kept_min);
    }

    #[test]
    fn text_sim_cut_drops_the_most_similar() {
        let corpus = test_corpus(40);
        let ids: Vec<QueryId> = corpus.queries.iter().map(|q| q.id).collect();
        let (filtered, report) = filter_query_text_sim(corpus, 0.10).unwrap();
        assert_eq!(report.n_removed, 4);
        assert_eq!(filtered.queries.len(), 36);
        // Order preserved.
        let got: Vec<QueryId> = filtered.queries.iter().map(|q| q.id).collect();
        let expect: Vec<QueryId> =
            ids.into_iter().filter(|id| filtered.query(*id).is_some()).collect();
        assert_eq!(got, expect);
    }

    #[test]
    fn sim_filters_require_a_source_candidate() {
        let mut corpus = test_corpus(10);
        // Demote every positive of query 0 so it has no source candidate.
        let judgments = std::mem::take(&mut corpus.judgments)
            .into_iter()
            .map(|mut j| {
                if j.query_id == 0 && j.score == 3 {
                    j.score = 2;
                }
                j
            })
            .collect();
        let corpus =
            Corpus::new(corpus.embedding_dim, corpus.queries, corpus.candidates, judgments)
                .unwrap();
        match filter_query_image_sim(corpus, 0.15) {
            Err(FilterError::MissingSourceCandidate(0)) => {}
            other => panic!("expected MissingSourceCandidate, got {other:?}"),
        }
    }

    #[test]
    fn dedup_drops_exact_duplicates_and_is_idempotent() {
        let mut corpus = test_corpus(20);
        // Clone query 3's token list onto queries 7 and 11.
        let tokens = corpus.queries[3].tokens.clone();
        corpus.queries[7].tokens = tokens.clone();
        corpus.queries[11].tokens = tokens;
        let (filtered, report) = dedup_bm25(corpus, DEFAULT_DEDUP_THRESHOLD).unwrap();
        assert!(report.n_removed >= 2, "duplicates survived: {report:?}");
        assert!(filtered.query(3).is_some(), "the earliest copy must survive");
        assert!(filtered.query(7).is_none());
        assert!(filtered.query(11).is_none());
        let n = filtered.queries.len();
        let (_, report2) = dedup_bm25(filtered, DEFAULT_DEDUP_THRESHOLD).unwrap();
        assert_eq!(report2.n_in, n);
        assert_eq!(report2.n_removed, 0, "dedup must be idempotent");
    }

    #[test]
    fn filters_leave_candidates_untouched() {
        let corpus = test_corpus(20);
        let n_candidates = corpus.candidates.len();
        let (corpus, _) = filter_complexity(corpus).unwrap();
        let (corpus, _) = filter_entity_count(corpus, ENTITY_COUNT_DROP_FRAC).unwrap();
        let (corpus, _) = filter_query_image_sim(corpus, IMAGE_SIM_DROP_FRAC).unwrap();
        let (corpus, _) = filter_query_text_sim(corpus, TEXT_SIM_DROP_FRAC).unwrap();
        let (corpus, _) = dedup_bm25(corpus, DEFAULT_DEDUP_THRESHOLD).unwrap();
        assert_eq!(corpus.candidates.len(), n_candidates);
        corpus.validate().unwrap();
        assert!(!corpus.queries_in(Split::Train).is_empty());
    }

    #[test]
    fn perfect_annotators_accept_everything_first_round() {
        let corpus = test_corpus(10);
        let model = AnnotatorModel { p_correct: 1.0, p_attention_fail: 0.0, ..Default::default() };
        let (accepted, report) = consensus(&corpus.judgments, &model);
        assert_eq!(accepted.len(), corpus.judgments.len());
        assert_eq!(report.n_discarded, 0);
        assert_eq!(report.conformity_rate, 1.0);
        for (a, p) in accepted.iter().zip(&corpus.judgments) {
            assert_eq!(a, p);
        }
    }

    #[test]
    fn inattentive_annotators_discard_everything() {
        let corpus = test_corpus(5);
        let model = AnnotatorModel { p_attention_fail: 1.0, ..Default::default() };
        let (accepted, report) = consensus(&corpus.judgments, &model);
        assert!(accepted.is_empty());
        assert_eq!(report.n_discarded, corpus.judgments.len());
    }

    #[test]
    fn consensus_is_deterministic_per_seed() {
        let corpus = test_corpus(15);
        let model = AnnotatorModel::default();
        let (a, ra) = consensus(&corpus.judgments, &model);
        let (b, rb) = consensus(&corpus.judgments, &model);
        assert_eq!(a, b);
        assert_eq!(ra, rb);
        let (c, _) = consensus(&corpus.judgments, &AnnotatorModel { seed: 1, ..model });
        assert!(a.len() != c.len() || a != c || corpus.judgments.len() < 50);
    }

    #[test]
    fn default_model_conformity_clears_the_bar() {
        // Monte-Carlo over enough tasks for the rate to stabilize.
        let corpus = test_corpus(80);
        let (accepted, report) = consensus(&corpus.judgments, &AnnotatorModel::default());
        assert_eq!(report.n_tasks, 640);
        // Acceptance should be nearly total under the default error rates.
        assert!(report.n_accepted as f64 > 0.9 * report.n_tasks as f64, "{report:?}");
        assert!(
            report.conformity_rate > 0.915,
            "conformity {} at or below the floor",
            report.conformity_rate
        );
        assert!(report.conformity_rate < 1.0);
        // Accepted labels overwhelmingly match the proposals.
        let truth: HashMap<(QueryId, u64), u8> = corpus
            .judgments
            .iter()
            .map(|j| ((j.query_id, j.candidate_id), j.score))
            .collect();
        let correct = accepted
            .iter()
            .filter(|j| truth[&(j.query_id, j.candidate_id)] == j.score)
            .count();
        assert!(correct as f64 / accepted.len() as f64 > 0.99);
    }

    #[test]
    fn consensus_stage_drops_queries_left_without_judgments() {
        let corpus = test_corpus(20);
        let model = AnnotatorModel { p_attention_fail: 0.35, ..Default::default() };
        let (filtered, stage, report) = consensus_stage(corpus, &model).unwrap();
        assert!(report.n_discarded > 0);
        filtered.validate().unwrap();
        assert_eq!(stage.n_in, 20);
        for q in &filtered.queries {
            assert!(!filtered.judged(q.id).is_empty());
        }
    }
}
