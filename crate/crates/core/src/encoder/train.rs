//! Contrastive training over (query, positive-candidate) pairs with
//! validation-driven checkpoint selection.
//!
//! Pairs are every score-3 judgment of the train split. Each epoch
//! reshuffles them with a seed derived from (config seed, epoch) and packs
//! batches greedily; a pair whose candidate already sits in the current
//! batch is deferred to the next one, since duplicate candidates would make
//! the in-batch targets ill-posed. Pairs that end up alone (a batch needs
//! at least two) are dropped and counted.
//!
//! After every epoch the fused tower is evaluated on the validation split
//! under the distractor protocol, and the parameters with the best value of
//! the selection metric are kept (earliest epoch wins ties). Without a
//! validation split the final epoch is selected.

use std::collections::{HashMap, HashSet, VecDeque};

use crate::corpus::{CandidateId, Corpus, Query, Split};
use crate::metrics::{
    evaluate, metric_value, CandidateScorer, MetricKind, Protocol,
};
use crate::rng::SplitMix64;

use super::grad::{batch_backward, sgd_step, EncoderGrads, TrainPair};
use super::linalg::dot;
use super::params::{corpus_vocab, EncoderParams};
use super::EncoderError;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub d_model: usize,
    pub d_out: usize,
    pub seed: u64,
    /// Metric used to pick the checkpoint on the validation split.
    pub select_metric: MetricKind,
    pub learn_temperature: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 6,
            batch_size: 16,
            lr: 5e-5,
            d_model: 32,
            d_out: 32,
            seed: 0,
            select_metric: MetricKind::Ndcg,
            learn_temperature: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochStats {
    /// 1-based.
    pub epoch: usize,
    pub mean_loss: f64,
    /// Selection metric on the validation split; `None` without one.
    pub val_metric: Option<f64>,
}

pub struct TrainOutcome {
    /// Parameters of the selected epoch.
    pub params: EncoderParams,
    pub history: Vec<EpochStats>,
    /// 1-based epoch whose parameters were kept.
    pub selected_epoch: usize,
    pub n_pairs: usize,
    pub n_dropped_pairs: usize,
}

/// Scores a fixed candidate pool against the fused tower; candidates are
/// encoded once up front.
struct FusedValScorer<'a> {
    params: &'a EncoderParams,
    fused: HashMap<CandidateId, Vec<f64>>,
}

impl<'a> FusedValScorer<'a> {
    fn new(
        params: &'a EncoderParams,
        corpus: &Corpus,
        pool: &[CandidateId],
    ) -> Result<Self, EncoderError> {
        let mut fused = HashMap::with_capacity(pool.len());
        for &cid in pool {
            let c = corpus.candidate(cid).expect("pool candidate exists");
            fused.insert(cid, params.encode_candidate(&c.image_embedding, &c.headline_tokens)?);
        }
        Ok(FusedValScorer { params, fused })
    }
}

impl CandidateScorer for FusedValScorer<'_> {
    fn name(&self) -> &str {
        "fused_val"
    }

    fn score_pool(&self, query: &Query, pool: &[CandidateId]) -> Result<Vec<f64>, String> {
        let q = self.params.encode_query(&query.tokens).map_err(|e| e.to_string())?;
        pool.iter()
            .map(|cid| {
                self.fused
                    .get(cid)
                    .map(|c| dot(&q, c))
                    .ok_or_else(|| format!("candidate {cid} missing from the encoded pool"))
            })
            .collect()
    }
}

/// Greedy batching with duplicate-candidate deferral. Every pair lands in
/// exactly one batch or is counted dropped; batches hold at least 2 pairs.
fn make_batches(
    pairs: &[TrainPair],
    batch_size: usize,
    rng: &mut SplitMix64,
    dropped: &mut usize,
) -> Vec<Vec<TrainPair>> {
    let mut shuffled = pairs.to_vec();
    rng.shuffle(&mut shuffled);
    let mut pending: VecDeque<TrainPair> = shuffled.into();
    let mut batches = Vec::new();
    while !pending.is_empty() {
        let mut batch = Vec::with_capacity(batch_size);
        let mut seen = HashSet::with_capacity(batch_size);
        let mut deferred = Vec::new();
        while batch.len() < batch_size {
            let Some(pair) = pending.pop_front() else { break };
            if seen.insert(pair.candidate_id) {
                batch.push(pair);
            } else {
                deferred.push(pair);
            }
        }
        for pair in deferred.into_iter().rev() {
            pending.push_front(pair);
        }
        if batch.len() >= 2 {
            batches.push(batch);
        } else {
            // A lone survivor cannot form in-batch negatives.
            *dropped += batch.len();
        }
    }
    batches
}

pub fn train(corpus: &Corpus, cfg: &TrainConfig) -> Result<TrainOutcome, EncoderError> {
    assert!(cfg.epochs >= 1 && cfg.batch_size >= 2, "degenerate train config");
    let pairs: Vec<TrainPair> = corpus
        .judgments
        .iter()
        .filter(|j| {
            j.score == 3
                && corpus.query(j.query_id).map(|q| q.split) == Some(Split::Train)
        })
        .map(|j| TrainPair { query_id: j.query_id, candidate_id: j.candidate_id })
        .collect();
    if pairs.is_empty() {
        return Err(EncoderError::NoTrainingPairs);
    }

    let vocab = corpus_vocab(corpus);
    let mut params =
        EncoderParams::init(vocab, cfg.d_model, corpus.embedding_dim, cfg.d_out, cfg.seed);

    let has_val = !corpus.queries_in(Split::Val).is_empty();
    let val_pool = crate::metrics::protocol_pool(corpus, Split::Val, Protocol::Distractor);

    let mut history = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(f64, usize, EncoderParams)> = None;
    let mut n_dropped = 0usize;
    for epoch in 1..=cfg.epochs {
        let mut rng = SplitMix64::derive(cfg.seed, 1000 + epoch as u64);
        let batches = make_batches(&pairs, cfg.batch_size, &mut rng, &mut n_dropped);
        let mut loss_sum = 0.0;
        for batch in &batches {
            let rows: Vec<(&[String], &[f32], &[String])> = batch
                .iter()
                .map(|p| {
                    let q = corpus.query(p.query_id).expect("pair query exists");
                    let c = corpus.candidate(p.candidate_id).expect("pair candidate exists");
                    (&q.tokens[..], &c.image_embedding[..], &c.headline_tokens[..])
                })
                .collect();
            let mut grads = EncoderGrads::zeros_like(&params);
            loss_sum += batch_backward(&params, &rows, &mut grads)?;
            sgd_step(&mut params, &grads, cfg.lr, cfg.learn_temperature);
        }
        let mean_loss = if batches.is_empty() { 0.0 } else { loss_sum / batches.len() as f64 };

        let val_metric = if has_val {
            let scorer = FusedValScorer::new(&params, corpus, &val_pool)?;
            let eval = evaluate(&scorer, corpus, Split::Val, Protocol::Distractor, 1, 10)
                .map_err(|e| EncoderError::Validation(e.to_string()))?;
            Some(metric_value(&eval.report, cfg.select_metric))
        } else {
            None
        };
        history.push(EpochStats { epoch, mean_loss, val_metric });

        let score = val_metric.unwrap_or(f64::NEG_INFINITY);
        let replace = match &best {
            Some((best_score, _, _)) => score > *best_score,
            None => true,
        };
        if replace || (!has_val && epoch == cfg.epochs) {
            best = Some((score, epoch, params.clone()));
        }
    }
    let (_, selected_epoch, selected) = best.expect("at least one epoch ran");
    Ok(TrainOutcome {
        params: selected,
        history,
        selected_epoch,
        n_pairs: pairs.len(),
        n_dropped_pairs: n_dropped,
    })
}
