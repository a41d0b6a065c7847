//! Score-level fusion over per-modality rankings, weight tuning, and the
//! two-stage retrieve-then-rerank pipeline.
//!
//! Fused scoring is a convex combination `w_image * s_img + w_text * s_txt`
//! over the *same* candidate set; mismatched sets are an error, not a
//! best-effort join. At the endpoints the combination collapses exactly:
//! `1.0 * x + 0.0 * y == x` bit for bit, so `w_image = 1` reproduces the
//! dense image ranking including tie order, and `w_image = 0` reproduces
//! the headline ranking.
//!
//! Weight tuning is a deterministic two-stage grid: eleven coarse points
//! across [0, 1], then 101 fine points at 0.002 spacing in a ±0.1 window
//! around the coarse winner (clamped). Ties prefer the smaller image
//! weight at both stages.

use crate::corpus::{CandidateId, QueryId};
use crate::index::{DenseIndex, IndexError, InvertedIndex, RankedList};

#[derive(Debug, thiserror::Error)]
pub enum FusionError {
    #[error("image and headline scorers rank different candidate sets: {0}")]
    CandidateSetMismatch(String),
    #[error("rerank cutoffs are inverted: final_k {final_k} > first_stage_k {first_stage_k}")]
    InvalidCutoffs { first_stage_k: usize, final_k: usize },
    #[error("index error: {0}")]
    Index(#[from] IndexError),
}

/// Convex fusion weights; construction normalizes `w_text = 1 - w_image`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FusionWeights {
    pub w_image: f64,
    pub w_text: f64,
}

impl FusionWeights {
    pub fn new(w_image: f64) -> FusionWeights {
        assert!((0.0..=1.0).contains(&w_image), "w_image {w_image} outside [0, 1]");
        FusionWeights { w_image, w_text: 1.0 - w_image }
    }

    pub const IMAGE_ONLY: FusionWeights = FusionWeights { w_image: 1.0, w_text: 0.0 };
    pub const EVEN: FusionWeights = FusionWeights { w_image: 0.5, w_text: 0.5 };
}

/// Where the headline-side score of a candidate comes from.
pub enum HeadlineSource<'a> {
    /// Dense dot against a second embedding index over the same ids.
    Dense { index: &'a DenseIndex, query: &'a [f32] },
    /// BM25 against an inverted index over the same ids.
    Sparse { index: &'a InvertedIndex, query_tokens: &'a [String] },
}

/// Top-k under fused scores over the image index's candidate set. The
/// headline source must rank exactly the same ids.
pub fn fused_topk(
    image_index: &DenseIndex,
    image_query: &[f32],
    headline: &HeadlineSource,
    weights: FusionWeights,
    query_id: QueryId,
    k: usize,
) -> Result<RankedList, FusionError> {
    let ids = image_index.ids();
    let image_scores = image_index.score_pool(image_query, ids)?;
    let headline_scores: Vec<f64> = match headline {
        HeadlineSource::Dense { index, query } => {
            if !same_id_set(ids, index.ids()) {
                return Err(FusionError::CandidateSetMismatch(format!(
                    "dense headline index holds {} ids, image index {}",
                    index.ids().len(),
                    ids.len()
                )));
            }
            index.score_pool(query, ids)?
        }
        HeadlineSource::Sparse { index, query_tokens } => {
            if !same_id_set(ids, index.doc_ids()) {
                return Err(FusionError::CandidateSetMismatch(format!(
                    "sparse headline index holds {} ids, image index {}",
                    index.doc_ids().len(),
                    ids.len()
                )));
            }
            index.score_pool(query_tokens, ids)
        }
    };
    let fused: Vec<(CandidateId, f64)> = ids
        .iter()
        .zip(image_scores.iter().zip(&headline_scores))
        .map(|(&id, (&si, &st))| (id, weights.w_image * si + weights.w_text * st))
        .collect();
    Ok(RankedList::from_scores(query_id, fused, k))
}

fn same_id_set(a: &[CandidateId], b: &[CandidateId]) -> bool {
    if a.len() != b.len() {
        return false;
    }
    let mut xa: Vec<CandidateId> = a.to_vec();
    let mut xb: Vec<CandidateId> = b.to_vec();
    xa.sort_unstable();
    xb.sort_unstable();
    xa == xb
}

/// Two-stage grid search for the image weight. `metric_fn` maps weights to
/// a value to maximize; it is called 11 times on the coarse grid and 101
/// times on the fine grid. Ties keep the smaller `w_image`.
pub fn grid_search_weights(mut metric_fn: impl FnMut(FusionWeights) -> f64) -> (FusionWeights, f64) {
    let mut best_w = 0.0;
    let mut best_v = f64::NEG_INFINITY;
    for i in 0..=10 {
        let w = i as f64 / 10.0;
        let v = metric_fn(FusionWeights::new(w));
        if v > best_v {
            best_v = v;
            best_w = w;
        }
    }
    let lo = (best_w - 0.1).max(0.0);
    for i in 0..=100 {
        let w = (lo + 0.002 * i as f64).min(1.0);
        let v = metric_fn(FusionWeights::new(w));
        if v > best_v {
            best_v = v;
            best_w = w;
        }
    }
    (FusionWeights::new(best_w), best_v)
}

/// Sparse-first two-stage retrieval: take the BM25 top `first_stage_k`,
/// re-score those hits by the dense image dot, keep `final_k`. The result
/// is always a subset of the first stage, which bounds its recall by the
/// first stage's recall at `first_stage_k`.
pub fn rerank_pipeline(
    sparse: &InvertedIndex,
    dense: &DenseIndex,
    query_tokens: &[String],
    query_vec: &[f32],
    query_id: QueryId,
    first_stage_k: usize,
    final_k: usize,
) -> Result<RankedList, FusionError> {
    if final_k > first_stage_k {
        return Err(FusionError::InvalidCutoffs { first_stage_k, final_k });
    }
    let first = crate::index::bm25_topk(sparse, query_id, query_tokens, first_stage_k);
    let survivors: Vec<CandidateId> = first.ids();
    let rescored = dense.score_pool(query_vec, &survivors)?;
    let scored: Vec<(CandidateId, f64)> =
        survivors.into_iter().zip(rescored).collect();
    Ok(RankedList::from_scores(query_id, scored, final_k))
}
