//! Retrieval methods as pool scorers, built from a corpus plus whatever
//! extra state each method needs (indexes, trained encodings, weights).
//!
//! Every method implements [`CandidateScorer`], so the evaluation loop and
//! the report format are shared. Method names are stable strings used in
//! CLI arguments, report rows, and run files.
//!
//! The oracle scorer returns the judged relevance score itself and rates
//! every unjudged candidate 1 (judged-irrelevant). It is a ceiling, not a
//! method: its ranking realizes the ideal gain ordering exactly, so its
//! NDCG is 1.0 and its recall matches the pool-size upper bound.

use std::collections::HashMap;

use crate::corpus::{CandidateId, Corpus, Query, QueryId, Split};
use crate::encoder::CorpusEncodings;
use crate::fusion::FusionWeights;
use crate::index::{
    build_headline_index, DenseIndex, IndexError, InvertedIndex, DEFAULT_B, DEFAULT_K1,
};
use crate::metrics::{evaluate, metric_value, CandidateScorer, MetricKind, MetricsError, Protocol};
use crate::rng::SplitMix64;
use crate::vecmath::dot64;

/// First-stage depth of the retrieve-then-rerank method.
pub const DEFAULT_FIRST_STAGE_K: usize = 50;

/// Rank offset separating rerank survivors from first-stage leftovers.
/// Dense scores are cosines in [-1, 1] and BM25 scores are far below this,
/// so survivors always outrank non-survivors.
const RERANK_OFFSET: f64 = 1.0e6;

#[derive(Debug, thiserror::Error)]
pub enum MethodError {
    #[error("unknown method {0:?}")]
    Unknown(String),
    #[error("method {0} needs trained encodings")]
    NeedsEncodings(&'static str),
    #[error("index error: {0}")]
    Index(#[from] IndexError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Method {
    /// BM25 over candidate headlines.
    Bm25,
    /// Dot product between the query embedding and the stored image
    /// embedding; no training involved.
    DenseImage,
    /// BM25 first stage, dense image re-scoring of the survivors.
    Rerank,
    /// Weighted sum of two per-modality similarity channels: the raw
    /// query/image embedding dot (the pretrained-tower stand-in, identical
    /// to [`Method::DenseImage`] scoring) and the trained headline tower.
    ScoreFusion,
    /// Score fusion pinned to the image side (`w_image = 1`); scores are
    /// exactly the raw image channel, no checkpoint involved.
    ScoreFusionImage,
    /// Trained joint candidate encoding scored against the query tower.
    FeatureFusion,
    /// Trained image tower alone scored against the query tower.
    FeatureImage,
    /// Judged relevance as the score; performance ceiling.
    Oracle,
    /// Seeded uniform noise; performance floor.
    Random,
}

impl Method {
    pub const ALL: [Method; 9] = [
        Method::Bm25,
        Method::DenseImage,
        Method::Rerank,
        Method::ScoreFusion,
        Method::ScoreFusionImage,
        Method::FeatureFusion,
        Method::FeatureImage,
        Method::Oracle,
        Method::Random,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::Bm25 => "bm25",
            Method::DenseImage => "dense_image",
            Method::Rerank => "rerank",
            Method::ScoreFusion => "score_fusion",
            Method::ScoreFusionImage => "score_fusion_image",
            Method::FeatureFusion => "feature_fusion",
            Method::FeatureImage => "feature_image",
            Method::Oracle => "oracle",
            Method::Random => "random",
        }
    }

    /// Methods that score with trained towers and so cannot run without a
    /// checkpoint.
    pub fn needs_encodings(self) -> bool {
        matches!(self, Method::ScoreFusion | Method::FeatureFusion | Method::FeatureImage)
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Method {
    type Err = MethodError;

    fn from_str(s: &str) -> Result<Method, MethodError> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| MethodError::Unknown(s.to_string()))
    }
}

/// Everything a method might need beyond the corpus. Defaults leave the
/// trained parts empty; building an encoder-backed method then fails with
/// [`MethodError::NeedsEncodings`].
pub struct MethodContext<'a> {
    pub corpus: &'a Corpus,
    pub encodings: Option<&'a CorpusEncodings>,
    /// Weights for [`Method::ScoreFusion`], typically from weight tuning.
    pub score_weights: FusionWeights,
    pub first_stage_k: usize,
    pub seed: u64,
}

impl<'a> MethodContext<'a> {
    pub fn new(corpus: &'a Corpus) -> MethodContext<'a> {
        MethodContext {
            corpus,
            encodings: None,
            score_weights: FusionWeights::EVEN,
            first_stage_k: DEFAULT_FIRST_STAGE_K,
            seed: 0,
        }
    }
}

pub fn build_scorer<'a>(
    method: Method,
    ctx: &MethodContext<'a>,
) -> Result<Box<dyn CandidateScorer + 'a>, MethodError> {
    let enc = || {
        ctx.encodings
            .ok_or(MethodError::NeedsEncodings(method.name()))
    };
    Ok(match method {
        Method::Bm25 => Box::new(Bm25Scorer { index: headline_index(ctx.corpus)? }),
        Method::DenseImage => Box::new(DenseImageScorer {
            name: Method::DenseImage.name(),
            index: DenseIndex::over_images(ctx.corpus)?,
        }),
        Method::Rerank => Box::new(RerankScorer {
            sparse: headline_index(ctx.corpus)?,
            dense: DenseIndex::over_images(ctx.corpus)?,
            first_stage_k: ctx.first_stage_k,
        }),
        Method::ScoreFusion => Box::new(ScoreFusionScorer {
            corpus: ctx.corpus,
            queries: &enc()?.query,
            headline: &enc()?.headline,
            weights: ctx.score_weights,
        }),
        Method::ScoreFusionImage => Box::new(DenseImageScorer {
            name: Method::ScoreFusionImage.name(),
            index: DenseIndex::over_images(ctx.corpus)?,
        }),
        Method::FeatureFusion => Box::new(TowerScorer {
            name: Method::FeatureFusion.name(),
            queries: &enc()?.query,
            candidates: &enc()?.fused,
        }),
        Method::FeatureImage => Box::new(TowerScorer {
            name: Method::FeatureImage.name(),
            queries: &enc()?.query,
            candidates: &enc()?.image,
        }),
        Method::Oracle => Box::new(OracleScorer { corpus: ctx.corpus }),
        Method::Random => Box::new(RandomScorer { seed: ctx.seed }),
    })
}

fn headline_index(corpus: &Corpus) -> Result<InvertedIndex, IndexError> {
    build_headline_index(corpus, DEFAULT_K1, DEFAULT_B)
}

struct Bm25Scorer {
    index: InvertedIndex,
}

impl CandidateScorer for Bm25Scorer {
    fn name(&self) -> &str {
        Method::Bm25.name()
    }

    fn score_pool(&self, query: &Query, pool: &[CandidateId]) -> Result<Vec<f64>, String> {
        Ok(self.index.score_pool(&query.tokens, pool))
    }
}

struct DenseImageScorer {
    name: &'static str,
    index: DenseIndex,
}

impl CandidateScorer for DenseImageScorer {
    fn name(&self) -> &str {
        self.name
    }

    fn score_pool(&self, query: &Query, pool: &[CandidateId]) -> Result<Vec<f64>, String> {
        self.index.score_pool(&query.embedding, pool).map_err(|e| e.to_string())
    }
}

struct RerankScorer {
    sparse: InvertedIndex,
    dense: DenseIndex,
    first_stage_k: usize,
}

impl CandidateScorer for RerankScorer {
    fn name(&self) -> &str {
        Method::Rerank.name()
    }

    /// Survivors (BM25 top `first_stage_k` within the pool, matching docs
    /// only) score `RERANK_OFFSET + dense`, everything else keeps its BM25
    /// score shifted below. Metric cutoffs inside `first_stage_k` therefore
    /// see the reranked order, and the survivor set is always a subset of
    /// the BM25 top `first_stage_k`.
    fn score_pool(&self, query: &Query, pool: &[CandidateId]) -> Result<Vec<f64>, String> {
        let bm25 = self.sparse.score_pool(&query.tokens, pool);
        let mut order: Vec<usize> = (0..pool.len()).filter(|&i| bm25[i] > 0.0).collect();
        order.sort_unstable_by(|&a, &b| {
            bm25[b].total_cmp(&bm25[a]).then(pool[a].cmp(&pool[b]))
        });
        order.truncate(self.first_stage_k);

        let mut scores: Vec<f64> = bm25.iter().map(|s| s - RERANK_OFFSET).collect();
        for &i in &order {
            let dense = self
                .dense
                .score_pool(&query.embedding, &pool[i..i + 1])
                .map_err(|e| e.to_string())?;
            scores[i] = RERANK_OFFSET + dense[0];
        }
        Ok(scores)
    }
}

struct OracleScorer<'a> {
    corpus: &'a Corpus,
}

impl CandidateScorer for OracleScorer<'_> {
    fn name(&self) -> &str {
        Method::Oracle.name()
    }

    fn score_pool(&self, query: &Query, pool: &[CandidateId]) -> Result<Vec<f64>, String> {
        let judged: HashMap<CandidateId, u8> =
            self.corpus.judged(query.id).iter().copied().collect();
        Ok(pool
            .iter()
            .map(|cid| judged.get(cid).map(|&s| f64::from(s)).unwrap_or(1.0))
            .collect())
    }
}

struct RandomScorer {
    seed: u64,
}

impl CandidateScorer for RandomScorer {
    fn name(&self) -> &str {
        Method::Random.name()
    }

    fn score_pool(&self, query: &Query, pool: &[CandidateId]) -> Result<Vec<f64>, String> {
        let mut rng = SplitMix64::derive(self.seed, query.id);
        Ok(pool.iter().map(|_| rng.next_f64()).collect())
    }
}

/// Scores trained query encodings against pre-encoded candidate vectors.
struct TowerScorer<'a> {
    name: &'static str,
    queries: &'a HashMap<QueryId, Vec<f64>>,
    candidates: &'a HashMap<CandidateId, Vec<f64>>,
}

impl CandidateScorer for TowerScorer<'_> {
    fn name(&self) -> &str {
        self.name
    }

    fn score_pool(&self, query: &Query, pool: &[CandidateId]) -> Result<Vec<f64>, String> {
        let q = self
            .queries
            .get(&query.id)
            .ok_or_else(|| format!("query {} missing from encodings", query.id))?;
        pool.iter()
            .map(|&cid| {
                self.candidates
                    .get(&cid)
                    .map(|v| dot64(q, v))
                    .ok_or_else(|| format!("candidate {cid} missing from encodings"))
            })
            .collect()
    }
}

/// Per-candidate weighted sum of the raw image channel and the trained
/// headline channel. The image side reuses the exact dense-index dot kernel,
/// so the `w_image = 1` endpoint matches [`Method::DenseImage`] bit for bit.
struct ScoreFusionScorer<'a> {
    corpus: &'a Corpus,
    queries: &'a HashMap<QueryId, Vec<f64>>,
    headline: &'a HashMap<CandidateId, Vec<f64>>,
    weights: FusionWeights,
}

impl CandidateScorer for ScoreFusionScorer<'_> {
    fn name(&self) -> &str {
        Method::ScoreFusion.name()
    }

    fn score_pool(&self, query: &Query, pool: &[CandidateId]) -> Result<Vec<f64>, String> {
        let q = self
            .queries
            .get(&query.id)
            .ok_or_else(|| format!("query {} missing from encodings", query.id))?;
        pool.iter()
            .map(|&cid| {
                let c = self
                    .corpus
                    .candidate(cid)
                    .ok_or_else(|| format!("candidate {cid} not in the corpus"))?;
                let image = crate::vecmath::dot(&query.embedding, &c.image_embedding);
                let text = self
                    .headline
                    .get(&cid)
                    .map(|v| dot64(q, v))
                    .ok_or_else(|| format!("candidate {cid} missing from encodings"))?;
                Ok(self.weights.w_image * image + self.weights.w_text * text)
            })
            .collect()
    }
}

/// Grid-searches the score-fusion image weight by evaluating on `split`
/// under `protocol` and maximizing `metric`. Deterministic: single-threaded
/// evaluation, ties keep the smaller image weight.
pub fn tune_score_fusion(
    corpus: &Corpus,
    encodings: &CorpusEncodings,
    split: Split,
    protocol: Protocol,
    metric: MetricKind,
) -> Result<(FusionWeights, f64), MetricsError> {
    for q in corpus.queries_in(split) {
        if !encodings.query.contains_key(&q.id) {
            return Err(MetricsError::Scorer {
                method: Method::ScoreFusion.name().to_string(),
                message: format!("query {} missing from encodings", q.id),
            });
        }
    }
    let mut failure = None;
    let (weights, value) = crate::fusion::grid_search_weights(|w| {
        let scorer = ScoreFusionScorer {
            corpus,
            queries: &encodings.query,
            headline: &encodings.headline,
            weights: w,
        };
        match evaluate(&scorer, corpus, split, protocol, 1, 10) {
            Ok(eval) => metric_value(&eval.report, metric),
            Err(e) => {
                failure.get_or_insert(e);
                f64::NEG_INFINITY
            }
        }
    });
    match failure {
        Some(e) => Err(e),
        None => Ok((weights, value)),
    }
}
