//! Seeded corpus generator: latent entity/event geometry, queries, judged
//! candidates with an exact negative mix, and an unjudged soft-negative pool.
//!
//! The generator works backwards from the relevance cases so every emitted
//! judgment is provable:
//!
//! * score 3 — candidate shares the query's event and its entity union
//!   covers the query. Coverage is deliberately *split across modalities*
//!   (each query entity lands in the image, the headline, or both), so a
//!   single modality usually sees only part of the query. Verifying full
//!   coverage requires reading both sides jointly.
//! * score 2 — a proper subset of the query's entities, mirrored in both
//!   modalities, same event. Each modality alone often looks *better* than
//!   a score-3 candidate's same modality.
//! * score 1 — either the event differs, or the image shares no entity with
//!   the query (a misleading image under the right event).
//!
//! Labels are assigned by construction and then re-checked against the
//! relevance oracle; any mismatch aborts generation.
//!
//! Soft negatives (pool entries without judgments) draw their events from a
//! reserved range no query uses, so under the oracle they can only ever be
//! score 1. Most sample their entities freely; a fixed share instead clones
//! the entity set of a random query, which plants near-duplicates of real
//! queries (wrong event, right entities) in the pool — ranking against the
//! full pool is strictly harder than against judged candidates only.
//!
//! Label quotas are dealt, not sampled: `round(frac · total)` slots of each
//! negative grade go into a shuffled deck, every query is first guaranteed
//! one score-3 candidate, and the deck fills the rest. Realized fractions
//! therefore match the configuration up to rounding, and every query keeps
//! at least one positive.

use crate::corpus::{
    normalize_entities, relevance, Candidate, Corpus, CorpusError, EntityId, EventId, Judgment,
    Query, QueryId, Split,
};
use crate::rng::SplitMix64;
use crate::vecmath::normalize_to_f32;

#[derive(Debug, thiserror::Error)]
pub enum SynthError {
    #[error("infeasible config: {0}")]
    Infeasible(String),
    #[error(
        "generated label disagrees with the relevance oracle for query {query_id}, \
         candidate {candidate_id}: assigned {assigned}, oracle says {oracle}"
    )]
    LabelMismatch { query_id: QueryId, candidate_id: u64, assigned: u8, oracle: u8 },
    #[error("corpus error: {0}")]
    Corpus(#[from] CorpusError),
}

pub const DEFAULT_CANDIDATES_PER_QUERY: usize = 8;
pub const DEFAULT_FRAC_SCORE1: f64 = 0.15;
pub const DEFAULT_FRAC_SCORE2: f64 = 0.62;

/// Queries carry between 2 and 4 entities; several constructions (proper
/// subsets, disjoint image sets) lean on the lower bound.
pub const MIN_QUERY_ENTITIES: usize = 2;
pub const MAX_QUERY_ENTITIES: usize = 4;

const MIN_FILLER_TOKENS: usize = 4;
const MAX_FILLER_TOKENS: usize = 8;

/// Share of soft negatives that clone a random query's entity set instead
/// of sampling entities freely. Clones sit on reserved events, so they stay
/// provably irrelevant while crowding the full pool around real queries.
const SOFT_CLONE_CHANCE: f64 = 0.6;

// Independent rng streams per generation phase, so tweaking one phase's
// draw count does not reshuffle the others.
const STREAM_LATENT: u64 = 1;
const STREAM_QUERIES: u64 = 2;
const STREAM_LABELS: u64 = 3;
const STREAM_CANDIDATES: u64 = 4;
const STREAM_SOFT: u64 = 5;
const STREAM_RESPLIT: u64 = 6;

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub n_queries_train: usize,
    pub n_queries_val: usize,
    pub n_queries_test: usize,
    pub candidates_per_query: usize,
    /// Total candidate pool size; everything beyond the judged candidates
    /// becomes unjudged soft negatives.
    pub n_pool: usize,
    pub embedding_dim: usize,
    pub n_entities: u32,
    pub n_events: u32,
    pub vocab_size: u32,
    pub frac_score1: f64,
    pub frac_score2: f64,
    /// Scale of the isotropic noise mixed into every embedding.
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_queries_train: 256,
            n_queries_val: 64,
            n_queries_test: 64,
            candidates_per_query: DEFAULT_CANDIDATES_PER_QUERY,
            n_pool: 6144,
            embedding_dim: 32,
            n_entities: 64,
            n_events: 16,
            vocab_size: 256,
            frac_score1: DEFAULT_FRAC_SCORE1,
            frac_score2: DEFAULT_FRAC_SCORE2,
            noise_sigma: 0.25,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn n_queries(&self) -> usize {
        self.n_queries_train + self.n_queries_val + self.n_queries_test
    }

    pub fn n_judged(&self) -> usize {
        self.n_queries() * self.candidates_per_query
    }

    /// Events reserved for soft negatives; queries never use them.
    pub fn n_soft_events(&self) -> u32 {
        (self.n_events / 4).max(1)
    }

    /// Events available to queries and judged candidates: `0..n_query_events`.
    pub fn n_query_events(&self) -> u32 {
        self.n_events - self.n_soft_events()
    }

    fn label_quotas(&self) -> (usize, usize, usize) {
        let total = self.n_judged();
        let n1 = (self.frac_score1 * total as f64).round() as usize;
        let n2 = (self.frac_score2 * total as f64).round() as usize;
        let n3 = total - n1 - n2;
        (n1, n2, n3)
    }

    fn validate(&self) -> Result<(), SynthError> {
        let fail = |msg: String| Err(SynthError::Infeasible(msg));
        if self.n_queries() == 0 {
            return fail("no queries requested".into());
        }
        if self.candidates_per_query < 2 {
            return fail(format!(
                "candidates_per_query = {} but every query needs a positive and room for negatives",
                self.candidates_per_query
            ));
        }
        if !(0.0..1.0).contains(&self.frac_score1)
            || !(0.0..1.0).contains(&self.frac_score2)
            || self.frac_score1 + self.frac_score2 >= 1.0
        {
            return fail(format!(
                "negative fractions {} + {} leave no score-3 budget",
                self.frac_score1, self.frac_score2
            ));
        }
        let (n1, n2, n3) = self.label_quotas();
        if n1 + n2 > self.n_judged() || n3 < self.n_queries() {
            return fail(format!(
                "score-3 budget {} cannot guarantee a positive for each of {} queries \
                 (raise candidates_per_query or lower the negative fractions)",
                n3,
                self.n_queries()
            ));
        }
        if self.n_pool < self.n_judged() {
            return fail(format!(
                "pool size {} is smaller than the {} judged candidates",
                self.n_pool,
                self.n_judged()
            ));
        }
        if (self.n_entities as usize) < 2 * MAX_QUERY_ENTITIES {
            return fail(format!(
                "need at least {} entities so irrelevant candidates can use image entity \
                 sets disjoint from any query",
                2 * MAX_QUERY_ENTITIES
            ));
        }
        if self.n_events < 4 {
            return fail("need at least 4 events: >=2 for queries (event swaps) plus a reserved soft-negative range".into());
        }
        let needed_vocab = 2 * self.n_entities as u64 + 2 * self.n_events as u64 + 4;
        if (self.vocab_size as u64) < needed_vocab {
            return fail(format!(
                "vocab_size {} too small: entities and events claim {} tokens and filler needs >=4",
                self.vocab_size,
                needed_vocab - 4
            ));
        }
        if self.embedding_dim < 4 {
            return fail(format!("embedding_dim {} too small", self.embedding_dim));
        }
        if !(self.noise_sigma.is_finite() && self.noise_sigma >= 0.0) {
            return fail(format!("noise_sigma {} must be finite and non-negative", self.noise_sigma));
        }
        Ok(())
    }
}

/// Shared latent geometry: one random unit vector per entity and per event.
/// An embedding is the normalized sum of its entity vectors, its event
/// vector, and isotropic noise — co-occurring ids stay close, noise keeps
/// nothing exactly collinear.
pub struct LatentSpace {
    dim: usize,
    sigma: f64,
    entity_vecs: Vec<Vec<f64>>,
    event_vecs: Vec<Vec<f64>>,
}

impl LatentSpace {
    fn new(cfg: &SynthConfig, rng: &mut SplitMix64) -> LatentSpace {
        let unit = |rng: &mut SplitMix64| {
            let mut v: Vec<f64> = (0..cfg.embedding_dim).map(|_| rng.normal()).collect();
            crate::vecmath::normalize64(&mut v);
            v
        };
        LatentSpace {
            dim: cfg.embedding_dim,
            sigma: cfg.noise_sigma,
            entity_vecs: (0..cfg.n_entities).map(|_| unit(rng)).collect(),
            event_vecs: (0..cfg.n_events).map(|_| unit(rng)).collect(),
        }
    }

    fn embed(&self, entities: &[EntityId], event: EventId, rng: &mut SplitMix64) -> Vec<f32> {
        let mut acc = vec![0.0f64; self.dim];
        for &e in entities {
            for (a, v) in acc.iter_mut().zip(&self.entity_vecs[e as usize]) {
                *a += v;
            }
        }
        for (a, v) in acc.iter_mut().zip(&self.event_vecs[event as usize]) {
            *a += v;
        }
        let mut noise: Vec<f64> = (0..self.dim).map(|_| rng.normal()).collect();
        crate::vecmath::normalize64(&mut noise);
        for (a, n) in acc.iter_mut().zip(&noise) {
            *a += self.sigma * n;
        }
        normalize_to_f32(&acc)
    }
}

/// Fixed vocabulary layout: entity `i` owns tokens `w(2i)`/`w(2i+1)`, events
/// follow the entity block, and everything after that is topic-free filler.
/// Token lists are the surface form the sparse index and the text encoder
/// see; entity/event ids never leak into them except through this mapping.
struct TokenLayout {
    n_entities: u32,
    n_events: u32,
    vocab_size: u32,
}

impl TokenLayout {
    fn entity_token_ids(&self, e: EntityId) -> [u32; 2] {
        [2 * e, 2 * e + 1]
    }

    fn event_token_ids(&self, v: EventId) -> [u32; 2] {
        let base = 2 * self.n_entities + 2 * v;
        [base, base + 1]
    }

    fn filler_start(&self) -> u32 {
        2 * self.n_entities + 2 * self.n_events
    }

    /// Entity tokens (entity-id order), event tokens, then 4..=8 filler
    /// tokens drawn with replacement. Minimum length is 10 when the entity
    /// set has >=2 members.
    fn make_tokens(&self, entities: &[EntityId], event: EventId, rng: &mut SplitMix64) -> Vec<String> {
        let mut ids: Vec<u32> = Vec::new();
        for &e in entities {
            ids.extend(self.entity_token_ids(e));
        }
        ids.extend(self.event_token_ids(event));
        let n_filler = MIN_FILLER_TOKENS
            + rng.usize_below(MAX_FILLER_TOKENS - MIN_FILLER_TOKENS + 1);
        let filler_range = (self.vocab_size - self.filler_start()) as u64;
        for _ in 0..n_filler {
            ids.push(self.filler_start() + rng.below(filler_range) as u32);
        }
        ids.into_iter().map(|i| format!("w{i}")).collect()
    }
}

fn split_for(idx: usize, cfg: &SynthConfig) -> Split {
    if idx < cfg.n_queries_train {
        Split::Train
    } else if idx < cfg.n_queries_train + cfg.n_queries_val {
        Split::Val
    } else {
        Split::Test
    }
}

/// Random proper nonempty subset of a sorted entity list (len >= 2).
fn proper_subset(entities: &[EntityId], rng: &mut SplitMix64) -> Vec<EntityId> {
    debug_assert!(entities.len() >= 2);
    let keep = 1 + rng.usize_below(entities.len() - 1);
    let mut idx: Vec<usize> = (0..entities.len()).collect();
    rng.shuffle(&mut idx);
    let mut out: Vec<EntityId> = idx[..keep].iter().map(|&i| entities[i]).collect();
    out.sort_unstable();
    out
}

/// Entities sampled from outside `exclude` (both sorted).
fn disjoint_entities(
    n_entities: u32,
    exclude: &[EntityId],
    k: usize,
    rng: &mut SplitMix64,
) -> Vec<EntityId> {
    let complement: Vec<EntityId> =
        (0..n_entities).filter(|e| exclude.binary_search(e).is_err()).collect();
    debug_assert!(complement.len() >= k);
    rng.sample_distinct(complement.len(), k).into_iter().map(|i| complement[i]).collect()
}

fn make_score3(
    q: &Query,
    cid: u64,
    cfg: &SynthConfig,
    latent: &LatentSpace,
    layout: &TokenLayout,
    rng: &mut SplitMix64,
) -> Candidate {
    // Scatter each query entity over the modalities. Union always covers
    // the query; neither side is allowed to end up empty.
    let mut image: Vec<EntityId> = Vec::new();
    let mut headline: Vec<EntityId> = Vec::new();
    for &e in &q.entities {
        let r = rng.next_f64();
        if r < 0.4 {
            image.push(e);
        } else if r < 0.8 {
            headline.push(e);
        } else {
            image.push(e);
            headline.push(e);
        }
    }
    if image.is_empty() {
        image.push(*rng.choose(&q.entities));
    }
    if headline.is_empty() {
        headline.push(*rng.choose(&q.entities));
    }
    // Occasionally the image shows an extra bystander entity; a superset
    // still covers the query.
    if rng.chance(0.3) {
        image.extend(disjoint_entities(cfg.n_entities, &q.entities, 1, rng));
    }
    normalize_entities(&mut image);
    normalize_entities(&mut headline);
    let image_embedding = latent.embed(&image, q.event, rng);
    let headline_tokens = layout.make_tokens(&headline, q.event, rng);
    Candidate {
        id: cid,
        image_embedding,
        image_entities: image,
        headline_tokens,
        headline_entities: headline,
        event: q.event,
    }
}

fn make_score2(
    q: &Query,
    cid: u64,
    latent: &LatentSpace,
    layout: &TokenLayout,
    rng: &mut SplitMix64,
) -> Candidate {
    // Same event, both modalities agree on a strict subset of the query's
    // entities. Per modality this often *outmatches* a score-3 candidate,
    // which is the point: only the union reveals the gap.
    let subset = proper_subset(&q.entities, rng);
    let image_embedding = latent.embed(&subset, q.event, rng);
    let headline_tokens = layout.make_tokens(&subset, q.event, rng);
    Candidate {
        id: cid,
        image_embedding,
        image_entities: subset.clone(),
        headline_tokens,
        headline_entities: subset,
        event: q.event,
    }
}

fn make_score1(
    q: &Query,
    cid: u64,
    cfg: &SynthConfig,
    latent: &LatentSpace,
    layout: &TokenLayout,
    rng: &mut SplitMix64,
) -> Candidate {
    if rng.chance(0.5) {
        // Event swap: right entities, wrong event.
        let n_query_events = cfg.n_query_events() as u64;
        let mut event = rng.below(n_query_events) as EventId;
        if event == q.event {
            event = (event + 1) % n_query_events as EventId;
        }
        let subset = proper_subset(&q.entities, rng);
        let image_embedding = latent.embed(&subset, event, rng);
        let headline_tokens = layout.make_tokens(&subset, event, rng);
        Candidate {
            id: cid,
            image_embedding,
            image_entities: subset.clone(),
            headline_tokens,
            headline_entities: subset,
            event,
        }
    } else {
        // Right event, but the image shows entirely unrelated entities.
        let image = {
            let mut e = disjoint_entities(cfg.n_entities, &q.entities, q.entities.len(), rng);
            e.sort_unstable();
            e
        };
        let headline = proper_subset(&q.entities, rng);
        let image_embedding = latent.embed(&image, q.event, rng);
        let headline_tokens = layout.make_tokens(&headline, q.event, rng);
        Candidate {
            id: cid,
            image_embedding,
            image_entities: image,
            headline_tokens,
            headline_entities: headline,
            event: q.event,
        }
    }
}

pub fn generate(cfg: &SynthConfig) -> Result<Corpus, SynthError> {
    cfg.validate()?;
    let layout = TokenLayout {
        n_entities: cfg.n_entities,
        n_events: cfg.n_events,
        vocab_size: cfg.vocab_size,
    };
    let mut latent_rng = SplitMix64::derive(cfg.seed, STREAM_LATENT);
    let latent = LatentSpace::new(cfg, &mut latent_rng);

    // Queries.
    let mut query_rng = SplitMix64::derive(cfg.seed, STREAM_QUERIES);
    let n_queries = cfg.n_queries();
    let mut queries = Vec::with_capacity(n_queries);
    for qid in 0..n_queries {
        let k = MIN_QUERY_ENTITIES
            + query_rng.usize_below(MAX_QUERY_ENTITIES - MIN_QUERY_ENTITIES + 1);
        let entities: Vec<EntityId> = query_rng
            .sample_distinct(cfg.n_entities as usize, k)
            .into_iter()
            .map(|e| e as EntityId)
            .collect();
        let event = query_rng.below(cfg.n_query_events() as u64) as EventId;
        let tokens = layout.make_tokens(&entities, event, &mut query_rng);
        let embedding = latent.embed(&entities, event, &mut query_rng);
        queries.push(Query {
            id: qid as QueryId,
            tokens,
            entities,
            event,
            split: split_for(qid, cfg),
            embedding,
        });
    }

    // Label deck: one guaranteed positive per query, the rest dealt from a
    // shuffled pool holding the exact quotas.
    let (n1, n2, n3) = cfg.label_quotas();
    let mut deck: Vec<u8> = Vec::with_capacity(cfg.n_judged() - n_queries);
    deck.extend(std::iter::repeat(3).take(n3 - n_queries));
    deck.extend(std::iter::repeat(1).take(n1));
    deck.extend(std::iter::repeat(2).take(n2));
    let mut label_rng = SplitMix64::derive(cfg.seed, STREAM_LABELS);
    label_rng.shuffle(&mut deck);

    // Judged candidates.
    let mut cand_rng = SplitMix64::derive(cfg.seed, STREAM_CANDIDATES);
    let mut candidates = Vec::with_capacity(cfg.n_pool);
    let mut judgments = Vec::with_capacity(cfg.n_judged());
    let mut deck_iter = deck.into_iter();
    for q in &queries {
        for slot in 0..cfg.candidates_per_query {
            let label = if slot == 0 { 3 } else { deck_iter.next().expect("deck sized to fit") };
            let cid = candidates.len() as u64;
            let cand = match label {
                3 => make_score3(q, cid, cfg, &latent, &layout, &mut cand_rng),
                2 => make_score2(q, cid, &latent, &layout, &mut cand_rng),
                _ => make_score1(q, cid, cfg, &latent, &layout, &mut cand_rng),
            };
            candidates.push(cand);
            judgments.push(Judgment { query_id: q.id, candidate_id: cid, score: label });
        }
    }

    // Soft negatives: reserved events, free entities. Unjudged, but the
    // oracle would call every one of them score 1 for every query.
    let mut soft_rng = SplitMix64::derive(cfg.seed, STREAM_SOFT);
    let soft_event_base = cfg.n_query_events();
    for _ in cfg.n_judged()..cfg.n_pool {
        let entities: Vec<EntityId> = if soft_rng.chance(SOFT_CLONE_CHANCE) {
            soft_rng.choose(&queries).entities.clone()
        } else {
            let k = MIN_QUERY_ENTITIES
                + soft_rng.usize_below(MAX_QUERY_ENTITIES - MIN_QUERY_ENTITIES + 1);
            soft_rng
                .sample_distinct(cfg.n_entities as usize, k)
                .into_iter()
                .map(|e| e as EntityId)
                .collect()
        };
        let event = soft_event_base + soft_rng.below(cfg.n_soft_events() as u64) as EventId;
        let cid = candidates.len() as u64;
        let image_embedding = latent.embed(&entities, event, &mut soft_rng);
        let headline_tokens = layout.make_tokens(&entities, event, &mut soft_rng);
        candidates.push(Candidate {
            id: cid,
            image_embedding,
            image_entities: entities.clone(),
            headline_tokens,
            headline_entities: entities,
            event,
        });
    }

    let corpus = Corpus::new(cfg.embedding_dim, queries, candidates, judgments)?;

    // Re-derive every label from the oracle; construction bugs must abort,
    // not ship a mislabeled corpus.
    for j in &corpus.judgments {
        let q = corpus.query(j.query_id).expect("judged query exists");
        let c = corpus.candidate(j.candidate_id).expect("judged candidate exists");
        let oracle = relevance(q, c)?;
        if oracle != j.score {
            return Err(SynthError::LabelMismatch {
                query_id: j.query_id,
                candidate_id: j.candidate_id,
                assigned: j.score,
                oracle,
            });
        }
    }
    Ok(corpus)
}

/// Reassigns splits by a seeded permutation of the query ids. Fractions are
/// of the query count; test takes the remainder.
pub fn resplit(
    corpus: &mut Corpus,
    seed: u64,
    frac_train: f64,
    frac_val: f64,
) -> Result<(), SynthError> {
    if !(0.0..=1.0).contains(&frac_train)
        || !(0.0..=1.0).contains(&frac_val)
        || frac_train + frac_val > 1.0
    {
        return Err(SynthError::Infeasible(format!(
            "resplit fractions {frac_train} + {frac_val} must stay within [0, 1]"
        )));
    }
    let n = corpus.queries.len();
    let n_train = (frac_train * n as f64).round() as usize;
    let n_val = ((frac_val * n as f64).round() as usize).min(n - n_train);
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = SplitMix64::derive(seed, STREAM_RESPLIT);
    rng.shuffle(&mut order);
    for (rank, &i) in order.iter().enumerate() {
        corpus.queries[i].split = if rank < n_train {
            Split::Train
        } else if rank < n_train + n_val {
            Split::Val
        } else {
            Split::Test
        };
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::save_corpus;
    use crate::vecmath::cosine;

    fn small_config() -> SynthConfig {
        SynthConfig {
            n_queries_train: 40,
            n_queries_val: 10,
            n_queries_test: 10,
            n_pool: 960,
            ..SynthConfig::default()
        }
    }

    #[test]
    fn generates_a_valid_corpus() {
        let corpus = generate(&small_config()).unwrap();
        corpus.validate().unwrap();
        assert_eq!(corpus.queries.len(), 60);
        assert_eq!(corpus.candidates.len(), 960);
        assert_eq!(corpus.judgments.len(), 60 * 8);
        assert_eq!(corpus.queries_in(Split::Train).len(), 40);
        assert_eq!(corpus.queries_in(Split::Val).len(), 10);
        assert_eq!(corpus.queries_in(Split::Test).len(), 10);
    }

    #[test]
    fn judgment_scores_match_the_relevance_oracle() {
        let corpus = generate(&small_config()).unwrap();
        for j in &corpus.judgments {
            let q = corpus.query(j.query_id).unwrap();
            let c = corpus.candidate(j.candidate_id).unwrap();
            assert_eq!(relevance(q, c).unwrap(), j.score);
        }
    }

    #[test]
    fn negative_mix_matches_configured_fractions_exactly() {
        let cfg = small_config();
        let corpus = generate(&cfg).unwrap();
        let total = corpus.judgments.len() as f64;
        let count = |s: u8| corpus.judgments.iter().filter(|j| j.score == s).count();
        let (n1, n2) = (count(1), count(2));
        assert_eq!(n1, (cfg.frac_score1 * total).round() as usize);
        assert_eq!(n2, (cfg.frac_score2 * total).round() as usize);
        // And therefore well within the ±2% band.
        assert!((n1 as f64 / total - cfg.frac_score1).abs() < 0.02);
        assert!((n2 as f64 / total - cfg.frac_score2).abs() < 0.02);
    }

    #[test]
    fn every_query_has_a_positive_and_many_have_more() {
        let corpus = generate(&small_config()).unwrap();
        let mut multi = 0;
        for q in &corpus.queries {
            let n_pos = corpus.positives(q.id).len();
            assert!(n_pos >= 1, "query {} has no positive", q.id);
            if n_pos >= 2 {
                multi += 1;
            }
        }
        let frac = multi as f64 / corpus.queries.len() as f64;
        assert!((0.35..=0.8).contains(&frac), "multi-positive fraction {frac}");
    }

    #[test]
    fn same_seed_reproduces_byte_identical_files() {
        let cfg = small_config();
        let dir = tempfile::tempdir().unwrap();
        let mut paths = Vec::new();
        for run in 0..2 {
            let corpus = generate(&cfg).unwrap();
            let records = dir.path().join(format!("r{run}.jsonl"));
            let embeddings = dir.path().join(format!("e{run}.edf"));
            save_corpus(&corpus, &records, &embeddings).unwrap();
            paths.push((records, embeddings));
        }
        assert_eq!(
            std::fs::read(&paths[0].0).unwrap(),
            std::fs::read(&paths[1].0).unwrap()
        );
        assert_eq!(
            std::fs::read(&paths[0].1).unwrap(),
            std::fs::read(&paths[1].1).unwrap()
        );
    }

    #[test]
    fn different_seeds_give_different_corpora() {
        let a = generate(&small_config()).unwrap();
        let b = generate(&SynthConfig { seed: 1, ..small_config() }).unwrap();
        assert_ne!(a.queries[0].embedding, b.queries[0].embedding);
        assert_ne!(a.queries[0].entities, b.queries[0].entities);
    }

    #[test]
    fn soft_negatives_use_reserved_events_and_rate_score_one() {
        let cfg = small_config();
        let corpus = generate(&cfg).unwrap();
        let judged: std::collections::HashSet<u64> =
            corpus.judgments.iter().map(|j| j.candidate_id).collect();
        let boundary = cfg.n_query_events();
        let mut n_soft = 0;
        for c in &corpus.candidates {
            if judged.contains(&c.id) {
                assert!(c.event < boundary, "judged candidate {} uses a reserved event", c.id);
            } else {
                n_soft += 1;
                assert!(c.event >= boundary, "soft negative {} uses a query event", c.id);
                // Unjudged by design, but the oracle must still rate them 1
                // against any query.
                let q = &corpus.queries[(c.id % corpus.queries.len() as u64) as usize];
                assert_eq!(relevance(q, c).unwrap(), 1);
            }
        }
        assert_eq!(n_soft, cfg.n_pool - cfg.n_judged());
        for q in &corpus.queries {
            assert!(q.event < boundary);
        }
    }

    #[test]
    fn token_lists_clear_the_complexity_floor() {
        let corpus = generate(&small_config()).unwrap();
        for q in &corpus.queries {
            assert!(q.tokens.len() >= 10, "query {} has {} tokens", q.id, q.tokens.len());
            for t in &q.tokens {
                assert!(t.starts_with('w'));
            }
        }
    }

    #[test]
    fn score3_coverage_is_split_across_modalities() {
        let corpus = generate(&small_config()).unwrap();
        let mut n3 = 0;
        let mut incomplete_image = 0;
        for j in corpus.judgments.iter().filter(|j| j.score == 3) {
            let q = corpus.query(j.query_id).unwrap();
            let c = corpus.candidate(j.candidate_id).unwrap();
            assert!(!c.image_entities.is_empty());
            assert!(!c.headline_entities.is_empty());
            n3 += 1;
            if q.entities.iter().any(|e| c.image_entities.binary_search(e).is_err()) {
                incomplete_image += 1;
            }
        }
        let frac = incomplete_image as f64 / n3 as f64;
        // Most positives must be unverifiable from the image alone.
        assert!(frac > 0.4, "only {frac} of positives have incomplete image coverage");
    }

    #[test]
    fn positives_sit_above_soft_negatives_in_image_space() {
        let corpus = generate(&small_config()).unwrap();
        let judged: std::collections::HashSet<u64> =
            corpus.judgments.iter().map(|j| j.candidate_id).collect();
        let softs: Vec<&Candidate> =
            corpus.candidates.iter().filter(|c| !judged.contains(&c.id)).collect();
        let mut pos_sims = Vec::new();
        let mut soft_sims = Vec::new();
        for q in &corpus.queries {
            for cid in corpus.positives(q.id) {
                let c = corpus.candidate(cid).unwrap();
                pos_sims.push(cosine(&q.embedding, &c.image_embedding));
            }
            for c in softs.iter().take(20) {
                soft_sims.push(cosine(&q.embedding, &c.image_embedding));
            }
        }
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        assert!(
            mean(&pos_sims) > mean(&soft_sims) + 0.1,
            "positives {} vs softs {}",
            mean(&pos_sims),
            mean(&soft_sims)
        );
    }

    #[test]
    fn infeasible_configs_are_rejected() {
        let cases = [
            SynthConfig { frac_score1: 0.5, frac_score2: 0.5, ..small_config() },
            SynthConfig { frac_score1: 0.2, frac_score2: 0.72, ..small_config() }, // n3 < n_queries
            SynthConfig { n_pool: 10, ..small_config() },
            SynthConfig { n_entities: 6, vocab_size: 64, ..small_config() },
            SynthConfig { vocab_size: 100, ..small_config() },
            SynthConfig { n_events: 2, ..small_config() },
            SynthConfig { candidates_per_query: 1, ..small_config() },
        ];
        for cfg in cases {
            assert!(
                matches!(generate(&cfg), Err(SynthError::Infeasible(_))),
                "config should be infeasible: {cfg:?}"
            );
        }
    }

    #[test]
    fn resplit_reassigns_deterministically() {
        let mut a = generate(&small_config()).unwrap();
        let mut b = generate(&small_config()).unwrap();
        resplit(&mut a, 9, 0.5, 0.25).unwrap();
        resplit(&mut b, 9, 0.5, 0.25).unwrap();
        assert_eq!(a.queries_in(Split::Train).len(), 30);
        assert_eq!(a.queries_in(Split::Val).len(), 15);
        assert_eq!(a.queries_in(Split::Test).len(), 15);
        for (qa, qb) in a.queries.iter().zip(&b.queries) {
            assert_eq!(qa.split, qb.split);
        }

        let mut c = generate(&small_config()).unwrap();
        resplit(&mut c, 10, 0.5, 0.25).unwrap();
        assert!(
            a.queries.iter().zip(&c.queries).any(|(x, y)| x.split != y.split),
            "different resplit seeds should move at least one query"
        );
        assert!(resplit(&mut c, 0, 0.9, 0.2).is_err());
    }
}
