//! Corpus model: entity/event queries, image+headline candidates, graded
//! relevance judgments, and the on-disk pair of record file + embedding file.
//!
//! Relevance between a query and a candidate is decided purely from entity
//! sets and event identity. With `E(c)` the union of a candidate's image and
//! headline entities, the cases are checked in order and the first match
//! wins:
//!
//! 1. score 3 — same event and `E(q) ⊆ E(c)` (the candidate covers every
//!    query entity; equality counts),
//! 2. score 2 — same event and `E(c) ⊊ E(q)` (some query entities missing,
//!    nothing contradictory),
//! 3. score 1 — different events, or the query shares no entity with the
//!    *image* (`E(q) ∩ image = ∅`).
//!
//! Pairs matching none of the cases (same event, partially overlapping
//! entity sets, and a nonempty query/image intersection) have no defined
//! score and surface as [`CorpusError::UndefinedRelevance`]; callers must
//! treat that as "do not label", never guess.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::binio::{self, BinReadError};

pub type QueryId = u64;
pub type CandidateId = u64;
pub type EntityId = u32;
pub type EventId = u32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl std::fmt::Display for Split {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Split::Train => write!(f, "train"),
            Split::Val => write!(f, "val"),
            Split::Test => write!(f, "test"),
        }
    }
}

impl std::str::FromStr for Split {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(format!("unknown split {other:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Query {
    pub id: QueryId,
    pub tokens: Vec<String>,
    /// Sorted, duplicate-free.
    pub entities: Vec<EntityId>,
    pub event: EventId,
    pub split: Split,
    pub embedding: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Candidate {
    pub id: CandidateId,
    pub image_embedding: Vec<f32>,
    /// Sorted, duplicate-free.
    pub image_entities: Vec<EntityId>,
    pub headline_tokens: Vec<String>,
    /// Sorted, duplicate-free.
    pub headline_entities: Vec<EntityId>,
    pub event: EventId,
}

impl Candidate {
    /// `E(c)`: union of image and headline entities, sorted.
    pub fn entity_union(&self) -> Vec<EntityId> {
        merge_sorted(&self.image_entities, &self.headline_entities)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Judgment {
    pub query_id: QueryId,
    pub candidate_id: CandidateId,
    /// 1, 2 or 3.
    pub score: u8,
}

#[derive(Debug, thiserror::Error)]
pub enum CorpusError {
    #[error("line {line}: malformed record: {message}")]
    MalformedRecord { line: usize, message: String },
    #[error("dimension mismatch in {what}: expected {expected}, found {found}")]
    DimensionMismatch { what: &'static str, expected: usize, found: usize },
    #[error("judgment ({query_id}, {candidate_id}) references a missing {what}")]
    DanglingReference { query_id: QueryId, candidate_id: CandidateId, what: &'static str },
    #[error("duplicate {kind} id {id}")]
    DuplicateId { kind: &'static str, id: u64 },
    #[error("non-finite embedding on {kind} {id}")]
    NonFiniteEmbedding { kind: &'static str, id: u64 },
    #[error("relevance undefined for query {query_id} vs candidate {candidate_id}")]
    UndefinedRelevance { query_id: QueryId, candidate_id: CandidateId },
    #[error("query {0} has no judgments")]
    UnjudgedQuery(QueryId),
    #[error("embedding file: {0}")]
    EmbeddingFile(#[from] BinReadError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

/// Graded relevance for a (query, candidate) pair. See the module docs for
/// the case order; the error means the pair is outside the defined cases.
pub fn relevance(q: &Query, c: &Candidate) -> Result<u8, CorpusError> {
    let same_event = q.event == c.event;
    let union = c.entity_union();
    if same_event && is_subset(&q.entities, &union) {
        return Ok(3);
    }
    if same_event && is_strict_subset(&union, &q.entities) {
        return Ok(2);
    }
    if !same_event || is_disjoint(&q.entities, &c.image_entities) {
        return Ok(1);
    }
    Err(CorpusError::UndefinedRelevance { query_id: q.id, candidate_id: c.id })
}

/// Collapses the graded scale for binary metrics: only score 3 is positive.
pub fn binarize(score: u8) -> u8 {
    assert!((1..=3).contains(&score), "score {score} outside 1..=3");
    u8::from(score == 3)
}

fn is_subset(a: &[EntityId], b: &[EntityId]) -> bool {
    // Both sorted; two-pointer scan.
    let mut j = 0;
    for &x in a {
        while j < b.len() && b[j] < x {
            j += 1;
        }
        if j == b.len() || b[j] != x {
            return false;
        }
    }
    true
}

fn is_strict_subset(a: &[EntityId], b: &[EntityId]) -> bool {
    a.len() < b.len() && is_subset(a, b)
}

fn is_disjoint(a: &[EntityId], b: &[EntityId]) -> bool {
    let (mut i, mut j) = (0, 0);
    while i < a.len() && j < b.len() {
        match a[i].cmp(&b[j]) {
            std::cmp::Ordering::Less => i += 1,
            std::cmp::Ordering::Greater => j += 1,
            std::cmp::Ordering::Equal => return false,
        }
    }
    true
}

fn merge_sorted(a: &[EntityId], b: &[EntityId]) -> Vec<EntityId> {
    let mut out = Vec::with_capacity(a.len() + b.len());
    let (mut i, mut j) = (0, 0);
    while i < a.len() || j < b.len() {
        let next = if j == b.len() || (i < a.len() && a[i] <= b[j]) {
            let v = a[i];
            i += 1;
            if j < b.len() && b[j] == v {
                j += 1;
            }
            v
        } else {
            let v = b[j];
            j += 1;
            v
        };
        if out.last() != Some(&next) {
            out.push(next);
        }
    }
    out
}

/// Sorts and deduplicates an entity list in place.
pub fn normalize_entities(entities: &mut Vec<EntityId>) {
    entities.sort_unstable();
    entities.dedup();
}

#[derive(Debug, Clone)]
pub struct Corpus {
    pub embedding_dim: usize,
    pub queries: Vec<Query>,
    pub candidates: Vec<Candidate>,
    pub judgments: Vec<Judgment>,
    query_pos: HashMap<QueryId, usize>,
    candidate_pos: HashMap<CandidateId, usize>,
    /// Per query: judged candidates sorted by candidate id.
    judged: HashMap<QueryId, Vec<(CandidateId, u8)>>,
}

impl Corpus {
    pub fn new(
        embedding_dim: usize,
        queries: Vec<Query>,
        candidates: Vec<Candidate>,
        judgments: Vec<Judgment>,
    ) -> Result<Corpus, CorpusError> {
        let mut query_pos = HashMap::with_capacity(queries.len());
        for (i, q) in queries.iter().enumerate() {
            if query_pos.insert(q.id, i).is_some() {
                return Err(CorpusError::DuplicateId { kind: "query", id: q.id });
            }
            if q.embedding.len() != embedding_dim {
                return Err(CorpusError::DimensionMismatch {
                    what: "query embedding",
                    expected: embedding_dim,
                    found: q.embedding.len(),
                });
            }
            if q.embedding.iter().any(|v| !v.is_finite()) {
                return Err(CorpusError::NonFiniteEmbedding { kind: "query", id: q.id });
            }
        }
        let mut candidate_pos = HashMap::with_capacity(candidates.len());
        for (i, c) in candidates.iter().enumerate() {
            if candidate_pos.insert(c.id, i).is_some() {
                return Err(CorpusError::DuplicateId { kind: "candidate", id: c.id });
            }
            if c.image_embedding.len() != embedding_dim {
                return Err(CorpusError::DimensionMismatch {
                    what: "candidate image embedding",
                    expected: embedding_dim,
                    found: c.image_embedding.len(),
                });
            }
            if c.image_embedding.iter().any(|v| !v.is_finite()) {
                return Err(CorpusError::NonFiniteEmbedding { kind: "candidate", id: c.id });
            }
        }
        let mut judged: HashMap<QueryId, Vec<(CandidateId, u8)>> = HashMap::new();
        for j in &judgments {
            if !query_pos.contains_key(&j.query_id) {
                return Err(CorpusError::DanglingReference {
                    query_id: j.query_id,
                    candidate_id: j.candidate_id,
                    what: "query",
                });
            }
            if !candidate_pos.contains_key(&j.candidate_id) {
                return Err(CorpusError::DanglingReference {
                    query_id: j.query_id,
                    candidate_id: j.candidate_id,
                    what: "candidate",
                });
            }
            judged.entry(j.query_id).or_default().push((j.candidate_id, j.score));
        }
        for list in judged.values_mut() {
            list.sort_unstable_by_key(|&(cid, _)| cid);
        }
        Ok(Corpus { embedding_dim, queries, candidates, judgments, query_pos, candidate_pos, judged })
    }

    pub fn query(&self, id: QueryId) -> Option<&Query> {
        self.query_pos.get(&id).map(|&i| &self.queries[i])
    }

    pub fn candidate(&self, id: CandidateId) -> Option<&Candidate> {
        self.candidate_pos.get(&id).map(|&i| &self.candidates[i])
    }

    /// Judged candidates of a query, sorted by candidate id. Empty slice if
    /// the query has no judgments.
    pub fn judged(&self, id: QueryId) -> &[(CandidateId, u8)] {
        self.judged.get(&id).map(Vec::as_slice).unwrap_or(&[])
    }

    /// Score-3 candidate ids of a query, ascending.
    pub fn positives(&self, id: QueryId) -> Vec<CandidateId> {
        self.judged(id).iter().filter(|&&(_, s)| s == 3).map(|&(c, _)| c).collect()
    }

    /// The designated source candidate of a query: its lowest-id score-3
    /// judgment. Generators emit the originating pair before the mined
    /// candidates, so this picks the pair the query was written against.
    pub fn source_candidate(&self, id: QueryId) -> Option<&Candidate> {
        let cid = self.positives(id).into_iter().next()?;
        self.candidate(cid)
    }

    pub fn queries_in(&self, split: Split) -> Vec<&Query> {
        self.queries.iter().filter(|q| q.split == split).collect()
    }

    /// Full invariant sweep beyond the structural checks done in `new`:
    /// judgment scores in range, entity sets normalized, and (when the
    /// corpus carries judgments at all) no unjudged query.
    pub fn validate(&self) -> Result<(), CorpusError> {
        for j in &self.judgments {
            if !(1..=3).contains(&j.score) {
                return Err(CorpusError::MalformedRecord {
                    line: 0,
                    message: format!(
                        "judgment ({}, {}) score {} outside 1..=3",
                        j.query_id, j.candidate_id, j.score
                    ),
                });
            }
        }
        let sorted_unique =
            |e: &[EntityId]| e.windows(2).all(|w| w[0] < w[1]);
        for q in &self.queries {
            if !sorted_unique(&q.entities) {
                return Err(CorpusError::MalformedRecord {
                    line: 0,
                    message: format!("query {} entity set not sorted/unique", q.id),
                });
            }
        }
        for c in &self.candidates {
            if !sorted_unique(&c.image_entities) || !sorted_unique(&c.headline_entities) {
                return Err(CorpusError::MalformedRecord {
                    line: 0,
                    message: format!("candidate {} entity set not sorted/unique", c.id),
                });
            }
        }
        if !self.judgments.is_empty() {
            for q in &self.queries {
                if self.judged(q.id).is_empty() {
                    return Err(CorpusError::UnjudgedQuery(q.id));
                }
            }
        }
        Ok(())
    }
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "record", rename_all = "snake_case")]
enum Record {
    Header { embedding_dim: usize, queries: usize, candidates: usize },
    Query { id: QueryId, tokens: Vec<String>, entities: Vec<EntityId>, event: EventId, split: Split },
    Candidate {
        id: CandidateId,
        image_entities: Vec<EntityId>,
        headline_tokens: Vec<String>,
        headline_entities: Vec<EntityId>,
        event: EventId,
    },
    Judgment { query_id: QueryId, candidate_id: CandidateId, score: u8 },
}

/// Writes the record file (one JSON object per line, header first, then
/// queries, candidates, judgments in corpus order) and the companion
/// embedding file. Embedding rows follow record order: all query rows, then
/// all candidate rows.
pub fn save_corpus(
    corpus: &Corpus,
    records_path: &Path,
    embeddings_path: &Path,
) -> Result<(), CorpusError> {
    let mut w = BufWriter::new(File::create(records_path)?);
    let header = Record::Header {
        embedding_dim: corpus.embedding_dim,
        queries: corpus.queries.len(),
        candidates: corpus.candidates.len(),
    };
    writeln!(w, "{}", serde_json::to_string(&header).expect("serialize header"))?;
    for q in &corpus.queries {
        let rec = Record::Query {
            id: q.id,
            tokens: q.tokens.clone(),
            entities: q.entities.clone(),
            event: q.event,
            split: q.split,
        };
        writeln!(w, "{}", serde_json::to_string(&rec).expect("serialize query"))?;
    }
    for c in &corpus.candidates {
        let rec = Record::Candidate {
            id: c.id,
            image_entities: c.image_entities.clone(),
            headline_tokens: c.headline_tokens.clone(),
            headline_entities: c.headline_entities.clone(),
            event: c.event,
        };
        writeln!(w, "{}", serde_json::to_string(&rec).expect("serialize candidate"))?;
    }
    for j in &corpus.judgments {
        let rec = Record::Judgment {
            query_id: j.query_id,
            candidate_id: j.candidate_id,
            score: j.score,
        };
        writeln!(w, "{}", serde_json::to_string(&rec).expect("serialize judgment"))?;
    }
    w.flush()?;

    let mut rows = Vec::with_capacity((corpus.queries.len() + corpus.candidates.len()) * corpus.embedding_dim);
    for q in &corpus.queries {
        rows.extend_from_slice(&q.embedding);
    }
    for c in &corpus.candidates {
        rows.extend_from_slice(&c.image_embedding);
    }
    let mut ew = BufWriter::new(File::create(embeddings_path)?);
    binio::write_embedding_block(&mut ew, corpus.embedding_dim, &rows)?;
    ew.flush()?;
    Ok(())
}

pub fn load_corpus(records_path: &Path, embeddings_path: &Path) -> Result<Corpus, CorpusError> {
    let reader = BufReader::new(File::open(records_path)?);

    let mut header: Option<(usize, usize, usize)> = None;
    struct PendingQuery {
        id: QueryId,
        tokens: Vec<String>,
        entities: Vec<EntityId>,
        event: EventId,
        split: Split,
    }
    struct PendingCandidate {
        id: CandidateId,
        image_entities: Vec<EntityId>,
        headline_tokens: Vec<String>,
        headline_entities: Vec<EntityId>,
        event: EventId,
    }
    let mut pqueries: Vec<PendingQuery> = Vec::new();
    let mut pcandidates: Vec<PendingCandidate> = Vec::new();
    let mut judgments: Vec<Judgment> = Vec::new();

    for (idx, line) in reader.lines().enumerate() {
        let line_no = idx + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: Record = serde_json::from_str(&line).map_err(|e| CorpusError::MalformedRecord {
            line: line_no,
            message: e.to_string(),
        })?;
        match rec {
            Record::Header { embedding_dim, queries, candidates } => {
                if header.is_some() {
                    return Err(CorpusError::MalformedRecord {
                        line: line_no,
                        message: "duplicate header record".into(),
                    });
                }
                if line_no != 1 {
                    return Err(CorpusError::MalformedRecord {
                        line: line_no,
                        message: "header record must be the first line".into(),
                    });
                }
                header = Some((embedding_dim, queries, candidates));
            }
            Record::Query { id, tokens, mut entities, event, split } => {
                normalize_entities(&mut entities);
                pqueries.push(PendingQuery { id, tokens, entities, event, split });
            }
            Record::Candidate { id, mut image_entities, headline_tokens, mut headline_entities, event } => {
                normalize_entities(&mut image_entities);
                normalize_entities(&mut headline_entities);
                pcandidates.push(PendingCandidate {
                    id,
                    image_entities,
                    headline_tokens,
                    headline_entities,
                    event,
                });
            }
            Record::Judgment { query_id, candidate_id, score } => {
                if !(1..=3).contains(&score) {
                    return Err(CorpusError::MalformedRecord {
                        line: line_no,
                        message: format!("judgment score {score} outside 1..=3"),
                    });
                }
                judgments.push(Judgment { query_id, candidate_id, score });
            }
        }
    }

    let (embedding_dim, n_queries, n_candidates) = header.ok_or(CorpusError::MalformedRecord {
        line: 1,
        message: "missing header record".into(),
    })?;
    if pqueries.len() != n_queries {
        return Err(CorpusError::DimensionMismatch {
            what: "query record count",
            expected: n_queries,
            found: pqueries.len(),
        });
    }
    if pcandidates.len() != n_candidates {
        return Err(CorpusError::DimensionMismatch {
            what: "candidate record count",
            expected: n_candidates,
            found: pcandidates.len(),
        });
    }

    let block = {
        let mut er = BufReader::new(File::open(embeddings_path)?);
        binio::read_embedding_block(&mut er)?
    };
    if block.dim != embedding_dim {
        return Err(CorpusError::DimensionMismatch {
            what: "embedding dim",
            expected: embedding_dim,
            found: block.dim,
        });
    }
    if block.count() != n_queries + n_candidates {
        return Err(CorpusError::DimensionMismatch {
            what: "embedding rows",
            expected: n_queries + n_candidates,
            found: block.count(),
        });
    }

    let queries = pqueries
        .into_iter()
        .enumerate()
        .map(|(i, p)| Query {
            id: p.id,
            tokens: p.tokens,
            entities: p.entities,
            event: p.event,
            split: p.split,
            embedding: block.row(i).to_vec(),
        })
        .collect();
    let candidates = pcandidates
        .into_iter()
        .enumerate()
        .map(|(i, p)| Candidate {
            id: p.id,
            image_embedding: block.row(n_queries + i).to_vec(),
            image_entities: p.image_entities,
            headline_tokens: p.headline_tokens,
            headline_entities: p.headline_entities,
            event: p.event,
        })
        .collect();

    Corpus::new(embedding_dim, queries, candidates, judgments)
}
