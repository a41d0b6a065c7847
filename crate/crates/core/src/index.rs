//! Sparse (Okapi BM25 over headline tokens) and dense (image embedding)
//! candidate indexes, exact top-k retrieval over both, and their on-disk
//! formats.
//!
//! Both retrieval paths are exhaustive and exact — no approximation — so
//! heap-selected top-k lists are by construction prefixes of the full
//! ranking under the shared ordering (score descending, candidate id
//! ascending as tie-break).

use std::collections::{BTreeMap, HashMap};
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::binio::{self, BinReadError};
use crate::corpus::{CandidateId, Corpus, QueryId};
use crate::vecmath;

pub const DEFAULT_K1: f64 = 1.2;
pub const DEFAULT_B: f64 = 0.75;

const INVERTED_MAGIC: [u8; 4] = *b"IVX1";

#[derive(Debug, thiserror::Error)]
pub enum IndexError {
    #[error("cannot build an index over an empty corpus")]
    EmptyCorpus,
    #[error("dimension mismatch: index dim {expected}, query dim {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("duplicate document id {0}")]
    DuplicateDocId(u64),
    #[error("vector for id {id} has norm {norm}, want unit")]
    NotUnitNorm { id: u64, norm: f64 },
    #[error("corrupt index file: {0}")]
    Corrupt(String),
    #[error(transparent)]
    Read(#[from] BinReadError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

/// Ranked retrieval output for one query: entries sorted by score
/// descending, ties broken by ascending candidate id, at most `k` long.
#[derive(Debug, Clone, PartialEq)]
pub struct RankedList {
    pub query_id: QueryId,
    pub entries: Vec<(CandidateId, f64)>,
}

/// `a` strictly better than `b` under the shared ranking order.
#[inline]
fn ranks_before(a: (CandidateId, f64), b: (CandidateId, f64)) -> bool {
    match a.1.total_cmp(&b.1) {
        std::cmp::Ordering::Greater => true,
        std::cmp::Ordering::Less => false,
        std::cmp::Ordering::Equal => a.0 < b.0,
    }
}

impl RankedList {
    /// Exact top-k selection via a bounded min-heap keyed on the ranking
    /// order. O(n log k); ties resolved by ascending candidate id.
    pub fn from_scores(
        query_id: QueryId,
        scored: impl IntoIterator<Item = (CandidateId, f64)>,
        k: usize,
    ) -> RankedList {
        use std::cmp::Ordering;
        use std::collections::BinaryHeap;

        // Heap entry ordered so the WORST kept candidate surfaces at the top.
        struct Worst((CandidateId, f64));
        impl PartialEq for Worst {
            fn eq(&self, other: &Self) -> bool {
                self.0 .0 == other.0 .0 && self.0 .1.total_cmp(&other.0 .1) == Ordering::Equal
            }
        }
        impl Eq for Worst {}
        impl PartialOrd for Worst {
            fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
                Some(self.cmp(other))
            }
        }
        impl Ord for Worst {
            fn cmp(&self, other: &Self) -> Ordering {
                if ranks_before(self.0, other.0) {
                    Ordering::Less
                } else if ranks_before(other.0, self.0) {
                    Ordering::Greater
                } else {
                    Ordering::Equal
                }
            }
        }

        let mut heap: BinaryHeap<Worst> = BinaryHeap::with_capacity(k + 1);
        if k == 0 {
            return RankedList { query_id, entries: Vec::new() };
        }
        for entry in scored {
            debug_assert!(entry.1.is_finite(), "non-finite score for {}", entry.0);
            if heap.len() < k {
                heap.push(Worst(entry));
            } else if ranks_before(entry, heap.peek().expect("nonempty").0) {
                heap.pop();
                heap.push(Worst(entry));
            }
        }
        let mut entries: Vec<(CandidateId, f64)> = heap.into_iter().map(|w| w.0).collect();
        entries.sort_unstable_by(|&a, &b| {
            if ranks_before(a, b) {
                Ordering::Less
            } else if ranks_before(b, a) {
                Ordering::Greater
            } else {
                Ordering::Equal
            }
        });
        RankedList { query_id, entries }
    }

    pub fn ids(&self) -> Vec<CandidateId> {
        self.entries.iter().map(|&(id, _)| id).collect()
    }
}

// ---------------------------------------------------------------------------
// Sparse index

#[derive(Debug, Clone)]
pub struct InvertedIndex {
    pub k1: f64,
    pub b: f64,
    doc_ids: Vec<CandidateId>,
    doc_lengths: Vec<u32>,
    avg_doc_length: f64,
    /// term -> postings sorted by internal doc index.
    postings: BTreeMap<String, Vec<(u32, u32)>>,
}

/// Builds a BM25 index over `(id, tokens)` documents in the given order.
pub fn build_inverted<'a, I>(docs: I, k1: f64, b: f64) -> Result<InvertedIndex, IndexError>
where
    I: IntoIterator<Item = (u64, &'a [String])>,
{
    let mut doc_ids = Vec::new();
    let mut doc_lengths = Vec::new();
    let mut postings: BTreeMap<String, Vec<(u32, u32)>> = BTreeMap::new();
    let mut id_to_idx = HashMap::new();
    for (id, tokens) in docs {
        let idx = doc_ids.len() as u32;
        if id_to_idx.insert(id, idx).is_some() {
            return Err(IndexError::DuplicateDocId(id));
        }
        doc_ids.push(id);
        doc_lengths.push(tokens.len() as u32);
        let mut counts: BTreeMap<&String, u32> = BTreeMap::new();
        for t in tokens {
            *counts.entry(t).or_insert(0) += 1;
        }
        for (term, tf) in counts {
            postings.entry(term.clone()).or_default().push((idx, tf));
        }
    }
    if doc_ids.is_empty() {
        return Err(IndexError::EmptyCorpus);
    }
    let total_len: u64 = doc_lengths.iter().map(|&l| l as u64).sum();
    let avg_doc_length = total_len as f64 / doc_ids.len() as f64;
    Ok(InvertedIndex { k1, b, doc_ids, doc_lengths, avg_doc_length, postings })
}

/// Index over a corpus's candidate headlines, in corpus order.
pub fn build_headline_index(corpus: &Corpus, k1: f64, b: f64) -> Result<InvertedIndex, IndexError> {
    build_inverted(
        corpus.candidates.iter().map(|c| (c.id, c.headline_tokens.as_slice())),
        k1,
        b,
    )
}

impl InvertedIndex {
    pub fn n_docs(&self) -> usize {
        self.doc_ids.len()
    }

    pub fn avg_doc_length(&self) -> f64 {
        self.avg_doc_length
    }

    pub fn doc_ids(&self) -> &[CandidateId] {
        &self.doc_ids
    }

    /// `ln((N - n_t + 0.5) / (n_t + 0.5) + 1)`; strictly positive for every
    /// indexed term, zero document frequency gives the maximum.
    pub fn idf(&self, term: &str) -> f64 {
        let n = self.doc_ids.len() as f64;
        let df = self.postings.get(term).map_or(0.0, |p| p.len() as f64);
        ((n - df + 0.5) / (df + 0.5) + 1.0).ln()
    }

    /// BM25 scores for every document matching at least one query token.
    /// Duplicate query tokens weight their term once per occurrence.
    /// Returned in internal document order.
    pub fn score_matching(&self, query_tokens: &[String]) -> Vec<(CandidateId, f64)> {
        let mut qtf: BTreeMap<&String, u32> = BTreeMap::new();
        for t in query_tokens {
            *qtf.entry(t).or_insert(0) += 1;
        }
        let mut scores: HashMap<u32, f64> = HashMap::new();
        // BTreeMap iteration gives a fixed term order, so each document's
        // score is accumulated in the same order on every run.
        for (term, qn) in qtf {
            let Some(posts) = self.postings.get(term) else { continue };
            let idf = self.idf(term);
            for &(doc, tf) in posts {
                let len = self.doc_lengths[doc as usize] as f64;
                let tf = tf as f64;
                let norm = self.k1 * (1.0 - self.b + self.b * len / self.avg_doc_length);
                let term_score = idf * (tf * (self.k1 + 1.0)) / (tf + norm);
                *scores.entry(doc).or_insert(0.0) += qn as f64 * term_score;
            }
        }
        let mut out: Vec<(u32, f64)> = scores.into_iter().collect();
        out.sort_unstable_by_key(|&(doc, _)| doc);
        out.into_iter().map(|(doc, s)| (self.doc_ids[doc as usize], s)).collect()
    }

    /// Scores aligned with `pool`; documents sharing no token with the
    /// query (or absent from the index) score 0.
    pub fn score_pool(&self, query_tokens: &[String], pool: &[CandidateId]) -> Vec<f64> {
        let matched: HashMap<CandidateId, f64> =
            self.score_matching(query_tokens).into_iter().collect();
        pool.iter().map(|id| matched.get(id).copied().unwrap_or(0.0)).collect()
    }
}

/// Exact BM25 top-k. Queries with no indexed term yield an empty list.
pub fn bm25_topk(
    index: &InvertedIndex,
    query_id: QueryId,
    query_tokens: &[String],
    k: usize,
) -> RankedList {
    RankedList::from_scores(query_id, index.score_matching(query_tokens), k)
}

// ---------------------------------------------------------------------------
// Dense index

#[derive(Debug, Clone)]
pub struct DenseIndex {
    dim: usize,
    ids: Vec<CandidateId>,
    /// Row-major, `ids.len() * dim`.
    data: Vec<f32>,
    id_to_row: HashMap<CandidateId, usize>,
}

impl DenseIndex {
    /// Builds an index over unit-norm vectors; rejects rows whose norm is
    /// off by more than 1e-5 (dot products are only cosines for unit rows).
    pub fn new(ids: Vec<CandidateId>, data: Vec<f32>, dim: usize) -> Result<DenseIndex, IndexError> {
        let index = DenseIndex::from_raw_unchecked(ids, data, dim)?;
        for (row, &id) in index.ids.iter().enumerate() {
            let norm = vecmath::l2_norm(index.row(row));
            if (norm - 1.0).abs() > 1e-5 {
                return Err(IndexError::NotUnitNorm { id, norm });
            }
        }
        Ok(index)
    }

    /// Shape-checked construction without the unit-norm requirement. Meant
    /// for harnesses that need raw dot products (e.g. zero-padding
    /// equivalence checks); retrieval semantics are the caller's problem.
    pub fn from_raw_unchecked(
        ids: Vec<CandidateId>,
        data: Vec<f32>,
        dim: usize,
    ) -> Result<DenseIndex, IndexError> {
        if ids.is_empty() {
            return Err(IndexError::EmptyCorpus);
        }
        if dim == 0 || data.len() != ids.len() * dim {
            return Err(IndexError::DimensionMismatch {
                expected: ids.len() * dim,
                found: data.len(),
            });
        }
        let mut id_to_row = HashMap::with_capacity(ids.len());
        for (row, &id) in ids.iter().enumerate() {
            if id_to_row.insert(id, row).is_some() {
                return Err(IndexError::DuplicateDocId(id));
            }
        }
        Ok(DenseIndex { dim, ids, data, id_to_row })
    }

    /// Index over a corpus's candidate image embeddings, in corpus order.
    pub fn over_images(corpus: &Corpus) -> Result<DenseIndex, IndexError> {
        let ids: Vec<CandidateId> = corpus.candidates.iter().map(|c| c.id).collect();
        let mut data = Vec::with_capacity(ids.len() * corpus.embedding_dim);
        for c in &corpus.candidates {
            data.extend_from_slice(&c.image_embedding);
        }
        DenseIndex::new(ids, data, corpus.embedding_dim)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn ids(&self) -> &[CandidateId] {
        &self.ids
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn vector_of(&self, id: CandidateId) -> Option<&[f32]> {
        self.id_to_row.get(&id).map(|&r| self.row(r))
    }

    /// Dot products of `query` against every row, accumulated in f64, in
    /// row order.
    pub fn score_all(&self, query: &[f32]) -> Result<Vec<f64>, IndexError> {
        if query.len() != self.dim {
            return Err(IndexError::DimensionMismatch { expected: self.dim, found: query.len() });
        }
        let mut out = Vec::with_capacity(self.ids.len());
        for row in 0..self.ids.len() {
            out.push(vecmath::dot(query, self.row(row)));
        }
        Ok(out)
    }

    /// Scores aligned with `pool`. Ids absent from the index error as a
    /// dangling reference would — callers pass pools drawn from the index.
    pub fn score_pool(&self, query: &[f32], pool: &[CandidateId]) -> Result<Vec<f64>, IndexError> {
        if query.len() != self.dim {
            return Err(IndexError::DimensionMismatch { expected: self.dim, found: query.len() });
        }
        pool.iter()
            .map(|id| {
                self.vector_of(*id)
                    .map(|v| vecmath::dot(query, v))
                    .ok_or_else(|| IndexError::Corrupt(format!("pool id {id} not in dense index")))
            })
            .collect()
    }
}

/// Exact dense top-k by dot product (cosine for unit-norm rows).
pub fn dense_topk(
    index: &DenseIndex,
    query_id: QueryId,
    query: &[f32],
    k: usize,
) -> Result<RankedList, IndexError> {
    if query.len() != index.dim {
        return Err(IndexError::DimensionMismatch { expected: index.dim, found: query.len() });
    }
    let scored = (0..index.len()).map(|row| (index.ids[row], vecmath::dot(query, index.row(row))));
    Ok(RankedList::from_scores(query_id, scored, k))
}

/// Dense top-k for a batch of queries, optionally fanned out over a local
/// rayon pool. Results are per-query independent, so they are identical for
/// every `threads` value; `threads <= 1` runs inline.
pub fn dense_topk_batch(
    index: &DenseIndex,
    queries: &[(QueryId, Vec<f32>)],
    k: usize,
    threads: usize,
) -> Result<Vec<RankedList>, IndexError> {
    for (_, q) in queries {
        if q.len() != index.dim {
            return Err(IndexError::DimensionMismatch { expected: index.dim, found: q.len() });
        }
    }
    if threads <= 1 {
        return queries.iter().map(|(qid, q)| dense_topk(index, *qid, q, k)).collect();
    }
    use rayon::prelude::*;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| IndexError::Corrupt(format!("thread pool: {e}")))?;
    pool.install(|| {
        queries
            .par_iter()
            .map(|(qid, q)| dense_topk(index, *qid, q, k))
            .collect::<Result<Vec<_>, _>>()
    })
}

// ---------------------------------------------------------------------------
// Persistence

/// Dense index file: an embedding block followed by the id table
/// (`count` little-endian u64 ids in row order).
pub fn save_dense(index: &DenseIndex, path: &Path) -> Result<(), IndexError> {
    let mut w = BufWriter::new(File::create(path)?);
    binio::write_embedding_block(&mut w, index.dim, &index.data)?;
    binio::write_u64s(&mut w, &index.ids)?;
    w.flush()?;
    Ok(())
}

pub fn load_dense(path: &Path) -> Result<DenseIndex, IndexError> {
    let mut r = BufReader::new(File::open(path)?);
    let block = binio::read_embedding_block(&mut r)?;
    let ids = binio::read_u64s(&mut r, block.count(), "dense id table")?;
    let mut trailing = [0u8; 1];
    if r.read(&mut trailing)? != 0 {
        return Err(IndexError::Corrupt("trailing bytes after id table".into()));
    }
    // Stored rows were validated at build time; re-validate on the way in.
    DenseIndex::new(ids, block.data, block.dim)
}

/// Inverted index file: magic, then three length-prefixed little-endian
/// sections (params, documents, postings). Each section is its byte length
/// as u64 followed by the payload, so readers can skip or bounds-check.
pub fn save_inverted(index: &InvertedIndex, path: &Path) -> Result<(), IndexError> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(&INVERTED_MAGIC)?;

    let mut params = Vec::new();
    params.extend_from_slice(&index.k1.to_le_bytes());
    params.extend_from_slice(&index.b.to_le_bytes());
    binio::write_u64(&mut w, params.len() as u64)?;
    w.write_all(&params)?;

    let mut docs = Vec::new();
    binio::write_u32(&mut docs, index.doc_ids.len() as u32)?;
    for (id, len) in index.doc_ids.iter().zip(&index.doc_lengths) {
        binio::write_u64(&mut docs, *id)?;
        binio::write_u32(&mut docs, *len)?;
    }
    binio::write_u64(&mut w, docs.len() as u64)?;
    w.write_all(&docs)?;

    let mut posts = Vec::new();
    binio::write_u32(&mut posts, index.postings.len() as u32)?;
    for (term, plist) in &index.postings {
        binio::write_u32(&mut posts, term.len() as u32)?;
        posts.extend_from_slice(term.as_bytes());
        binio::write_u32(&mut posts, plist.len() as u32)?;
        for &(doc, tf) in plist {
            binio::write_u32(&mut posts, doc)?;
            binio::write_u32(&mut posts, tf)?;
        }
    }
    binio::write_u64(&mut w, posts.len() as u64)?;
    w.write_all(&posts)?;
    w.flush()?;
    Ok(())
}

fn read_section(r: &mut impl Read, context: &'static str) -> Result<Vec<u8>, IndexError> {
    let len = binio::read_u64(r, context)? as usize;
    let mut buf = vec![0u8; len];
    r.read_exact(&mut buf).map_err(|e| {
        if e.kind() == std::io::ErrorKind::UnexpectedEof {
            IndexError::Read(BinReadError::Truncated { context })
        } else {
            IndexError::Io(e)
        }
    })?;
    Ok(buf)
}

pub fn load_inverted(path: &Path) -> Result<InvertedIndex, IndexError> {
    let mut r = BufReader::new(File::open(path)?);
    binio::check_magic(&mut r, INVERTED_MAGIC)?;

    let params = read_section(&mut r, "params section")?;
    if params.len() != 16 {
        return Err(IndexError::Corrupt(format!("params section {} bytes, want 16", params.len())));
    }
    let k1 = f64::from_le_bytes(params[0..8].try_into().unwrap());
    let b = f64::from_le_bytes(params[8..16].try_into().unwrap());

    let docs = read_section(&mut r, "docs section")?;
    let mut dr = docs.as_slice();
    let n_docs = binio::read_u32(&mut dr, "doc count")? as usize;
    let mut doc_ids = Vec::with_capacity(n_docs);
    let mut doc_lengths = Vec::with_capacity(n_docs);
    let mut id_to_idx = HashMap::with_capacity(n_docs);
    for i in 0..n_docs {
        let id = binio::read_u64(&mut dr, "doc id")?;
        let len = binio::read_u32(&mut dr, "doc length")?;
        if id_to_idx.insert(id, i as u32).is_some() {
            return Err(IndexError::DuplicateDocId(id));
        }
        doc_ids.push(id);
        doc_lengths.push(len);
    }
    if n_docs == 0 {
        return Err(IndexError::EmptyCorpus);
    }

    let posts = read_section(&mut r, "postings section")?;
    let mut pr = posts.as_slice();
    let n_terms = binio::read_u32(&mut pr, "term count")? as usize;
    let mut postings = BTreeMap::new();
    for _ in 0..n_terms {
        let term_len = binio::read_u32(&mut pr, "term length")? as usize;
        let mut term_bytes = vec![0u8; term_len];
        pr.read_exact(&mut term_bytes)
            .map_err(|_| IndexError::Read(BinReadError::Truncated { context: "term bytes" }))?;
        let term = String::from_utf8(term_bytes)
            .map_err(|e| IndexError::Corrupt(format!("term not utf-8: {e}")))?;
        let n_post = binio::read_u32(&mut pr, "posting count")? as usize;
        let mut plist = Vec::with_capacity(n_post);
        for _ in 0..n_post {
            let doc = binio::read_u32(&mut pr, "posting doc")?;
            let tf = binio::read_u32(&mut pr, "posting tf")?;
            if doc as usize >= n_docs {
                return Err(IndexError::Corrupt(format!("posting references doc {doc} >= {n_docs}")));
            }
            plist.push((doc, tf));
        }
        postings.insert(term, plist);
    }

    let total_len: u64 = doc_lengths.iter().map(|&l| l as u64).sum();
    let avg_doc_length = total_len as f64 / n_docs as f64;
    Ok(InvertedIndex { k1, b, doc_ids, doc_lengths, avg_doc_length, postings })
}
