//! Python bindings. Thin wrappers over the core types: no logic lives here
//! beyond argument conversion, so behavior stays identical between the CLI
//! and the Python surface.

use std::path::PathBuf;

use pyo3::exceptions::{PyKeyError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use fusearch::config::ExperimentConfig;
use fusearch::corpus as fc;
use fusearch::corpus::Split;
use fusearch::encoder;
use fusearch::fusion::FusionWeights;
use fusearch::index;
use fusearch::methods::{self, MethodContext};
use fusearch::metrics::{self, JudgedMap, MethodReport, Protocol};
use fusearch::pipeline;
use fusearch::synthgen::{self, SynthConfig};

fn verr(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn split_name(s: Split) -> &'static str {
    match s {
        Split::Train => "train",
        Split::Val => "val",
        Split::Test => "test",
    }
}

fn report_dict<'py>(py: Python<'py>, r: &MethodReport) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new(py);
    d.set_item("method", &r.method)?;
    d.set_item("protocol", r.protocol.to_string())?;
    d.set_item("split", split_name(r.split))?;
    d.set_item("r_at_1", r.r_at_1)?;
    d.set_item("r_at_5", r.r_at_5)?;
    d.set_item("r_at_10", r.r_at_10)?;
    d.set_item("map", r.map)?;
    d.set_item("ndcg", r.ndcg)?;
    d.set_item("n_queries", r.n_queries)?;
    d.set_item("excluded_no_positives", r.excluded_no_positives)?;
    d.set_item("excluded_zero_ideal_gain", r.excluded_zero_ideal_gain)?;
    Ok(d)
}

/// Queries, candidates, and graded judgments plus their embeddings.
#[pyclass]
struct Corpus {
    inner: fc::Corpus,
}

#[pymethods]
impl Corpus {
    /// Generates a seeded synthetic corpus. Defaults mirror the Rust side.
    #[staticmethod]
    #[pyo3(signature = (
        seed = 0, n_queries_train = 256, n_queries_val = 64, n_queries_test = 64,
        candidates_per_query = 8, n_pool = 6144, embedding_dim = 32,
        n_entities = 64, n_events = 16, vocab_size = 256,
        frac_score1 = 0.15, frac_score2 = 0.62, noise_sigma = 0.25,
    ))]
    #[allow(clippy::too_many_arguments)]
    fn generate(
        seed: u64,
        n_queries_train: usize,
        n_queries_val: usize,
        n_queries_test: usize,
        candidates_per_query: usize,
        n_pool: usize,
        embedding_dim: usize,
        n_entities: u32,
        n_events: u32,
        vocab_size: u32,
        frac_score1: f64,
        frac_score2: f64,
        noise_sigma: f64,
    ) -> PyResult<Corpus> {
        let cfg = SynthConfig {
            n_queries_train,
            n_queries_val,
            n_queries_test,
            candidates_per_query,
            n_pool,
            embedding_dim,
            n_entities,
            n_events,
            vocab_size,
            frac_score1,
            frac_score2,
            noise_sigma,
            seed,
        };
        synthgen::generate(&cfg).map(|inner| Corpus { inner }).map_err(verr)
    }

    /// Loads the record file plus its companion embedding file.
    #[staticmethod]
    fn load(records_path: PathBuf, embeddings_path: PathBuf) -> PyResult<Corpus> {
        fc::load_corpus(&records_path, &embeddings_path)
            .map(|inner| Corpus { inner })
            .map_err(verr)
    }

    fn save(&self, records_path: PathBuf, embeddings_path: PathBuf) -> PyResult<()> {
        fc::save_corpus(&self.inner, &records_path, &embeddings_path).map_err(verr)
    }

    #[getter]
    fn n_queries(&self) -> usize {
        self.inner.queries.len()
    }

    #[getter]
    fn n_candidates(&self) -> usize {
        self.inner.candidates.len()
    }

    #[getter]
    fn n_judgments(&self) -> usize {
        self.inner.judgments.len()
    }

    #[getter]
    fn embedding_dim(&self) -> usize {
        self.inner.embedding_dim
    }

    /// Query ids, optionally restricted to `"train"`, `"val"`, or `"test"`.
    #[pyo3(signature = (split = None))]
    fn query_ids(&self, split: Option<&str>) -> PyResult<Vec<u64>> {
        match split {
            None => Ok(self.inner.queries.iter().map(|q| q.id).collect()),
            Some(s) => {
                let split: Split = s.parse().map_err(verr)?;
                Ok(self.inner.queries_in(split).iter().map(|q| q.id).collect())
            }
        }
    }

    fn query_tokens(&self, query_id: u64) -> PyResult<Vec<String>> {
        self.lookup_query(query_id).map(|q| q.tokens.clone())
    }

    fn query_embedding(&self, query_id: u64) -> PyResult<Vec<f32>> {
        self.lookup_query(query_id).map(|q| q.embedding.clone())
    }

    fn candidate_ids(&self) -> Vec<u64> {
        self.inner.candidates.iter().map(|c| c.id).collect()
    }

    fn headline_tokens(&self, candidate_id: u64) -> PyResult<Vec<String>> {
        self.lookup_candidate(candidate_id).map(|c| c.headline_tokens.clone())
    }

    fn image_embedding(&self, candidate_id: u64) -> PyResult<Vec<f32>> {
        self.lookup_candidate(candidate_id).map(|c| c.image_embedding.clone())
    }

    /// `(candidate_id, score)` pairs judged for the query.
    fn judged(&self, query_id: u64) -> PyResult<Vec<(u64, u8)>> {
        self.lookup_query(query_id)?;
        Ok(self.inner.judged(query_id).to_vec())
    }

    /// Graded relevance of a pair under the entity/event definition.
    fn relevance(&self, query_id: u64, candidate_id: u64) -> PyResult<u8> {
        let q = self.lookup_query(query_id)?;
        let c = self.lookup_candidate(candidate_id)?;
        fc::relevance(q, c).map_err(verr)
    }

    fn __len__(&self) -> usize {
        self.inner.queries.len()
    }

    fn __repr__(&self) -> String {
        format!(
            "Corpus({} queries, {} candidates, {} judgments, dim {})",
            self.inner.queries.len(),
            self.inner.candidates.len(),
            self.inner.judgments.len(),
            self.inner.embedding_dim,
        )
    }
}

impl Corpus {
    fn lookup_query(&self, id: u64) -> PyResult<&fc::Query> {
        self.inner
            .query(id)
            .ok_or_else(|| PyKeyError::new_err(format!("unknown query {id}")))
    }

    fn lookup_candidate(&self, id: u64) -> PyResult<&fc::Candidate> {
        self.inner
            .candidate(id)
            .ok_or_else(|| PyKeyError::new_err(format!("unknown candidate {id}")))
    }
}

/// BM25 index over candidate headlines.
#[pyclass]
struct HeadlineIndex {
    inner: index::InvertedIndex,
}

#[pymethods]
impl HeadlineIndex {
    #[staticmethod]
    #[pyo3(signature = (corpus, k1 = index::DEFAULT_K1, b = index::DEFAULT_B))]
    fn build(corpus: &Corpus, k1: f64, b: f64) -> PyResult<HeadlineIndex> {
        index::build_headline_index(&corpus.inner, k1, b)
            .map(|inner| HeadlineIndex { inner })
            .map_err(verr)
    }

    /// `(candidate_id, score)` descending; only matching candidates appear.
    fn topk(&self, tokens: Vec<String>, k: usize) -> Vec<(u64, f64)> {
        index::bm25_topk(&self.inner, 0, &tokens, k).entries
    }

    #[getter]
    fn n_docs(&self) -> usize {
        self.inner.n_docs()
    }

    #[getter]
    fn avg_doc_length(&self) -> f64 {
        self.inner.avg_doc_length()
    }

    fn __len__(&self) -> usize {
        self.inner.n_docs()
    }
}

/// Dot-product index over candidate image embeddings.
#[pyclass]
struct ImageIndex {
    inner: index::DenseIndex,
}

#[pymethods]
impl ImageIndex {
    #[staticmethod]
    fn build(corpus: &Corpus) -> PyResult<ImageIndex> {
        index::DenseIndex::over_images(&corpus.inner)
            .map(|inner| ImageIndex { inner })
            .map_err(verr)
    }

    fn topk(&self, query: Vec<f32>, k: usize) -> PyResult<Vec<(u64, f64)>> {
        index::dense_topk(&self.inner, 0, &query, k)
            .map(|r| r.entries)
            .map_err(verr)
    }

    #[getter]
    fn dim(&self) -> usize {
        self.inner.dim()
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }
}

/// Per-id encodings of a whole corpus under one trained encoder.
#[pyclass]
struct Encodings {
    inner: encoder::CorpusEncodings,
}

#[pymethods]
impl Encodings {
    fn __repr__(&self) -> String {
        format!(
            "Encodings({} queries, {} candidates)",
            self.inner.query.len(),
            self.inner.fused.len(),
        )
    }
}

/// Trained two-tower encoder.
#[pyclass]
struct Encoder {
    params: encoder::EncoderParams,
    history: Vec<encoder::EpochStats>,
}

#[pymethods]
impl Encoder {
    #[staticmethod]
    #[pyo3(signature = (
        corpus, epochs = 30, batch_size = 16, lr = 0.1, d_model = 32, d_out = 32,
        seed = 0, select_metric = "ndcg", learn_temperature = true,
    ))]
    #[allow(clippy::too_many_arguments)]
    fn train(
        corpus: &Corpus,
        epochs: usize,
        batch_size: usize,
        lr: f64,
        d_model: usize,
        d_out: usize,
        seed: u64,
        select_metric: &str,
        learn_temperature: bool,
    ) -> PyResult<Encoder> {
        let cfg = encoder::TrainConfig {
            epochs,
            batch_size,
            lr,
            d_model,
            d_out,
            seed,
            select_metric: select_metric.parse().map_err(verr)?,
            learn_temperature,
        };
        let out = encoder::train(&corpus.inner, &cfg).map_err(verr)?;
        Ok(Encoder { params: out.params, history: out.history })
    }

    #[staticmethod]
    fn load(path: PathBuf, corpus: &Corpus) -> PyResult<Encoder> {
        let vocab = encoder::corpus_vocab(&corpus.inner);
        encoder::load_checkpoint(&path, vocab)
            .map(|params| Encoder { params, history: Vec::new() })
            .map_err(verr)
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        encoder::save_checkpoint(&self.params, &path).map_err(verr)
    }

    fn encode_query(&self, tokens: Vec<String>) -> PyResult<Vec<f64>> {
        self.params.encode_query(&tokens).map_err(verr)
    }

    fn encode_candidate(&self, image: Vec<f32>, tokens: Vec<String>) -> PyResult<Vec<f64>> {
        self.params.encode_candidate(&image, &tokens).map_err(verr)
    }

    fn encode_corpus(&self, corpus: &Corpus) -> PyResult<Encodings> {
        encoder::encode_corpus(&self.params, &corpus.inner)
            .map(|inner| Encodings { inner })
            .map_err(verr)
    }

    #[getter]
    fn temperature(&self) -> f64 {
        self.params.temperature
    }

    #[getter]
    fn d_out(&self) -> usize {
        self.params.d_out
    }

    #[getter]
    fn vocab_size(&self) -> usize {
        self.params.vocab.len()
    }

    /// `(epoch, mean_loss, val_metric)` per epoch; empty for loaded encoders.
    #[getter]
    fn history(&self) -> Vec<(usize, f64, Option<f64>)> {
        self.history.iter().map(|s| (s.epoch, s.mean_loss, s.val_metric)).collect()
    }
}

/// Sorts a candidate pool by score descending, ids ascending on ties.
#[pyfunction]
fn rank_pool(pool: Vec<u64>, scores: Vec<f64>) -> PyResult<Vec<(u64, f64)>> {
    if pool.len() != scores.len() {
        return Err(PyValueError::new_err(format!(
            "{} candidates but {} scores",
            pool.len(),
            scores.len()
        )));
    }
    Ok(metrics::rank_pool(&pool, &scores))
}

/// Recall@k over a ranking; `None` when the judgments hold no positives.
#[pyfunction]
fn recall_at_k(ranking: Vec<(u64, f64)>, judged: JudgedMap, k: usize) -> Option<f64> {
    metrics::recall_at_k(&ranking, &judged, k)
}

#[pyfunction]
fn average_precision(ranking: Vec<(u64, f64)>, judged: JudgedMap) -> Option<f64> {
    metrics::average_precision(&ranking, &judged)
}

#[pyfunction]
fn ndcg(ranking: Vec<(u64, f64)>, judged: JudgedMap) -> Option<f64> {
    metrics::ndcg(&ranking, &judged)
}

/// Grid-searches the score-fusion image weight; returns `(w_image, value)`.
#[pyfunction]
#[pyo3(signature = (corpus, encodings, split = "val", protocol = "distractor", metric = "ndcg"))]
fn tune_weights(
    corpus: &Corpus,
    encodings: &Encodings,
    split: &str,
    protocol: &str,
    metric: &str,
) -> PyResult<(f64, f64)> {
    let split: Split = split.parse().map_err(verr)?;
    let protocol: Protocol = protocol.parse().map_err(verr)?;
    let metric: metrics::MetricKind = metric.parse().map_err(verr)?;
    let (w, value) =
        methods::tune_score_fusion(&corpus.inner, &encodings.inner, split, protocol, metric)
            .map_err(verr)?;
    Ok((w.w_image, value))
}

/// Evaluates one method and returns its report as a dict. Encoder-backed
/// methods need `encodings`; score fusion takes its image weight from
/// `w_image` (even split when omitted).
#[pyfunction]
#[pyo3(name = "evaluate")]
#[pyo3(signature = (
    corpus, method, protocol = "distractor", split = "test", encodings = None,
    w_image = None, first_stage_k = methods::DEFAULT_FIRST_STAGE_K,
    seed = 0, threads = 1, run_depth = 100,
))]
#[allow(clippy::too_many_arguments)]
fn evaluate_method<'py>(
    py: Python<'py>,
    corpus: &Corpus,
    method: &str,
    protocol: &str,
    split: &str,
    encodings: Option<PyRef<'_, Encodings>>,
    w_image: Option<f64>,
    first_stage_k: usize,
    seed: u64,
    threads: usize,
    run_depth: usize,
) -> PyResult<Bound<'py, PyDict>> {
    let method: methods::Method = method.parse().map_err(verr)?;
    let protocol: Protocol = protocol.parse().map_err(verr)?;
    let split: Split = split.parse().map_err(verr)?;
    let mut ctx = MethodContext::new(&corpus.inner);
    if let Some(e) = &encodings {
        ctx.encodings = Some(&e.inner);
    }
    if let Some(w) = w_image {
        if !(0.0..=1.0).contains(&w) {
            return Err(PyValueError::new_err(format!("w_image {w} outside [0, 1]")));
        }
        ctx.score_weights = FusionWeights::new(w);
    }
    ctx.first_stage_k = first_stage_k;
    ctx.seed = seed;
    let scorer = methods::build_scorer(method, &ctx).map_err(verr)?;
    let eval = metrics::evaluate(scorer.as_ref(), &corpus.inner, split, protocol, threads, run_depth)
        .map_err(verr)?;
    report_dict(py, &eval.report)
}

/// Runs every pipeline stage for a key=value config file and returns the
/// method reports as dicts. Artifacts land in the config's `out_dir`.
#[pyfunction]
fn run_pipeline(py: Python<'_>, config_path: PathBuf) -> PyResult<Vec<Py<PyDict>>> {
    let cfg = ExperimentConfig::from_file(&config_path).map_err(verr)?;
    let reports = pipeline::run_all(&cfg).map_err(verr)?;
    reports.iter().map(|r| report_dict(py, r).map(Bound::unbind)).collect()
}

#[pymodule]
fn fusearch_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Corpus>()?;
    m.add_class::<HeadlineIndex>()?;
    m.add_class::<ImageIndex>()?;
    m.add_class::<Encoder>()?;
    m.add_class::<Encodings>()?;
    m.add_function(wrap_pyfunction!(rank_pool, m)?)?;
    m.add_function(wrap_pyfunction!(recall_at_k, m)?)?;
    m.add_function(wrap_pyfunction!(average_precision, m)?)?;
    m.add_function(wrap_pyfunction!(ndcg, m)?)?;
    m.add_function(wrap_pyfunction!(tune_weights, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate_method, m)?)?;
    m.add_function(wrap_pyfunction!(run_pipeline, m)?)?;
    Ok(())
}
