//! Hand-derived backward pass and the symmetric contrastive loss.
//!
//! Chain, in reverse forward order:
//!
//! * normalize `f = e/‖e‖`: `de = (df − f·(f⋅df)) / ‖e‖`.
//! * output projection `e = W^T p`: `dW += p⊗de`, `dp = W·de`.
//! * attention pooling `p = Σ_t α_t x_t`, `α = softmax(X·probe)`:
//!   `dα_t = x_t⋅dp`, `dz_t = α_t (dα_t − Σ_s α_s dα_s)` (softmax Jacobian),
//!   `dx_t = α_t dp + dz_t·probe`, `dprobe += Σ_t dz_t x_t`.
//! * image residual `x_t += r` with `r = W_o^T W_v^T (P^T img)`:
//!   `dr = Σ_t dx_t`, then the three outer products down the chain. `W_q`
//!   and `W_k` never enter the forward value (single-key attention), so
//!   their gradients are identically zero.
//!
//! The loss is symmetric InfoNCE over in-batch negatives. For logits
//! `L = QC^T/τ` with row softmax `P` and column softmax `R`,
//! `∂loss/∂L = (P − I)/2B + (R − I)/2B`, which pushes matching pairs
//! together and everything else apart. The temperature gradient is
//! computed (and finite-difference checked) but only applied when a run
//! opts in.

use crate::corpus::CandidateId;

use super::linalg::{add_scaled_vec, dot, Mat};
use super::params::EncoderParams;
use super::forward::Trace;
use super::EncoderError;

#[derive(Debug, Clone)]
pub struct EncoderGrads {
    pub token_embeddings: Mat,
    pub pool_query: Vec<f64>,
    pub w_q: Mat,
    pub w_k: Mat,
    pub w_v: Mat,
    pub w_o: Mat,
    pub image_proj: Mat,
    pub out_proj: Mat,
    pub temperature: f64,
}

impl EncoderGrads {
    pub fn zeros_like(p: &EncoderParams) -> EncoderGrads {
        EncoderGrads {
            token_embeddings: Mat::zeros(p.token_embeddings.rows, p.d_model),
            pool_query: vec![0.0; p.d_model],
            w_q: Mat::zeros(p.d_model, p.d_model),
            w_k: Mat::zeros(p.d_model, p.d_model),
            w_v: Mat::zeros(p.d_model, p.d_model),
            w_o: Mat::zeros(p.d_model, p.d_model),
            image_proj: Mat::zeros(p.d_in, p.d_model),
            out_proj: Mat::zeros(p.d_model, p.d_out),
            temperature: 0.0,
        }
    }
}

/// Plain SGD: `θ -= lr · g`. Temperature moves only when asked.
pub(super) fn sgd_step(
    params: &mut EncoderParams,
    grads: &EncoderGrads,
    lr: f64,
    learn_temperature: bool,
) {
    params.token_embeddings.add_scaled(&grads.token_embeddings, -lr);
    add_scaled_vec(&mut params.pool_query, &grads.pool_query, -lr);
    params.w_v.add_scaled(&grads.w_v, -lr);
    params.w_o.add_scaled(&grads.w_o, -lr);
    params.image_proj.add_scaled(&grads.image_proj, -lr);
    params.out_proj.add_scaled(&grads.out_proj, -lr);
    if learn_temperature {
        params.temperature -= lr * grads.temperature;
    }
}

/// Accumulates parameter gradients for one traced tower pass, given the
/// loss gradient with respect to the unit-norm output.
pub(super) fn backward(
    params: &EncoderParams,
    trace: &Trace,
    d_out: &[f64],
    grads: &mut EncoderGrads,
) {
    // normalize
    let norm = dot(&trace.proj, &trace.proj).sqrt();
    let along = dot(&trace.out, d_out);
    let d_proj: Vec<f64> =
        d_out.iter().zip(&trace.out).map(|(&d, &o)| (d - o * along) / norm).collect();
    // output projection
    grads.out_proj.add_outer(&trace.pooled, &d_proj, 1.0);
    let d_pooled = params.out_proj.apply(&d_proj);

    if trace.states.rows == 0 {
        // Image tower: pooling over the single pseudo-token is the
        // identity, so d_pooled is exactly dm.
        let path = trace.image.as_ref().expect("image tower trace");
        grads.image_proj.add_outer(&path.img, &d_pooled, 1.0);
        return;
    }

    // attention pooling
    let t = trace.states.rows;
    let d_alpha: Vec<f64> = (0..t).map(|r| dot(trace.states.row(r), &d_pooled)).collect();
    let mixed: f64 = trace.alpha.iter().zip(&d_alpha).map(|(&a, &d)| a * d).sum();
    let dz: Vec<f64> = trace.alpha.iter().zip(&d_alpha).map(|(&a, &d)| a * (d - mixed)).collect();
    let mut d_residual = vec![0.0; params.d_model];
    for r in 0..t {
        // dx_r = alpha_r * d_pooled + dz_r * probe, scattered to the
        // token's embedding row (and summed into the residual path).
        let g = grads.token_embeddings.row_mut(trace.token_ids[r]);
        for i in 0..params.d_model {
            let dx = trace.alpha[r] * d_pooled[i] + dz[r] * params.pool_query[i];
            g[i] += dx;
            d_residual[i] += dx;
        }
        add_scaled_vec(&mut grads.pool_query, trace.states.row(r), dz[r]);
    }

    if let Some(path) = &trace.image {
        let d_v = params.w_o.apply(&d_residual);
        grads.w_o.add_outer(&path.v, &d_residual, 1.0);
        let d_m = params.w_v.apply(&d_v);
        grads.w_v.add_outer(&path.m, &d_v, 1.0);
        grads.image_proj.add_outer(&path.img, &d_m, 1.0);
    }
}

pub struct ItcGrads {
    pub loss: f64,
    pub d_queries: Vec<Vec<f64>>,
    pub d_candidates: Vec<Vec<f64>>,
    pub d_temperature: f64,
}

/// Symmetric InfoNCE over aligned unit-norm batches. When every logit is
/// equal (e.g. all-identical vectors) both softmaxes are uniform and the
/// loss is exactly `ln B`.
pub fn itc_loss(
    queries: &[Vec<f64>],
    candidates: &[Vec<f64>],
    temperature: f64,
) -> Result<ItcGrads, EncoderError> {
    let b = queries.len();
    if b != candidates.len() {
        return Err(EncoderError::DegenerateBatch(format!(
            "{b} queries vs {} candidates",
            candidates.len()
        )));
    }
    if b < 2 {
        return Err(EncoderError::DegenerateBatch(format!(
            "batch of {b}; in-batch negatives need at least 2 pairs"
        )));
    }
    assert!(temperature > 0.0, "temperature must be positive");

    let logits: Vec<Vec<f64>> = queries
        .iter()
        .map(|q| candidates.iter().map(|c| dot(q, c) / temperature).collect())
        .collect();

    // Row and column softmax with the stable logsumexp form for the loss.
    let mut loss = 0.0;
    let mut row_p = vec![vec![0.0; b]; b];
    let mut col_p = vec![vec![0.0; b]; b];
    for i in 0..b {
        let row = &logits[i];
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = row.iter().map(|&l| (l - max).exp()).sum();
        for j in 0..b {
            row_p[i][j] = (row[j] - max).exp() / sum;
        }
        loss += (max + sum.ln()) - row[i];
    }
    for j in 0..b {
        let col: Vec<f64> = (0..b).map(|i| logits[i][j]).collect();
        let max = col.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = col.iter().map(|&l| (l - max).exp()).sum();
        for i in 0..b {
            col_p[i][j] = (col[i] - max).exp() / sum;
        }
        loss += (max + sum.ln()) - col[j];
    }
    loss /= 2.0 * b as f64;
    debug_assert!(loss.is_finite());

    let scale = 1.0 / (2.0 * b as f64);
    let mut d_queries = vec![vec![0.0; queries[0].len()]; b];
    let mut d_candidates = vec![vec![0.0; queries[0].len()]; b];
    let mut d_temperature = 0.0;
    for i in 0..b {
        for j in 0..b {
            let delta = if i == j { 1.0 } else { 0.0 };
            let dl = scale * (row_p[i][j] - delta) + scale * (col_p[i][j] - delta);
            add_scaled_vec(&mut d_queries[i], &candidates[j], dl / temperature);
            add_scaled_vec(&mut d_candidates[j], &queries[i], dl / temperature);
            d_temperature -= dl * logits[i][j] / temperature;
        }
    }
    Ok(ItcGrads { loss, d_queries, d_candidates, d_temperature })
}

/// One forward/backward over an aligned batch of
/// (query tokens, image embedding, headline tokens) triples; returns the
/// loss and accumulates all parameter gradients into `grads`.
pub fn batch_backward(
    params: &EncoderParams,
    batch: &[(&[String], &[f32], &[String])],
    grads: &mut EncoderGrads,
) -> Result<f64, EncoderError> {
    let mut q_traces = Vec::with_capacity(batch.len());
    let mut c_traces = Vec::with_capacity(batch.len());
    for (q_tokens, img, c_tokens) in batch {
        q_traces.push(params.query_trace(q_tokens)?);
        c_traces.push(params.candidate_trace(img, c_tokens)?);
    }
    let q_vecs: Vec<Vec<f64>> = q_traces.iter().map(|t| t.out.clone()).collect();
    let c_vecs: Vec<Vec<f64>> = c_traces.iter().map(|t| t.out.clone()).collect();
    let itc = itc_loss(&q_vecs, &c_vecs, params.temperature)?;
    for (trace, d) in q_traces.iter().zip(&itc.d_queries) {
        backward(params, trace, d, grads);
    }
    for (trace, d) in c_traces.iter().zip(&itc.d_candidates) {
        backward(params, trace, d, grads);
    }
    grads.temperature += itc.d_temperature;
    Ok(itc.loss)
}

/// Training pair: a query and one of its score-3 candidates.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TrainPair {
    pub query_id: crate::corpus::QueryId,
    pub candidate_id: CandidateId,
}
