//! Tower forward passes. Each traced pass records everything the backward
//! pass needs; the public `encode_*` methods discard the trace.

use std::collections::HashMap;

use crate::corpus::{CandidateId, Corpus, QueryId};

use super::linalg::{add_scaled_vec, dot, softmax, Mat};
use super::params::EncoderParams;
use super::EncoderError;

/// Everything the text tower touched, in forward order. For the candidate
/// tower `states` holds the *shifted* token states (after the image
/// residual) and the image fields are populated.
pub(super) struct Trace {
    /// Canonical (sorted) vocab indices, one per token occurrence.
    pub token_ids: Vec<usize>,
    /// T x d_model token states as pooled (candidate tower: after residual).
    pub states: Mat,
    /// Pooling weights, length T.
    pub alpha: Vec<f64>,
    /// Pooled state, d_model.
    pub pooled: Vec<f64>,
    /// Pre-normalization output projection, d_out.
    pub proj: Vec<f64>,
    /// Unit-norm encoding, d_out.
    pub out: Vec<f64>,
    /// Image pseudo-token m, value vector v and residual r = W_o^T v
    /// (candidate tower only).
    pub image: Option<ImagePath>,
}

pub(super) struct ImagePath {
    pub img: Vec<f64>,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub r: Vec<f64>,
}

fn project_and_normalize(
    params: &EncoderParams,
    pooled: Vec<f64>,
) -> Result<(Vec<f64>, Vec<f64>, Vec<f64>), EncoderError> {
    let proj = params.out_proj.t_apply(&pooled);
    let norm = dot(&proj, &proj).sqrt();
    if !(norm.is_finite() && norm > 0.0) {
        return Err(EncoderError::ZeroNorm);
    }
    let out: Vec<f64> = proj.iter().map(|v| v / norm).collect();
    Ok((pooled, proj, out))
}

impl EncoderParams {
    fn check_image(&self, img: &[f32]) -> Result<Vec<f64>, EncoderError> {
        if img.len() != self.d_in {
            return Err(EncoderError::DimensionMismatch {
                what: "image embedding",
                expected: self.d_in,
                found: img.len(),
            });
        }
        Ok(img.iter().map(|&v| f64::from(v)).collect())
    }

    /// Text tower over a canonicalized bag of tokens, optionally with the
    /// image residual added to every token state before pooling.
    fn text_tower(
        &self,
        tokens: &[String],
        image: Option<ImagePath>,
    ) -> Result<Trace, EncoderError> {
        let token_ids = self.canonical_ids(tokens)?;
        let t = token_ids.len();
        let mut states = Mat::zeros(t, self.d_model);
        for (row, &id) in token_ids.iter().enumerate() {
            states.row_mut(row).copy_from_slice(self.token_embeddings.row(id));
        }
        if let Some(path) = &image {
            // Single-key attention: the softmax over one logit is 1, so the
            // block contributes exactly r to every state, and the shared
            // shift cancels out of the pooling softmax below.
            for row in 0..t {
                add_scaled_vec(states.row_mut(row), &path.r, 1.0);
            }
        }
        let mut alpha: Vec<f64> = (0..t).map(|row| dot(states.row(row), &self.pool_query)).collect();
        softmax(&mut alpha);
        let mut pooled = vec![0.0; self.d_model];
        for (row, &a) in alpha.iter().enumerate() {
            add_scaled_vec(&mut pooled, states.row(row), a);
        }
        let (pooled, proj, out) = project_and_normalize(self, pooled)?;
        Ok(Trace { token_ids, states, alpha, pooled, proj, out, image })
    }

    pub(super) fn query_trace(&self, tokens: &[String]) -> Result<Trace, EncoderError> {
        self.text_tower(tokens, None)
    }

    pub(super) fn candidate_trace(
        &self,
        img: &[f32],
        tokens: &[String],
    ) -> Result<Trace, EncoderError> {
        let img = self.check_image(img)?;
        let m = self.image_proj.t_apply(&img);
        let v = self.w_v.t_apply(&m);
        let r = self.w_o.t_apply(&v);
        self.text_tower(tokens, Some(ImagePath { img, m, v, r }))
    }

    pub(super) fn image_trace(&self, img: &[f32]) -> Result<Trace, EncoderError> {
        let img = self.check_image(img)?;
        let m = self.image_proj.t_apply(&img);
        let v = self.w_v.t_apply(&m);
        let r = self.w_o.t_apply(&v);
        // The image-only view is the image's contribution channel of the
        // fused tower: the residual the candidate tower would add. Using the
        // same path keeps the view trained rather than a dead projection.
        let (pooled, proj, out) = project_and_normalize(self, r.clone())?;
        Ok(Trace {
            token_ids: Vec::new(),
            states: Mat::zeros(0, self.d_model),
            alpha: Vec::new(),
            pooled,
            proj,
            out,
            image: Some(ImagePath { img, m, v, r }),
        })
    }

    /// Unit-norm query encoding from its token bag.
    pub fn encode_query(&self, tokens: &[String]) -> Result<Vec<f64>, EncoderError> {
        Ok(self.query_trace(tokens)?.out)
    }

    /// Unit-norm image-only encoding.
    pub fn encode_image(&self, img: &[f32]) -> Result<Vec<f64>, EncoderError> {
        Ok(self.image_trace(img)?.out)
    }

    /// Unit-norm headline-only encoding (the text tower shared with
    /// queries, applied to a candidate's headline).
    pub fn encode_headline(&self, tokens: &[String]) -> Result<Vec<f64>, EncoderError> {
        Ok(self.query_trace(tokens)?.out)
    }

    /// Unit-norm fused candidate encoding: headline tokens with the image
    /// residual mixed into every token state.
    pub fn encode_candidate(&self, img: &[f32], tokens: &[String]) -> Result<Vec<f64>, EncoderError> {
        Ok(self.candidate_trace(img, tokens)?.out)
    }
}

/// Precomputed encodings over a whole corpus: one tower pass per query and
/// per candidate (each candidate through its three views), so scoring m
/// queries against n candidates later costs only dot products.
pub struct CorpusEncodings {
    pub query: HashMap<QueryId, Vec<f64>>,
    pub image: HashMap<CandidateId, Vec<f64>>,
    pub headline: HashMap<CandidateId, Vec<f64>>,
    pub fused: HashMap<CandidateId, Vec<f64>>,
}

pub fn encode_corpus(
    params: &EncoderParams,
    corpus: &Corpus,
) -> Result<CorpusEncodings, EncoderError> {
    let mut enc = CorpusEncodings {
        query: HashMap::with_capacity(corpus.queries.len()),
        image: HashMap::with_capacity(corpus.candidates.len()),
        headline: HashMap::with_capacity(corpus.candidates.len()),
        fused: HashMap::with_capacity(corpus.candidates.len()),
    };
    for q in &corpus.queries {
        enc.query.insert(q.id, params.encode_query(&q.tokens)?);
    }
    for c in &corpus.candidates {
        enc.image.insert(c.id, params.encode_image(&c.image_embedding)?);
        enc.headline.insert(c.id, params.encode_headline(&c.headline_tokens)?);
        enc.fused.insert(c.id, params.encode_candidate(&c.image_embedding, &c.headline_tokens)?);
    }
    Ok(enc)
}

/// Dense score matrix (row per query, column per candidate): cosine of the
/// unit-norm query and fused candidate encodings. Each side is encoded once,
/// so an m x n matrix costs m + n tower passes.
pub fn score_corpus(
    params: &EncoderParams,
    queries: &[Vec<String>],
    candidates: &[(Vec<f32>, Vec<String>)],
) -> Result<Vec<Vec<f64>>, EncoderError> {
    let enc: Vec<Vec<f64>> = candidates
        .iter()
        .map(|(img, tokens)| params.encode_candidate(img, tokens))
        .collect::<Result<_, _>>()?;
    let mut rows = Vec::with_capacity(queries.len());
    for tokens in queries {
        let q = params.encode_query(tokens)?;
        rows.push(enc.iter().map(|c| dot(&q, c)).collect());
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SplitMix64;

    fn setup() -> (EncoderParams, Vec<String>, Vec<f32>) {
        let vocab: Vec<String> = (0..20).map(|i| format!("w{i:02}")).collect();
        let params = EncoderParams::init(vocab, 12, 8, 6, 42);
        let tokens: Vec<String> =
            ["w03", "w07", "w07", "w11", "w00"].iter().map(|s| s.to_string()).collect();
        let mut rng = SplitMix64::new(5);
        let img: Vec<f32> = (0..8).map(|_| rng.normal() as f32).collect();
        (params, tokens, img)
    }

    #[test]
    fn outputs_are_unit_norm() {
        let (params, tokens, img) = setup();
        for out in [
            params.encode_query(&tokens).unwrap(),
            params.encode_image(&img).unwrap(),
            params.encode_candidate(&img, &tokens).unwrap(),
        ] {
            let n = dot(&out, &out).sqrt();
            assert!((n - 1.0).abs() < 1e-12, "norm {n}");
            assert_eq!(out.len(), 6);
        }
    }

    #[test]
    fn token_order_never_matters() {
        let (params, tokens, img) = setup();
        let mut shuffled = tokens.clone();
        shuffled.reverse();
        shuffled.swap(0, 2);
        assert_eq!(params.encode_query(&tokens).unwrap(), params.encode_query(&shuffled).unwrap());
        assert_eq!(
            params.encode_candidate(&img, &tokens).unwrap(),
            params.encode_candidate(&img, &shuffled).unwrap()
        );
    }

    #[test]
    fn zero_output_block_reduces_candidate_to_headline_tower() {
        let (mut params, tokens, img) = setup();
        params.w_o = Mat::zeros(params.d_model, params.d_model);
        let fused = params.encode_candidate(&img, &tokens).unwrap();
        let text = params.encode_query(&tokens).unwrap();
        assert_eq!(fused, text, "with W_o = 0 the residual is exactly zero");
    }

    #[test]
    fn fused_pooled_state_is_text_pooled_plus_residual() {
        // The constant shift cancels in the pooling softmax, so the fused
        // pooled state equals the text pooled state plus r exactly up to
        // floating-point association in the weighted sum.
        let (params, tokens, img) = setup();
        let text = params.query_trace(&tokens).unwrap();
        let fused = params.candidate_trace(&img, &tokens).unwrap();
        let r = &fused.image.as_ref().unwrap().r;
        for (i, (a, b)) in fused.alpha.iter().zip(&text.alpha).enumerate() {
            assert!((a - b).abs() < 1e-12, "alpha[{i}] changed: {a} vs {b}");
        }
        for i in 0..params.d_model {
            let want = text.pooled[i] + r[i];
            assert!((fused.pooled[i] - want).abs() < 1e-9, "pooled[{i}]");
        }
    }

    #[test]
    fn score_matrix_is_cosine_of_the_tower_outputs() {
        let (params, tokens, img) = setup();
        let mut rng = SplitMix64::new(9);
        let queries: Vec<Vec<String>> = (0..3)
            .map(|_| (0..4).map(|_| format!("w{:02}", rng.usize_below(20))).collect())
            .collect();
        let candidates: Vec<(Vec<f32>, Vec<String>)> = (0..5)
            .map(|_| {
                let img: Vec<f32> = (0..8).map(|_| rng.normal() as f32).collect();
                let toks = (0..3).map(|_| format!("w{:02}", rng.usize_below(20))).collect();
                (img, toks)
            })
            .collect();
        let m = score_corpus(&params, &queries, &candidates).unwrap();
        assert_eq!(m.len(), 3);
        for (qi, row) in m.iter().enumerate() {
            assert_eq!(row.len(), 5);
            for (ci, &s) in row.iter().enumerate() {
                assert!((-1.0 - 1e-12..=1.0 + 1e-12).contains(&s), "[{qi}][{ci}] = {s}");
                let q = params.encode_query(&queries[qi]).unwrap();
                let c = params
                    .encode_candidate(&candidates[ci].0, &candidates[ci].1)
                    .unwrap();
                assert_eq!(s, dot(&q, &c));
            }
        }
        // With a dead image block the candidate tower collapses onto the
        // query tower, so identical tokens score exactly 1 (self-cosine).
        let mut dead = params.clone();
        dead.w_o = Mat::zeros(dead.d_model, dead.d_model);
        let m = score_corpus(&dead, &[tokens.clone()], &[(img, tokens)]).unwrap();
        assert!((m[0][0] - 1.0).abs() < 1e-6, "self-score {}", m[0][0]);
    }

    #[test]
    fn image_mismatch_is_rejected() {
        let (params, tokens, _) = setup();
        let short = vec![0.5f32; 3];
        assert!(matches!(
            params.encode_candidate(&short, &tokens),
            Err(EncoderError::DimensionMismatch { .. })
        ));
    }
}
