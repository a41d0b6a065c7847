//! Parameter set, seeded initialization, and the checkpoint format.
//!
//! Checkpoints are a flat named-tensor container ("EPK1"): magic, format
//! version, tensor count, then per tensor a length-prefixed name, the u32
//! dims, and the f32 little-endian payload. Weights live in f64 in memory
//! and round to f32 on save; evaluation always reloads from disk, so any
//! result derived from a checkpoint is reproducible bit for bit.
//!
//! The vocabulary is *not* stored: it is rebuilt as the sorted unique token
//! set of the corpus, and a checkpoint is only meaningful next to the
//! corpus it was trained on. Loading verifies the embedding row count
//! against the rebuilt vocabulary and fails loudly on drift.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::binio::{self, BinReadError};
use crate::corpus::Corpus;
use crate::rng::SplitMix64;

use super::linalg::Mat;
use super::{EncoderError, DEFAULT_TEMPERATURE};

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"EPK1";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams {
    pub vocab: Vec<String>,
    pub d_model: usize,
    /// Input image embedding width.
    pub d_in: usize,
    /// Shared retrieval space width.
    pub d_out: usize,
    /// V x d_model.
    pub token_embeddings: Mat,
    /// Attention-pooling probe, d_model.
    pub pool_query: Vec<f64>,
    /// Cross-attention projections, d_model x d_model. With a single image
    /// pseudo-token the attention weight is constant, so `w_q`/`w_k` take
    /// no gradient; they stay in the parameter set and the checkpoint.
    pub w_q: Mat,
    pub w_k: Mat,
    pub w_v: Mat,
    pub w_o: Mat,
    /// d_in x d_model.
    pub image_proj: Mat,
    /// d_model x d_out.
    pub out_proj: Mat,
    pub temperature: f64,
    token_index: HashMap<String, usize>,
}

impl EncoderParams {
    /// Seeded initialization: small normal weights, scaled by fan-in for
    /// the linear maps.
    pub fn init(vocab: Vec<String>, d_model: usize, d_in: usize, d_out: usize, seed: u64) -> Self {
        assert!(d_model > 0 && d_in > 0 && d_out > 0 && !vocab.is_empty());
        let tensor_rng = |stream: u64, std: f64| {
            let mut rng = SplitMix64::derive(seed, stream);
            move || rng.normal() * std
        };
        let dm_std = 1.0 / (d_model as f64).sqrt();
        let token_embeddings = Mat::from_fn(vocab.len(), d_model, tensor_rng(1, 0.1));
        let pool_query: Vec<f64> = {
            let mut f = tensor_rng(2, 0.1);
            (0..d_model).map(|_| f()).collect()
        };
        let params = EncoderParams {
            token_index: vocab.iter().cloned().zip(0..).collect(),
            vocab,
            d_model,
            d_in,
            d_out,
            token_embeddings,
            pool_query,
            w_q: Mat::from_fn(d_model, d_model, tensor_rng(3, dm_std)),
            w_k: Mat::from_fn(d_model, d_model, tensor_rng(4, dm_std)),
            w_v: Mat::from_fn(d_model, d_model, tensor_rng(5, dm_std)),
            w_o: Mat::from_fn(d_model, d_model, tensor_rng(6, dm_std)),
            image_proj: Mat::from_fn(d_in, d_model, tensor_rng(7, 1.0 / (d_in as f64).sqrt())),
            out_proj: Mat::from_fn(d_model, d_out, tensor_rng(8, dm_std)),
            temperature: DEFAULT_TEMPERATURE,
        };
        debug_assert_eq!(params.token_index.len(), params.vocab.len(), "vocab has duplicates");
        params
    }

    /// Vocab index of a token.
    pub fn token_id(&self, token: &str) -> Result<usize, EncoderError> {
        self.token_index
            .get(token)
            .copied()
            .ok_or_else(|| EncoderError::UnknownToken(token.to_string()))
    }

    /// Canonical form of a token list: vocab indices, sorted. Duplicates
    /// are kept — the towers treat text as a bag.
    pub fn canonical_ids(&self, tokens: &[String]) -> Result<Vec<usize>, EncoderError> {
        if tokens.is_empty() {
            return Err(EncoderError::EmptyTokenList);
        }
        let mut ids = tokens.iter().map(|t| self.token_id(t)).collect::<Result<Vec<_>, _>>()?;
        ids.sort_unstable();
        Ok(ids)
    }
}

/// Sorted unique token set over all query token lists and candidate
/// headlines. This is the vocabulary convention checkpoints are bound to.
pub fn corpus_vocab(corpus: &Corpus) -> Vec<String> {
    let mut vocab: Vec<String> = corpus
        .queries
        .iter()
        .flat_map(|q| q.tokens.iter())
        .chain(corpus.candidates.iter().flat_map(|c| c.headline_tokens.iter()))
        .cloned()
        .collect();
    vocab.sort_unstable();
    vocab.dedup();
    vocab
}

fn tensors(params: &EncoderParams) -> Vec<(&'static str, Vec<u32>, Vec<f64>)> {
    vec![
        (
            "token_embeddings",
            vec![params.token_embeddings.rows as u32, params.d_model as u32],
            params.token_embeddings.data.clone(),
        ),
        ("pool_query", vec![params.d_model as u32], params.pool_query.clone()),
        ("w_q", vec![params.d_model as u32, params.d_model as u32], params.w_q.data.clone()),
        ("w_k", vec![params.d_model as u32, params.d_model as u32], params.w_k.data.clone()),
        ("w_v", vec![params.d_model as u32, params.d_model as u32], params.w_v.data.clone()),
        ("w_o", vec![params.d_model as u32, params.d_model as u32], params.w_o.data.clone()),
        (
            "image_proj",
            vec![params.d_in as u32, params.d_model as u32],
            params.image_proj.data.clone(),
        ),
        (
            "out_proj",
            vec![params.d_model as u32, params.d_out as u32],
            params.out_proj.data.clone(),
        ),
        ("temperature", vec![1], vec![params.temperature]),
    ]
}

pub fn save_checkpoint(params: &EncoderParams, path: &Path) -> Result<(), EncoderError> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(&CHECKPOINT_MAGIC)?;
    binio::write_u32(&mut w, CHECKPOINT_VERSION)?;
    let tensors = tensors(params);
    binio::write_u32(&mut w, tensors.len() as u32)?;
    for (name, dims, data) in tensors {
        binio::write_u32(&mut w, name.len() as u32)?;
        w.write_all(name.as_bytes())?;
        binio::write_u32(&mut w, dims.len() as u32)?;
        for d in &dims {
            binio::write_u32(&mut w, *d)?;
        }
        let f32s: Vec<f32> = data.iter().map(|&v| v as f32).collect();
        binio::write_u64(&mut w, (f32s.len() * 4) as u64)?;
        binio::write_f32s(&mut w, &f32s)?;
    }
    w.flush()?;
    Ok(())
}

fn read_tensor(
    r: &mut impl Read,
) -> Result<(String, Vec<u32>, Vec<f64>), BinReadError> {
    let name_len = binio::read_u32(r, "tensor name length")? as usize;
    if name_len > 256 {
        return Err(BinReadError::BadHeader(format!("tensor name length {name_len}")));
    }
    let mut name_bytes = vec![0u8; name_len];
    r.read_exact(&mut name_bytes)
        .map_err(|_| BinReadError::Truncated { context: "tensor name" })?;
    let name = String::from_utf8(name_bytes)
        .map_err(|_| BinReadError::BadHeader("tensor name is not utf-8".into()))?;
    let ndim = binio::read_u32(r, "tensor rank")? as usize;
    if ndim > 4 {
        return Err(BinReadError::BadHeader(format!("tensor rank {ndim}")));
    }
    let mut dims = Vec::with_capacity(ndim);
    for _ in 0..ndim {
        dims.push(binio::read_u32(r, "tensor dim")?);
    }
    let n_elems: u64 = dims.iter().map(|&d| d as u64).product();
    let byte_len = binio::read_u64(r, "tensor byte length")?;
    if byte_len != n_elems * 4 {
        return Err(BinReadError::BadHeader(format!(
            "tensor {name}: {byte_len} bytes for {n_elems} f32 elements"
        )));
    }
    let data = binio::read_f32s(r, n_elems as usize, "tensor data")?;
    Ok((name, dims, data.into_iter().map(f64::from).collect()))
}

/// Loads a checkpoint and binds it to `vocab` (normally
/// [`corpus_vocab`] of the corpus it was trained on).
pub fn load_checkpoint(path: &Path, vocab: Vec<String>) -> Result<EncoderParams, EncoderError> {
    let mut r = BufReader::new(File::open(path)?);
    binio::check_magic(&mut r, CHECKPOINT_MAGIC)?;
    let version = binio::read_u32(&mut r, "checkpoint version")?;
    if version != CHECKPOINT_VERSION {
        return Err(EncoderError::Read(BinReadError::BadHeader(format!(
            "unsupported checkpoint version {version}"
        ))));
    }
    let n_tensors = binio::read_u32(&mut r, "tensor count")?;
    let mut by_name: HashMap<String, (Vec<u32>, Vec<f64>)> = HashMap::new();
    for _ in 0..n_tensors {
        let (name, dims, data) = read_tensor(&mut r)?;
        if by_name.insert(name.clone(), (dims, data)).is_some() {
            return Err(EncoderError::Read(BinReadError::BadHeader(format!(
                "duplicate tensor {name}"
            ))));
        }
    }
    let mut take = |name: &str, ndim: usize| -> Result<(Vec<u32>, Vec<f64>), EncoderError> {
        let (dims, data) = by_name
            .remove(name)
            .ok_or_else(|| EncoderError::Read(BinReadError::BadHeader(format!("missing tensor {name}"))))?;
        if dims.len() != ndim {
            return Err(EncoderError::Read(BinReadError::BadHeader(format!(
                "tensor {name} has rank {}, expected {ndim}",
                dims.len()
            ))));
        }
        Ok((dims, data))
    };

    let (emb_dims, emb) = take("token_embeddings", 2)?;
    let (v, d_model) = (emb_dims[0] as usize, emb_dims[1] as usize);
    if v != vocab.len() {
        return Err(EncoderError::VocabMismatch { expected: v, found: vocab.len() });
    }
    let (pq_dims, pool_query) = take("pool_query", 1)?;
    let (wq_dims, wq) = take("w_q", 2)?;
    let (wk_dims, wk) = take("w_k", 2)?;
    let (wv_dims, wv) = take("w_v", 2)?;
    let (wo_dims, wo) = take("w_o", 2)?;
    let (ip_dims, ip) = take("image_proj", 2)?;
    let (op_dims, op) = take("out_proj", 2)?;
    let (_, temperature) = take("temperature", 1)?;
    for (name, dims, want) in [
        ("pool_query", &pq_dims[..], [d_model, 1]),
        ("w_q", &wq_dims[..], [d_model, d_model]),
        ("w_k", &wk_dims[..], [d_model, d_model]),
        ("w_v", &wv_dims[..], [d_model, d_model]),
        ("w_o", &wo_dims[..], [d_model, d_model]),
    ] {
        if dims[0] as usize != want[0] || (dims.len() > 1 && dims[1] as usize != want[1]) {
            return Err(EncoderError::Read(BinReadError::BadHeader(format!(
                "tensor {name} has dims {dims:?}"
            ))));
        }
    }
    if ip_dims[1] as usize != d_model || op_dims[0] as usize != d_model {
        return Err(EncoderError::Read(BinReadError::BadHeader(
            "image/output projection widths disagree with d_model".into(),
        )));
    }
    let (d_in, d_out) = (ip_dims[0] as usize, op_dims[1] as usize);
    let mat = |rows: usize, cols: usize, data: Vec<f64>| Mat { rows, cols, data };
    Ok(EncoderParams {
        token_index: vocab.iter().cloned().zip(0..).collect(),
        vocab,
        d_model,
        d_in,
        d_out,
        token_embeddings: mat(v, d_model, emb),
        pool_query,
        w_q: mat(d_model, d_model, wq),
        w_k: mat(d_model, d_model, wk),
        w_v: mat(d_model, d_model, wv),
        w_o: mat(d_model, d_model, wo),
        image_proj: mat(d_in, d_model, ip),
        out_proj: mat(d_model, d_out, op),
        temperature: temperature[0],
    })
}
