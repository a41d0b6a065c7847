//! Dual-stream encoder with a fused candidate tower.
//!
//! Three entry points share one parameter set:
//!
//! * `encode_query` — bag-of-tokens text tower: token embeddings,
//!   attention pooling against a learned probe vector, output projection,
//!   L2 normalization. Token order never matters: lists are canonicalized
//!   (sorted by vocab index) on entry, so permutations encode bit-identically.
//! * `encode_image` — the image-only candidate view: the image embedding is
//!   pushed through the full image contribution channel of the fused tower
//!   (projection, value map, output block) and then the shared output
//!   projection. It is exactly the residual the fused tower would add, so
//!   the view stays trained instead of being a dead projection.
//! * `encode_candidate` — the fused tower: headline tokens as in the text
//!   tower, plus one image pseudo-token attended to by every token state
//!   through a residual cross-attention block. With a single key the
//!   attention weight is identically 1, so the block reduces to adding
//!   `W_o^T W_v^T (P_img^T img)` to every token state; `W_q`/`W_k` remain in
//!   the parameter set but carry no gradient. The constant shift also
//!   cancels inside the pooling softmax, which makes the fused pooled state
//!   *exactly* the text pooled state plus the image contribution — the two
//!   streams stay independent until that one addition, so encoding m
//!   queries and n candidates costs O(m + n) tower passes, never O(m·n).
//!
//! Everything is f64 end to end; checkpoints round to f32 on disk, and
//! evaluation always reloads from the checkpoint so results match across
//! train-then-eval and eval-from-disk runs.
//!
//! Training is symmetric InfoNCE over (query, positive candidate) pairs
//! with plain SGD; gradients are hand-derived and verified against central
//! finite differences.

mod forward;
mod grad;
mod linalg;
mod params;
mod train;

pub use forward::{encode_corpus, score_corpus, CorpusEncodings};
pub use grad::{batch_backward, itc_loss, EncoderGrads};
pub use linalg::Mat;
pub use params::{corpus_vocab, load_checkpoint, save_checkpoint, EncoderParams, CHECKPOINT_MAGIC};
pub use train::{train, EpochStats, TrainConfig, TrainOutcome};

use crate::binio::BinReadError;

/// Fixed softmax temperature for the contrastive loss; gradients for it are
/// derived and checked, but SGD leaves it alone unless explicitly enabled.
pub const DEFAULT_TEMPERATURE: f64 = 0.07;

#[derive(Debug, thiserror::Error)]
pub enum EncoderError {
    #[error("token {0:?} is not in the vocabulary")]
    UnknownToken(String),
    #[error("cannot encode an empty token list")]
    EmptyTokenList,
    #[error("degenerate batch: {0}")]
    DegenerateBatch(String),
    #[error("{what}: expected {expected}, found {found}")]
    DimensionMismatch { what: &'static str, expected: usize, found: usize },
    #[error("checkpoint vocabulary has {expected} entries but the corpus yields {found}")]
    VocabMismatch { expected: usize, found: usize },
    #[error("no (query, positive) training pairs in the train split")]
    NoTrainingPairs,
    #[error("encoding collapsed to a zero vector")]
    ZeroNorm,
    #[error("validation scoring failed: {0}")]
    Validation(String),
    #[error("checkpoint read error: {0}")]
    Read(#[from] BinReadError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}
