//! Retrieval engine for multi-modal (image + headline) candidate pools.
//!
//! Queries describe an event involving a set of named entities; candidates
//! pair an image with a headline. Relevance between a query and a candidate
//! is graded 1..3 from entity coverage and event identity. The crate builds
//! seeded synthetic corpora with that label structure, filters them the way
//! a dataset-construction pipeline would, indexes candidates sparsely (BM25
//! over headlines) and densely (image embeddings), fuses the two modalities
//! either at the score level or inside a small trainable cross-attention
//! encoder, and evaluates everything with standard rank metrics.
//!
//! Determinism is load-bearing: every stochastic component takes an explicit
//! seed, generation and training are bit-stable across reruns, and scoring
//! results do not depend on the worker-thread count.

pub mod binio;
pub mod config;
pub mod corpus;
pub mod encoder;
pub mod filters;
pub mod fusion;
pub mod index;
pub mod methods;
pub mod metrics;
pub mod pipeline;
pub mod rng;
pub mod synthgen;
pub mod vecmath;
