//! Multi-branch video quality scoring over precomputed embeddings.
//!
//! The crate mirrors a production pipeline downstream of frozen text and
//! frame encoders: corpora of per-video embeddings flow through a temporal
//! transformer encoder, four interpretable quality branches, and a learned
//! aggregation head, trained with a mixed pointwise and pairwise objective on
//! a hand-built reverse-mode autodiff tape. Ranking metrics and a synthetic
//! corpus generator close the loop for end-to-end evaluation.

pub mod corpus;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod score;
pub mod synth;
pub mod tensor;
pub mod train;
