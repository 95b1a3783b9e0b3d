//! Core library for graph-topology codebook learning.
//!
//! The pipeline has two stages. Stage 1 trains a pair of GraphSAGE-style
//! encoders (one over node features, one over structural features) whose
//! outputs are quantized against a shared codebook via a Gumbel-softmax
//! relaxation, under edge-reconstruction, node-reconstruction, and
//! KL-to-uniform losses. Stage 2 freezes those artifacts and aligns a small
//! trainable text-sequence student to the frozen quantized embeddings, so
//! that inference needs no graph encoder at all.
//!
//! Everything is seeded and deterministic: reruns with the same seed produce
//! bit-identical parameters, metrics, and files. Scalar losses are invariant
//! under node relabeling because every reduction sums in value order.

pub mod codebook;
pub mod experiment;
pub mod gnn;
pub mod graph;
pub mod metrics;
pub mod numgrad;
pub mod rng;
pub mod stage1;
pub mod stage2;
pub mod student;

pub use numgrad::tensor::Tensor;
