//! Vision-conditioned dialogue completion for comic-style stories.
//!
//! The crate provides the full stack: a reverse-mode autodiff tensor
//! engine, transformer building blocks, an attention path that injects a
//! mapped global image feature as an additive logit bias over local image
//! tokens, text/vision co-attention fusion, a seeded training loop with
//! inverse-square-root learning-rate decay, beam-search decoding, corpus
//! BLEU scoring, and a three-hop chain-of-thought annotation pipeline.
//!
//! Core math is generic over the scalar type (`scalar::Scalar`, either
//! f32 or f64); the aliases below pin the model stack to f64.

pub mod bleu;
pub mod checkpoint;
pub mod data;
pub mod decode;
pub mod error;
pub mod eval;
pub mod fvpg;
pub mod gradcheck;
pub mod graph;
pub mod mcot;
pub mod model;
pub mod nn;
pub mod scalar;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use graph::Var;

/// Training/testing precision used by the model stack.
pub type Tensor = tensor::TensorBase<f64>;
/// Computation graph at training precision.
pub type Graph = graph::GraphBase<f64>;
/// Single-precision variants, for callers that trade accuracy for size.
pub type Tensor32 = tensor::TensorBase<f32>;
pub type Graph32 = graph::GraphBase<f32>;
