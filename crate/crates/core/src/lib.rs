//! Non-autoregressive slate reranking.
//!
//! A matching-model generator scores every candidate for every slate
//! position in one forward pass. It is trained with unlikelihood and
//! contrastive objectives, decoded with a similarity penalty, and paired with
//! a listwise evaluator that picks among sampled slates. An autoregressive
//! baseline, a click simulator with an oracle, offline metrics and a latency
//! harness come with it.
//!
//! Models are generic over the scalar type; the aliases below fix it.

pub mod bench;
pub mod config;
pub mod data;
pub mod decoding;
pub mod error;
pub mod evaluator;
pub mod metrics;
pub mod model;
pub mod numerics;
pub mod objectives;
pub mod pipeline;
pub mod simulator;
pub mod train;

pub use error::{Error, Result};

pub type Generator = model::Generator<f64>;
pub type ArGenerator = model::ArGenerator<f64>;
pub type Evaluator = evaluator::Evaluator<f64>;
pub type ProbMatrix = model::ProbMatrix<f64>;
pub type Tensor = numerics::Tensor<f64>;
pub type Checkpoint = numerics::Checkpoint<f64>;

pub type Generator32 = model::Generator<f32>;
pub type ArGenerator32 = model::ArGenerator<f32>;
pub type Evaluator32 = evaluator::Evaluator<f32>;
pub type ProbMatrix32 = model::ProbMatrix<f32>;
pub type Tensor32 = numerics::Tensor<f32>;
pub type Checkpoint32 = numerics::Checkpoint<f32>;
