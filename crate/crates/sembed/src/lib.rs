//! Sentence-representation learning at desk scale: a pooled transformer
//! encoder, a non-causal reconstruction decoder conditioned on a single
//! sentence vector, two-stage input corruption, an in-batch contrastive
//! objective, and the training plus evaluation machinery around them —
//! all on a from-scratch reverse-mode tensor substrate.

pub mod checkpoint;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod graph;
pub mod kernels;
pub mod model;
pub mod noise;
pub mod objectives;
pub mod rng;
pub mod tensor;
pub mod text;
pub mod train;

pub use error::{Error, Result};
pub use graph::{Bound, Graph, NodeId};
pub use rng::RngStream;
pub use tensor::{ParamStore, Scalar, Tensor};
