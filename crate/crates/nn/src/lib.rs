//! Neural kernels sized for small swarm-control models.
//!
//! Everything here operates on row-major 2-D matrices: a batch of nodes,
//! tokens or samples is always a stack of rows. A [`Tape`] records the
//! forward pass of one loss and [`Tape::backward`] pushes exact gradients
//! into the [`ParamStore`] accumulators, which [`Adam`] then consumes.
//!
//! The crate is generic over [`Scalar`] so the same layers run in `f32` for
//! training and in `f64` for finite-difference gradient checks.

mod adam;
mod error;
pub mod gradcheck;
mod graph;
pub mod layers;
mod param;
mod scalar;
mod tape;

pub use adam::{Adam, AdamConfig};
pub use error::NnError;
pub use graph::Adjacency;
pub use layers::{
    Activation, FeedForward, GraphAgg, LayerNorm, Linear, Mlp2, MultiHeadAttention,
    TransformerEncoder, TransformerLayer,
};
pub use param::{ParamId, ParamStore, ParamTensor};
pub use scalar::Scalar;
pub use tape::{softmax_rows, Gradients, Tape, Var};

pub type Result<T, E = NnError> = std::result::Result<T, E>;
