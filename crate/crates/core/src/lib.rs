//! Differentiable, latency-aware architecture search for small
//! convolutional networks.
//!
//! The numeric core is generic over [`Scalar`] (`f32` or `f64`). Searches
//! and benchmarks run in `f32`; gradient checks use `f64`.

pub mod blocks;
pub mod data;
pub mod error;
pub mod io;
pub mod latency;
pub mod network;
pub mod nn;
pub mod scalar;
pub mod space;
pub mod supernet;
pub mod trainer;

pub use blocks::{BlockConfig, BlockKind};
pub use data::{Dataset, Normalization, SplitSpec};
pub use error::{Error, Result};
pub use latency::{LatencyKey, LatencyModel, LatencyTable};
pub use network::Network;
pub use nn::{Graph, ParamStore, Tensor};
pub use scalar::Scalar;
pub use space::{ArchDescriptor, SearchSpace, SpaceConfig};
pub use supernet::{Supernet, ThetaCheckpoint};
pub use trainer::{LossMode, RetrainParams, SearchHyperParams, SearchState};

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
pub type Graph32 = Graph<f32>;
pub type Graph64 = Graph<f64>;
pub type Network32 = Network<f32>;
pub type Network64 = Network<f64>;
pub type Supernet32 = Supernet<f32>;
pub type Supernet64 = Supernet<f64>;
pub type SearchState32 = SearchState<f32>;
