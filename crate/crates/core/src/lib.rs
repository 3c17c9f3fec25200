//! Conditionally deep hybrid-precision networks split across an edge device
//! and a cloud server.

#![allow(clippy::neg_cmp_op_on_partial_ord)]
pub mod checkpoint;
pub mod data;
pub mod energy;
pub mod error;
pub mod explore;
pub mod gate;
pub mod net;
pub mod ops;
pub mod quant;
pub mod runtime;
pub mod tensor;
pub mod train;
pub mod wire;

pub use error::{Error, Result};
pub use data::Dataset;
pub use energy::EnergyTable;
pub use explore::ExperimentConfig;
pub use gate::{infer_conditional, ExitPoint};
pub use net::{HybridNetConfig, HybridNetwork};
pub use train::{Strategy, TrainConfig};
pub use tensor::Tensor;
