//! Building blocks for leaky integrate-and-fire style sequence models:
//! dense and convolutional cells with trainable dynamics, matching recurrent
//! baselines, reverse-mode differentiation with surrogate fire gradients,
//! and the bookkeeping needed to count their work.

pub mod activation;
pub mod baseline;
pub mod cell;
pub mod cost;
pub mod error;
pub mod events;
pub mod network;
pub mod optim;
pub mod presets;
pub mod surrogate;
pub mod tape;
pub mod tasks;
pub mod tensor;
pub mod train;

pub use activation::Activation;
pub use cell::{CellParams, Integration, OutputMode, Sharing};
pub use error::{Error, Result};
pub use network::{DynamicsCfg, Forward, LayerSpec, Network, NetworkSpec, OutputKind, ParamStore};
pub use optim::{Optimizer, OptimizerCfg, PlateauCfg, ReduceOnPlateau};
pub use tensor::{OpCounter, Tensor};
