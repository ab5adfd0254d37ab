//! Minimal reverse-mode automatic differentiation with the layers, losses
//! and optimizer needed to train a per-pixel embedding network and a
//! segmentation head on a CPU.

pub mod adam;
pub mod checkpoint;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod layers;
pub mod losses;
pub mod real;
pub mod tensor;

pub use adam::Adam;
pub use error::{NnError, Result};
pub use graph::{ConvSpec, Graph, Var};
pub use layers::{EmbedConfig, EmbedNet, ParamSet, SegHead};
pub use losses::{LossConfig, Reduction};
pub use real::Real;
pub use tensor::Tensor;
