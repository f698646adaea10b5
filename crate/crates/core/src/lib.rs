//! Fine-grained pixel/text alignment for open-vocabulary segmentation,
//! built on a small tape-based autodiff engine.

pub mod alignment;
pub mod concepts;
pub mod decoder;
pub mod error;
pub mod experiment;
pub mod export;
pub mod gradcheck;
pub mod graph;
pub mod layers;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod params;
pub mod real;
pub mod scene;
pub mod supplement;
pub mod tensor;
pub mod train;
pub mod vlm;

pub use error::{Error, Result};
pub use graph::{Graph, Var};
pub use params::ParamStore;
pub use tensor::Tensor;
