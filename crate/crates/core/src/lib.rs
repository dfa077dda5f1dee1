pub mod app;
pub mod backbone;
pub mod cnn;
pub mod config;
pub mod container;
pub mod error;
pub mod gradcheck;
pub mod image;
pub mod graph;
pub mod layers;
pub mod ops;
pub mod params;
pub mod rng;
pub mod suite;
pub mod roi;
pub mod tensor;
pub mod train;
pub mod vit;
pub mod vmc;

pub use error::{Error, Result};
pub use graph::{Gradients, Graph, Phase, Var};
pub use params::{Parameter, ParameterStore, Snapshot};
pub use tensor::{DType, Tensor};
