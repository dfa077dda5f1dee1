//! Differentiable ops. Each op is a `Graph` method that evaluates its
//! forward value eagerly and records a vector-Jacobian product.

pub mod conv;
pub mod deform;
pub mod elementwise;
pub mod linalg;
pub mod norm;
pub mod sample;
pub mod shape;

pub use conv::{conv_out_extent, tconv_out_extent};
pub use deform::LevelLayout;
pub use elementwise::Activation;
pub use norm::{BnOptions, BnState};
pub use sample::Border;
