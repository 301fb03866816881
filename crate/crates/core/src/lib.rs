pub mod autograd;
pub mod boxes;
pub mod checkpoint;
pub mod data;
pub mod detector;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod model;
pub mod params;
pub mod prompts;
pub mod scalar;
pub mod tensor;
pub mod text;
pub mod train;

pub use error::{Error, Result};
pub use scalar::Scalar;
pub use tensor::Tensor;

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
pub type Model32 = model::Model<f32>;
pub type Model64 = model::Model<f64>;
pub type ParamStore32 = params::ParamStore<f32>;
pub type ParamStore64 = params::ParamStore<f64>;
pub type Graph32 = autograd::Graph<f32>;
pub type Graph64 = autograd::Graph<f64>;
