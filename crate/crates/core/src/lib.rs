//! Text-to-SQL parsing with a probed and learned question/schema linking
//! graph, a relation-aware graph attention encoder and a grammar decoder.

pub mod autodiff;
pub mod config;
pub mod corpus;
pub mod decoder;
pub mod encoder;
pub mod error;
pub mod evaluation;
pub mod graph_learner;
pub mod hash;
pub mod model;
pub mod optim;
pub mod params;
pub mod pipeline;
pub mod probing;
pub mod scalar;
pub mod sql;
pub mod tensor;
pub mod text;
pub mod training;

pub use error::{Error, Result};
pub use scalar::Scalar;
pub use tensor::Tensor;

pub type ModelF32 = model::Model<f32>;
pub type ModelF64 = model::Model<f64>;
pub type TensorF32 = Tensor<f32>;
pub type TensorF64 = Tensor<f64>;
pub type PreparedF32 = model::PreparedExample<f32>;
pub type PreparedF64 = model::PreparedExample<f64>;
