//! Event-conditioned flow-matching generation over a synthetic latent space.

pub mod annotation;
pub mod autodiff;
pub mod checkpoint;
pub mod corpus;
pub mod copo;
pub mod curation;
pub mod encoder;
pub mod error;
pub mod flow;
pub mod harness;
pub mod hashembed;
pub mod nn;
pub mod optim;
pub mod params;
pub mod scalar;
pub mod tensor;
pub mod timeline;

pub use error::{Error, Result};
pub use scalar::Scalar;
pub use tensor::Matrix;

pub type Matrix64 = tensor::Matrix<f64>;
pub type Matrix32 = tensor::Matrix<f32>;
pub type Graph64 = autodiff::Graph<f64>;
pub type Graph32 = autodiff::Graph<f32>;
pub type FlowModel64 = flow::FlowModel<f64>;
pub type FlowModel32 = flow::FlowModel<f32>;
