pub mod cells;
pub mod chebyshev;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod scalar;
pub mod sparse;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use scalar::Scalar;
pub mod cli;

pub type Mat64 = tensor::Mat<f64>;
pub type Mat32 = tensor::Mat<f32>;
pub type Graph64 = graph::Graph<f64>;
pub type Graph32 = graph::Graph<f32>;
pub type Model64 = training::Model<f64>;
pub type Model32 = training::Model<f32>;
pub type CellParams64 = cells::CellParams<f64>;
pub type CellParams32 = cells::CellParams<f32>;
