pub mod backbone;
pub mod checkpoint;
pub mod config;
pub mod error;
pub mod evalkit;
pub mod experiment;
pub mod fusion;
pub mod gradcheck;
pub mod graph;
pub mod lmhead;
pub mod model;
pub mod nn;
pub mod optim;
pub mod params;
pub mod qformer;
pub mod scalar;
pub mod synthdata;
pub mod tensor;
pub mod textproto;
pub mod train;

pub use error::{Error, Result};
pub use scalar::Scalar;
pub use tensor::Mat;

pub type Model32 = model::Model<f32>;
pub type Model64 = model::Model<f64>;
pub type Mat32 = tensor::Mat<f32>;
pub type Mat64 = tensor::Mat<f64>;
pub type ParamStore32 = params::ParamStore<f32>;
pub type ParamStore64 = params::ParamStore<f64>;
