//! Decomposition-enhanced bidirectional Mamba forecaster for long-term
//! multivariate time series, built on a small reverse-mode tensor core.

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod decomp;
pub mod error;
pub mod experiments;
pub mod gradcheck;
pub mod loss;
pub mod mamba;
pub mod model;
pub mod nn;
pub mod optim;
pub mod params;
pub mod report;
pub mod revin;
pub mod scalar;
pub mod ssm;
pub mod tensor;
pub mod train;
pub mod trend;

pub use error::{Error, Result};
pub use scalar::Scalar;

/// Double-precision instances used by the command-line tool and tests.
pub type Tensor = tensor::Tensor<f64>;
pub type Model = model::DMambaModel<f64>;
pub type Trainer = train::Trainer<f64>;
pub type ParamStore = params::ParamStore<f64>;

/// Single-precision instances.
pub type TensorF32 = tensor::Tensor<f32>;
pub type ModelF32 = model::DMambaModel<f32>;
pub type TrainerF32 = train::Trainer<f32>;
