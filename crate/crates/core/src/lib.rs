//! Lightweight self-supervised encoder for satellite image time series.
//!
//! Irregular, partially cloudy series are mapped to a fixed-size latent
//! representation `[n_q][d_model][h][w]` that downstream heads consume.

pub mod autodiff;
pub mod decoder;
pub mod downstream;
pub mod encoder;
pub mod error;
pub mod nn;
pub mod objective;
pub mod scalar;
pub mod sits;
pub mod tensor;
pub mod train;
pub mod views;

pub use error::{AliseError, Result};
pub use scalar::Scalar;

pub type Tensor32 = tensor::Tensor<f32>;
pub type Tensor64 = tensor::Tensor<f64>;
pub type Sits32 = sits::Sits<f32>;
pub type Sits64 = sits::Sits<f64>;
pub type LabeledSits32 = sits::LabeledSits<f32>;
pub type LatentRep32 = encoder::LatentRep<f32>;
pub type LatentRep64 = encoder::LatentRep<f64>;
pub type ParamStore32 = nn::ParamStore<f32>;
pub type ParamStore64 = nn::ParamStore<f64>;
