//! Autoregressive image transformer with block-local self-attention.

pub mod attention;
pub mod blocks;
pub mod dist;
pub mod error;
pub mod generate;
pub mod image;
pub mod io;
pub mod model;
pub mod params;
pub mod repr;
pub mod rng;
pub mod scalar;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use image::Image;
pub use model::{Example, ImageTransformer, Model32, Model64, ModelConfig};
pub use rng::Rng;
pub use scalar::Scalar;
pub use tensor::{Graph, ParamId, Tensor, Var};

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
