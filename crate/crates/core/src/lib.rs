pub mod datasets;
pub mod encoders;
pub mod error;
pub mod evaluation;
pub mod mi_loss;
pub mod pooling;
pub mod numerics;
pub mod scalar;
pub mod training;

pub use error::{Error, Result};
pub use scalar::Scalar;

/// Model in double precision, the default used by the tools.
pub type Model = training::MilModel<f64>;
/// Model in single precision.
pub type ModelF32 = training::MilModel<f32>;
pub type Tensor64 = numerics::Tensor<f64>;
pub type ParamSet64 = numerics::ParamSet<f64>;
