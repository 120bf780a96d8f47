pub mod autograd;
pub mod checkpoint;
pub mod dynamic_attention;
pub mod error;
pub mod generation_model;
pub mod geometry;
pub mod gradcheck;
pub mod info_oracle;
pub mod kv;
pub mod losses;
pub mod metrics;
pub mod mi_estimators;
pub mod nn;
pub mod synthetic_data;
pub mod tensor;
pub mod tensor_io;
pub mod trainer;

pub use error::{Error, Result};
pub use tensor::{Scalar, Tensor};
