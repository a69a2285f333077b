pub mod checkpoint;
pub mod config;
pub mod data;
pub mod decode;
pub mod decoder;
pub mod encoder;
pub mod error;
pub mod metrics;
pub mod model;
pub mod tensor;
pub mod training;

pub use decode::{DecodeMode, Decoded};
pub use error::{Error, Result};
pub use model::{ConvMath, ModelConfig};
