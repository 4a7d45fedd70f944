pub mod config;
pub mod data;
pub mod error;
pub mod metrics;
pub mod networks;
pub mod objective;
pub mod trainer;
pub mod verify;

pub use error::{Error, IdxError, Result};
pub use mfgan_autodiff::Tensor;
