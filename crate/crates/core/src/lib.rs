pub mod autograd;
pub mod blocks_frequency;
pub mod blocks_spatial;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod inspect;
pub mod losses;
pub mod metrics;
pub mod network;
pub mod ops;
pub mod params;
pub mod sweep;
pub mod tensor;
pub mod train;

pub use autograd::{Gradients, Var};
pub use error::{Error, Result};
pub use params::{Ctx, ParamId, ParamStore};
pub use tensor::{Scalar, Tensor};
