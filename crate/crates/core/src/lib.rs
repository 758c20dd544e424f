pub mod autodiff;
pub mod cluster;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod features;
pub mod gan;
pub mod gradcheck;
pub mod info;
pub mod kernels;
pub mod nn;
pub mod optim;
pub mod par;
pub mod pipeline;
pub mod sobel;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{Scalar, Tensor};
