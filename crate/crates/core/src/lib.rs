//! Instance-adaptive dynamic convolution for unsupervised domain adaptation,
//! on top of a small CPU tensor and reverse-mode autodiff engine.

pub mod checkpoint;
pub mod data;
pub mod dida;
pub mod error;
pub mod experiment;
pub mod gradcheck;
pub mod init;
pub mod models;
pub mod optim;
pub mod param;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use param::{ParamId, ParamStore};
pub use tensor::{Float, Gradients, Tape, Tensor, Var};
