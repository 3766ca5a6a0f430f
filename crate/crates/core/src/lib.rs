pub mod adapter;
pub mod autodiff;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod data;
pub mod denoiser;
pub mod distill;
pub mod error;
pub mod eval;
pub mod nn;
pub mod optim;
pub mod params;
pub mod prompt;
pub mod rng;
pub mod sampler;
pub mod schedule;
pub mod tensor;

pub use autodiff::{Gradients, KeyMask, Tape, Var};
pub use error::{Error, Result};
pub use optim::{AdamW, AdamWConfig};
pub use params::{ParamId, ParamStore};
pub use tensor::{Scalar, Tensor};
