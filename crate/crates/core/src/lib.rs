pub mod ablation;
pub mod attention;
pub mod autograd;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod data;
pub mod encoders;
pub mod error;
pub mod fusion;
pub mod gradcheck;
pub mod latent_prompt;
pub mod model;
pub mod objective;
pub mod optim;
pub mod parallel;
pub mod params;
pub mod prior;
pub mod tensor;
pub mod train;

pub use autograd::{Tape, Var};
pub use error::{Error, Result};
pub use params::{GradStore, ParamId, ParamStore};
pub use tensor::Tensor;
