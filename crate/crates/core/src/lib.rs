pub mod chart;
pub mod checkpoint;
pub mod config;
pub mod denoiser;
pub mod diffusion;
pub mod encoders;
pub mod error;
pub mod evalkit;
pub mod losses;
pub mod motionfeat;
pub mod nn;
pub mod optim;
pub mod pipeline;
pub mod suite;
pub mod pilot;
pub mod synthdata;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use tensor::{Gradients, SparseMap, Tensor};
