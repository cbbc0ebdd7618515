pub mod autodiff;
pub mod corpus;
pub mod denoiser;
pub mod diffusion;
pub mod error;
pub mod eval;
pub mod guidance;
pub mod io;
pub mod params;
pub mod rng;
pub mod spectral;
pub mod sta;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::Tensor;
