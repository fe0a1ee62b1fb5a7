pub mod data;
pub mod decomposition;
pub mod error;
pub mod fairness;
pub mod influence;
pub mod ladle;
pub mod linalg;
pub mod pipeline;
pub mod predictors;
pub mod rng;
pub mod sdr;

pub use error::{Result, SfpError};
