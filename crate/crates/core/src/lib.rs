pub mod analysis;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod hopfield;
pub mod model;
pub mod optim;
pub mod params;
pub mod tape;
pub mod tensor;
pub mod train;
pub mod vit;
pub mod workspace;

pub use error::{Error, Result};
pub use tape::{GradTape, Gradients, Var};
pub use tensor::{Scalar, Tensor};
