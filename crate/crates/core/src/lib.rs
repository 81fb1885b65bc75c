pub mod autodiff;
pub mod checkpoint;
pub mod constraints;
pub mod dataset;
pub mod error;
pub mod grid;
pub mod io;
pub mod layers;
pub mod metrics;
pub mod model;
pub mod norm;
pub mod optim;
pub mod rollout;
pub mod solvers;
pub mod spectral;
pub mod symmetry;
pub mod tensor;
pub mod train;
pub mod verify;

pub use error::{Error, Result};
