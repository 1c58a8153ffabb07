pub mod autograd;
pub mod checkpoint;
pub mod clustering;
pub mod config;
pub mod data;
pub mod error;
pub mod evaluation;
pub mod gradcheck;
pub mod losses;
pub mod model;
pub mod optim;
pub mod rundir;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
