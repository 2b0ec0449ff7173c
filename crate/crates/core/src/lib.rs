pub mod baselines;
pub mod benchmark;
pub mod error;
pub mod model;
pub mod numkit;
pub mod retrieval;
pub mod synthdata;
pub mod training;

pub use error::{Error, Result};
