pub mod analysis;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod experts;
pub mod math;
pub mod model;
pub mod objective;
pub mod params;
pub mod propagation;
pub mod run;
pub mod synthetic;
pub mod train;

pub use error::{PkefError, Result};
