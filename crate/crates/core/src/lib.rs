pub mod autodiff;
pub mod error;
pub mod gp;
pub mod params;

pub use error::{Error, Result};
pub mod flows;
pub mod model;
pub mod inference;
pub mod data;
pub mod training;
pub mod eval;
pub mod config;
pub mod experiment;
