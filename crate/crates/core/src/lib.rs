pub mod config;
pub mod container;
pub mod data;
pub mod error;
pub mod evaluation;
pub mod losses;
pub mod models;
pub mod nn;
pub mod seeds;
pub mod synthdata;
pub mod training;

pub use error::{MmsError, Result};
