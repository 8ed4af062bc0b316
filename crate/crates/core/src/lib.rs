pub mod data;
pub mod error;
pub mod eval;
pub mod models;
pub mod nn;
pub mod objectives;
pub mod physio;
pub mod record;
pub mod rng;
pub mod train;
pub mod transforms;

pub use error::{Error, Result};
