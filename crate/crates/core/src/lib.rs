pub mod checkpoint;
pub mod diffcore;
pub mod data;
pub mod error;
pub mod experiment;
pub mod metrics;
pub mod model;
pub mod pruning;
pub mod schedule;
pub mod seed;
pub mod store;
pub mod train;

pub use error::{Error, Result};
