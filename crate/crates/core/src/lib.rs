pub mod cli;
pub mod error;
pub mod ingest;
pub mod normal;
pub mod procedures;
pub mod sim;
pub mod spatial;
pub mod trend;

pub use error::{Error, Result};
