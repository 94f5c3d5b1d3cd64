//! Drivers around `odt-core`: framed streams and TCP, scenario files,
//! statistical tests, benchmarks and the `odt` command line.

pub mod bench;
pub mod cli;
pub mod error;
pub mod net;
pub mod scenario;
pub mod stats;
pub mod transport;

pub use error::{OdtError, Result};
