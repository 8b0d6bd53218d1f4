pub mod checks;
pub mod ci;
pub mod discovery;
pub mod error;
pub mod graph;
pub mod ident;
pub mod io;
pub mod metrics;
pub mod scm;

pub use error::{Error, Result};
