pub mod aden;
pub mod anneal;
pub mod autonomy;
pub mod bench;
pub mod cli;
pub mod error;
pub mod io;
pub mod math;
pub mod model;
pub mod phase;
pub mod scenarios;
pub mod tabular;
pub mod tensor;

pub use error::{Error, Result};
