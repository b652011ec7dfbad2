pub mod downwash;
pub mod env;
pub mod eval;
pub mod dynamics;
pub mod error;
pub mod policy;
pub mod track;
pub mod training;

pub use error::{Error, Result};
