pub mod analysis;
pub mod attention;
pub mod cli;
pub mod error;
pub mod inference;
pub mod model;
pub mod numkit;
pub mod synthdata;
pub mod training;

mod serde_opt;

pub use error::{Error, Result};
