pub mod analysis;
pub mod cli_io;
pub mod cohort;
pub mod error;
pub mod ml;
pub mod par;
pub mod phantom;
pub mod projector;
pub mod radiomics;
pub mod seed;

pub use error::{Error, Result};
