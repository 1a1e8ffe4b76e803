pub mod analysis;
pub mod checkpoint;
pub mod costmodel;
pub mod error;
pub mod flatvae;
pub mod flowmatch;
pub mod report;
pub mod synthdata;
pub mod transformer;

pub use error::{Category, Error, Result};
