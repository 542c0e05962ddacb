pub mod config;
pub mod data;
pub mod error;
pub mod model;
pub mod numeric;
pub mod pipeline;
pub mod pretrain;
pub mod session;
pub mod tokenizers;
pub mod trainer;
pub mod verify;

#[cfg(test)]
pub(crate) mod testutil;

pub use error::{Error, Result};
