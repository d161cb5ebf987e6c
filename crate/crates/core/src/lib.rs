pub mod cli;
mod codec;
pub mod datagen;
pub mod error;
pub mod evalkit;
pub mod memory;
pub mod model;
pub mod noise;
pub mod numkit;
pub mod objectives;
pub mod settings;
pub mod trainer;

pub use error::{MoproError, Result};
