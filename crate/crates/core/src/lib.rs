pub mod analysis;
pub mod config;
pub mod data;
pub mod error;
pub mod exec;
pub mod generation;
pub mod image;
pub mod model;
pub mod numerics;
pub mod scheduler;
pub mod training;
pub mod vq;

pub use error::{Error, Result};
