pub mod error;
pub mod image;
pub mod render;
pub mod scene;
pub mod sh;

pub use error::{Error, Result};
pub mod config;
pub mod data;
pub mod gradcheck;
pub mod losses;
pub mod metrics;
pub mod nets;
pub mod optim;
pub mod pipelines;
