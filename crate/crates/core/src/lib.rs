pub mod autodiff;
pub mod cli;
pub mod config;
pub mod datagen;
pub mod error;
pub mod graph;
pub mod linalg;
pub mod operator;
pub mod report;
pub mod spectral;
pub mod spiking;
pub mod training;

pub use error::{Error, Result};
