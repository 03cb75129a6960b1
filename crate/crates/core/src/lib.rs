pub mod config;
pub mod data;
pub mod design;
pub mod error;
pub mod glm;
pub mod hal;
pub mod inference;
pub mod plot;
pub mod propensity;
pub mod regime;
pub mod simulator;
pub mod superlearner;
pub mod tmle;

pub use error::{Error, Result};
