pub mod agent;
pub mod autodiff;
pub mod behavior;
pub mod checkpoint;
pub mod cli;
pub mod envs;
pub mod error;
pub mod harness;
pub mod metrics;
pub mod nn;
pub mod world_model;

pub use error::{Error, Result};
