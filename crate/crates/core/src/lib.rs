pub mod collectives;
pub mod config;
pub mod cost;
pub mod data;
pub mod embedding;
pub mod error;
pub mod experiment;
pub mod files;
pub mod fmt;
pub mod model;
pub mod moments;
pub mod optimizer;
pub mod planner;
pub mod reference;
pub mod rng;
pub mod topology;
pub mod trainer;

pub use error::{Error, Result};
