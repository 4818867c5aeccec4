pub mod agents;
pub mod backend;
pub mod config;
pub mod dataset;
pub mod dsl;
pub mod eval;
mod error;
pub mod pipeline;
pub mod planner;
pub mod prompts;
pub mod provider;
pub mod schema;
pub mod simulator;
pub mod validation;

pub use error::{Error, Result};
