pub mod conjecture;
pub mod dialectic;
pub mod error;
pub mod gateway;
pub mod metrics;
pub mod orchestrator;
pub mod prompts;
pub mod scenarios;
pub mod session;
pub mod trace;
pub mod types;

pub use error::{Error, Result};
