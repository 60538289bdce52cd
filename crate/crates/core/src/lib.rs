//! Curriculum-trained region refocusing on synthetic camouflage scenes.

pub mod cli;
pub mod env;
pub mod error;
pub mod geometry;
pub mod grpo;
pub mod metrics;
pub mod policy;
pub mod rewards;
pub mod trainer;
pub mod transcript;

pub use error::{Error, Result};
