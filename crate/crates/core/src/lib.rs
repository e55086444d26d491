pub mod backend;
pub mod cache;
pub mod correspondence;
pub mod error;
pub mod evaluation;
pub mod feature;
pub mod fusion;
pub mod geometry;
pub mod graph;
pub mod guidance;
pub mod pipeline;
pub mod prompts;

pub use error::{Error, Result};
