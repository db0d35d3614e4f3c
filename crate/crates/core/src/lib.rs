//! Parameter-efficient tuning on a tiny transformer, tuned parameters as task
//! embeddings, and evaluation of source-task rankings against measured
//! intermediate-transfer gains.

pub mod embed;
mod error;
pub mod lab;
pub mod model;
pub mod numerics;
pub mod peft;
pub mod rank;
pub mod store;
pub mod tasks;

pub use error::{Error, Result};
