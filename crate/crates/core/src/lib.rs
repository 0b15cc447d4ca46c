pub mod backtranslate;
pub mod corpus;
pub mod error;
pub mod metrics;
pub mod model;
mod par;
pub mod pipeline;
pub mod stats;
pub mod subword;
pub mod synthetic;
pub mod transfer;

pub use error::{Error, Result};
