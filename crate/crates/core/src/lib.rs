pub mod backbone;
pub mod error;
pub mod harness;
pub mod inference;
pub mod lora;
pub mod model;
pub mod numcore;
pub mod router;
pub mod training;

pub use error::{Error, Result};
