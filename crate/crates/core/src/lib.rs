pub mod backbone;
pub mod erase;
pub mod error;
pub mod evaluation;
pub mod flowdensity;
pub mod identify;
pub mod nn;
pub mod objectives;
pub mod par;
pub mod runner;
pub mod taskstream;

pub use error::{Error, Result};
