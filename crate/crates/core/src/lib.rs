pub mod dataset;
pub mod error;
pub mod eval;
pub mod influence;
pub mod model;
pub mod pipeline;
pub mod refine;
mod util;

pub use error::{Error, Result};
pub use util::fraction_count;
