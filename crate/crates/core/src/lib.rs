pub mod baseline;
pub mod data;
pub mod dgp;
pub mod diagnostics;
pub mod error;
pub mod estimate;
pub mod exact;
pub mod moments;
pub mod multivalued;
pub mod predict;
pub mod quasi;
pub mod represent;
pub mod util;

pub use error::{Error, Result};
