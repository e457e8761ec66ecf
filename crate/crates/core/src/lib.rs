//! Open-set time-series anomaly detection with influence-guided label
//! refinement.

pub mod checkpoint;
pub mod data;
pub mod error;
pub mod eval;
pub mod influence;
pub mod model;
pub mod objective;
pub mod radg;
pub mod scalar;
pub mod trainer;

pub use error::{Error, Result};
