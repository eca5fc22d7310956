//! Space-time cost maps learned jointly with occupancy-grid prediction, plus the
//! sampling planner and evaluation metrics that consume them.

mod error;
pub mod geometry;
pub mod grid;
pub mod intentions;
pub mod losses;
pub mod metrics;
pub mod models;
pub mod planner;
pub mod synth;
pub mod training;

pub use error::{CoreError, Result};

pub type Model32 = models::Model<f32>;
pub type Model64 = models::Model<f64>;
pub type Trainer32 = training::Trainer<f32>;
pub type Trainer64 = training::Trainer<f64>;
