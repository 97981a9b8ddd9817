pub mod bundle;
pub mod container;
pub mod conversion;
pub mod dataset;
pub mod encoders;
pub mod error;
pub mod evaluation;
pub mod geometry;
pub mod graph;
pub mod model;
pub mod phantom;
pub mod structures;
pub mod tensor;
pub mod train;
pub mod volume;

pub use error::{Error, Result};
