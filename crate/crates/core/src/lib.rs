//! Query-feature semantic distillation and quality-adaptive fusion for
//! multi-object tracking in degraded video, at desk scale.

pub mod assignment;
pub mod checkpoint;
pub mod dataset;
pub mod dcsd;
pub mod detector;
pub mod degradation;
pub mod dswr;
pub mod error;
pub mod experiment;
pub mod frame;
pub mod layers;
pub mod metrics;
pub mod numeric;
pub mod scene;
pub mod student;
pub mod teacher;
pub mod tracker;
pub mod trackset;
pub mod training;

pub use error::{Error, Result};
