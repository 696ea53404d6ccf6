//! Occupancy fields over contracted coordinates, fitted from posed
//! multi-camera image sequences with photometric and 2D semantic supervision.

pub mod contraction;
pub mod dataset;
pub mod error;
pub mod evalmetrics;
pub mod geometry;
pub mod grid;
pub mod io;
pub mod optimizer;
pub mod photometric;
pub mod renderer;
pub mod sampler;
pub mod semantics_fusion;
pub mod synth;

pub use contraction::{Axis, ContractionParams};
pub use error::{Error, Result};
pub use geometry::{CameraModel, Image, LabelMap, Pose, Ray};
pub use grid::{Activation, GridGradient, OccupancyGrid};
pub use optimizer::{Checkpoint, FitConfig, GridConfig};
pub use photometric::LossConfig;
pub use renderer::RenderedPixel;
pub use sampler::{RaySamples, SamplingMode};
