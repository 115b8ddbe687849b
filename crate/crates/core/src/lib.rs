//! Distributed pose-graph optimization for multi-robot teams.

pub mod assembly;
pub mod centralized;
pub mod error;
pub mod geometry;
pub mod graph;
pub mod io;
pub mod metrics;
pub mod objects;
pub mod runtime;
pub mod solvers;
pub mod system;

pub use error::{Error, Result};
pub use geometry::{Pose, Rotation};
pub use graph::{Estimate, MultiRobotGraph, RelativeMeasurement, RobotId, VertexId, Weights};
