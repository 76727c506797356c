//! Prototype-guided multi-task 3D perception on synthetic voxel scenes.
//!
//! Shared voxel features feed a class-wise prototype generator ([`cpg`]),
//! per-task feature generators ([`tsfg`]), task heads ([`heads`]) and a
//! scene-prototype aggregator ([`spa`]) that seeds the occupancy decoder.
//! Everything is differentiated by the small tape engine in [`numerics`].

pub mod error;
pub mod numerics;
pub mod scene;
pub mod cpg;
pub mod tsfg;
pub mod spa;
pub mod heads;
pub mod losses;
pub mod metrics;
pub mod gradsuite;
pub mod harness;

pub use error::{Error, Result};
