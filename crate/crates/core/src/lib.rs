//! Segmentation-driven, discontinuity-preserving deformable registration.
//!
//! Each labelled region is registered independently with its own smooth
//! diffeomorphic field, and the per-region fields are merged by the fixed
//! segmentation. Sliding motion at region interfaces is thus preserved.

pub mod adjoint;
pub mod config;
pub mod edt;
pub mod error;
pub mod field;
pub mod grid;
pub mod interp;
pub mod jacobian;
pub mod loss;
pub mod metrics;
pub mod nrrd;
pub mod optim;
pub mod phantom;
pub mod pipeline;
pub mod resample;
pub mod volume;

pub use error::{Error, Result};
pub use field::{DisplacementField, VelocityField};
pub use grid::{BoundingBox, Grid};
pub use volume::{LabelMap, Volume};
