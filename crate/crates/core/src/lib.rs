//! Volumes, NIfTI-1 I/O, preprocessing kernels, label generation,
//! evaluation metrics and synthetic head phantoms for brain extraction.

pub mod labelgen;
pub mod metrics;
pub mod phantom;
pub mod preprocess;
pub mod volume;

pub use volume::{DataType, Grid, Interpolation, Volume3D, VolumeError};
