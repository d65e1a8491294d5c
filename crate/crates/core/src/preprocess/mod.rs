//! Harmonization kernels: curvature-flow denoising, bias-field correction
//! and rigid co-registration.

mod bias;
mod denoise;
mod rigid;

pub use bias::correct_bias_field;
pub use denoise::denoise_curvature_flow;
pub use rigid::{
    apply_transform, apply_transform_nearest, register_rigid, RegistrationMetric, RegistrationOptions,
    RigidTransform,
};

use thiserror::Error;

use crate::volume::VolumeError;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PreprocessError {
    #[error(transparent)]
    Volume(#[from] VolumeError),
    #[error("time step {0} outside (0, 0.25]")]
    UnstableTimeStep(f64),
    #[error("non-positive voxel {value} at index {index}")]
    NonPositiveVoxel { index: usize, value: f64 },
    #[error("polynomial order {0} not in 1..=3")]
    BadOrder(usize),
    #[error("volume is constant")]
    ConstantVolume,
    #[error("invalid registration options: {0}")]
    BadOptions(&'static str),
    #[error("registration failed to improve on the initial transform (best: {best})")]
    NonConvergence { best: RigidTransform },
    #[error("cannot parse transform {0:?}")]
    ParseTransform(String),
}
