//! Dense 3D scalar volumes.
//!
//! A [`Volume3D`] carries a [`Grid`] (dims, spacing, origin), a storage
//! [`DataType`] used when the volume is written to disk, and its voxel values
//! as `f64` in x-fastest order: `index = x + nx * (y + ny * z)`.
//!
//! Binary masks and probability maps are ordinary volumes whose values are
//! restricted to `{0, 1}` and `[0, 1]` respectively; see
//! [`Volume3D::is_binary`] and [`Volume3D::is_probability`].

mod nifti;
mod resample;

pub use nifti::{read_nifti, read_nifti_bytes, write_nifti, write_nifti_bytes, NiftiError};
pub use resample::{resample_to_grid, whiten, Interpolation};

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum VolumeError {
    #[error("dimension {axis} is zero")]
    ZeroDim { axis: usize },
    #[error("spacing on axis {axis} must be positive and finite, got {value}")]
    BadSpacing { axis: usize, value: f64 },
    #[error("data length {got} does not match dims product {expected}")]
    LengthMismatch { expected: usize, got: usize },
    #[error("value {value} at voxel {index} is not representable as {dtype:?}")]
    Unrepresentable { index: usize, value: f64, dtype: DataType },
    #[error("grids differ: {0:?} vs {1:?}")]
    GridMismatch(Grid, Grid),
    #[error("target dim on axis {axis} is zero")]
    ZeroTargetDim { axis: usize },
    #[error("degenerate mapping on axis {axis}: {from} voxels onto 1 requires nearest interpolation")]
    DegenerateAxis { axis: usize, from: usize },
    #[error("volume has zero variance")]
    ZeroVariance,
}

/// On-disk element kind. Values are always held in memory as `f64`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum DataType {
    U8,
    I16,
    F32,
    F64,
}

impl DataType {
    /// NIfTI-1 datatype code.
    pub fn code(self) -> i16 {
        match self {
            DataType::U8 => 2,
            DataType::I16 => 4,
            DataType::F32 => 16,
            DataType::F64 => 64,
        }
    }

    pub fn from_code(code: i16) -> Option<Self> {
        match code {
            2 => Some(DataType::U8),
            4 => Some(DataType::I16),
            16 => Some(DataType::F32),
            64 => Some(DataType::F64),
            _ => None,
        }
    }

    pub fn size_bytes(self) -> usize {
        match self {
            DataType::U8 => 1,
            DataType::I16 => 2,
            DataType::F32 => 4,
            DataType::F64 => 8,
        }
    }

    fn accepts(self, v: f64) -> bool {
        match self {
            DataType::U8 => v.fract() == 0.0 && (0.0..=255.0).contains(&v),
            DataType::I16 => v.fract() == 0.0 && (-32768.0..=32767.0).contains(&v),
            DataType::F32 | DataType::F64 => true,
        }
    }
}

/// Sampling lattice of a volume in physical (mm) space.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Grid {
    pub dims: [usize; 3],
    pub spacing: [f64; 3],
    pub origin: [f64; 3],
}

impl Grid {
    pub fn new(dims: [usize; 3], spacing: [f64; 3], origin: [f64; 3]) -> Result<Self, VolumeError> {
        for axis in 0..3 {
            if dims[axis] == 0 {
                return Err(VolumeError::ZeroDim { axis });
            }
            let s = spacing[axis];
            if !(s.is_finite() && s > 0.0) {
                return Err(VolumeError::BadSpacing { axis, value: s });
            }
        }
        Ok(Grid { dims, spacing, origin })
    }

    /// Unit spacing, zero origin.
    pub fn unit(dims: [usize; 3]) -> Result<Self, VolumeError> {
        Grid::new(dims, [1.0; 3], [0.0; 3])
    }

    pub fn len(&self) -> usize {
        self.dims[0] * self.dims[1] * self.dims[2]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        x + self.dims[0] * (y + self.dims[1] * z)
    }

    #[inline]
    pub fn coords(&self, index: usize) -> [usize; 3] {
        let nx = self.dims[0];
        let ny = self.dims[1];
        [index % nx, (index / nx) % ny, index / (nx * ny)]
    }

    /// Physical position of a (possibly fractional) voxel coordinate.
    #[inline]
    pub fn to_physical(&self, voxel: [f64; 3]) -> [f64; 3] {
        [
            self.origin[0] + voxel[0] * self.spacing[0],
            self.origin[1] + voxel[1] * self.spacing[1],
            self.origin[2] + voxel[2] * self.spacing[2],
        ]
    }

    #[inline]
    pub fn to_voxel(&self, physical: [f64; 3]) -> [f64; 3] {
        [
            (physical[0] - self.origin[0]) / self.spacing[0],
            (physical[1] - self.origin[1]) / self.spacing[1],
            (physical[2] - self.origin[2]) / self.spacing[2],
        ]
    }

    /// Physical center of the voxel lattice.
    pub fn center(&self) -> [f64; 3] {
        self.to_physical([
            (self.dims[0] - 1) as f64 / 2.0,
            (self.dims[1] - 1) as f64 / 2.0,
            (self.dims[2] - 1) as f64 / 2.0,
        ])
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Volume3D {
    grid: Grid,
    dtype: DataType,
    data: Vec<f64>,
}

impl Volume3D {
    pub fn new(grid: Grid, dtype: DataType, data: Vec<f64>) -> Result<Self, VolumeError> {
        if data.len() != grid.len() {
            return Err(VolumeError::LengthMismatch { expected: grid.len(), got: data.len() });
        }
        if let Some((index, &value)) = data.iter().enumerate().find(|(_, &v)| !dtype.accepts(v)) {
            return Err(VolumeError::Unrepresentable { index, value, dtype });
        }
        Ok(Volume3D { grid, dtype, data })
    }

    /// Float64 volume filled with `value`.
    pub fn filled(grid: Grid, value: f64) -> Self {
        Volume3D { grid, dtype: DataType::F64, data: vec![value; grid.len()] }
    }

    /// Float64 volume evaluated voxelwise from integer coordinates.
    pub fn from_fn(grid: Grid, mut f: impl FnMut(usize, usize, usize) -> f64) -> Self {
        let [nx, ny, nz] = grid.dims;
        let mut data = Vec::with_capacity(grid.len());
        for z in 0..nz {
            for y in 0..ny {
                for x in 0..nx {
                    data.push(f(x, y, z));
                }
            }
        }
        Volume3D { grid, dtype: DataType::F64, data }
    }

    /// Uint8 mask from a boolean slice.
    pub fn from_mask(grid: Grid, mask: &[bool]) -> Result<Self, VolumeError> {
        let data = mask.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();
        Volume3D::new(grid, DataType::U8, data)
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn dims(&self) -> [usize; 3] {
        self.grid.dims
    }

    pub fn spacing(&self) -> [f64; 3] {
        self.grid.spacing
    }

    pub fn origin(&self) -> [f64; 3] {
        self.grid.origin
    }

    pub fn dtype(&self) -> DataType {
        self.dtype
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, z: usize) -> f64 {
        self.data[self.grid.index(x, y, z)]
    }

    /// Same grid and dtype, new values.
    pub fn with_data(&self, data: Vec<f64>) -> Result<Self, VolumeError> {
        Volume3D::new(self.grid, self.dtype, data)
    }

    /// Same grid, float64 values.
    pub fn with_f64_data(&self, data: Vec<f64>) -> Result<Self, VolumeError> {
        Volume3D::new(self.grid, DataType::F64, data)
    }

    pub fn with_dtype(self, dtype: DataType) -> Result<Self, VolumeError> {
        Volume3D::new(self.grid, dtype, self.data)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Volume3D { grid: self.grid, dtype: DataType::F64, data: self.data.iter().map(|&v| f(v)).collect() }
    }

    pub fn is_binary(&self) -> bool {
        self.data.iter().all(|&v| v == 0.0 || v == 1.0)
    }

    pub fn is_probability(&self) -> bool {
        self.data.iter().all(|&v| (0.0..=1.0).contains(&v))
    }

    pub fn count_nonzero(&self) -> usize {
        self.data.iter().filter(|&&v| v != 0.0).count()
    }

    pub fn min_max(&self) -> (f64, f64) {
        self.data
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)))
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().sum::<f64>() / self.data.len() as f64
    }

    pub fn ensure_same_grid(&self, other: &Volume3D) -> Result<(), VolumeError> {
        if self.grid != other.grid {
            return Err(VolumeError::GridMismatch(self.grid, other.grid));
        }
        Ok(())
    }
}
