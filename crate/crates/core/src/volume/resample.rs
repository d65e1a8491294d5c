use super::{DataType, Grid, Volume3D, VolumeError};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Interpolation {
    Trilinear,
    Nearest,
}

/// Source coordinate of output index `i` along one axis.
///
/// Corner-aligned: the first and last output voxels land exactly on the
/// first and last input voxels. A single output voxel samples the input
/// center.
fn source_coord(i: usize, n_in: usize, n_out: usize) -> f64 {
    if n_out == 1 {
        (n_in - 1) as f64 / 2.0
    } else {
        i as f64 * (n_in - 1) as f64 / (n_out - 1) as f64
    }
}

/// Linear interpolation taps `(lo, hi, weight_hi)` for every output index.
fn linear_taps(n_in: usize, n_out: usize) -> Vec<(usize, usize, f64)> {
    (0..n_out)
        .map(|i| {
            let c = source_coord(i, n_in, n_out);
            let lo = (c.floor() as usize).min(n_in - 1);
            let hi = (lo + 1).min(n_in - 1);
            (lo, hi, c - lo as f64)
        })
        .collect()
}

fn nearest_taps(n_in: usize, n_out: usize) -> Vec<usize> {
    (0..n_out)
        .map(|i| ((source_coord(i, n_in, n_out) + 0.5).floor() as usize).min(n_in - 1))
        .collect()
}

fn output_grid(src: &Grid, target: [usize; 3]) -> Result<Grid, VolumeError> {
    let mut spacing = src.spacing;
    let mut origin = src.origin;
    for axis in 0..3 {
        let (n_in, n_out) = (src.dims[axis], target[axis]);
        if n_in > 1 && n_out > 1 {
            spacing[axis] = src.spacing[axis] * (n_in - 1) as f64 / (n_out - 1) as f64;
        } else if n_in > 1 {
            spacing[axis] = src.spacing[axis] * n_in as f64;
            origin[axis] += source_coord(0, n_in, 1) * src.spacing[axis];
        }
    }
    Grid::new(target, spacing, origin)
}

/// Resamples `vol` onto a lattice of `target_dims` covering the same physical
/// extent. Masks should use [`Interpolation::Nearest`]; nearest keeps the
/// input dtype, trilinear produces float64.
pub fn resample_to_grid(
    vol: &Volume3D,
    target_dims: [usize; 3],
    method: Interpolation,
) -> Result<Volume3D, VolumeError> {
    let src = vol.grid();
    for axis in 0..3 {
        if target_dims[axis] == 0 {
            return Err(VolumeError::ZeroTargetDim { axis });
        }
        if method == Interpolation::Trilinear && target_dims[axis] == 1 && src.dims[axis] > 1 {
            return Err(VolumeError::DegenerateAxis { axis, from: src.dims[axis] });
        }
    }
    let grid = output_grid(src, target_dims)?;
    let data = vol.data();
    let [tx, ty, tz] = target_dims;
    let mut out = Vec::with_capacity(grid.len());
    match method {
        Interpolation::Nearest => {
            let (nx, ny, nz) = (
                nearest_taps(src.dims[0], tx),
                nearest_taps(src.dims[1], ty),
                nearest_taps(src.dims[2], tz),
            );
            for &z in &nz {
                for &y in &ny {
                    for &x in &nx {
                        out.push(data[src.index(x, y, z)]);
                    }
                }
            }
            Volume3D::new(grid, vol.dtype(), out)
        }
        Interpolation::Trilinear => {
            let (lx, ly, lz) = (
                linear_taps(src.dims[0], tx),
                linear_taps(src.dims[1], ty),
                linear_taps(src.dims[2], tz),
            );
            for &(z0, z1, wz) in &lz {
                for &(y0, y1, wy) in &ly {
                    for &(x0, x1, wx) in &lx {
                        let at = |x, y, z| data[src.index(x, y, z)];
                        let c00 = at(x0, y0, z0) * (1.0 - wx) + at(x1, y0, z0) * wx;
                        let c10 = at(x0, y1, z0) * (1.0 - wx) + at(x1, y1, z0) * wx;
                        let c01 = at(x0, y0, z1) * (1.0 - wx) + at(x1, y0, z1) * wx;
                        let c11 = at(x0, y1, z1) * (1.0 - wx) + at(x1, y1, z1) * wx;
                        let c0 = c00 * (1.0 - wy) + c10 * wy;
                        let c1 = c01 * (1.0 - wy) + c11 * wy;
                        out.push(c0 * (1.0 - wz) + c1 * wz);
                    }
                }
            }
            Volume3D::new(grid, DataType::F64, out)
        }
    }
}

/// Zero-mean, unit population-variance intensity normalization.
pub fn whiten(vol: &Volume3D) -> Result<Volume3D, VolumeError> {
    let n = vol.len() as f64;
    let mean = vol.data().iter().sum::<f64>() / n;
    let var = vol.data().iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let std = var.sqrt();
    if !(std > 0.0) || !std.is_finite() {
        return Err(VolumeError::ZeroVariance);
    }
    Ok(vol.map(|v| (v - mean) / std))
}
