//! Training-label generation from tissue probability maps.
//!
//! GM, WM and CSF posteriors are fused into one brain probability map,
//! thresholded, and hole-filled so that regions the tissue model leaves out
//! (necrotic tumor cores, for instance) end up inside the mask.

use std::collections::VecDeque;

use thiserror::Error;

use crate::volume::{Volume3D, VolumeError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LabelGenError {
    #[error(transparent)]
    Volume(#[from] VolumeError),
    #[error("{which} map has values outside [0, 1]")]
    NotProbability { which: &'static str },
    #[error("threshold {0} outside [0, 1]")]
    BadThreshold(f64),
    #[error("mask is not binary")]
    NotBinary,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LabelGenConfig {
    pub tau: f64,
    pub fill_holes: bool,
}

impl Default for LabelGenConfig {
    fn default() -> Self {
        LabelGenConfig { tau: 0.7, fill_holes: true }
    }
}

/// Voxelwise clipped sum `min(gm + wm + csf, 1)`.
pub fn fuse_probability_maps(gm: &Volume3D, wm: &Volume3D, csf: &Volume3D) -> Result<Volume3D, LabelGenError> {
    gm.ensure_same_grid(wm)?;
    gm.ensure_same_grid(csf)?;
    for (which, v) in [("gm", gm), ("wm", wm), ("csf", csf)] {
        if !v.is_probability() {
            return Err(LabelGenError::NotProbability { which });
        }
    }
    let data = gm
        .data()
        .iter()
        .zip(wm.data())
        .zip(csf.data())
        .map(|((a, b), c)| (a + b + c).min(1.0))
        .collect();
    Ok(gm.with_f64_data(data)?)
}

/// `1` where `pmap >= tau`, else `0`.
pub fn threshold_mask(pmap: &Volume3D, tau: f64) -> Result<Volume3D, LabelGenError> {
    if !(0.0..=1.0).contains(&tau) {
        return Err(LabelGenError::BadThreshold(tau));
    }
    let bits: Vec<bool> = pmap.data().iter().map(|&p| p >= tau).collect();
    Ok(Volume3D::from_mask(*pmap.grid(), &bits)?)
}

/// Sets every background voxel whose 6-connected background component does
/// not reach the volume border to foreground.
pub fn fill_holes_3d(mask: &Volume3D) -> Result<Volume3D, LabelGenError> {
    if !mask.is_binary() {
        return Err(LabelGenError::NotBinary);
    }
    let grid = mask.grid();
    let [nx, ny, nz] = grid.dims;
    let data = mask.data();
    let mut outside = vec![false; data.len()];
    let mut queue = VecDeque::new();

    let seed = |i: usize, outside: &mut Vec<bool>, queue: &mut VecDeque<usize>| {
        if data[i] == 0.0 && !outside[i] {
            outside[i] = true;
            queue.push_back(i);
        }
    };
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                let on_border = x == 0 || y == 0 || z == 0 || x + 1 == nx || y + 1 == ny || z + 1 == nz;
                if on_border {
                    seed(grid.index(x, y, z), &mut outside, &mut queue);
                }
            }
        }
    }
    while let Some(i) = queue.pop_front() {
        let [x, y, z] = grid.coords(i);
        let mut visit = |j: usize| {
            if data[j] == 0.0 && !outside[j] {
                outside[j] = true;
                queue.push_back(j);
            }
        };
        if x > 0 {
            visit(i - 1);
        }
        if x + 1 < nx {
            visit(i + 1);
        }
        if y > 0 {
            visit(i - nx);
        }
        if y + 1 < ny {
            visit(i + nx);
        }
        if z > 0 {
            visit(i - nx * ny);
        }
        if z + 1 < nz {
            visit(i + nx * ny);
        }
    }
    let filled: Vec<bool> = outside.iter().map(|&o| !o).collect();
    Ok(Volume3D::from_mask(*grid, &filled)?)
}

/// Fuse, threshold at `cfg.tau`, and optionally hole-fill.
pub fn make_spm12p_label(
    gm: &Volume3D,
    wm: &Volume3D,
    csf: &Volume3D,
    cfg: &LabelGenConfig,
) -> Result<Volume3D, LabelGenError> {
    let fused = fuse_probability_maps(gm, wm, csf)?;
    let mask = threshold_mask(&fused, cfg.tau)?;
    if cfg.fill_holes {
        fill_holes_3d(&mask)
    } else {
        Ok(mask)
    }
}
