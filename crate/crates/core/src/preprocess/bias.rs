//! Log-domain polynomial bias-field estimate.
//!
//! Over brain-candidate voxels (at or above the volume mean) the log-image
//! is piecewise constant per tissue plus a smooth polynomial. Differences of
//! the log-image between neighbouring voxels cancel the tissue term away
//! from boundaries, so the polynomial is fitted by least squares to those
//! differences, skipping pairs with a jump large enough to be an edge.

use super::PreprocessError;
use crate::volume::Volume3D;

/// Log-intensity jump between neighbours treated as a tissue boundary.
const EDGE_LOG_STEP: f64 = 0.2;

fn monomials(order: usize) -> Vec<[usize; 3]> {
    let mut out = Vec::new();
    for total in 0..=order {
        for a in (0..=total).rev() {
            for b in (0..=total - a).rev() {
                out.push([a, b, total - a - b]);
            }
        }
    }
    out
}

fn normalized(i: usize, n: usize) -> f64 {
    if n <= 1 {
        0.0
    } else {
        2.0 * i as f64 / (n - 1) as f64 - 1.0
    }
}

fn basis_row(terms: &[[usize; 3]], u: [f64; 3], row: &mut [f64]) {
    for (r, e) in row.iter_mut().zip(terms) {
        *r = u[0].powi(e[0] as i32) * u[1].powi(e[1] as i32) * u[2].powi(e[2] as i32);
    }
}

/// Solves the symmetric system `a x = b` by Gaussian elimination with
/// partial pivoting. Singular directions get a zero coefficient.
pub(super) fn solve(mut a: Vec<f64>, mut b: Vec<f64>, n: usize) -> Vec<f64> {
    let scale = (0..n).map(|i| a[i * n + i].abs()).fold(0.0, f64::max).max(1e-300);
    for col in 0..n {
        let piv = (col..n).max_by(|&r, &s| a[r * n + col].abs().total_cmp(&a[s * n + col].abs())).unwrap();
        if a[piv * n + col].abs() < 1e-12 * scale {
            continue;
        }
        if piv != col {
            for k in 0..n {
                a.swap(piv * n + k, col * n + k);
            }
            b.swap(piv, col);
        }
        for r in col + 1..n {
            let f = a[r * n + col] / a[col * n + col];
            if f != 0.0 {
                for k in col..n {
                    a[r * n + k] -= f * a[col * n + k];
                }
                b[r] -= f * b[col];
            }
        }
    }
    let mut x = vec![0.0; n];
    for col in (0..n).rev() {
        let d = a[col * n + col];
        if d.abs() < 1e-12 * scale {
            continue;
        }
        let s: f64 = (col + 1..n).map(|k| a[col * n + k] * x[k]).sum();
        x[col] = (b[col] - s) / d;
    }
    x
}

/// Returns `(corrected, field)`. `field` has mean exactly 1 over the volume;
/// `corrected` is `vol / field` rescaled to the input mean.
pub fn correct_bias_field(vol: &Volume3D, order: usize) -> Result<(Volume3D, Volume3D), PreprocessError> {
    if !(1..=3).contains(&order) {
        return Err(PreprocessError::BadOrder(order));
    }
    if let Some((index, &value)) = vol.data().iter().enumerate().find(|(_, v)| !(**v > 0.0)) {
        return Err(PreprocessError::NonPositiveVoxel { index, value });
    }
    let grid = *vol.grid();
    let [nx, ny, nz] = grid.dims;
    let terms = monomials(order);
    let m = terms.len();
    let mean = vol.mean();

    let candidate: Vec<bool> = vol.data().iter().map(|&v| v >= mean).collect();
    let logs: Vec<f64> = vol.data().iter().map(|v| v.ln()).collect();
    let basis = |i: usize, row: &mut [f64]| {
        let [x, y, z] = grid.coords(i);
        basis_row(&terms, [normalized(x, nx), normalized(y, ny), normalized(z, nz)], row);
    };

    // normal equations of P(j) - P(i) = log v_j - log v_i over neighbour
    // pairs that are both candidates and not split by a tissue edge
    let mut ata = vec![0.0; m * m];
    let mut atb = vec![0.0; m];
    let (mut ri, mut rj, mut diff) = (vec![0.0; m], vec![0.0; m], vec![0.0; m]);
    let strides = [1, nx, nx * ny];
    for i in 0..vol.len() {
        if !candidate[i] {
            continue;
        }
        let c = grid.coords(i);
        for axis in 0..3 {
            if c[axis] + 1 >= grid.dims[axis] {
                continue;
            }
            let j = i + strides[axis];
            let d = logs[j] - logs[i];
            if !candidate[j] || d.abs() >= EDGE_LOG_STEP {
                continue;
            }
            basis(i, &mut ri);
            basis(j, &mut rj);
            for k in 0..m {
                diff[k] = rj[k] - ri[k];
            }
            for r in 0..m {
                atb[r] += diff[r] * d;
                for s in r..m {
                    ata[r * m + s] += diff[r] * diff[s];
                }
            }
        }
    }
    for r in 0..m {
        for s in 0..r {
            ata[r * m + s] = ata[s * m + r];
        }
    }
    let mut coef = solve(ata, atb, m);
    let eval = |coef: &[f64], row: &[f64]| -> f64 { coef.iter().zip(row).map(|(c, r)| c * r).sum() };
    // the constant term is absorbed by the mean normalization
    coef[0] = 0.0;

    let mut row = vec![0.0; m];
    let mut field: Vec<f64> = (0..vol.len())
        .map(|i| {
            let [x, y, z] = grid.coords(i);
            basis_row(&terms, [normalized(x, nx), normalized(y, ny), normalized(z, nz)], &mut row);
            eval(&coef, &row).exp()
        })
        .collect();
    let fmean = field.iter().sum::<f64>() / field.len() as f64;
    field.iter_mut().for_each(|f| *f /= fmean);

    let mut corrected: Vec<f64> = vol.data().iter().zip(&field).map(|(v, f)| v / f).collect();
    let cmean = corrected.iter().sum::<f64>() / corrected.len() as f64;
    let rescale = mean / cmean;
    corrected.iter_mut().for_each(|c| *c *= rescale);

    Ok((vol.with_f64_data(corrected)?, vol.with_f64_data(field)?))
}
