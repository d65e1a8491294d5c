//! Six-parameter rigid transforms, resampling through them, and
//! intensity-based rigid registration.

use std::fmt;
use std::str::FromStr;

use super::bias::solve;
use super::PreprocessError;
use crate::volume::{Grid, Volume3D};

type Mat3 = [[f64; 3]; 3];

fn matmul(a: &Mat3, b: &Mat3) -> Mat3 {
    let mut out = [[0.0; 3]; 3];
    for (r, row) in out.iter_mut().enumerate() {
        for (c, v) in row.iter_mut().enumerate() {
            *v = (0..3).map(|k| a[r][k] * b[k][c]).sum();
        }
    }
    out
}

fn matvec(a: &Mat3, v: [f64; 3]) -> [f64; 3] {
    [
        a[0][0] * v[0] + a[0][1] * v[1] + a[0][2] * v[2],
        a[1][0] * v[0] + a[1][1] * v[1] + a[1][2] * v[2],
        a[2][0] * v[0] + a[2][1] * v[1] + a[2][2] * v[2],
    ]
}

fn transpose(a: &Mat3) -> Mat3 {
    let mut t = [[0.0; 3]; 3];
    for r in 0..3 {
        for c in 0..3 {
            t[r][c] = a[c][r];
        }
    }
    t
}

/// Rotation (radians) and translation (mm) about a fixed center `c`:
/// a point `p` maps to `R (p - c) + c + t` with `R = Rx Ry Rz`, so the z
/// rotation acts first.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct RigidTransform {
    pub rotation: [f64; 3],
    pub translation: [f64; 3],
}

impl RigidTransform {
    pub fn identity() -> Self {
        Self::default()
    }

    pub fn translation(t: [f64; 3]) -> Self {
        RigidTransform { rotation: [0.0; 3], translation: t }
    }

    pub fn matrix(&self) -> Mat3 {
        let [a, b, c] = self.rotation;
        let (sa, ca) = a.sin_cos();
        let (sb, cb) = b.sin_cos();
        let (sc, cc) = c.sin_cos();
        let rx = [[1.0, 0.0, 0.0], [0.0, ca, -sa], [0.0, sa, ca]];
        let ry = [[cb, 0.0, sb], [0.0, 1.0, 0.0], [-sb, 0.0, cb]];
        let rz = [[cc, -sc, 0.0], [sc, cc, 0.0], [0.0, 0.0, 1.0]];
        matmul(&matmul(&rx, &ry), &rz)
    }

    /// Inverse of [`RigidTransform::matrix`] for `|ry| < pi/2`.
    pub fn from_matrix(r: &Mat3, translation: [f64; 3]) -> Self {
        let b = r[0][2].clamp(-1.0, 1.0).asin();
        let a = (-r[1][2]).atan2(r[2][2]);
        let c = (-r[0][1]).atan2(r[0][0]);
        RigidTransform { rotation: [a, b, c], translation }
    }

    pub fn inverse(&self) -> Self {
        let rt = transpose(&self.matrix());
        let t = matvec(&rt, self.translation);
        Self::from_matrix(&rt, [-t[0], -t[1], -t[2]])
    }

    /// `self ∘ other`: apply `other` first.
    pub fn compose(&self, other: &RigidTransform) -> Self {
        let r1 = self.matrix();
        let r = matmul(&r1, &other.matrix());
        let t2 = matvec(&r1, other.translation);
        Self::from_matrix(
            &r,
            [t2[0] + self.translation[0], t2[1] + self.translation[1], t2[2] + self.translation[2]],
        )
    }

    pub fn map_point(&self, p: [f64; 3], center: [f64; 3]) -> [f64; 3] {
        let q = matvec(&self.matrix(), [p[0] - center[0], p[1] - center[1], p[2] - center[2]]);
        [
            q[0] + center[0] + self.translation[0],
            q[1] + center[1] + self.translation[1],
            q[2] + center[2] + self.translation[2],
        ]
    }

    fn to_params(self, scale: f64) -> [f64; 6] {
        let [a, b, c] = self.rotation;
        let [x, y, z] = self.translation;
        [a * scale, b * scale, c * scale, x, y, z]
    }

    fn from_params(p: &[f64; 6], scale: f64) -> Self {
        RigidTransform { rotation: [p[0] / scale, p[1] / scale, p[2] / scale], translation: [p[3], p[4], p[5]] }
    }
}

impl fmt::Display for RigidTransform {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let [a, b, c] = self.rotation;
        let [x, y, z] = self.translation;
        write!(f, "{a} {b} {c} {x} {y} {z}")
    }
}

impl FromStr for RigidTransform {
    type Err = PreprocessError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let vals: Vec<f64> = s
            .split_whitespace()
            .map(|t| t.parse::<f64>())
            .collect::<Result<_, _>>()
            .map_err(|_| PreprocessError::ParseTransform(s.to_string()))?;
        if vals.len() != 6 || vals.iter().any(|v| !v.is_finite()) {
            return Err(PreprocessError::ParseTransform(s.to_string()));
        }
        Ok(RigidTransform { rotation: [vals[0], vals[1], vals[2]], translation: [vals[3], vals[4], vals[5]] })
    }
}

/// Affine map from target voxel indices to source voxel coordinates.
struct VoxelMap {
    a: Mat3,
    b: [f64; 3],
}

impl VoxelMap {
    fn new(xform: &RigidTransform, source: &Grid, target: &Grid, center: [f64; 3]) -> Self {
        let r = xform.matrix();
        // q_phys = R (o_t + S_t i - c) + c + t ; q_vox = (q_phys - o_s) / s_s
        let mut a = [[0.0; 3]; 3];
        for row in 0..3 {
            for col in 0..3 {
                a[row][col] = r[row][col] * target.spacing[col] / source.spacing[row];
            }
        }
        let d = [target.origin[0] - center[0], target.origin[1] - center[1], target.origin[2] - center[2]];
        let rd = matvec(&r, d);
        let b = [
            (rd[0] + center[0] + xform.translation[0] - source.origin[0]) / source.spacing[0],
            (rd[1] + center[1] + xform.translation[1] - source.origin[1]) / source.spacing[1],
            (rd[2] + center[2] + xform.translation[2] - source.origin[2]) / source.spacing[2],
        ];
        VoxelMap { a, b }
    }

    /// Calls `f(target_index, source_voxel)` in target memory order.
    fn for_each(&self, target: &Grid, mut f: impl FnMut(usize, [f64; 3])) {
        let [nx, ny, nz] = target.dims;
        let a = &self.a;
        let mut i = 0;
        for z in 0..nz {
            for y in 0..ny {
                let (yf, zf) = (y as f64, z as f64);
                let base = [
                    self.b[0] + a[0][1] * yf + a[0][2] * zf,
                    self.b[1] + a[1][1] * yf + a[1][2] * zf,
                    self.b[2] + a[2][1] * yf + a[2][2] * zf,
                ];
                for x in 0..nx {
                    let xf = x as f64;
                    f(i, [base[0] + a[0][0] * xf, base[1] + a[1][0] * xf, base[2] + a[2][0] * xf]);
                    i += 1;
                }
            }
        }
    }
}

const EDGE_TOL: f64 = 1e-9;

#[inline]
fn trilinear(data: &[f64], dims: [usize; 3], p: [f64; 3]) -> f64 {
    let mut i0 = [0usize; 3];
    let mut w = [0.0f64; 3];
    for a in 0..3 {
        let n = dims[a];
        let c = p[a];
        if !(c >= -EDGE_TOL && c <= (n - 1) as f64 + EDGE_TOL) {
            return 0.0;
        }
        let c = c.clamp(0.0, (n - 1) as f64);
        let f = (c.floor() as usize).min(n.saturating_sub(2));
        i0[a] = f;
        w[a] = if n == 1 { 0.0 } else { c - f as f64 };
    }
    let sx = if dims[0] > 1 { 1 } else { 0 };
    let sy = if dims[1] > 1 { dims[0] } else { 0 };
    let sz = if dims[2] > 1 { dims[0] * dims[1] } else { 0 };
    let base = i0[0] + dims[0] * (i0[1] + dims[1] * i0[2]);
    let [wx, wy, wz] = w;
    let c00 = data[base] * (1.0 - wx) + data[base + sx] * wx;
    let c10 = data[base + sy] * (1.0 - wx) + data[base + sy + sx] * wx;
    let c01 = data[base + sz] * (1.0 - wx) + data[base + sz + sx] * wx;
    let c11 = data[base + sz + sy] * (1.0 - wx) + data[base + sz + sy + sx] * wx;
    let c0 = c00 * (1.0 - wy) + c10 * wy;
    let c1 = c01 * (1.0 - wy) + c11 * wy;
    c0 * (1.0 - wz) + c1 * wz
}

#[inline]
fn nearest(data: &[f64], dims: [usize; 3], p: [f64; 3]) -> f64 {
    let mut idx = [0usize; 3];
    for a in 0..3 {
        let r = (p[a] + 0.5).floor();
        if r < 0.0 || r > (dims[a] - 1) as f64 {
            return 0.0;
        }
        idx[a] = r as usize;
    }
    data[idx[0] + dims[0] * (idx[1] + dims[1] * idx[2])]
}

fn resample_with_center(vol: &Volume3D, xform: &RigidTransform, target: &Grid, center: [f64; 3]) -> Vec<f64> {
    let map = VoxelMap::new(xform, vol.grid(), target, center);
    let mut out = vec![0.0; target.len()];
    let (data, dims) = (vol.data(), vol.dims());
    map.for_each(target, |i, p| out[i] = trilinear(data, dims, p));
    out
}

/// Samples `vol` on `target` at `xform` of each target point (rotation about
/// the target grid center), trilinearly; outside samples are 0.
pub fn apply_transform(vol: &Volume3D, xform: &RigidTransform, target: &Grid) -> Volume3D {
    let data = resample_with_center(vol, xform, target, target.center());
    Volume3D::new(*target, crate::volume::DataType::F64, data).expect("target-sized buffer")
}

/// Nearest-neighbour variant of [`apply_transform`]; keeps the data type, so
/// binary masks stay binary.
pub fn apply_transform_nearest(vol: &Volume3D, xform: &RigidTransform, target: &Grid) -> Volume3D {
    let map = VoxelMap::new(xform, vol.grid(), target, target.center());
    let mut out = vec![0.0; target.len()];
    let (data, dims) = (vol.data(), vol.dims());
    map.for_each(target, |i, p| out[i] = nearest(data, dims, p));
    Volume3D::new(*target, vol.dtype(), out).expect("target-sized buffer")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RegistrationMetric {
    MeanSquaredError,
    NegativeNormalizedCrossCorrelation,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RegistrationOptions {
    pub metric: RegistrationMetric,
    pub pyramid_levels: usize,
    pub max_iterations: usize,
    /// Largest parameter update per iteration, in voxels of the current
    /// pyramid level.
    pub max_step: f64,
    /// Stop a level once the update falls below this many voxels.
    pub min_step: f64,
}

impl Default for RegistrationOptions {
    fn default() -> Self {
        RegistrationOptions {
            metric: RegistrationMetric::MeanSquaredError,
            pyramid_levels: 3,
            max_iterations: 100,
            max_step: 2.0,
            min_step: 0.01,
        }
    }
}

/// Halves every axis by 2x2x2 block averaging (axes of length 1 stay).
fn box_reduce(vol: &Volume3D) -> Volume3D {
    let g = vol.grid();
    let f = |a: usize| if g.dims[a] >= 2 { 2 } else { 1 };
    let fac = [f(0), f(1), f(2)];
    let dims = [g.dims[0] / fac[0], g.dims[1] / fac[1], g.dims[2] / fac[2]];
    let spacing = [g.spacing[0] * fac[0] as f64, g.spacing[1] * fac[1] as f64, g.spacing[2] * fac[2] as f64];
    let origin = [
        g.origin[0] + 0.5 * g.spacing[0] * (fac[0] - 1) as f64,
        g.origin[1] + 0.5 * g.spacing[1] * (fac[1] - 1) as f64,
        g.origin[2] + 0.5 * g.spacing[2] * (fac[2] - 1) as f64,
    ];
    let grid = Grid::new(dims, spacing, origin).expect("halved grid");
    let norm = (fac[0] * fac[1] * fac[2]) as f64;
    let out = Volume3D::from_fn(grid, |x, y, z| {
        let mut s = 0.0;
        for dz in 0..fac[2] {
            for dy in 0..fac[1] {
                for dx in 0..fac[0] {
                    s += vol.get(fac[0] * x + dx, fac[1] * y + dy, fac[2] * z + dz);
                }
            }
        }
        s / norm
    });
    out
}

/// The fixed image interpolated at the centers of its voxel cells. Sampling
/// both images off-lattice keeps the metric smooth at the identity, where
/// lattice-aligned sampling would otherwise give it a kink.
fn half_voxel_samples(vol: &Volume3D) -> Volume3D {
    let g = vol.grid();
    let shrink = |a: usize| if g.dims[a] > 1 { (g.dims[a] - 1, 0.5 * g.spacing[a]) } else { (1, 0.0) };
    let (dims, offset): (Vec<usize>, Vec<f64>) = (0..3).map(shrink).unzip();
    let grid = Grid::new(
        [dims[0], dims[1], dims[2]],
        g.spacing,
        [g.origin[0] + offset[0], g.origin[1] + offset[1], g.origin[2] + offset[2]],
    )
    .expect("cell-center grid");
    let data = resample_with_center(vol, &RigidTransform::identity(), &grid, g.center());
    Volume3D::new(grid, crate::volume::DataType::F64, data).expect("cell-center buffer")
}

struct Level {
    fixed: Volume3D,
    moving: Volume3D,
    fixed_stats: (f64, f64),
}

/// Residual vector whose squared norm the metric is monotone in: raw
/// differences for MSE, differences of standardized images for NCC.
fn residual(level: &Level, metric: RegistrationMetric, xform: &RigidTransform, center: [f64; 3]) -> Vec<f64> {
    let mut sampled = resample_with_center(&level.moving, xform, level.fixed.grid(), center);
    let f = level.fixed.data();
    match metric {
        RegistrationMetric::MeanSquaredError => {
            sampled.iter_mut().zip(f).for_each(|(m, v)| *m -= v);
        }
        RegistrationMetric::NegativeNormalizedCrossCorrelation => {
            let n = f.len() as f64;
            let (fmean, fss) = level.fixed_stats;
            let fnorm = fss.sqrt().max(1e-300);
            let mmean = sampled.iter().sum::<f64>() / n;
            let mnorm = sampled.iter().map(|m| (m - mmean) * (m - mmean)).sum::<f64>().sqrt().max(1e-300);
            sampled.iter_mut().zip(f).for_each(|(m, v)| *m = (*m - mmean) / mnorm - (v - fmean) / fnorm);
        }
    }
    sampled
}

fn metric_value(level: &Level, metric: RegistrationMetric, xform: &RigidTransform, center: [f64; 3]) -> f64 {
    let sampled = resample_with_center(&level.moving, xform, level.fixed.grid(), center);
    let f = level.fixed.data();
    let n = f.len() as f64;
    match metric {
        RegistrationMetric::MeanSquaredError => sampled.iter().zip(f).map(|(m, v)| (m - v) * (m - v)).sum::<f64>() / n,
        RegistrationMetric::NegativeNormalizedCrossCorrelation => {
            let (fmean, fss) = level.fixed_stats;
            let mmean = sampled.iter().sum::<f64>() / n;
            let (mut cross, mut mss) = (0.0, 0.0);
            for (m, v) in sampled.iter().zip(f) {
                cross += (m - mmean) * (v - fmean);
                mss += (m - mmean) * (m - mmean);
            }
            if mss <= 0.0 || fss <= 0.0 {
                0.0
            } else {
                -cross / (mss * fss).sqrt()
            }
        }
    }
}

fn is_constant(v: &Volume3D) -> bool {
    let (lo, hi) = v.min_max();
    lo == hi
}

/// Finds the transform `T` minimizing the metric between `moving(T(p))` and
/// `fixed(p)` over the fixed grid, rotating about the fixed grid center.
///
/// Coarse-to-fine damped Gauss-Newton (Levenberg-Marquardt) descent on
/// central-difference parameter derivatives; rotations are scaled by the fixed volume half-extent so that
/// all six parameters move points by comparable distances.
pub fn register_rigid(
    moving: &Volume3D,
    fixed: &Volume3D,
    opts: &RegistrationOptions,
) -> Result<RigidTransform, PreprocessError> {
    if opts.pyramid_levels == 0 {
        return Err(PreprocessError::BadOptions("pyramid_levels must be at least 1"));
    }
    if opts.max_iterations == 0 {
        return Err(PreprocessError::BadOptions("max_iterations must be at least 1"));
    }
    if !(opts.max_step > 0.0 && opts.min_step > 0.0) {
        return Err(PreprocessError::BadOptions("steps must be positive"));
    }
    if is_constant(moving) || is_constant(fixed) {
        return Err(PreprocessError::ConstantVolume);
    }
    let fg = fixed.grid();
    let center = fg.center();
    let extent: f64 = (0..3).map(|a| (fg.dims[a] - 1) as f64 * fg.spacing[a]).sum::<f64>() / 3.0;
    let scale = (0.5 * extent).max(1.0);

    let mut levels = Vec::with_capacity(opts.pyramid_levels);
    let (mut f, mut m) = (fixed.clone(), moving.clone());
    for k in 0..opts.pyramid_levels {
        if k > 0 {
            // keep at least 8 voxels along every axis
            if f.dims().iter().any(|&d| d < 16) {
                break;
            }
            f = box_reduce(&f);
            m = box_reduce(&m);
        }
        let samples = half_voxel_samples(&f);
        let n = samples.len() as f64;
        let mean = samples.data().iter().sum::<f64>() / n;
        let ss = samples.data().iter().map(|v| (v - mean) * (v - mean)).sum::<f64>();
        levels.push(Level { fixed: samples, moving: m.clone(), fixed_stats: (mean, ss) });
    }

    let mut params = RigidTransform::identity().to_params(scale);
    for (depth, level) in levels.iter().enumerate().rev() {
        let coarsest = depth == levels.len() - 1;
        let voxel = level.fixed.spacing().iter().copied().fold(f64::INFINITY, f64::min);
        let h = 0.5 * voxel;
        let eval = |p: &[f64; 6]| metric_value(level, opts.metric, &RigidTransform::from_params(p, scale), center);

        let initial = eval(&params);
        let mut current = initial;
        let mut improved = false;
        let mut lambda = 1e-3;
        let max_step = opts.max_step * voxel;
        for _ in 0..opts.max_iterations {
            let r0 = residual(level, opts.metric, &RigidTransform::from_params(&params, scale), center);
            let mut jac = Vec::with_capacity(6);
            for k in 0..6 {
                let mut hi = params;
                let mut lo = params;
                hi[k] += h;
                lo[k] -= h;
                let rh = residual(level, opts.metric, &RigidTransform::from_params(&hi, scale), center);
                let rl = residual(level, opts.metric, &RigidTransform::from_params(&lo, scale), center);
                jac.push(rh.iter().zip(&rl).map(|(a, b)| (a - b) / (2.0 * h)).collect::<Vec<f64>>());
            }
            let mut jtj = vec![0.0; 36];
            let mut jtr = vec![0.0; 6];
            for a in 0..6 {
                jtr[a] = jac[a].iter().zip(&r0).map(|(j, r)| j * r).sum();
                for b in a..6 {
                    let v: f64 = jac[a].iter().zip(&jac[b]).map(|(x, y)| x * y).sum();
                    jtj[a * 6 + b] = v;
                    jtj[b * 6 + a] = v;
                }
            }
            let mut accepted = None;
            for _ in 0..12 {
                let mut damped = jtj.clone();
                for a in 0..6 {
                    damped[a * 6 + a] += lambda * jtj[a * 6 + a] + 1e-12;
                }
                let mut delta = solve(damped, jtr.iter().map(|g| -g).collect(), 6);
                let len = delta.iter().map(|d| d * d).sum::<f64>().sqrt();
                if len > max_step {
                    delta.iter_mut().for_each(|d| *d *= max_step / len);
                }
                let mut cand = params;
                for k in 0..6 {
                    cand[k] += delta[k];
                }
                let value = eval(&cand);
                if value < current {
                    params = cand;
                    current = value;
                    lambda = (lambda * 0.1).max(1e-9);
                    accepted = Some(len.min(max_step));
                    break;
                }
                lambda *= 10.0;
            }
            match accepted {
                Some(len) => {
                    improved = true;
                    if len < opts.min_step * voxel {
                        break;
                    }
                }
                None => break,
            }
        }
        if coarsest && !improved {
            let at_floor = match opts.metric {
                RegistrationMetric::MeanSquaredError => initial <= 1e-12 * level.fixed_stats.1 / level.fixed.len() as f64,
                RegistrationMetric::NegativeNormalizedCrossCorrelation => initial <= -1.0 + 1e-9,
            };
            if !at_floor {
                return Err(PreprocessError::NonConvergence { best: RigidTransform::from_params(&params, scale) });
            }
        }
    }
    Ok(RigidTransform::from_params(&params, scale))
}
