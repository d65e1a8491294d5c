//! Synthetic two-channel head phantoms with known brain masks.
//!
//! A phantom is a nest of ellipsoids: white-matter core, grey-matter rim and
//! a CSF layer make up the brain; a dark skull shell and a bright scalp
//! layer surround it. An optional spherical tumor with a necrotic core sits
//! inside the brain. The necrotic core gets near-zero intensity and zero
//! tissue probability, so thresholding the fused tissue maps leaves a hole
//! there that hole filling must close.
//!
//! Channel values are `|mean + N(0, sigma)| * bias`, with the bias field a
//! smooth exponential ramp along a random direction.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

use crate::volume::{read_nifti, write_nifti, DataType, Grid, NiftiError, Volume3D, VolumeError};

#[derive(Debug, Error)]
pub enum PhantomError {
    #[error("invalid phantom spec: {0}")]
    InvalidSpec(String),
    #[error("tumor is not contained in the brain")]
    TumorOutsideBrain,
    #[error(transparent)]
    Volume(#[from] VolumeError),
    #[error(transparent)]
    Nifti(#[from] NiftiError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

/// Mean intensity per tissue as `[t1gd, flair]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ContrastTable {
    pub background: [f64; 2],
    pub scalp: [f64; 2],
    pub skull: [f64; 2],
    pub csf: [f64; 2],
    pub gm: [f64; 2],
    pub wm: [f64; 2],
    pub tumor: [f64; 2],
    pub necrosis: [f64; 2],
}

impl Default for ContrastTable {
    fn default() -> Self {
        ContrastTable {
            background: [0.02, 0.02],
            scalp: [0.85, 0.55],
            skull: [0.12, 0.10],
            csf: [0.25, 0.12],
            gm: [0.55, 0.62],
            wm: [0.75, 0.48],
            tumor: [1.0, 0.9],
            necrosis: [0.05, 0.05],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TumorSpec {
    /// Fractions of dims.
    pub center: [f64; 3],
    /// Voxels.
    pub radius: f64,
    /// Voxels; zero for a solid tumor.
    pub necrotic_core_radius: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PhantomSpec {
    pub dims: [usize; 3],
    /// Fractions of dims.
    pub brain_center: [f64; 3],
    /// Fractions of dims, each in (0, 0.5].
    pub brain_semi_axes: [f64; 3],
    /// Voxels.
    pub skull_thickness: f64,
    /// Voxels.
    pub scalp_thickness: f64,
    pub tumor: Option<TumorSpec>,
    pub noise_sigma: f64,
    pub bias_field_amplitude: f64,
    pub contrast: ContrastTable,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        PhantomSpec {
            dims: [48, 48, 48],
            brain_center: [0.5, 0.5, 0.5],
            brain_semi_axes: [0.28, 0.32, 0.27],
            skull_thickness: 2.0,
            scalp_thickness: 2.0,
            tumor: None,
            noise_sigma: 0.03,
            bias_field_amplitude: 0.1,
            contrast: ContrastTable::default(),
        }
    }
}

// Normalized ellipsoid radius thresholds of the tissue layers.
const WM_EDGE: f64 = 0.55;
const GM_EDGE: f64 = 0.85;
const TISSUE_BLUR: f64 = 0.04;

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

impl PhantomSpec {
    /// Randomized head geometry for cohort generation: jittered brain shape
    /// and position, a tumor with necrotic core, scaled to `dims`.
    pub fn sample(dims: [usize; 3], rng: &mut impl Rng) -> PhantomSpec {
        let scale = dims.iter().copied().min().unwrap() as f64 / 48.0;
        let brain_semi_axes = [
            rng.random_range(0.25..0.30),
            rng.random_range(0.29..0.34),
            rng.random_range(0.24..0.29),
        ];
        let brain_center = [
            0.5 + rng.random_range(-0.03..0.03),
            0.5 + rng.random_range(-0.03..0.03),
            0.5 + rng.random_range(-0.03..0.03),
        ];
        let mut spec = PhantomSpec {
            dims,
            brain_center,
            brain_semi_axes,
            skull_thickness: (2.0 * scale).max(1.0),
            scalp_thickness: (2.0 * scale).max(1.0),
            tumor: None,
            noise_sigma: rng.random_range(0.02..0.04),
            bias_field_amplitude: rng.random_range(0.05..0.15),
            contrast: ContrastTable::default(),
        };
        let core = rng.random_range(3.5..4.5) * scale;
        let radius = core + rng.random_range(2.0..3.0) * scale;
        for _ in 0..100 {
            // tumor center at normalized radius <= 0.55 in a random direction
            let dir: [f64; 3] = [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)];
            let norm = (dir[0] * dir[0] + dir[1] * dir[1] + dir[2] * dir[2]).sqrt().max(1e-9);
            let r = rng.random_range(0.0..0.55);
            let mut center = [0.0; 3];
            for a in 0..3 {
                center[a] = brain_center[a] + r * brain_semi_axes[a] * dir[a] / norm;
            }
            let tumor = TumorSpec { center, radius, necrotic_core_radius: core };
            spec.tumor = Some(tumor);
            if spec.tumor_contained() {
                return spec;
            }
        }
        spec.tumor = None;
        spec
    }

    fn validate(&self) -> Result<(), PhantomError> {
        if self.dims.contains(&0) {
            return Err(PhantomError::InvalidSpec("dims must be positive".into()));
        }
        if self.brain_semi_axes.iter().any(|&a| !(a > 0.0 && a <= 0.5)) {
            return Err(PhantomError::InvalidSpec("brain semi-axes must lie in (0, 0.5]".into()));
        }
        if !(self.noise_sigma >= 0.0) || !(self.bias_field_amplitude >= 0.0) {
            return Err(PhantomError::InvalidSpec("noise sigma and bias amplitude must be non-negative".into()));
        }
        if !(self.skull_thickness >= 0.0 && self.scalp_thickness >= 0.0) {
            return Err(PhantomError::InvalidSpec("layer thickness must be non-negative".into()));
        }
        if let Some(t) = &self.tumor {
            if !(t.radius > 0.0 && t.necrotic_core_radius >= 0.0 && t.necrotic_core_radius < t.radius) {
                return Err(PhantomError::InvalidSpec("necrotic core must be smaller than the tumor".into()));
            }
            if !self.tumor_contained() {
                return Err(PhantomError::TumorOutsideBrain);
            }
        }
        Ok(())
    }

    fn voxel(&self, frac: [f64; 3]) -> [f64; 3] {
        [
            frac[0] * (self.dims[0] - 1) as f64,
            frac[1] * (self.dims[1] - 1) as f64,
            frac[2] * (self.dims[2] - 1) as f64,
        ]
    }

    fn semi_axes_voxels(&self) -> [f64; 3] {
        [
            self.brain_semi_axes[0] * self.dims[0] as f64,
            self.brain_semi_axes[1] * self.dims[1] as f64,
            self.brain_semi_axes[2] * self.dims[2] as f64,
        ]
    }

    /// Normalized radius of voxel `p` w.r.t. the brain ellipsoid grown by
    /// `grow` voxels along every axis.
    fn rho(&self, p: [f64; 3], grow: f64) -> f64 {
        let c = self.voxel(self.brain_center);
        let a = self.semi_axes_voxels();
        (0..3).map(|i| ((p[i] - c[i]) / (a[i] + grow)).powi(2)).sum::<f64>().sqrt()
    }

    fn tumor_distance(&self, p: [f64; 3]) -> Option<f64> {
        self.tumor.map(|t| {
            let c = self.voxel(t.center);
            (0..3).map(|i| (p[i] - c[i]).powi(2)).sum::<f64>().sqrt()
        })
    }

    /// Every voxel inside the tumor sphere is a brain voxel and the tumor is
    /// at least one voxel away from the brain surface.
    fn tumor_contained(&self) -> bool {
        let Some(t) = self.tumor else { return true };
        let c = self.voxel(t.center);
        let r = t.radius + 1.0;
        let lo = |a: usize| (c[a] - r).floor().max(0.0) as usize;
        let hi = |a: usize| ((c[a] + r).ceil() as usize).min(self.dims[a] - 1);
        if (0..3).any(|a| c[a] - r < 0.0 || c[a] + r > (self.dims[a] - 1) as f64) {
            return false;
        }
        for z in lo(2)..=hi(2) {
            for y in lo(1)..=hi(1) {
                for x in lo(0)..=hi(0) {
                    let p = [x as f64, y as f64, z as f64];
                    let d = (0..3).map(|i| (p[i] - c[i]).powi(2)).sum::<f64>().sqrt();
                    if d <= r && self.rho(p, 0.0) > 1.0 {
                        return false;
                    }
                }
            }
        }
        true
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PhantomCase {
    pub case_id: String,
    pub seed: u64,
    pub spec: PhantomSpec,
    pub t1gd: Volume3D,
    pub flair: Volume3D,
    pub truth_mask: Volume3D,
    pub gm: Volume3D,
    pub wm: Volume3D,
    pub csf: Volume3D,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Tissue {
    Background,
    Scalp,
    Skull,
    Csf,
    Gm,
    Wm,
    Tumor,
    Necrosis,
}

pub fn generate_phantom(spec: &PhantomSpec, seed: u64) -> Result<PhantomCase, PhantomError> {
    spec.validate()?;
    let grid = Grid::unit(spec.dims)?;
    let n = grid.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let mut tissue = Vec::with_capacity(n);
    let (mut gm, mut wm, mut csf) = (vec![0.0; n], vec![0.0; n], vec![0.0; n]);
    let mut truth = vec![false; n];
    for i in 0..n {
        let [x, y, z] = grid.coords(i);
        let p = [x as f64, y as f64, z as f64];
        let rho = spec.rho(p, 0.0);
        let t = if rho <= 1.0 {
            truth[i] = true;
            match spec.tumor_distance(p) {
                Some(d) if d <= spec.tumor.unwrap().necrotic_core_radius => Tissue::Necrosis,
                Some(d) if d <= spec.tumor.unwrap().radius => Tissue::Tumor,
                _ if rho <= WM_EDGE => Tissue::Wm,
                _ if rho <= GM_EDGE => Tissue::Gm,
                _ => Tissue::Csf,
            }
        } else if spec.rho(p, spec.skull_thickness) <= 1.0 {
            Tissue::Skull
        } else if spec.rho(p, spec.skull_thickness + spec.scalp_thickness) <= 1.0 {
            Tissue::Scalp
        } else {
            Tissue::Background
        };
        if truth[i] && t != Tissue::Necrosis {
            let inner = sigmoid((WM_EDGE - rho) / TISSUE_BLUR);
            let outer = sigmoid((GM_EDGE - rho) / TISSUE_BLUR);
            wm[i] = inner;
            gm[i] = outer - inner;
            csf[i] = 1.0 - outer;
        }
        tissue.push(t);
    }

    // bias ramp along a random unit direction, exp(amp * [-1, 1])
    let dir = {
        let v: [f64; 3] = [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)];
        let norm = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt().max(1e-9);
        [v[0] / norm, v[1] / norm, v[2] / norm]
    };
    let center = grid.center();
    let half = spec.dims.iter().copied().max().unwrap() as f64 / 2.0;
    let bias: Vec<f64> = (0..n)
        .map(|i| {
            let [x, y, z] = grid.coords(i);
            let s = (dir[0] * (x as f64 - center[0]) + dir[1] * (y as f64 - center[1]) + dir[2] * (z as f64 - center[2]))
                / half;
            (spec.bias_field_amplitude * s).exp()
        })
        .collect();

    let noise = Normal::new(0.0, 1.0).expect("unit normal");
    let mut channel = |c: usize| -> Vec<f64> {
        tissue
            .iter()
            .zip(&bias)
            .map(|(t, b)| {
                let table = &spec.contrast;
                let mean = match t {
                    Tissue::Background => table.background[c],
                    Tissue::Scalp => table.scalp[c],
                    Tissue::Skull => table.skull[c],
                    Tissue::Csf => table.csf[c],
                    Tissue::Gm => table.gm[c],
                    Tissue::Wm => table.wm[c],
                    Tissue::Tumor => table.tumor[c],
                    Tissue::Necrosis => table.necrosis[c],
                };
                let eps = if spec.noise_sigma > 0.0 { spec.noise_sigma * noise.sample(&mut rng) } else { 0.0 };
                ((mean + eps).abs() * b) as f32 as f64
            })
            .collect()
    };
    let t1gd = channel(0);
    let flair = channel(1);

    Ok(PhantomCase {
        case_id: format!("phantom_{seed}"),
        seed,
        spec: spec.clone(),
        t1gd: Volume3D::new(grid, DataType::F32, t1gd)?,
        flair: Volume3D::new(grid, DataType::F32, flair)?,
        truth_mask: Volume3D::from_mask(grid, &truth)?,
        gm: Volume3D::new(grid, DataType::F64, gm)?,
        wm: Volume3D::new(grid, DataType::F64, wm)?,
        csf: Volume3D::new(grid, DataType::F64, csf)?,
    })
}

/// Seed of the `index`-th case of a cohort generated from `seed`.
pub fn case_seed(seed: u64, index: usize) -> u64 {
    seed.wrapping_mul(1_000_003).wrapping_add(index as u64)
}

/// `count` randomized phantoms with ids `case_000`, `case_001`, ...
pub fn generate_cohort(count: usize, dims: [usize; 3], seed: u64) -> Result<Vec<PhantomCase>, PhantomError> {
    (0..count)
        .map(|i| {
            let s = case_seed(seed, i);
            let mut rng = ChaCha8Rng::seed_from_u64(s ^ 0x5eed_5eed);
            let spec = PhantomSpec::sample(dims, &mut rng);
            let mut case = generate_phantom(&spec, s)?;
            case.case_id = format!("case_{i:03}");
            Ok(case)
        })
        .collect()
}

fn spec_record(case: &PhantomCase) -> String {
    let s = &case.spec;
    let mut out = String::new();
    let _ = writeln!(out, "case_id={}", case.case_id);
    let _ = writeln!(out, "seed={}", case.seed);
    let _ = writeln!(out, "dims={},{},{}", s.dims[0], s.dims[1], s.dims[2]);
    let _ = writeln!(out, "brain_center={},{},{}", s.brain_center[0], s.brain_center[1], s.brain_center[2]);
    let _ = writeln!(
        out,
        "brain_semi_axes={},{},{}",
        s.brain_semi_axes[0], s.brain_semi_axes[1], s.brain_semi_axes[2]
    );
    let _ = writeln!(out, "skull_thickness={}", s.skull_thickness);
    let _ = writeln!(out, "scalp_thickness={}", s.scalp_thickness);
    match &s.tumor {
        Some(t) => {
            let _ = writeln!(out, "tumor_center={},{},{}", t.center[0], t.center[1], t.center[2]);
            let _ = writeln!(out, "tumor_radius={}", t.radius);
            let _ = writeln!(out, "necrotic_core_radius={}", t.necrotic_core_radius);
        }
        None => {
            let _ = writeln!(out, "tumor=none");
        }
    }
    let _ = writeln!(out, "noise_sigma={}", s.noise_sigma);
    let _ = writeln!(out, "bias_field_amplitude={}", s.bias_field_amplitude);
    out
}

pub const CASE_FILES: [&str; 6] = ["t1gd.nii", "flair.nii", "truth.nii", "gm.nii", "wm.nii", "csf.nii"];

/// Writes the case as `t1gd.nii`, `flair.nii`, `truth.nii`, `gm.nii`,
/// `wm.nii`, `csf.nii` and a `spec.txt` key=value record.
pub fn write_case_dir(case: &PhantomCase, dir: impl AsRef<Path>) -> Result<(), PhantomError> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|source| PhantomError::Io { path: dir.to_path_buf(), source })?;
    let vols = [&case.t1gd, &case.flair, &case.truth_mask, &case.gm, &case.wm, &case.csf];
    for (name, vol) in CASE_FILES.iter().zip(vols) {
        write_nifti(vol, dir.join(name))?;
    }
    let spec_path = dir.join("spec.txt");
    fs::write(&spec_path, spec_record(case)).map_err(|source| PhantomError::Io { path: spec_path, source })
}

/// Loads a case directory written by [`write_case_dir`]; the spec record is
/// not parsed back, so `spec` is the default.
pub fn read_case_dir(dir: impl AsRef<Path>) -> Result<PhantomCase, PhantomError> {
    let dir = dir.as_ref();
    let load = |name: &str| read_nifti(dir.join(name));
    let case_id = dir.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    Ok(PhantomCase {
        case_id,
        seed: 0,
        spec: PhantomSpec::default(),
        t1gd: load("t1gd.nii")?,
        flair: load("flair.nii")?,
        truth_mask: load("truth.nii")?,
        gm: load("gm.nii")?,
        wm: load("wm.nii")?,
        csf: load("csf.nii")?,
    })
}
