//! Dense-Vnet: three dense feature stacks joined through per-stack skip
//! convolutions and trilinear upsampling.
//!
//! Volumes are copied into tensors without reordering, so the tensor's
//! spatial axes are the volume's `(z, y, x)`. Every layer is isotropic, so
//! this changes nothing but the bookkeeping.
//!
//! Kernels are stored with unit variance and multiplied by the He gain
//! `sqrt(2 / fan_in)` inside the graph, so the effective weights start
//! He-uniform while every layer sees a comparable Adam step size.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use deepstrip_core::volume::{resample_to_grid, whiten};
use deepstrip_core::{DataType, Grid, Interpolation, Volume3D, VolumeError};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::autodiff::{read_container, write_container, AutodiffError, Container, ContainerError, Tape, Tensor, Var};

pub const LEAKY_SLOPE: f64 = 0.01;

#[derive(Debug, Error)]
pub enum DenseVnetError {
    #[error("invalid network config: {0}")]
    InvalidConfig(String),
    #[error("missing {0} channel")]
    MissingChannel(&'static str),
    #[error("input shape {got:?} does not fit the network ({detail})")]
    InputShape { got: Vec<usize>, detail: String },
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Volume(#[from] VolumeError),
    #[error(transparent)]
    Checkpoint(#[from] ContainerError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum InputMode {
    T1gd,
    Flair,
    Both,
}

impl InputMode {
    pub fn channels(self) -> usize {
        match self {
            InputMode::Both => 2,
            _ => 1,
        }
    }

    pub fn uses_t1gd(self) -> bool {
        self != InputMode::Flair
    }

    pub fn uses_flair(self) -> bool {
        self != InputMode::T1gd
    }
}

impl fmt::Display for InputMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            InputMode::T1gd => "t1gd",
            InputMode::Flair => "flair",
            InputMode::Both => "both",
        })
    }
}

impl FromStr for InputMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "t1gd" => Ok(InputMode::T1gd),
            "flair" => Ok(InputMode::Flair),
            "both" | "t1gd+flair" => Ok(InputMode::Both),
            other => Err(format!("unknown input mode {other:?} (expected t1gd, flair or both)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DenseVnetConfig {
    pub input_mode: InputMode,
    pub num_classes: usize,
    pub stack_growth: [usize; 3],
    pub units_per_stack: [usize; 3],
    /// Cubic edge length of the network input.
    pub input_window: usize,
}

impl Default for DenseVnetConfig {
    fn default() -> Self {
        DenseVnetConfig {
            input_mode: InputMode::Both,
            num_classes: 2,
            stack_growth: [4, 8, 16],
            units_per_stack: [4, 4, 4],
            input_window: 48,
        }
    }
}

fn check_spatial(n: usize) -> Result<(), String> {
    if n < 16 || n % 8 != 0 {
        Err(format!("spatial size {n} must be a multiple of 8 and at least 16"))
    } else {
        Ok(())
    }
}

impl DenseVnetConfig {
    pub fn in_channels(&self) -> usize {
        self.input_mode.channels()
    }

    pub fn validate(&self) -> Result<(), DenseVnetError> {
        let bad = |s: String| Err(DenseVnetError::InvalidConfig(s));
        if self.num_classes != 2 {
            return bad(format!("num_classes must be 2, got {}", self.num_classes));
        }
        if self.stack_growth.contains(&0) || self.units_per_stack.contains(&0) {
            return bad("stack growth and unit counts must be positive".into());
        }
        check_spatial(self.input_window).or_else(bad)
    }

    fn to_meta(self) -> BTreeMap<String, String> {
        let list = |a: [usize; 3]| format!("{},{},{}", a[0], a[1], a[2]);
        BTreeMap::from([
            ("input_mode".into(), self.input_mode.to_string()),
            ("num_classes".into(), self.num_classes.to_string()),
            ("stack_growth".into(), list(self.stack_growth)),
            ("units_per_stack".into(), list(self.units_per_stack)),
            ("input_window".into(), self.input_window.to_string()),
        ])
    }

    fn from_meta(meta: &BTreeMap<String, String>) -> Result<Self, DenseVnetError> {
        let bad = |k: &str| DenseVnetError::InvalidConfig(format!("checkpoint metadata {k} missing or malformed"));
        let get = |k: &str| meta.get(k).ok_or_else(|| bad(k));
        let num = |k: &str| get(k)?.parse::<usize>().map_err(|_| bad(k));
        let list = |k: &str| -> Result<[usize; 3], DenseVnetError> {
            let v: Vec<usize> = get(k)?.split(',').map(|s| s.parse()).collect::<Result<_, _>>().map_err(|_| bad(k))?;
            v.try_into().map_err(|_| bad(k))
        };
        let cfg = DenseVnetConfig {
            input_mode: get("input_mode")?.parse().map_err(|_| bad("input_mode"))?,
            num_classes: num("num_classes")?,
            stack_growth: list("stack_growth")?,
            units_per_stack: list("units_per_stack")?,
            input_window: num("input_window")?,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

/// `(name, [out, in, k, k, k])` for every convolution, in build order.
fn layer_shapes(cfg: &DenseVnetConfig) -> Vec<(String, [usize; 5])> {
    let g = cfg.stack_growth;
    let u = cfg.units_per_stack;
    let mut out = vec![("init".to_string(), [g[0], cfg.in_channels(), 3, 3, 3])];
    for l in 0..3 {
        for k in 0..u[l] {
            out.push((format!("stack{l}.unit{k}"), [g[l], g[l] + k * g[l], 3, 3, 3]));
        }
        if l < 2 {
            out.push((format!("down{l}"), [g[l + 1], u[l] * g[l], 3, 3, 3]));
        }
    }
    for l in 0..3 {
        out.push((format!("skip{l}"), [g[l], u[l] * g[l], 3, 3, 3]));
    }
    out.push(("final".to_string(), [cfg.num_classes, g.iter().sum(), 1, 1, 1]));
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    config: DenseVnetConfig,
    names: Vec<String>,
    params: Vec<Tensor>,
}

/// Parameter handles on one tape, indexed like [`Network::params`].
struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    fn conv(&self, i: usize) -> (Var, Var) {
        (self.vars[2 * i], self.vars[2 * i + 1])
    }
}

/// Factor applied to a stored kernel of `shape` (`[out, in, kx, ky, kz]`)
/// before it is used.
pub fn weight_gain(shape: &[usize]) -> f64 {
    let fan_in: usize = shape[1..].iter().product();
    (2.0 / fan_in as f64).sqrt()
}

pub fn build_dense_vnet(cfg: &DenseVnetConfig, seed: u64) -> Result<Network, DenseVnetError> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut names = Vec::new();
    let mut params = Vec::new();
    for (name, shape) in layer_shapes(cfg) {
        let bound = 3f64.sqrt();
        let n: usize = shape.iter().product();
        let w = (0..n).map(|_| rng.random_range(-bound..bound)).collect();
        names.push(format!("{name}.w"));
        params.push(Tensor::new(shape.to_vec(), w)?);
        names.push(format!("{name}.b"));
        params.push(Tensor::zeros(vec![shape[0]]));
    }
    Ok(Network { config: *cfg, names, params })
}

impl Network {
    pub fn config(&self) -> &DenseVnetConfig {
        &self.config
    }

    pub fn param_names(&self) -> &[String] {
        &self.names
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    pub fn param(&self, name: &str) -> Option<&Tensor> {
        self.names.iter().position(|n| n == name).map(|i| &self.params[i])
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.names.iter().position(|n| n == name).map(|i| &mut self.params[i])
    }

    pub fn num_parameters(&self) -> usize {
        self.params.iter().map(Tensor::len).sum()
    }

    fn check_input(&self, shape: &[usize]) -> Result<(), DenseVnetError> {
        let err = |detail: String| DenseVnetError::InputShape { got: shape.to_vec(), detail };
        if shape.len() != 5 || shape[0] == 0 {
            return Err(err("expected [batch, channels, x, y, z]".into()));
        }
        if shape[1] != self.config.in_channels() {
            return Err(err(format!("network takes {} channels", self.config.in_channels())));
        }
        for &n in &shape[2..] {
            check_spatial(n).map_err(err)?;
        }
        Ok(())
    }

    fn graph(&self, tape: &mut Tape, x: Var, p: &Bound) -> Result<Var, DenseVnetError> {
        let cfg = &self.config;
        let conv = |tape: &mut Tape, x: Var, i: usize, stride: usize, pad: usize| {
            let (w, b) = p.conv(i);
            let gain = weight_gain(tape.value(w).shape());
            let w = tape.scale(w, gain);
            tape.conv3d(x, w, b, stride, pad)
        };
        let mut layer = 0;
        let init = conv(tape, x, layer, 2, 1)?;
        let mut h = tape.leaky_relu(init, LEAKY_SLOPE);
        layer += 1;
        let mut skips = Vec::with_capacity(3);
        let mut skip_layer = layer_shapes(cfg).len() - 4;
        for l in 0..3 {
            let mut feats = vec![h];
            for _ in 0..cfg.units_per_stack[l] {
                let inp = if feats.len() == 1 { h } else { tape.concat_channels(&feats)? };
                let y = conv(tape, inp, layer, 1, 1)?;
                feats.push(tape.leaky_relu(y, LEAKY_SLOPE));
                layer += 1;
            }
            let stack = if feats.len() == 2 { feats[1] } else { tape.concat_channels(&feats[1..])? };
            let mut s = conv(tape, stack, skip_layer, 1, 1)?;
            skip_layer += 1;
            if l > 0 {
                s = tape.upsample_trilinear(s, 1 << l)?;
            }
            skips.push(s);
            if l < 2 {
                let d = conv(tape, stack, layer, 2, 1)?;
                h = tape.leaky_relu(d, LEAKY_SLOPE);
                layer += 1;
            }
        }
        let cat = tape.concat_channels(&skips)?;
        let logits = conv(tape, cat, skip_layer, 1, 0)?;
        Ok(tape.upsample_trilinear(logits, 2)?)
    }

    fn bind(&self, tape: &mut Tape, trainable: bool) -> Bound {
        let vars = self
            .params
            .iter()
            .map(|t| if trainable { tape.leaf(t.clone()) } else { tape.constant(t.clone()) })
            .collect();
        Bound { vars }
    }

    /// Logits `[batch, 2, x, y, z]` for input `[batch, in_channels, x, y, z]`.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor, DenseVnetError> {
        self.check_input(x.shape())?;
        let mut tape = Tape::new();
        let p = self.bind(&mut tape, false);
        let xv = tape.constant(x.clone());
        let y = self.graph(&mut tape, xv, &p)?;
        Ok(tape.value(y).clone())
    }

    /// Soft dice loss of the batch against `target` (`[batch, x, y, z]`).
    pub fn dice_loss(&self, x: &Tensor, target: &[f64]) -> Result<f64, DenseVnetError> {
        self.check_input(x.shape())?;
        let mut tape = Tape::new();
        let p = self.bind(&mut tape, false);
        let xv = tape.constant(x.clone());
        let y = self.graph(&mut tape, xv, &p)?;
        let l = tape.dice_loss(y, target)?;
        Ok(tape.value(l).data()[0])
    }

    /// Loss and its gradient with respect to every parameter.
    pub fn loss_and_grads(&self, x: &Tensor, target: &[f64]) -> Result<(f64, Vec<Vec<f64>>), DenseVnetError> {
        self.check_input(x.shape())?;
        let mut tape = Tape::new();
        let p = self.bind(&mut tape, true);
        let xv = tape.constant(x.clone());
        let y = self.graph(&mut tape, xv, &p)?;
        let l = tape.dice_loss(y, target)?;
        tape.backward(l)?;
        let grads = p
            .vars
            .iter()
            .zip(&self.params)
            .map(|(v, t)| tape.grad(*v).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; t.len()]))
            .collect();
        Ok((tape.value(l).data()[0], grads))
    }

    /// Whitened channels resampled to the network window, concatenated in
    /// `[channel, voxel]` order, plus the window grid.
    pub fn window_input(
        &self,
        t1gd: Option<&Volume3D>,
        flair: Option<&Volume3D>,
    ) -> Result<(Vec<f64>, Grid), DenseVnetError> {
        let mode = self.config.input_mode;
        let mut chans = Vec::new();
        if mode.uses_t1gd() {
            chans.push(t1gd.ok_or(DenseVnetError::MissingChannel("t1gd"))?);
        }
        if mode.uses_flair() {
            chans.push(flair.ok_or(DenseVnetError::MissingChannel("flair"))?);
        }
        if let [a, b] = chans[..] {
            a.ensure_same_grid(b)?;
        }
        let w = self.config.input_window;
        let mut data = Vec::with_capacity(chans.len() * w * w * w);
        let mut grid = None;
        for c in chans {
            let r = resample_to_grid(&whiten(c)?, [w; 3], Interpolation::Trilinear)?;
            grid = Some(*r.grid());
            data.extend_from_slice(r.data());
        }
        Ok((data, grid.expect("at least one channel")))
    }

    /// Binary brain mask on the input grid. Ties go to background.
    pub fn predict_mask(&self, t1gd: Option<&Volume3D>, flair: Option<&Volume3D>) -> Result<Volume3D, DenseVnetError> {
        let (data, grid) = self.window_input(t1gd, flair)?;
        let reference = t1gd.filter(|_| self.config.input_mode.uses_t1gd()).or(flair).expect("channel checked");
        let w = self.config.input_window;
        let x = Tensor::new(vec![1, self.config.in_channels(), w, w, w], data)?;
        let logits = self.forward(&x)?;
        let vox = w * w * w;
        let (bg, fg) = logits.data().split_at(vox);
        let small: Vec<f64> = bg.iter().zip(fg).map(|(b, f)| if f > b { 1.0 } else { 0.0 }).collect();
        let small = Volume3D::new(grid, DataType::U8, small)?;
        let back = resample_to_grid(&small, reference.dims(), Interpolation::Nearest)?;
        Ok(Volume3D::new(*reference.grid(), DataType::U8, back.into_data())?)
    }

    pub fn to_container(&self, extra: &BTreeMap<String, String>) -> Container {
        let mut meta = self.config.to_meta();
        for (k, v) in extra {
            meta.entry(k.clone()).or_insert_with(|| v.clone());
        }
        Container { meta, tensors: self.names.iter().cloned().zip(self.params.iter().cloned()).collect() }
    }

    pub fn from_container(c: &Container) -> Result<Network, DenseVnetError> {
        let config = DenseVnetConfig::from_meta(&c.meta)?;
        let mut net = build_dense_vnet(&config, 0)?;
        if c.tensors.len() != net.params.len() {
            return Err(DenseVnetError::InvalidConfig(format!(
                "checkpoint has {} tensors, network needs {}",
                c.tensors.len(),
                net.params.len()
            )));
        }
        for (i, (name, t)) in c.tensors.iter().enumerate() {
            if *name != net.names[i] || t.shape() != net.params[i].shape() {
                return Err(DenseVnetError::InvalidConfig(format!("checkpoint tensor {name} does not fit")));
            }
            net.params[i] = t.clone();
        }
        Ok(net)
    }

    pub fn save(&self, path: impl AsRef<Path>, extra: &BTreeMap<String, String>) -> Result<(), DenseVnetError> {
        Ok(write_container(path, &self.to_container(extra))?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Network, DenseVnetError> {
        Network::from_container(&read_container(path)?)
    }
}
