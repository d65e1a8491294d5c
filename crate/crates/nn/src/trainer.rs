//! Training loop, checkpointing, validation-based model selection, cohort
//! splitting and the training-set-size experiment.
//!
//! One training step is one Adam update on one batch; `max_iter` counts
//! steps.

use std::collections::{BTreeMap, HashSet};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use deepstrip_core::metrics::dice;
use deepstrip_core::volume::{read_nifti, resample_to_grid, NiftiError};
use deepstrip_core::{Interpolation, Volume3D, VolumeError};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::autodiff::{adam_step, AdamHyper, AdamState, Container, ContainerError, Tensor};
use crate::densevnet::{build_dense_vnet, DenseVnetConfig, DenseVnetError, InputMode, Network};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("config line {line}: {detail}")]
    ConfigSyntax { line: usize, detail: String },
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("cohort is empty")]
    EmptyCohort,
    #[error("split fractions {0:?} must be non-negative and sum to 1")]
    BadFractions([f64; 3]),
    #[error("training set is empty")]
    EmptyDataset,
    #[error("case {case}: missing {channel}")]
    MissingChannel { case: String, channel: &'static str },
    #[error("case {case}: {detail}")]
    BadCase { case: String, detail: String },
    #[error("loss is {loss} at step {step}")]
    NonFiniteLoss { step: usize, loss: f64 },
    #[error("no checkpoints to choose from")]
    NoCheckpoints,
    #[error("validation set is empty")]
    EmptyValidation,
    #[error("training size {size} exceeds the {available} available cases")]
    SizeTooLarge { size: usize, available: usize },
    #[error("case {0} appears in more than one of training, validation and evaluation")]
    Overlap(String),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: {source}")]
    Nifti { path: PathBuf, source: NiftiError },
    #[error(transparent)]
    Network(#[from] DenseVnetError),
    #[error(transparent)]
    Volume(#[from] VolumeError),
    #[error(transparent)]
    Checkpoint(#[from] ContainerError),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub max_iter: usize,
    pub save_every_n: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub samples_per_volume: usize,
    pub input_mode: InputMode,
    pub seed: u64,
    pub spatial_window_size: usize,
    pub num_classes: usize,
    pub stack_growth: [usize; 3],
    pub units_per_stack: [usize; 3],
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            max_iter: 500,
            save_every_n: 20,
            batch_size: 6,
            lr: 0.001,
            samples_per_volume: 1,
            input_mode: InputMode::Both,
            seed: 0,
            spatial_window_size: 48,
            num_classes: 2,
            stack_growth: [4, 8, 16],
            units_per_stack: [4, 4, 4],
        }
    }
}

fn parse_triple(v: &str) -> Option<[usize; 3]> {
    let parts: Vec<usize> = v.split(',').map(|s| s.trim().parse().ok()).collect::<Option<_>>()?;
    parts.try_into().ok()
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |s: &str| Err(TrainError::InvalidConfig(s.to_string()));
        if self.max_iter == 0 {
            return bad("max_iter must be at least 1");
        }
        if self.save_every_n == 0 || self.save_every_n > self.max_iter {
            return bad("save_every_n must be between 1 and max_iter");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1");
        }
        if self.samples_per_volume == 0 {
            return bad("samples_per_volume must be at least 1");
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("lr must be positive");
        }
        self.network_config().validate()?;
        Ok(())
    }

    pub fn network_config(&self) -> DenseVnetConfig {
        DenseVnetConfig {
            input_mode: self.input_mode,
            num_classes: self.num_classes,
            stack_growth: self.stack_growth,
            units_per_stack: self.units_per_stack,
            input_window: self.spatial_window_size,
        }
    }

    /// Parses flat `key=value` lines; `#` starts a comment. Keys not given
    /// keep their defaults.
    pub fn parse(text: &str) -> Result<TrainConfig, TrainError> {
        let mut cfg = TrainConfig::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let err = |detail: String| TrainError::ConfigSyntax { line: i + 1, detail };
            let (k, v) = line.split_once('=').ok_or_else(|| err(format!("expected key=value, got {line:?}")))?;
            let (k, v) = (k.trim(), v.trim());
            let bad_value = || err(format!("bad value {v:?} for {k}"));
            match k {
                "max_iter" => cfg.max_iter = v.parse().map_err(|_| bad_value())?,
                "save_every_n" => cfg.save_every_n = v.parse().map_err(|_| bad_value())?,
                "batch_size" => cfg.batch_size = v.parse().map_err(|_| bad_value())?,
                "lr" => cfg.lr = v.parse().map_err(|_| bad_value())?,
                "samples_per_volume" => cfg.samples_per_volume = v.parse().map_err(|_| bad_value())?,
                "seed" => cfg.seed = v.parse().map_err(|_| bad_value())?,
                "num_classes" => cfg.num_classes = v.parse().map_err(|_| bad_value())?,
                "input_mode" => cfg.input_mode = v.parse().map_err(|_| bad_value())?,
                "spatial_window_size" => {
                    // a single size or an (x, y, z) triple with equal entries
                    let trimmed = v.trim_start_matches('(').trim_end_matches(')');
                    cfg.spatial_window_size = match parse_triple(trimmed) {
                        Some([a, b, c]) if a == b && b == c => a,
                        Some(_) => return Err(err("spatial_window_size must be cubic".into())),
                        None => trimmed.parse().map_err(|_| bad_value())?,
                    };
                }
                "stack_growth" => cfg.stack_growth = parse_triple(v).ok_or_else(bad_value)?,
                "units_per_stack" => cfg.units_per_stack = parse_triple(v).ok_or_else(bad_value)?,
                other => return Err(err(format!("unknown key {other:?}"))),
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_text(&self) -> String {
        let t = |a: [usize; 3]| format!("{},{},{}", a[0], a[1], a[2]);
        format!(
            "max_iter={}\nsave_every_n={}\nbatch_size={}\nlr={}\nsamples_per_volume={}\ninput_mode={}\nseed={}\n\
             spatial_window_size={}\nnum_classes={}\nstack_growth={}\nunits_per_stack={}\n",
            self.max_iter,
            self.save_every_n,
            self.batch_size,
            self.lr,
            self.samples_per_volume,
            self.input_mode,
            self.seed,
            self.spatial_window_size,
            self.num_classes,
            t(self.stack_growth),
            t(self.units_per_stack),
        )
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CohortSplit {
    pub train: Vec<String>,
    pub validation: Vec<String>,
    pub test: Vec<String>,
}

/// Seeded shuffle, then validation and test take their rounded shares and
/// training takes the rest.
pub fn split_dataset(cohort: &[String], fractions: [f64; 3], seed: u64) -> Result<CohortSplit, TrainError> {
    if cohort.is_empty() {
        return Err(TrainError::EmptyCohort);
    }
    if fractions.iter().any(|f| !(*f >= 0.0)) || (fractions.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(TrainError::BadFractions(fractions));
    }
    let n = cohort.len();
    let n_val = ((n as f64 * fractions[1]).round() as usize).min(n);
    let n_test = ((n as f64 * fractions[2]).round() as usize).min(n - n_val);
    let n_train = n - n_val - n_test;
    let mut ids = cohort.to_vec();
    ids.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let test = ids.split_off(n_train + n_val);
    let validation = ids.split_off(n_train);
    Ok(CohortSplit { train: ids, validation, test })
}

/// A case with its input channels and a binary label on the same grid.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledCase {
    pub id: String,
    pub t1gd: Option<Volume3D>,
    pub flair: Option<Volume3D>,
    pub label: Volume3D,
}

impl LabeledCase {
    /// Reads `t1gd.nii` and `flair.nii` (either may be absent) and the label
    /// from `label.nii`, or `truth.nii` when there is no `label.nii`.
    pub fn from_dir(dir: impl AsRef<Path>) -> Result<LabeledCase, TrainError> {
        let dir = dir.as_ref();
        let id = dir.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        let load = |p: PathBuf| read_nifti(&p).map_err(|source| TrainError::Nifti { path: p, source });
        let optional = |name: &str| {
            let p = dir.join(name);
            if p.exists() { load(p).map(Some) } else { Ok(None) }
        };
        let t1gd = optional("t1gd.nii")?;
        let flair = optional("flair.nii")?;
        let label_path = if dir.join("label.nii").exists() { dir.join("label.nii") } else { dir.join("truth.nii") };
        if !label_path.exists() {
            return Err(TrainError::BadCase { case: dir.display().to_string(), detail: "no label.nii or truth.nii".into() });
        }
        Ok(LabeledCase { id, t1gd, flair, label: load(label_path)? })
    }
}

/// Loads every subdirectory of `root` (sorted by name) as a case.
pub fn load_dataset(root: impl AsRef<Path>) -> Result<Vec<LabeledCase>, TrainError> {
    let root = root.as_ref();
    let io = |source| TrainError::Io { path: root.to_path_buf(), source };
    let mut dirs = Vec::new();
    for entry in std::fs::read_dir(root).map_err(io)? {
        let p = entry.map_err(io)?.path();
        if p.is_dir() {
            dirs.push(p);
        }
    }
    dirs.sort();
    dirs.iter().map(LabeledCase::from_dir).collect()
}

/// Network-window input and target of one case.
#[derive(Debug, Clone, PartialEq)]
pub struct PreparedCase {
    pub id: String,
    pub input: Vec<f64>,
    pub target: Vec<f64>,
}

pub fn prepare_cases(net: &Network, cases: &[LabeledCase]) -> Result<Vec<PreparedCase>, TrainError> {
    let w = net.config().input_window;
    cases
        .iter()
        .map(|c| {
            let (input, _) = net.window_input(c.t1gd.as_ref(), c.flair.as_ref()).map_err(|e| match e {
                DenseVnetError::MissingChannel(channel) => TrainError::MissingChannel { case: c.id.clone(), channel },
                other => TrainError::BadCase { case: c.id.clone(), detail: other.to_string() },
            })?;
            if !c.label.is_binary() {
                return Err(TrainError::BadCase { case: c.id.clone(), detail: "label is not binary".into() });
            }
            let reference = c.t1gd.as_ref().or(c.flair.as_ref()).expect("window_input checked channels");
            c.label
                .ensure_same_grid(reference)
                .map_err(|e| TrainError::BadCase { case: c.id.clone(), detail: e.to_string() })?;
            let target = resample_to_grid(&c.label, [w; 3], Interpolation::Nearest)?.into_data();
            Ok(PreparedCase { id: c.id.clone(), input, target })
        })
        .collect()
}

/// Parameters and optimizer state after `iteration` steps.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub iteration: usize,
    pub network: Network,
    pub optimizer: AdamState,
}

impl Checkpoint {
    pub fn to_container(&self) -> Container {
        let mut meta = BTreeMap::new();
        meta.insert("iteration".to_string(), self.iteration.to_string());
        meta.insert("adam_step".to_string(), self.optimizer.step.to_string());
        meta.insert("lr".to_string(), self.optimizer.hyper.lr.to_string());
        let mut c = self.network.to_container(&meta);
        let (m, v) = self.optimizer.moments();
        for (prefix, moments) in [("adam.m.", m), ("adam.v.", v)] {
            for ((name, p), buf) in self.network.param_names().iter().zip(self.network.params()).zip(moments) {
                let t = Tensor::new(p.shape().to_vec(), buf.clone()).expect("moment matches parameter");
                c.tensors.push((format!("{prefix}{name}"), t));
            }
        }
        c
    }

    pub fn from_container(c: &Container) -> Result<Checkpoint, TrainError> {
        let bad = |s: &str| TrainError::Checkpoint(ContainerError::Malformed(s.to_string()));
        let num = |k: &str| c.meta.get(k).and_then(|v| v.parse::<u64>().ok()).ok_or_else(|| bad(k));
        let iteration = num("iteration")? as usize;
        let step = num("adam_step")?;
        let lr = c.meta.get("lr").and_then(|v| v.parse::<f64>().ok()).ok_or_else(|| bad("lr"))?;
        let (params, rest): (Vec<_>, Vec<_>) = c.tensors.iter().cloned().partition(|(n, _)| !n.starts_with("adam."));
        let network = Network::from_container(&Container { meta: c.meta.clone(), tensors: params })?;
        let moments = |prefix: &str| -> Result<Vec<Vec<f64>>, TrainError> {
            network
                .param_names()
                .iter()
                .map(|n| {
                    let key = format!("{prefix}{n}");
                    rest.iter().find(|(k, _)| *k == key).map(|(_, t)| t.data().to_vec()).ok_or_else(|| bad(&key))
                })
                .collect()
        };
        let hyper = AdamHyper { lr, ..AdamHyper::default() };
        let optimizer = AdamState::from_moments(hyper, step, moments("adam.m.")?, moments("adam.v.")?)
            .map_err(|e| bad(&e.to_string()))?;
        Ok(Checkpoint { iteration, network, optimizer })
    }

    pub fn file_name(&self) -> String {
        format!("model_{:06}.ckpt", self.iteration)
    }
}

pub fn write_checkpoints(dir: impl AsRef<Path>, checkpoints: &[Checkpoint]) -> Result<Vec<PathBuf>, TrainError> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|source| TrainError::Io { path: dir.to_path_buf(), source })?;
    checkpoints
        .iter()
        .map(|c| {
            let p = dir.join(c.file_name());
            crate::autodiff::write_container(&p, &c.to_container())?;
            Ok(p)
        })
        .collect()
}

/// Checkpoints in `dir`, ordered by iteration.
pub fn read_checkpoints(dir: impl AsRef<Path>) -> Result<Vec<Checkpoint>, TrainError> {
    let dir = dir.as_ref();
    let io = |source| TrainError::Io { path: dir.to_path_buf(), source };
    let mut paths = Vec::new();
    for entry in std::fs::read_dir(dir).map_err(io)? {
        let p = entry.map_err(io)?.path();
        if p.extension().is_some_and(|e| e == "ckpt") {
            paths.push(p);
        }
    }
    let mut out = paths
        .iter()
        .map(|p| Checkpoint::from_container(&crate::autodiff::read_container(p)?))
        .collect::<Result<Vec<_>, _>>()?;
    out.sort_by_key(|c| c.iteration);
    Ok(out)
}

/// Iterations at which a checkpoint is taken.
pub fn checkpoint_iterations(max_iter: usize, save_every_n: usize) -> Vec<usize> {
    let mut out: Vec<usize> = (1..=max_iter / save_every_n).map(|k| k * save_every_n).collect();
    if max_iter % save_every_n != 0 {
        out.push(max_iter);
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub network: Network,
    pub checkpoints: Vec<Checkpoint>,
    /// Loss of each step, first step first.
    pub losses: Vec<f64>,
}

/// Shuffled passes over the cases; independent draws when there are fewer
/// cases than the batch.
struct BatchSampler {
    order: Vec<usize>,
    pos: usize,
    n: usize,
    rng: ChaCha8Rng,
}

impl BatchSampler {
    fn new(n: usize, repeats: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(1);
        let order = (0..n).flat_map(|i| std::iter::repeat_n(i, repeats)).collect();
        BatchSampler { order, pos: usize::MAX, n, rng }
    }

    fn next_batch(&mut self, size: usize) -> Vec<usize> {
        if self.n < size {
            return (0..size).map(|_| self.rng.random_range(0..self.n)).collect();
        }
        (0..size)
            .map(|_| {
                if self.pos >= self.order.len() {
                    self.order.shuffle(&mut self.rng);
                    self.pos = 0;
                }
                self.pos += 1;
                self.order[self.pos - 1]
            })
            .collect()
    }
}

pub fn train(dataset: &[LabeledCase], net: Network, cfg: &TrainConfig) -> Result<TrainOutcome, TrainError> {
    let prepared = prepare_cases(&net, dataset)?;
    train_prepared(&prepared, net, cfg)
}

pub fn train_prepared(dataset: &[PreparedCase], mut net: Network, cfg: &TrainConfig) -> Result<TrainOutcome, TrainError> {
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let ncfg = net.config();
    let w = ncfg.input_window;
    let c = ncfg.in_channels();
    let per_input = c * w * w * w;
    let per_target = w * w * w;
    for case in dataset {
        if case.input.len() != per_input || case.target.len() != per_target {
            return Err(TrainError::BadCase { case: case.id.clone(), detail: "prepared for a different network".into() });
        }
    }
    let mut sampler = BatchSampler::new(dataset.len(), cfg.samples_per_volume, cfg.seed);
    let mut adam = AdamState::new(AdamHyper { lr: cfg.lr, ..AdamHyper::default() }, net.params());
    let mut losses = Vec::with_capacity(cfg.max_iter);
    let mut checkpoints = Vec::new();
    for step in 1..=cfg.max_iter {
        let batch = sampler.next_batch(cfg.batch_size);
        let mut input = Vec::with_capacity(batch.len() * per_input);
        let mut target = Vec::with_capacity(batch.len() * per_target);
        for &i in &batch {
            input.extend_from_slice(&dataset[i].input);
            target.extend_from_slice(&dataset[i].target);
        }
        let x = Tensor::new(vec![batch.len(), c, w, w, w], input).expect("sizes checked");
        let (loss, grads) = net.loss_and_grads(&x, &target)?;
        if !loss.is_finite() || grads.iter().flatten().any(|g| !g.is_finite()) {
            return Err(TrainError::NonFiniteLoss { step, loss });
        }
        adam_step(&mut adam, net.params_mut(), &grads).expect("gradients match parameters");
        losses.push(loss);
        if step % cfg.save_every_n == 0 || step == cfg.max_iter {
            checkpoints.push(Checkpoint { iteration: step, network: net.clone(), optimizer: adam.clone() });
        }
    }
    Ok(TrainOutcome { network: net, checkpoints, losses })
}

pub fn format_loss_csv(losses: &[f64]) -> String {
    let mut s = String::from("step,loss\n");
    for (i, l) in losses.iter().enumerate() {
        writeln!(s, "{},{l}", i + 1).unwrap();
    }
    s
}

/// Mean per-case soft dice loss at the network window.
pub fn validation_loss(net: &Network, cases: &[PreparedCase]) -> Result<f64, TrainError> {
    if cases.is_empty() {
        return Err(TrainError::EmptyValidation);
    }
    let cfg = net.config();
    let w = cfg.input_window;
    let mut total = 0.0;
    for case in cases {
        let x = Tensor::new(vec![1, cfg.in_channels(), w, w, w], case.input.clone())
            .map_err(|e| TrainError::BadCase { case: case.id.clone(), detail: e.to_string() })?;
        total += net.dice_loss(&x, &case.target)?;
    }
    Ok(total / cases.len() as f64)
}

/// Index of the smallest value; the first one wins ties. NaN never wins.
pub fn argmin_earliest(values: &[f64]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, &v) in values.iter().enumerate() {
        if v.is_nan() {
            continue;
        }
        if best.is_none_or(|b| v < values[b]) {
            best = Some(i);
        }
    }
    best
}

#[derive(Debug, Clone, PartialEq)]
pub struct Selection {
    pub index: usize,
    pub losses: Vec<f64>,
}

pub fn select_checkpoint(checkpoints: &[Checkpoint], validation: &[PreparedCase]) -> Result<Selection, TrainError> {
    if checkpoints.is_empty() {
        return Err(TrainError::NoCheckpoints);
    }
    let losses = checkpoints
        .iter()
        .map(|c| validation_loss(&c.network, validation))
        .collect::<Result<Vec<_>, _>>()?;
    let index = argmin_earliest(&losses).ok_or(TrainError::NoCheckpoints)?;
    Ok(Selection { index, losses })
}

/// Dice of the predicted mask against each case's label on its own grid.
/// Two empty masks count as perfect agreement.
pub fn evaluate_dice(net: &Network, cases: &[LabeledCase]) -> Result<Vec<f64>, TrainError> {
    cases
        .iter()
        .map(|c| {
            let pred = net.predict_mask(c.t1gd.as_ref(), c.flair.as_ref())?;
            let d = dice(&pred, &c.label).map_err(|e| TrainError::BadCase { case: c.id.clone(), detail: e.to_string() })?;
            Ok(d.unwrap_or(1.0))
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct EfficiencyRow {
    pub train_size: usize,
    pub mean_dice: f64,
    /// Sample standard deviation; 0 for a single evaluation case.
    pub std_dice: f64,
    pub selected_iteration: usize,
}

pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let ss: f64 = values.iter().map(|v| (v - mean) * (v - mean)).sum();
    (mean, (ss / (n - 1.0)).sqrt())
}

/// The cases used at each training size: prefixes of one seeded
/// permutation, so smaller subsets are contained in larger ones.
pub fn nested_subsets(n: usize, sizes: &[usize], seed: u64) -> Result<Vec<Vec<usize>>, TrainError> {
    let mut perm: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(2);
    perm.shuffle(&mut rng);
    sizes
        .iter()
        .map(|&k| {
            if k > n {
                return Err(TrainError::SizeTooLarge { size: k, available: n });
            }
            if k == 0 {
                return Err(TrainError::EmptyDataset);
            }
            Ok(perm[..k].to_vec())
        })
        .collect()
}

/// Train on nested subsets of `dataset`, pick each run's checkpoint on
/// `validation`, and score it on `eval_set`.
pub fn run_data_efficiency(
    dataset: &[LabeledCase],
    sizes: &[usize],
    cfg: &TrainConfig,
    validation: &[LabeledCase],
    eval_set: &[LabeledCase],
) -> Result<Vec<EfficiencyRow>, TrainError> {
    cfg.validate()?;
    if validation.is_empty() {
        return Err(TrainError::EmptyValidation);
    }
    if eval_set.is_empty() {
        return Err(TrainError::InvalidConfig("evaluation set is empty".into()));
    }
    let mut seen = HashSet::new();
    for c in dataset.iter().chain(validation).chain(eval_set) {
        if !seen.insert(c.id.as_str()) {
            return Err(TrainError::Overlap(c.id.clone()));
        }
    }
    let subsets = nested_subsets(dataset.len(), sizes, cfg.seed)?;
    let fresh = build_dense_vnet(&cfg.network_config(), cfg.seed)?;
    let prepared = prepare_cases(&fresh, dataset)?;
    let val = prepare_cases(&fresh, validation)?;
    let mut rows = Vec::with_capacity(sizes.len());
    for subset in subsets {
        let cases: Vec<PreparedCase> = subset.iter().map(|&i| prepared[i].clone()).collect();
        let outcome = train_prepared(&cases, fresh.clone(), cfg)?;
        let sel = select_checkpoint(&outcome.checkpoints, &val)?;
        let chosen = &outcome.checkpoints[sel.index];
        let scores = evaluate_dice(&chosen.network, eval_set)?;
        let (mean_dice, std_dice) = mean_std(&scores);
        rows.push(EfficiencyRow { train_size: subset.len(), mean_dice, std_dice, selected_iteration: chosen.iteration });
    }
    Ok(rows)
}

pub fn format_efficiency_csv(rows: &[EfficiencyRow]) -> String {
    let mut s = String::from("train_size,mean_dice,std_dice\n");
    for r in rows {
        writeln!(s, "{},{},{}", r.train_size, r.mean_dice, r.std_dice).unwrap();
    }
    s
}
