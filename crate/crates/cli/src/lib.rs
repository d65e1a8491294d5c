//! Subcommand implementations behind the `deepstrip` binary.
//!
//! Exit codes: 0 success, 1 usage error, 2 runtime error.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand};
use deepstrip_core::labelgen::{make_spm12p_label, LabelGenConfig};
use deepstrip_core::metrics::{
    confusion_counts, paired_t_test, parse_case_csv, render_markdown_report, segmentation_metrics, summarize_runs,
    format_case_csv, format_summary_csv, CaseRow, PairedComparison, SummaryRow,
};
use deepstrip_core::phantom::{generate_cohort, write_case_dir};
use deepstrip_core::preprocess::{
    apply_transform, correct_bias_field, denoise_curvature_flow, register_rigid, RegistrationMetric,
    RegistrationOptions,
};
use deepstrip_core::volume::{read_nifti, write_nifti, NiftiError};
use deepstrip_core::{DataType, Volume3D};
use deepstrip_nn::autodiff::read_container;
use deepstrip_nn::densevnet::{build_dense_vnet, Network};
use deepstrip_nn::trainer::{
    format_efficiency_csv, format_loss_csv, load_dataset, prepare_cases, run_data_efficiency, select_checkpoint,
    split_dataset, train_prepared, write_checkpoints, Checkpoint, LabeledCase, TrainConfig,
};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Runtime(_) => 2,
        }
    }
}

fn runtime(e: impl Display) -> CliError {
    CliError::Runtime(e.to_string())
}

fn at_path(path: &Path, e: impl Display) -> CliError {
    CliError::Runtime(format!("{}: {e}", path.display()))
}

#[derive(Debug, Parser)]
#[command(name = "deepstrip", version, about = "Brain extraction from T1Gd and FLAIR MRI")]
pub struct Cli {
    /// Leave the timestamp field out of log lines.
    #[arg(long, global = true)]
    pub no_timestamp: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write synthetic head phantoms, one directory per case.
    PhantomGen(PhantomGenArgs),
    /// Build a brain label from GM/WM/CSF probability maps.
    Labelgen(LabelgenArgs),
    /// Denoise, bias-correct and optionally register a volume.
    Preprocess(PreprocessArgs),
    /// Train a network on a directory of cases.
    Train(TrainArgs),
    /// Predict a brain mask with a trained model.
    Strip(StripArgs),
    /// Score a predicted mask against a reference mask.
    Eval(EvalArgs),
    /// Train on nested subsets of decreasing size and score each.
    DataEfficiency(DataEfficiencyArgs),
    /// Summarize per-case score tables into a markdown report.
    Report(ReportArgs),
}

#[derive(Debug, Args)]
pub struct PhantomGenArgs {
    #[arg(long)]
    pub count: usize,
    /// Edge length, or `x,y,z`.
    #[arg(long, default_value = "48", value_parser = parse_dims)]
    pub dims: [usize; 3],
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct LabelgenArgs {
    #[arg(long)]
    pub gm: PathBuf,
    #[arg(long)]
    pub wm: PathBuf,
    #[arg(long)]
    pub csf: PathBuf,
    #[arg(long, default_value_t = 0.7)]
    pub tau: f64,
    /// Skip the 3D hole filling.
    #[arg(long)]
    pub no_fill: bool,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct PreprocessArgs {
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Curvature-flow steps; 0 skips denoising.
    #[arg(long, default_value_t = 5)]
    pub denoise_steps: usize,
    #[arg(long, default_value_t = 0.0625)]
    pub dt: f64,
    /// Polynomial order of the bias field; 0 skips correction.
    #[arg(long, default_value_t = 2)]
    pub bias_order: usize,
    /// Register onto this volume and resample to its grid.
    #[arg(long)]
    pub reference: Option<PathBuf>,
    #[arg(long, default_value = "mse", value_parser = parse_metric)]
    pub metric: RegistrationMetric,
    /// Where to write the estimated transform.
    #[arg(long)]
    pub transform_out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    /// Train, validation and test fractions.
    #[arg(long, default_value = "0.80,0.07,0.13", value_parser = parse_fractions)]
    pub split: [f64; 3],
}

#[derive(Debug, Args)]
pub struct StripArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub t1gd: Option<PathBuf>,
    #[arg(long)]
    pub flair: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub pred: PathBuf,
    #[arg(long)]
    pub truth: PathBuf,
    /// Append-free per-case CSV output.
    #[arg(long)]
    pub csv: Option<PathBuf>,
    /// Row label in the CSV; defaults to the prediction file stem.
    #[arg(long)]
    pub case_id: Option<String>,
}

#[derive(Debug, Args)]
pub struct DataEfficiencyArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, value_delimiter = ',', required = true)]
    pub sizes: Vec<usize>,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub csv: PathBuf,
    #[arg(long, default_value = "0.80,0.07,0.13", value_parser = parse_fractions)]
    pub split: [f64; 3],
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// Directory of per-case CSV files, one per run.
    #[arg(long)]
    pub runs: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

fn parse_dims(s: &str) -> Result<[usize; 3], String> {
    let parts: Vec<usize> = s.split(',').map(|p| p.trim().parse::<usize>()).collect::<Result<_, _>>().map_err(|e| e.to_string())?;
    let dims = match parts[..] {
        [n] => [n; 3],
        [x, y, z] => [x, y, z],
        _ => return Err("expected N or X,Y,Z".into()),
    };
    if dims.contains(&0) {
        return Err("dims must be positive".into());
    }
    Ok(dims)
}

fn parse_fractions(s: &str) -> Result<[f64; 3], String> {
    let parts: Vec<f64> = s.split(',').map(|p| p.trim().parse::<f64>()).collect::<Result<_, _>>().map_err(|e| e.to_string())?;
    parts.try_into().map_err(|_| "expected three fractions".to_string())
}

fn parse_metric(s: &str) -> Result<RegistrationMetric, String> {
    match s {
        "mse" => Ok(RegistrationMetric::MeanSquaredError),
        "ncc" => Ok(RegistrationMetric::NegativeNormalizedCrossCorrelation),
        other => Err(format!("unknown metric {other:?} (mse or ncc)")),
    }
}

/// Writes `key=value` log lines, with a leading `ts=` field unless disabled.
struct Log<'a> {
    out: &'a mut dyn Write,
    timestamp: bool,
}

impl Log<'_> {
    fn line(&mut self, fields: &[(&str, String)]) -> Result<(), CliError> {
        let mut s = String::new();
        if self.timestamp {
            let secs = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0);
            s.push_str(&format!("ts={secs} "));
        }
        let body: Vec<String> = fields.iter().map(|(k, v)| format!("{k}={v}")).collect();
        s.push_str(&body.join(" "));
        writeln!(self.out, "{s}").map_err(runtime)
    }
}

fn read_volume(path: &Path) -> Result<Volume3D, CliError> {
    read_nifti(path).map_err(|e| match e {
        NiftiError::Io { source, .. } => at_path(path, source),
        other => at_path(path, other),
    })
}

fn write_volume(vol: &Volume3D, path: &Path) -> Result<(), CliError> {
    ensure_parent(path)?;
    write_nifti(vol, path).map_err(|e| match e {
        NiftiError::Io { source, .. } => at_path(path, source),
        other => at_path(path, other),
    })
}

fn ensure_parent(path: &Path) -> Result<(), CliError> {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => std::fs::create_dir_all(p).map_err(|e| at_path(p, e)),
        _ => Ok(()),
    }
}

fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    ensure_parent(path)?;
    std::fs::write(path, text).map_err(|e| at_path(path, e))
}

fn read_text(path: &Path) -> Result<String, CliError> {
    std::fs::read_to_string(path).map_err(|e| at_path(path, e))
}

fn load_config(path: Option<&Path>) -> Result<TrainConfig, CliError> {
    match path {
        Some(p) => TrainConfig::parse(&read_text(p)?).map_err(|e| at_path(p, e)),
        None => Ok(TrainConfig::default()),
    }
}

/// A bare network container, or a training checkpoint carrying optimizer
/// state as well.
pub fn load_model(path: &Path) -> Result<Network, CliError> {
    let c = read_container(path).map_err(|e| match e {
        deepstrip_nn::autodiff::ContainerError::Io { source, .. } => at_path(path, source),
        other => at_path(path, other),
    })?;
    if c.tensors.iter().any(|(n, _)| n.starts_with("adam.")) {
        Checkpoint::from_container(&c).map(|k| k.network).map_err(|e| at_path(path, e))
    } else {
        Network::from_container(&c).map_err(|e| at_path(path, e))
    }
}

/// Parses `argv` (program name first) and runs the subcommand.
pub fn run<I, T>(argv: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => {
                    let _ = write!(out, "{e}");
                    return 0;
                }
                _ => 1,
            };
            let _ = write!(err, "{e}");
            return code;
        }
    };
    match execute(&cli, out) {
        Ok(()) => 0,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            e.exit_code()
        }
    }
}

pub fn execute(cli: &Cli, out: &mut dyn Write) -> Result<(), CliError> {
    let mut log = Log { out, timestamp: !cli.no_timestamp };
    match &cli.command {
        Command::PhantomGen(a) => phantom_gen(a, &mut log),
        Command::Labelgen(a) => labelgen(a, &mut log),
        Command::Preprocess(a) => preprocess(a, &mut log),
        Command::Train(a) => train(a, &mut log),
        Command::Strip(a) => strip(a, &mut log),
        Command::Eval(a) => eval(a, &mut log),
        Command::DataEfficiency(a) => data_efficiency(a, &mut log),
        Command::Report(a) => report(a, &mut log),
    }
}

fn phantom_gen(a: &PhantomGenArgs, log: &mut Log) -> Result<(), CliError> {
    let cases = generate_cohort(a.count, a.dims, a.seed).map_err(runtime)?;
    for c in &cases {
        let dir = a.out.join(&c.case_id);
        write_case_dir(c, &dir).map_err(|e| at_path(&dir, e))?;
        log.line(&[
            ("case", c.case_id.clone()),
            ("dir", dir.display().to_string()),
            ("brain_voxels", c.truth_mask.count_nonzero().to_string()),
            ("tumor", c.spec.tumor.is_some().to_string()),
        ])?;
    }
    Ok(())
}

fn labelgen(a: &LabelgenArgs, log: &mut Log) -> Result<(), CliError> {
    if !(0.0..=1.0).contains(&a.tau) {
        return Err(CliError::Usage(format!("--tau {} is outside [0, 1]", a.tau)));
    }
    let (gm, wm, csf) = (read_volume(&a.gm)?, read_volume(&a.wm)?, read_volume(&a.csf)?);
    let cfg = LabelGenConfig { tau: a.tau, fill_holes: !a.no_fill };
    let label = make_spm12p_label(&gm, &wm, &csf, &cfg).map_err(runtime)?;
    write_volume(&label, &a.out)?;
    log.line(&[("case", a.out.display().to_string()), ("brain_voxels", label.count_nonzero().to_string())])
}

fn preprocess(a: &PreprocessArgs, log: &mut Log) -> Result<(), CliError> {
    let mut vol = read_volume(&a.input)?;
    if a.denoise_steps > 0 {
        vol = denoise_curvature_flow(&vol, a.denoise_steps, a.dt).map_err(|e| at_path(&a.input, e))?;
    }
    if a.bias_order > 0 {
        vol = correct_bias_field(&vol, a.bias_order).map_err(|e| at_path(&a.input, e))?.0;
    }
    let mut fields = vec![("case", a.input.display().to_string())];
    if let Some(r) = &a.reference {
        let fixed = read_volume(r)?;
        let opts = RegistrationOptions { metric: a.metric, ..Default::default() };
        let t = register_rigid(&vol, &fixed, &opts).map_err(|e| at_path(&a.input, e))?;
        vol = apply_transform(&vol, &t, fixed.grid());
        if let Some(p) = &a.transform_out {
            write_text(p, &format!("{t}\n"))?;
        }
        fields.push(("transform", format!("\"{t}\"")));
    }
    let vol = vol.with_dtype(DataType::F32).map_err(|e| at_path(&a.out, e))?;
    write_volume(&vol, &a.out)?;
    fields.push(("out", a.out.display().to_string()));
    log.line(&fields)
}

fn train(a: &TrainArgs, log: &mut Log) -> Result<(), CliError> {
    let cfg = load_config(a.config.as_deref())?;
    let cases = load_dataset(&a.data).map_err(|e| at_path(&a.data, e))?;
    let ids: Vec<String> = cases.iter().map(|c| c.id.clone()).collect();
    let split = split_dataset(&ids, a.split, cfg.seed).map_err(|e| at_path(&a.data, e))?;
    let pick = |want: &[String]| -> Vec<LabeledCase> {
        let mut v: Vec<LabeledCase> = cases.iter().filter(|c| want.contains(&c.id)).cloned().collect();
        v.sort_by(|x, y| x.id.cmp(&y.id));
        v
    };
    let (train_set, val_set) = (pick(&split.train), pick(&split.validation));
    let net = build_dense_vnet(&cfg.network_config(), cfg.seed).map_err(runtime)?;
    let prepared = prepare_cases(&net, &train_set).map_err(|e| at_path(&a.data, e))?;
    let val = prepare_cases(&net, &val_set).map_err(|e| at_path(&a.data, e))?;
    let started = Instant::now();
    let outcome = train_prepared(&prepared, net, &cfg).map_err(runtime)?;
    let ckpt_dir = a.out.join("checkpoints");
    write_checkpoints(&ckpt_dir, &outcome.checkpoints).map_err(|e| at_path(&ckpt_dir, e))?;
    write_text(&a.out.join("loss.csv"), &format_loss_csv(&outcome.losses))?;
    write_text(&a.out.join("config.txt"), &cfg.to_text())?;

    let mut split_csv = String::from("case_id,set\n");
    let mut rows: Vec<(&String, &str)> = Vec::new();
    for (set, list) in [("train", &split.train), ("validation", &split.validation), ("test", &split.test)] {
        rows.extend(list.iter().map(|id| (id, set)));
    }
    rows.sort();
    for (id, set) in rows {
        split_csv.push_str(&format!("{id},{set}\n"));
    }
    write_text(&a.out.join("split.csv"), &split_csv)?;

    // without validation cases the last checkpoint is kept
    let (index, selection_csv) = if val.is_empty() {
        (outcome.checkpoints.len() - 1, String::from("iteration,validation_loss\n"))
    } else {
        let sel = select_checkpoint(&outcome.checkpoints, &val).map_err(runtime)?;
        let mut s = String::from("iteration,validation_loss\n");
        for (c, l) in outcome.checkpoints.iter().zip(&sel.losses) {
            s.push_str(&format!("{},{l}\n", c.iteration));
        }
        (sel.index, s)
    };
    write_text(&a.out.join("selection.csv"), &selection_csv)?;
    let chosen = &outcome.checkpoints[index];
    let meta = BTreeMap::from([("iteration".to_string(), chosen.iteration.to_string())]);
    let model = a.out.join("model.ckpt");
    chosen.network.save(&model, &meta).map_err(|e| at_path(&model, e))?;
    for c in &train_set {
        log.line(&[("case", c.id.clone()), ("set", "train".into())])?;
    }
    let mut fields = vec![
        ("model", model.display().to_string()),
        ("selected_iteration", chosen.iteration.to_string()),
        ("final_loss", format!("{:?}", outcome.losses.last().copied().unwrap_or(f64::NAN))),
    ];
    if log.timestamp {
        fields.push(("seconds", format!("{:.1}", started.elapsed().as_secs_f64())));
    }
    log.line(&fields)
}

fn strip(a: &StripArgs, log: &mut Log) -> Result<(), CliError> {
    let started = Instant::now();
    let net = load_model(&a.model)?;
    let t1 = a.t1gd.as_deref().map(read_volume).transpose()?;
    let fl = a.flair.as_deref().map(read_volume).transpose()?;
    let mode = net.config().input_mode;
    if mode.uses_t1gd() && t1.is_none() {
        return Err(CliError::Usage(format!("model input mode {mode} needs --t1gd")));
    }
    if mode.uses_flair() && fl.is_none() {
        return Err(CliError::Usage(format!("model input mode {mode} needs --flair")));
    }
    let mask = net.predict_mask(t1.as_ref(), fl.as_ref()).map_err(runtime)?;
    write_volume(&mask, &a.out)?;
    let source = a.t1gd.as_ref().or(a.flair.as_ref()).expect("one channel present");
    let mut fields = vec![
        ("case", source.display().to_string()),
        ("out", a.out.display().to_string()),
        ("brain_voxels", mask.count_nonzero().to_string()),
    ];
    if log.timestamp {
        fields.push(("seconds", format!("{:.2}", started.elapsed().as_secs_f64())));
    }
    log.line(&fields)
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "NA".to_string(), |x| format!("{x:?}"))
}

fn eval(a: &EvalArgs, log: &mut Log) -> Result<(), CliError> {
    let pred = read_volume(&a.pred)?;
    let truth = read_volume(&a.truth)?;
    let counts = confusion_counts(&pred, &truth).map_err(|e| at_path(&a.pred, e))?;
    let m = segmentation_metrics(&counts);
    let case_id = a
        .case_id
        .clone()
        .unwrap_or_else(|| a.pred.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default());
    if let Some(csv) = &a.csv {
        write_text(csv, &format_case_csv(&[CaseRow { case_id: case_id.clone(), metrics: m }]))?;
    }
    log.line(&[
        ("case", case_id),
        ("dice", fmt_opt(m.dice)),
        ("sensitivity", fmt_opt(m.sensitivity)),
        ("specificity", fmt_opt(m.specificity)),
    ])
}

fn data_efficiency(a: &DataEfficiencyArgs, log: &mut Log) -> Result<(), CliError> {
    let cfg = load_config(a.config.as_deref())?;
    let cases = load_dataset(&a.data).map_err(|e| at_path(&a.data, e))?;
    let ids: Vec<String> = cases.iter().map(|c| c.id.clone()).collect();
    let split = split_dataset(&ids, a.split, cfg.seed).map_err(|e| at_path(&a.data, e))?;
    let pick = |want: &[String]| -> Vec<LabeledCase> {
        let mut v: Vec<LabeledCase> = cases.iter().filter(|c| want.contains(&c.id)).cloned().collect();
        v.sort_by(|x, y| x.id.cmp(&y.id));
        v
    };
    let rows = run_data_efficiency(&pick(&split.train), &a.sizes, &cfg, &pick(&split.validation), &pick(&split.test))
        .map_err(|e| at_path(&a.data, e))?;
    write_text(&a.csv, &format_efficiency_csv(&rows))?;
    for r in &rows {
        log.line(&[
            ("train_size", r.train_size.to_string()),
            ("mean_dice", format!("{:?}", r.mean_dice)),
            ("std_dice", format!("{:?}", r.std_dice)),
            ("selected_iteration", r.selected_iteration.to_string()),
        ])?;
    }
    Ok(())
}

fn report(a: &ReportArgs, log: &mut Log) -> Result<(), CliError> {
    let entries = std::fs::read_dir(&a.runs).map_err(|e| at_path(&a.runs, e))?;
    let mut files = Vec::new();
    for e in entries {
        let p = e.map_err(|e| at_path(&a.runs, e))?.path();
        if p.extension().is_some_and(|x| x == "csv") {
            files.push(p);
        }
    }
    files.sort();
    if files.is_empty() {
        return Err(at_path(&a.runs, "no .csv run files"));
    }
    let mut runs = Vec::new();
    for p in &files {
        let rows = parse_case_csv(&read_text(p)?).map_err(|e| at_path(p, e))?;
        let name = p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        runs.push((name, rows));
    }
    let mut summaries = Vec::new();
    for (name, rows) in &runs {
        let metrics: Vec<_> = rows.iter().map(|r| r.metrics).collect();
        let summary = summarize_runs(&metrics).map_err(|e| CliError::Runtime(format!("run {name}: {e}")))?;
        summaries.push(SummaryRow { input: name.clone(), summary });
    }
    let mut comparisons = Vec::new();
    for i in 0..runs.len() {
        for j in i + 1..runs.len() {
            let (a_rows, b_rows) = (&runs[i].1, &runs[j].1);
            let mut xa = Vec::new();
            let mut xb = Vec::new();
            for r in a_rows {
                let other = b_rows.iter().find(|o| o.case_id == r.case_id);
                if let (Some(da), Some(db)) = (r.metrics.dice, other.and_then(|o| o.metrics.dice)) {
                    xa.push(da);
                    xb.push(db);
                }
            }
            if let Ok(result) = paired_t_test(&xa, &xb) {
                comparisons.push(PairedComparison {
                    metric: "dice".into(),
                    run_a: runs[i].0.clone(),
                    run_b: runs[j].0.clone(),
                    n: xa.len(),
                    result,
                });
            }
        }
    }
    write_text(&a.out, &render_markdown_report(&summaries, &comparisons))?;
    let csv_path = a.out.with_extension("csv");
    write_text(&csv_path, &format_summary_csv(&summaries))?;
    for s in &summaries {
        let n = runs.iter().find(|r| r.0 == s.input).map_or(0, |r| r.1.len());
        log.line(&[("run", s.input.clone()), ("cases", n.to_string())])?;
    }
    log.line(&[("report", a.out.display().to_string()), ("comparisons", comparisons.len().to_string())])
}
