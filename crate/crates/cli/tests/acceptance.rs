//! End-to-end acceptance checks, one line per criterion.
//!
//! Runs without the libtest harness so the summary is always printed.
//! Exits nonzero if any criterion fails.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use deepstrip_cli::run;
use deepstrip_core::labelgen::{make_spm12p_label, LabelGenConfig};
use deepstrip_core::metrics::{confusion_counts, dice, paired_t_test, segmentation_metrics};
use deepstrip_core::phantom::{generate_cohort, generate_phantom, PhantomCase, PhantomSpec};
use deepstrip_core::preprocess::{apply_transform, register_rigid, RegistrationOptions, RigidTransform};
use deepstrip_core::volume::{read_nifti, write_nifti};
use deepstrip_core::{DataType, Grid, Volume3D};
use deepstrip_nn::autodiff::{AdamHyper, AdamState, Tape, Tensor, Var};
use deepstrip_nn::densevnet::{build_dense_vnet, DenseVnetConfig, InputMode};
use deepstrip_nn::trainer::{
    checkpoint_iterations, prepare_cases, run_data_efficiency, select_checkpoint, train_prepared, validation_loss,
    Checkpoint, EfficiencyRow, LabeledCase, TrainConfig,
};
use nifti::{NiftiObject, ReaderOptions, RandomAccessNiftiVolume};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use statrs::distribution::{ContinuousCDF, StudentsT};

type Outcome = Result<String, String>;

fn check(ok: bool, detail: String) -> Outcome {
    if ok { Ok(detail) } else { Err(detail) }
}

fn within(elapsed: Duration, limit_s: f64) -> Result<(), String> {
    if elapsed.as_secs_f64() < limit_s {
        Ok(())
    } else {
        Err(format!("took {:.1}s, limit {limit_s}s", elapsed.as_secs_f64()))
    }
}

fn random_mask(rng: &mut ChaCha8Rng, p: f64) -> Volume3D {
    let g = Grid::unit([16; 3]).unwrap();
    let bits: Vec<bool> = (0..g.len()).map(|_| rng.random_bool(p)).collect();
    Volume3D::from_mask(g, &bits).unwrap()
}

fn metric_exactness() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for trial in 0..1000 {
        let p = rng.random_range(0.0..1.0);
        let q = rng.random_range(0.0..1.0);
        let (a, b) = (random_mask(&mut rng, p), random_mask(&mut rng, q));
        let (mut tp, mut fp, mut fn_, mut tn) = (0u64, 0u64, 0u64, 0u64);
        for z in 0..16 {
            for y in 0..16 {
                for x in 0..16 {
                    match (a.get(x, y, z) != 0.0, b.get(x, y, z) != 0.0) {
                        (true, true) => tp += 1,
                        (true, false) => fp += 1,
                        (false, true) => fn_ += 1,
                        (false, false) => tn += 1,
                    }
                }
            }
        }
        let c = confusion_counts(&a, &b).map_err(|e| e.to_string())?;
        if (c.tp, c.fp, c.fn_, c.tn) != (tp, fp, fn_, tn) {
            return Err(format!("trial {trial}: counts {c:?}"));
        }
        let m = segmentation_metrics(&c);
        let frac = |n: u64, d: u64| (d > 0).then(|| n as f64 / d as f64);
        let want = (frac(2 * tp, 2 * tp + fp + fn_), frac(tp, tp + fn_), frac(tn, tn + fp));
        if (m.dice, m.sensitivity, m.specificity) != want {
            return Err(format!("trial {trial}: metrics {m:?}"));
        }
    }
    let g = Grid::unit([4, 1, 1]).unwrap();
    let pred = Volume3D::from_mask(g, &[true, true, false, false]).unwrap();
    let truth = Volume3D::from_mask(g, &[true, false, true, false]).unwrap();
    let m = segmentation_metrics(&confusion_counts(&pred, &truth).map_err(|e| e.to_string())?);
    if (m.dice, m.sensitivity, m.specificity) != (Some(0.5), Some(0.5), Some(0.5)) {
        return Err(format!("worked example gave {m:?}"));
    }
    within(start.elapsed(), 10.0)?;
    Ok(format!("1000 pairs exact, worked example 0.5/0.5/0.5, {:.2}s", start.elapsed().as_secs_f64()))
}

fn random_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

fn projection(tape: &mut Tape, v: Var, seed: u64) -> Var {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w: Vec<f64> = (0..tape.value(v).len()).map(|_| rng.random_range(-1.0..1.0)).collect();
    tape.weighted_sum(v, &w).unwrap()
}

const FD_STEP: f64 = 1e-5;
const GRAD_TOL: f64 = 1e-4;

fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-6)
}

/// Worst relative error over `coords` random coordinates spread across the
/// inputs of `f`.
fn op_grad_check(inputs: Vec<Tensor>, coords: usize, seed: u64, f: impl Fn(&mut Tape, &[Var]) -> Var) -> f64 {
    let eval = |ts: &[Tensor]| {
        let mut tape = Tape::new();
        let vars: Vec<Var> = ts.iter().map(|t| tape.leaf(t.clone())).collect();
        let l = f(&mut tape, &vars);
        tape.value(l).data()[0]
    };
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let loss = f(&mut tape, &vars);
    tape.backward(loss).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..coords {
        let k = rng.random_range(0..inputs.len());
        let i = rng.random_range(0..inputs[k].len());
        let analytic = tape.grad(vars[k]).map_or(0.0, |g| g[i]);
        let mut plus = inputs.clone();
        plus[k].data_mut()[i] += FD_STEP;
        let mut minus = inputs.clone();
        minus[k].data_mut()[i] -= FD_STEP;
        let numeric = (eval(&plus) - eval(&minus)) / (2.0 * FD_STEP);
        worst = worst.max(rel_err(analytic, numeric));
    }
    worst
}

fn gradient_suite() -> Outcome {
    let start = Instant::now();
    let coords = 120;
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut report = Vec::new();

    let conv_inputs = vec![random_tensor(&[2, 2, 6, 5, 7], &mut rng), random_tensor(&[3, 2, 3, 3, 3], &mut rng), random_tensor(&[3], &mut rng)];
    for (stride, pad) in [(1, 1), (2, 1), (1, 0)] {
        let e = op_grad_check(conv_inputs.clone(), coords, 10 + stride as u64, |t, v| {
            let y = t.conv3d(v[0], v[1], v[2], stride, pad).unwrap();
            projection(t, y, 3)
        });
        report.push((format!("conv3d s{stride}p{pad}"), e));
    }
    let e = op_grad_check(vec![random_tensor(&[2, 3, 3, 4, 2], &mut rng)], coords, 20, |t, v| {
        let y = t.upsample_trilinear(v[0], 2).unwrap();
        projection(t, y, 4)
    });
    report.push(("trilinear_upsample".into(), e));
    let e = op_grad_check(vec![random_tensor(&[2, 3, 3, 3, 3], &mut rng)], coords, 21, |t, v| {
        let y = t.softmax_channels(v[0]).unwrap();
        projection(t, y, 5)
    });
    report.push(("softmax".into(), e));
    let target: Vec<f64> = (0..2 * 64).map(|i| ((i * 7) % 5 < 2) as u8 as f64).collect();
    let e = op_grad_check(vec![random_tensor(&[2, 2, 4, 4, 4], &mut rng)], coords, 22, |t, v| {
        t.dice_loss(v[0], &target).unwrap()
    });
    report.push(("dice_loss".into(), e));

    let cfg = DenseVnetConfig {
        input_mode: InputMode::Both,
        stack_growth: [2, 3, 2],
        units_per_stack: [2, 1, 2],
        input_window: 16,
        ..DenseVnetConfig::default()
    };
    let net = build_dense_vnet(&cfg, 9).map_err(|e| e.to_string())?;
    let x = random_tensor(&[1, 2, 16, 16, 16], &mut rng);
    let target: Vec<f64> = (0..4096)
        .map(|v| {
            let (a, b, c) = ((v / 256) as f64 - 7.5, ((v / 16) % 16) as f64 - 7.5, (v % 16) as f64 - 7.5);
            ((a * a + b * b + c * c) < 30.0) as u8 as f64
        })
        .collect();
    let (_, grads) = net.loss_and_grads(&x, &target).map_err(|e| e.to_string())?;
    let mut worst: f64 = 0.0;
    for _ in 0..coords {
        let p = rng.random_range(0..net.params().len());
        let i = rng.random_range(0..net.params()[p].len());
        let eval = |delta: f64| {
            let mut n = net.clone();
            n.params_mut()[p].data_mut()[i] += delta;
            n.dice_loss(&x, &target).unwrap()
        };
        let numeric = (eval(FD_STEP) - eval(-FD_STEP)) / (2.0 * FD_STEP);
        worst = worst.max(rel_err(grads[p][i], numeric));
    }
    report.push(("dense_vnet".into(), worst));

    let summary: Vec<String> = report.iter().map(|(n, e)| format!("{n}={e:.1e}")).collect();
    within(start.elapsed(), 120.0)?;
    check(
        report.iter().all(|(_, e)| *e < GRAD_TOL),
        format!("{coords} coords each, worst rel err: {}, {:.1}s", summary.join(" "), start.elapsed().as_secs_f64()),
    )
}

fn label_fidelity() -> Outcome {
    let start = Instant::now();
    let cases = generate_cohort(20, [48; 3], 33).map_err(|e| e.to_string())?;
    let (mut min_filled, mut min_drop) = (f64::INFINITY, f64::INFINITY);
    for c in &cases {
        let core = c.spec.tumor.map_or(0.0, |t| t.necrotic_core_radius);
        if core <= 0.0 {
            return Err(format!("{} has no necrotic core", c.case_id));
        }
        let filled = make_spm12p_label(&c.gm, &c.wm, &c.csf, &LabelGenConfig { tau: 0.7, fill_holes: true })
            .map_err(|e| e.to_string())?;
        let raw = make_spm12p_label(&c.gm, &c.wm, &c.csf, &LabelGenConfig { tau: 0.7, fill_holes: false })
            .map_err(|e| e.to_string())?;
        let d_filled = dice(&filled, &c.truth_mask).map_err(|e| e.to_string())?.unwrap_or(1.0);
        let d_raw = dice(&raw, &c.truth_mask).map_err(|e| e.to_string())?.unwrap_or(1.0);
        min_filled = min_filled.min(d_filled);
        min_drop = min_drop.min(d_filled - d_raw);
    }
    within(start.elapsed(), 30.0)?;
    check(
        min_filled >= 0.99 && min_drop > 0.005,
        format!("20 necrotic phantoms, min dice {min_filled:.4}, min hole-fill gain {min_drop:.4}, {:.1}s", start.elapsed().as_secs_f64()),
    )
}

fn labeled(c: &PhantomCase, label: Volume3D) -> LabeledCase {
    LabeledCase { id: c.case_id.clone(), t1gd: Some(c.t1gd.clone()), flair: Some(c.flair.clone()), label }
}

/// 50 training, 7 validation and 10 held-out phantoms. Training and
/// validation use generated labels; held-out cases are scored on truth.
fn phantom_experiment() -> Result<(Vec<EfficiencyRow>, Duration), String> {
    let start = Instant::now();
    let cases = generate_cohort(67, [48; 3], 2024).map_err(|e| e.to_string())?;
    let mut generated = Vec::new();
    for c in &cases {
        let label = make_spm12p_label(&c.gm, &c.wm, &c.csf, &LabelGenConfig::default()).map_err(|e| e.to_string())?;
        generated.push(labeled(c, label));
    }
    let held_out: Vec<LabeledCase> = cases[57..].iter().map(|c| labeled(c, c.truth_mask.clone())).collect();
    let cfg = TrainConfig::default();
    let rows = run_data_efficiency(&generated[..50], &[50, 25, 10], &cfg, &generated[50..57], &held_out)
        .map_err(|e| e.to_string())?;
    Ok((rows, start.elapsed()))
}

fn end_to_end_training(exp: &Result<(Vec<EfficiencyRow>, Duration), String>) -> Outcome {
    let (rows, elapsed) = exp.as_ref().map_err(Clone::clone)?;
    let r = &rows[0];
    // the size-50 run is one of the three trained back to back
    let per_run = elapsed.as_secs_f64() / rows.len() as f64;
    if per_run >= 30.0 * 60.0 {
        return Err(format!("{per_run:.0}s per run, limit 1800s"));
    }
    check(
        r.train_size == 50 && r.mean_dice >= 0.95,
        format!(
            "50 training phantoms, mean dice {:.4} (sd {:.4}) on 10 held out, checkpoint {}, ~{per_run:.0}s",
            r.mean_dice, r.std_dice, r.selected_iteration
        ),
    )
}

fn data_efficiency(exp: &Result<(Vec<EfficiencyRow>, Duration), String>) -> Outcome {
    let (rows, elapsed) = exp.as_ref().map_err(Clone::clone)?;
    within(*elapsed, 90.0 * 60.0)?;
    let d: Vec<f64> = rows.iter().map(|r| r.mean_dice).collect();
    check(
        (d[0] - d[1]).abs() <= 0.02 && d.iter().all(|&x| x >= 0.90),
        format!(
            "mean dice 50/25/10 = {:.4}/{:.4}/{:.4}, |d50-d25| {:.4}, {:.0}s",
            d[0],
            d[1],
            d[2],
            (d[0] - d[1]).abs(),
            elapsed.as_secs_f64()
        ),
    )
}

fn checkpoint_policy() -> Outcome {
    let cfg = TrainConfig {
        max_iter: 500,
        save_every_n: 20,
        batch_size: 1,
        spatial_window_size: 16,
        stack_growth: [2, 2, 2],
        units_per_stack: [1, 1, 1],
        seed: 5,
        ..TrainConfig::default()
    };
    let cases = generate_cohort(3, [24; 3], 6).map_err(|e| e.to_string())?;
    let lab: Vec<LabeledCase> = cases.iter().map(|c| labeled(c, c.truth_mask.clone())).collect();
    let net = build_dense_vnet(&cfg.network_config(), cfg.seed).map_err(|e| e.to_string())?;
    let train = prepare_cases(&net, &lab[..2]).map_err(|e| e.to_string())?;
    let val = prepare_cases(&net, &lab[2..]).map_err(|e| e.to_string())?;
    let outcome = train_prepared(&train, net.clone(), &cfg).map_err(|e| e.to_string())?;
    let iters: Vec<usize> = outcome.checkpoints.iter().map(|c| c.iteration).collect();
    if iters.len() != 25 || iters != checkpoint_iterations(500, 20) || iters.last() != Some(&500) {
        return Err(format!("checkpoints at {iters:?}"));
    }
    let sel = select_checkpoint(&outcome.checkpoints, &val).map_err(|e| e.to_string())?;
    let losses: Vec<f64> =
        outcome.checkpoints.iter().map(|c| validation_loss(&c.network, &val).unwrap()).collect();
    let min = losses.iter().copied().fold(f64::INFINITY, f64::min);
    let first = losses.iter().position(|&l| l == min).unwrap();
    if sel.index != first || sel.losses != losses {
        return Err(format!("selected {} but argmin is {first}", sel.index));
    }
    let same = Checkpoint { iteration: 0, network: net, optimizer: AdamState::new(AdamHyper::default(), &[]) };
    let tied: Vec<Checkpoint> = (1..=4).map(|k| Checkpoint { iteration: 20 * k, ..same.clone() }).collect();
    let tie = select_checkpoint(&tied, &val).map_err(|e| e.to_string())?;
    check(
        tie.index == 0,
        format!("25 checkpoints (20..500), argmin index {first} selected, tie -> {}", tie.index),
    )
}

fn mean_displacement(est: &RigidTransform, truth: &RigidTransform, mask: &Volume3D) -> f64 {
    let grid = mask.grid();
    let c = grid.center();
    let (mut sum, mut n) = (0.0, 0usize);
    for i in 0..grid.len() {
        if mask.data()[i] == 0.0 {
            continue;
        }
        let [x, y, z] = grid.coords(i);
        let p = grid.to_physical([x as f64, y as f64, z as f64]);
        let (a, b) = (est.map_point(p, c), truth.map_point(p, c));
        sum += (0..3).map(|k| ((a[k] - b[k]) / grid.spacing[k]).powi(2)).sum::<f64>().sqrt();
        n += 1;
    }
    sum / n as f64
}

fn registration_recovery() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let trials = 40;
    let mut good = 0;
    let mut errors = Vec::new();
    for trial in 0..trials {
        let spec = PhantomSpec::sample([32; 3], &mut rng);
        let fixed = generate_phantom(&spec, 100 + trial).map_err(|e| e.to_string())?.t1gd;
        let dir: [f64; 3] = std::array::from_fn(|_| rng.random_range(-1.0..1.0));
        let norm = dir.iter().map(|d| d * d).sum::<f64>().sqrt().max(1e-9);
        let mag = rng.random_range(0.0..5.0);
        let deg = 5f64.to_radians();
        let truth = RigidTransform {
            rotation: std::array::from_fn(|_| rng.random_range(-deg..deg)),
            translation: std::array::from_fn(|k| mag * dir[k] / norm),
        };
        let moving = apply_transform(&fixed, &truth, fixed.grid());
        let est = register_rigid(&moving, &fixed, &RegistrationOptions::default()).map_err(|e| e.to_string())?;
        let head: Vec<bool> = fixed.data().iter().map(|&v| v > 0.05).collect();
        let mask = Volume3D::from_mask(*fixed.grid(), &head).unwrap();
        let err = mean_displacement(&est, &truth.inverse(), &mask);
        if err < 0.5 {
            good += 1;
        }
        errors.push(err);
    }
    within(start.elapsed(), 300.0)?;
    let worst = errors.iter().copied().fold(0.0, f64::max);
    let mean = errors.iter().sum::<f64>() / errors.len() as f64;
    check(
        good * 100 >= 95 * trials,
        format!("{good}/{trials} under 0.5 voxel, mean {mean:.3}, worst {worst:.3}, {:.1}s", start.elapsed().as_secs_f64()),
    )
}

fn statistics() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let (mut dt, mut dp) = (0.0f64, 0.0f64);
    for _ in 0..100 {
        let n = rng.random_range(3..40);
        let a: Vec<f64> = (0..n).map(|_| rng.random_range(0.8..1.0)).collect();
        let b: Vec<f64> = a.iter().map(|x| x + rng.random_range(-0.05..0.04)).collect();
        let r = paired_t_test(&a, &b).map_err(|e| e.to_string())?;
        let d: Vec<f64> = a.iter().zip(&b).map(|(x, y)| x - y).collect();
        let nf = n as f64;
        let mean = d.iter().sum::<f64>() / nf;
        let sd = (d.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (nf - 1.0)).sqrt();
        let t = mean / (sd / nf.sqrt());
        let p = 2.0 * StudentsT::new(0.0, 1.0, nf - 1.0).unwrap().cdf(-t.abs());
        dt = dt.max((r.t_statistic - t).abs());
        dp = dp.max((r.p_value - p).abs());
    }
    let hand = paired_t_test(&[2.0, 4.0, 6.0], &[1.0, 5.0, 5.0]).map_err(|e| e.to_string())?;
    check(
        dt <= 1e-8 && dp <= 1e-8 && hand.t_statistic == 0.5 && hand.degrees_of_freedom == 2,
        format!("100 samples, max |dt| {dt:.1e}, max |dp| {dp:.1e}, hand example t={} df={}", hand.t_statistic, hand.degrees_of_freedom),
    )
}

fn nifti_format() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let g = Grid::new([5, 3, 4], [0.75, 1.25, 2.5], [-3.0, 0.5, 7.25]).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for dtype in [DataType::U8, DataType::I16, DataType::F32, DataType::F64] {
        let v = Volume3D::from_fn(g, |_, _, _| {
            let r: f64 = rng.random_range(0.0..1.0);
            match dtype {
                DataType::U8 => (r * 255.0).round(),
                DataType::I16 => (r * 65535.0 - 32768.0).round(),
                DataType::F32 => (r * 2000.0 - 1000.0) as f32 as f64,
                DataType::F64 => r * 1e6 - 5e5,
            }
        })
        .with_dtype(dtype)
        .unwrap();
        let path = dir.path().join(format!("{dtype:?}.nii"));
        write_nifti(&v, &path).map_err(|e| e.to_string())?;
        let back = read_nifti(&path).map_err(|e| e.to_string())?;
        if back != v || back.data().iter().zip(v.data()).any(|(a, b)| a.to_bits() != b.to_bits()) {
            return Err(format!("{dtype:?} round trip differs"));
        }
        let obj = ReaderOptions::new().read_file(&path).map_err(|e| format!("{dtype:?}: {e}"))?;
        if obj.header().datatype != dtype.code() {
            return Err(format!("{dtype:?}: datatype code {}", obj.header().datatype));
        }
        let vol = obj.volume();
        for z in 0..4u16 {
            for y in 0..3u16 {
                for x in 0..5u16 {
                    let theirs = vol.get_f64(&[x, y, z]).map_err(|e| e.to_string())?;
                    if theirs != v.get(x as usize, y as usize, z as usize) {
                        return Err(format!("{dtype:?}: independent reader disagrees at {x},{y},{z}"));
                    }
                }
            }
        }
    }
    Ok("u8/i16/f32/f64 bit-exact, read back by the nifti crate".into())
}

fn cli(args: &[&str]) -> Result<String, String> {
    let mut argv = vec!["deepstrip", "--no-timestamp"];
    argv.extend_from_slice(args);
    let (mut out, mut err) = (Vec::new(), Vec::new());
    let code = run(argv, &mut out, &mut err);
    if code != 0 {
        return Err(format!("{args:?} exited {code}: {}", String::from_utf8_lossy(&err)));
    }
    Ok(String::from_utf8_lossy(&out).into_owned())
}

fn tree(dir: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut files = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let path = e.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                files.insert(path.strip_prefix(dir).unwrap().to_path_buf(), fs::read(&path).unwrap());
            }
        }
    }
    files
}

/// phantom-gen, labelgen, train, strip and eval in `root`; returns the log.
fn pipeline(root: &Path) -> Result<String, String> {
    let s = |p: &Path| p.to_str().unwrap().to_string();
    let data = root.join("data");
    let mut log = cli(&["phantom-gen", "--count", "6", "--dims", "24", "--seed", "11", "--out", &s(&data)])?;
    let mut cases: Vec<PathBuf> = fs::read_dir(&data).unwrap().map(|e| e.unwrap().path()).collect();
    cases.sort();
    for c in &cases {
        log += &cli(&[
            "labelgen",
            "--gm", &s(&c.join("gm.nii")),
            "--wm", &s(&c.join("wm.nii")),
            "--csf", &s(&c.join("csf.nii")),
            "--tau", "0.7",
            "--out", &s(&c.join("label.nii")),
        ])?;
    }
    let cfg = TrainConfig {
        max_iter: 30,
        save_every_n: 10,
        batch_size: 2,
        spatial_window_size: 16,
        stack_growth: [2, 2, 2],
        units_per_stack: [1, 1, 1],
        seed: 3,
        ..TrainConfig::default()
    };
    let cfg_path = root.join("train.cfg");
    fs::write(&cfg_path, cfg.to_text()).unwrap();
    let run_dir = root.join("run");
    log += &cli(&["train", "--data", &s(&data), "--config", &s(&cfg_path), "--out", &s(&run_dir), "--split", "0.5,0.34,0.16"])?;
    let case = &cases[0];
    let mask = root.join("mask.nii");
    log += &cli(&[
        "strip",
        "--model", &s(&run_dir.join("model.ckpt")),
        "--t1gd", &s(&case.join("t1gd.nii")),
        "--flair", &s(&case.join("flair.nii")),
        "--out", &s(&mask),
    ])?;
    log += &cli(&[
        "eval",
        "--pred", &s(&mask),
        "--truth", &s(&case.join("truth.nii")),
        "--csv", &s(&root.join("eval.csv")),
        "--case-id", "case0",
    ])?;
    Ok(log.replace(&s(root), "<root>"))
}

fn determinism() -> Outcome {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    let (la, lb) = (pipeline(&a)?, pipeline(&b)?);
    let (ta, tb) = (tree(&a), tree(&b));
    let differing: Vec<String> =
        ta.iter().filter(|(k, v)| tb.get(*k) != Some(*v)).map(|(k, _)| k.display().to_string()).collect();
    if ta.keys().ne(tb.keys()) || !differing.is_empty() {
        return Err(format!("artifacts differ: {differing:?}"));
    }
    check(la == lb, format!("{} artifacts byte-identical across two runs, logs identical: {}", ta.len(), la == lb))
}

fn main() {
    let started = Instant::now();
    let experiment = phantom_experiment();
    let results: Vec<(&str, Outcome)> = vec![
        ("1 metric exactness", metric_exactness()),
        ("2 gradient suite", gradient_suite()),
        ("3 label-generation fidelity", label_fidelity()),
        ("4 end-to-end phantom training", end_to_end_training(&experiment)),
        ("5 data-efficiency trend", data_efficiency(&experiment)),
        ("6 checkpoint policy", checkpoint_policy()),
        ("7 registration recovery", registration_recovery()),
        ("8 statistics", statistics()),
        ("9 NIfTI format", nifti_format()),
        ("10 determinism", determinism()),
    ];
    println!();
    let mut failed = 0;
    for (name, r) in &results {
        match r {
            Ok(d) => println!("criterion {name}: PASS ({d})"),
            Err(d) => {
                failed += 1;
                println!("criterion {name}: FAIL ({d})");
            }
        }
    }
    println!("acceptance: {}/{} passed in {:.0}s", results.len() - failed, results.len(), started.elapsed().as_secs_f64());
    if failed > 0 {
        std::process::exit(1);
    }
}
