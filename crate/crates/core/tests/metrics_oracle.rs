use deepstrip_core::metrics::{
    confusion_counts, paired_t_test, segmentation_metrics, summarize_runs, ConfusionCounts, SegMetrics,
};
use deepstrip_core::{Grid, Volume3D};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use statrs::distribution::{ContinuousCDF, StudentsT};

fn random_mask(rng: &mut ChaCha8Rng, dims: [usize; 3], p: f64) -> Volume3D {
    let g = Grid::unit(dims).unwrap();
    let bits: Vec<bool> = (0..g.len()).map(|_| rng.random_bool(p)).collect();
    Volume3D::from_mask(g, &bits).unwrap()
}

fn oracle_counts(pred: &Volume3D, truth: &Volume3D) -> (u64, u64, u64, u64) {
    let [nx, ny, nz] = pred.dims();
    let (mut tp, mut fp, mut fn_, mut tn) = (0, 0, 0, 0);
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                let p = pred.get(x, y, z) > 0.5;
                let g = truth.get(x, y, z) > 0.5;
                if p && g {
                    tp += 1;
                } else if p {
                    fp += 1;
                } else if g {
                    fn_ += 1;
                } else {
                    tn += 1;
                }
            }
        }
    }
    (tp, fp, fn_, tn)
}

#[test]
fn counts_match_per_voxel_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    for _ in 0..50 {
        let p = rng.random_range(0.05..0.95);
        let a = random_mask(&mut rng, [16, 16, 16], p);
        let b = random_mask(&mut rng, [16, 16, 16], p);
        let c = confusion_counts(&a, &b).unwrap();
        let (tp, fp, fn_, tn) = oracle_counts(&a, &b);
        assert_eq!(c, ConfusionCounts { tp, fp, fn_, tn });
        assert_eq!(c.total(), 4096);
        let m = segmentation_metrics(&c);
        assert_eq!(m.dice, Some(2.0 * tp as f64 / (2 * tp + fp + fn_) as f64));
        assert_eq!(m.sensitivity, Some(tp as f64 / (tp + fn_) as f64));
        assert_eq!(m.specificity, Some(tn as f64 / (tn + fp) as f64));
    }
}

#[test]
fn dice_is_harmonic_mean_of_sensitivity_and_precision() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for _ in 0..30 {
        let a = random_mask(&mut rng, [8, 8, 8], 0.4);
        let b = random_mask(&mut rng, [8, 8, 8], 0.6);
        let c = confusion_counts(&a, &b).unwrap();
        let m = segmentation_metrics(&c);
        let sens = m.sensitivity.unwrap();
        let prec = c.tp as f64 / (c.tp + c.fp) as f64;
        assert!((m.dice.unwrap() - 2.0 * sens * prec / (sens + prec)).abs() < 1e-12);

        let swapped = confusion_counts(&b, &a).unwrap();
        assert_eq!((swapped.fp, swapped.fn_), (c.fn_, c.fp));
        assert_eq!(segmentation_metrics(&swapped).dice, m.dice);
    }
}

fn oracle_t(a: &[f64], b: &[f64]) -> (f64, f64) {
    let n = a.len() as f64;
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let mean = d.iter().sum::<f64>() / n;
    let sd = (d.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
    let t = mean / (sd / n.sqrt());
    let dist = StudentsT::new(0.0, 1.0, n - 1.0).unwrap();
    (t, 2.0 * dist.cdf(-t.abs()))
}

#[test]
fn t_test_matches_statrs_on_random_pairs() {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    for _ in 0..100 {
        let n = rng.random_range(2..40);
        let a: Vec<f64> = (0..n).map(|_| rng.random_range(0.8..1.0)).collect();
        let b: Vec<f64> = a.iter().map(|x| x + rng.random_range(-0.03..0.04)).collect();
        let r = paired_t_test(&a, &b).unwrap();
        let (t, p) = oracle_t(&a, &b);
        assert_eq!(r.degrees_of_freedom, n - 1);
        assert!((r.t_statistic - t).abs() < 1e-8, "t {} vs {t}", r.t_statistic);
        assert!((r.p_value - p).abs() < 1e-8, "p {} vs {p}", r.p_value);
    }
}

#[test]
fn t_test_matches_frozen_scipy_values() {
    // scipy.stats.ttest_rel, scipy 1.15
    let cases: [([f64; 10], [f64; 10], f64, f64); 3] = [
        (
            [0.980818, 0.888887, 0.948362, 0.928645, 0.930947, 0.935688, 0.8996, 0.935361, 0.922696, 1.00646],
            [0.988076, 0.890361, 0.950549, 0.926965, 0.925395, 0.93678, 0.909419, 0.937975, 0.937274, 1.009462],
            -1.9113749342336155,
            0.08826714779979279,
        ),
        (
            [0.940485, 0.970916, 0.950902, 0.929895, 0.936343, 0.950811, 0.978702, 0.934608, 0.935129, 0.960046],
            [0.93662, 0.972999, 0.964727, 0.940699, 0.942258, 0.962512, 0.95542, 0.949821, 0.930533, 0.94836],
            -0.4078954181604931,
            0.6928831906177332,
        ),
        (
            [0.945529, 0.954011, 0.931105, 0.918472, 0.940522, 0.938945, 0.968112, 0.954948, 0.943876, 0.962233],
            [0.948474, 0.949752, 0.941946, 0.929297, 0.943374, 0.936117, 0.975404, 0.935009, 0.955777, 0.972147],
            -0.9442705841729854,
            0.36968894938342456,
        ),
    ];
    for (a, b, t, p) in cases {
        let r = paired_t_test(&a, &b).unwrap();
        assert!((r.t_statistic - t).abs() < 1e-8);
        assert!((r.p_value - p).abs() < 1e-8);
    }
}

#[test]
fn summary_matches_direct_summation() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let vals: Vec<f64> = (0..30).map(|_| rng.random_range(0.85..0.99)).collect();
    let runs: Vec<SegMetrics> =
        vals.iter().map(|&v| SegMetrics { dice: Some(v), sensitivity: Some(v), specificity: Some(v) }).collect();
    let s = summarize_runs(&runs).unwrap().dice.unwrap();
    let mut mean = 0.0;
    for v in &vals {
        mean += v;
    }
    mean /= 30.0;
    let mut ss = 0.0;
    for v in &vals {
        ss += (v - mean) * (v - mean);
    }
    assert!((s.mean - mean).abs() < 1e-12);
    assert!((s.std - (ss / 29.0).sqrt()).abs() < 1e-12);
}

proptest! {
    #[test]
    fn t_is_antisymmetric_and_shift_invariant(
        a in proptest::collection::vec(0.0f64..1.0, 3..20),
        noise in proptest::collection::vec(-0.1f64..0.1, 20),
        shift in -100.0f64..100.0,
    ) {
        let b: Vec<f64> = a.iter().zip(&noise).map(|(x, e)| x + e).collect();
        let ab = paired_t_test(&a, &b).unwrap();
        let ba = paired_t_test(&b, &a).unwrap();
        prop_assert_eq!(ab.t_statistic, -ba.t_statistic);
        prop_assert_eq!(ab.p_value, ba.p_value);
        prop_assert!((0.0..=1.0).contains(&ab.p_value));

        let a2: Vec<f64> = a.iter().map(|x| x + shift).collect();
        let b2: Vec<f64> = b.iter().map(|x| x + shift).collect();
        let shifted = paired_t_test(&a2, &b2).unwrap();
        prop_assert!((shifted.t_statistic - ab.t_statistic).abs() < 1e-10);
    }
}
