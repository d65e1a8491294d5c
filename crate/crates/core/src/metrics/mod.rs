//! Overlap metrics between binary masks and cohort statistics.
//!
//! With `G` the reference mask and `S` the segmentation:
//!
//! * dice        = 2 TP / (2 TP + FP + FN)
//! * sensitivity = TP / (TP + FN)
//! * specificity = TN / (TN + FP)
//!
//! A metric whose denominator is zero is `None` (undefined), never 0 or 1.

mod stats;
mod table;

pub use stats::{
    ln_gamma, paired_t_test, regularized_incomplete_beta, student_t_two_sided_p, TTestResult,
};
pub use table::{
    format_case_csv, format_summary_csv, parse_case_csv, render_markdown_report, CaseRow, PairedComparison,
    SummaryRow, CASE_CSV_HEADER, SUMMARY_CSV_HEADER,
};

use thiserror::Error;

use crate::volume::{Volume3D, VolumeError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricsError {
    #[error(transparent)]
    Volume(#[from] VolumeError),
    #[error("{which} mask is not binary")]
    NotBinary { which: &'static str },
    #[error("sample lengths differ: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },
    #[error("need at least {needed} samples, got {got}")]
    TooFewSamples { needed: usize, got: usize },
    #[error("malformed CSV at line {line}: {detail}")]
    Csv { line: usize, detail: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
    pub tn: u64,
}

impl ConfusionCounts {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct SegMetrics {
    pub dice: Option<f64>,
    pub sensitivity: Option<f64>,
    pub specificity: Option<f64>,
}

fn ratio(num: u64, den: u64) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

/// Voxelwise TP/FP/FN/TN of `pred` against `truth`.
pub fn confusion_counts(pred: &Volume3D, truth: &Volume3D) -> Result<ConfusionCounts, MetricsError> {
    pred.ensure_same_grid(truth)?;
    if !pred.is_binary() {
        return Err(MetricsError::NotBinary { which: "prediction" });
    }
    if !truth.is_binary() {
        return Err(MetricsError::NotBinary { which: "truth" });
    }
    let mut c = ConfusionCounts::default();
    for (&p, &g) in pred.data().iter().zip(truth.data()) {
        match (p != 0.0, g != 0.0) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, true) => c.fn_ += 1,
            (false, false) => c.tn += 1,
        }
    }
    Ok(c)
}

pub fn segmentation_metrics(c: &ConfusionCounts) -> SegMetrics {
    SegMetrics {
        dice: ratio(2 * c.tp, 2 * c.tp + c.fp + c.fn_),
        sensitivity: ratio(c.tp, c.tp + c.fn_),
        specificity: ratio(c.tn, c.tn + c.fp),
    }
}

/// Convenience: dice of two masks, `None` when both are empty.
pub fn dice(pred: &Volume3D, truth: &Volume3D) -> Result<Option<f64>, MetricsError> {
    Ok(segmentation_metrics(&confusion_counts(pred, truth)?).dice)
}

/// Sample mean and standard deviation (n - 1 divisor).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SummaryStat {
    pub mean: f64,
    pub std: f64,
    pub n: usize,
}

impl SummaryStat {
    pub fn from_values(values: &[f64]) -> Result<Self, MetricsError> {
        let n = values.len();
        if n < 2 {
            return Err(MetricsError::TooFewSamples { needed: 2, got: n });
        }
        let mean = values.iter().sum::<f64>() / n as f64;
        let ss: f64 = values.iter().map(|v| (v - mean) * (v - mean)).sum();
        Ok(SummaryStat { mean, std: (ss / (n - 1) as f64).sqrt(), n })
    }
}

/// Per-metric summary over a run. A metric is `None` when fewer than two
/// cases define it; `excluded` counts the undefined cases per metric in
/// (dice, sensitivity, specificity) order.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RunSummary {
    pub dice: Option<SummaryStat>,
    pub sensitivity: Option<SummaryStat>,
    pub specificity: Option<SummaryStat>,
    pub excluded: [usize; 3],
}

pub fn summarize_runs(scores: &[SegMetrics]) -> Result<RunSummary, MetricsError> {
    if scores.len() < 2 {
        return Err(MetricsError::TooFewSamples { needed: 2, got: scores.len() });
    }
    let pick = |f: fn(&SegMetrics) -> Option<f64>| -> (Option<SummaryStat>, usize) {
        let vals: Vec<f64> = scores.iter().filter_map(f).collect();
        let excluded = scores.len() - vals.len();
        (SummaryStat::from_values(&vals).ok(), excluded)
    };
    let (dice, ex_d) = pick(|m| m.dice);
    let (sensitivity, ex_se) = pick(|m| m.sensitivity);
    let (specificity, ex_sp) = pick(|m| m.specificity);
    Ok(RunSummary { dice, sensitivity, specificity, excluded: [ex_d, ex_se, ex_sp] })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::Grid;

    fn mask(bits: &[u8]) -> Volume3D {
        let g = Grid::unit([bits.len(), 1, 1]).unwrap();
        Volume3D::from_mask(g, &bits.iter().map(|&b| b == 1).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn four_voxel_example() {
        let c = confusion_counts(&mask(&[1, 1, 0, 0]), &mask(&[1, 0, 1, 0])).unwrap();
        assert_eq!(c, ConfusionCounts { tp: 1, fp: 1, fn_: 1, tn: 1 });
        let m = segmentation_metrics(&c);
        assert_eq!(m, SegMetrics { dice: Some(0.5), sensitivity: Some(0.5), specificity: Some(0.5) });
    }

    #[test]
    fn identical_masks() {
        let m = mask(&[1, 0, 1, 1, 0]);
        let c = confusion_counts(&m, &m).unwrap();
        assert_eq!(c, ConfusionCounts { tp: 3, fp: 0, fn_: 0, tn: 2 });
        let s = segmentation_metrics(&c);
        assert_eq!(s, SegMetrics { dice: Some(1.0), sensitivity: Some(1.0), specificity: Some(1.0) });
    }

    #[test]
    fn empty_masks_leave_dice_undefined() {
        let m = mask(&[0, 0, 0]);
        let s = segmentation_metrics(&confusion_counts(&m, &m).unwrap());
        assert_eq!(s.dice, None);
        assert_eq!(s.sensitivity, None);
        assert_eq!(s.specificity, Some(1.0));
    }

    #[test]
    fn rejects_grid_mismatch_and_non_binary() {
        assert!(matches!(
            confusion_counts(&mask(&[1, 0]), &mask(&[1, 0, 0])),
            Err(MetricsError::Volume(VolumeError::GridMismatch(..)))
        ));
        let g = Grid::unit([2, 1, 1]).unwrap();
        let soft = Volume3D::new(g, crate::DataType::F64, vec![0.5, 1.0]).unwrap();
        assert_eq!(
            confusion_counts(&soft, &mask(&[1, 0])),
            Err(MetricsError::NotBinary { which: "prediction" })
        );
    }

    #[test]
    fn summary_of_one_two_three() {
        let runs: Vec<SegMetrics> = [1.0, 2.0, 3.0]
            .iter()
            .map(|&d| SegMetrics { dice: Some(d), sensitivity: Some(0.5), specificity: None })
            .collect();
        let s = summarize_runs(&runs).unwrap();
        assert_eq!(s.dice, Some(SummaryStat { mean: 2.0, std: 1.0, n: 3 }));
        assert_eq!(s.sensitivity.unwrap().std, 0.0);
        assert_eq!(s.specificity, None);
        assert_eq!(s.excluded, [0, 0, 3]);
        assert!(summarize_runs(&[]).is_err());
    }
}
