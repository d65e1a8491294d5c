//! CSV emitters/parsers for per-case scores and cohort summaries, and the
//! markdown rendering of a summary table.

use std::fmt::Write as _;

use super::{MetricsError, RunSummary, SegMetrics, SummaryStat, TTestResult};

pub const CASE_CSV_HEADER: &str = "case_id,dice,sensitivity,specificity";
pub const SUMMARY_CSV_HEADER: &str = "input,dice_mean,dice_std,sens_mean,sens_std,spec_mean,spec_std";

const UNDEFINED: &str = "NA";

#[derive(Debug, Clone, PartialEq)]
pub struct CaseRow {
    pub case_id: String,
    pub metrics: SegMetrics,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SummaryRow {
    pub input: String,
    pub summary: RunSummary,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PairedComparison {
    pub metric: String,
    pub run_a: String,
    pub run_b: String,
    pub n: usize,
    pub result: TTestResult,
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(|| UNDEFINED.to_string(), |x| x.to_string())
}

fn stat_cells(s: Option<SummaryStat>) -> String {
    match s {
        Some(s) => format!("{},{}", s.mean, s.std),
        None => format!("{UNDEFINED},{UNDEFINED}"),
    }
}

/// One row per case, sorted by case id.
pub fn format_case_csv(rows: &[CaseRow]) -> String {
    let mut sorted: Vec<&CaseRow> = rows.iter().collect();
    sorted.sort_by(|a, b| a.case_id.cmp(&b.case_id));
    let mut out = String::from(CASE_CSV_HEADER);
    out.push('\n');
    for r in sorted {
        let m = &r.metrics;
        let _ = writeln!(out, "{},{},{},{}", r.case_id, opt(m.dice), opt(m.sensitivity), opt(m.specificity));
    }
    out
}

pub fn parse_case_csv(text: &str) -> Result<Vec<CaseRow>, MetricsError> {
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    match lines.next() {
        Some((_, h)) if h.trim() == CASE_CSV_HEADER => {}
        Some((i, h)) => return Err(MetricsError::Csv { line: i + 1, detail: format!("unexpected header {h:?}") }),
        None => return Err(MetricsError::Csv { line: 1, detail: "empty file".into() }),
    }
    let cell = |line: usize, s: &str| -> Result<Option<f64>, MetricsError> {
        if s == UNDEFINED {
            return Ok(None);
        }
        s.parse::<f64>()
            .map(Some)
            .map_err(|_| MetricsError::Csv { line, detail: format!("not a number: {s:?}") })
    };
    lines
        .map(|(i, l)| {
            let fields: Vec<&str> = l.trim().split(',').collect();
            if fields.len() != 4 {
                return Err(MetricsError::Csv { line: i + 1, detail: format!("expected 4 fields, got {}", fields.len()) });
            }
            Ok(CaseRow {
                case_id: fields[0].to_string(),
                metrics: SegMetrics {
                    dice: cell(i + 1, fields[1])?,
                    sensitivity: cell(i + 1, fields[2])?,
                    specificity: cell(i + 1, fields[3])?,
                },
            })
        })
        .collect()
}

pub fn format_summary_csv(rows: &[SummaryRow]) -> String {
    let mut out = String::from(SUMMARY_CSV_HEADER);
    out.push('\n');
    for r in rows {
        let s = &r.summary;
        let _ = writeln!(
            out,
            "{},{},{},{}",
            r.input,
            stat_cells(s.dice),
            stat_cells(s.sensitivity),
            stat_cells(s.specificity)
        );
    }
    out
}

/// Markdown summary: scores as percentages `mean (std)`, followed by
/// the paired comparisons.
pub fn render_markdown_report(rows: &[SummaryRow], comparisons: &[PairedComparison]) -> String {
    let pct = |s: Option<SummaryStat>| match s {
        Some(s) => format!("{:.2} ({:.2})", 100.0 * s.mean, 100.0 * s.std),
        None => UNDEFINED.to_string(),
    };
    let mut out = String::from("| Input | Dice μ(σ) | Sensitivity μ(σ) | Specificity μ(σ) |\n|---|---|---|---|\n");
    for r in rows {
        let _ = writeln!(
            out,
            "| {} | {} | {} | {} |",
            r.input,
            pct(r.summary.dice),
            pct(r.summary.sensitivity),
            pct(r.summary.specificity)
        );
    }
    if !comparisons.is_empty() {
        out.push_str("\n| Metric | A | B | n | t | p | p < 0.05 |\n|---|---|---|---|---|---|---|\n");
        for c in comparisons {
            let _ = writeln!(
                out,
                "| {} | {} | {} | {} | {:.4} | {:.4} | {} |",
                c.metric,
                c.run_a,
                c.run_b,
                c.n,
                c.result.t_statistic,
                c.result.p_value,
                if c.result.significant_at(0.05) { "yes" } else { "no" }
            );
        }
    }
    out
}
