//! Shortcut diagnostics for a trained answering/reasoning pair.
//!
//! * `ratio_ans`: share of the reasoning branch's attention mass that sits on the
//!   appended answer tokens of its query, measured on the gold rationale.
//! * Answer-only evaluation: reasoning accuracy with and without the question.
//! * Skew evaluation: the pair on the validation split and on its synonym paraphrase.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::branchnet::{compose_query, predict, BranchKind, BranchModel};
use crate::diffcore::Tensor;
use crate::error::{Error, Result};
use crate::synthgen::{strip_question, Instance, SynonymMap};
use crate::trainer::{evaluate, EvalMode, MetricsRecord, Models};

/// Published `ratio_ans` medians of three real baselines, for side-by-side tables.
pub const REFERENCE_MEDIANS: [(&str, f64); 3] = [("HGL", 0.72), ("R2C", 0.78), ("CCN", 0.86)];

pub const CSV_HEADER: &str = "instance_id,ratio_ans,qa2r_correct,a2r_correct";
pub const ROWS_FILE: &str = "probe.csv";
pub const SUMMARY_FILE: &str = "probe_summary.json";
pub const TABLE_FILE: &str = "probe.txt";

/// Attention mass on the answer rows of `w` over its total mass. `w` is
/// `(l_q + l_a) x l_r`, the question rows first.
pub fn attention_ratio(w: &Tensor, l_q: usize, l_a: usize) -> Result<f64> {
    if w.rank() != 2 || w.rows() != l_q + l_a {
        return Err(Error::shape(format!(
            "attention map {:?} does not have l_q + l_a = {} rows",
            w.shape(),
            l_q + l_a
        )));
    }
    if w.data().iter().any(|&v| v < 0.0 || !v.is_finite()) {
        return Err(Error::param("attention weights must be finite and non-negative"));
    }
    let row_mass = |i: usize| w.row(i).iter().sum::<f64>();
    let total: f64 = (0..w.rows()).map(row_mass).sum();
    if total == 0.0 {
        return Err(Error::Numeric("ratio undefined for an all-zero attention map".into()));
    }
    // answer rows are l_q + 1 ..= l_q + l_a counting from one, l_q.. from zero
    let answer: f64 = (l_q..l_q + l_a).map(row_mass).sum();
    Ok(answer / total)
}

/// Linear-interpolation quantile of sorted data (the common "type 7" rule).
pub fn quantile(sorted: &[f64], p: f64) -> Result<f64> {
    if sorted.is_empty() {
        return Err(Error::Validation("quantile of an empty list".into()));
    }
    let h = (sorted.len() - 1) as f64 * p;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    Ok(sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo]))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RatioStats {
    pub median: f64,
    pub q1: f64,
    pub q3: f64,
}

impl RatioStats {
    pub fn from_values(values: &[f64]) -> Result<Self> {
        let mut sorted = values.to_vec();
        if sorted.iter().any(|v| v.is_nan()) {
            return Err(Error::Validation("ratio list contains NaN".into()));
        }
        sorted.sort_by(f64::total_cmp);
        Ok(RatioStats {
            median: quantile(&sorted, 0.5)?,
            q1: quantile(&sorted, 0.25)?,
            q3: quantile(&sorted, 0.75)?,
        })
    }
}

/// `ratio_ans` of the reasoning branch on every instance's gold rationale.
pub fn instance_ratios(model: &BranchModel, data: &[Instance]) -> Result<Vec<f64>> {
    if model.kind != BranchKind::Reasoning {
        return Err(Error::param(format!(
            "ratio_ans needs the reasoning branch, got {}",
            model.kind.name()
        )));
    }
    data.par_iter()
        .map(|x| {
            let comp = compose_query(BranchKind::Reasoning, x);
            let out = model.forward(&comp)?;
            attention_ratio(
                &out.attention_maps[x.rationale_label],
                comp.question_len,
                comp.appended_len,
            )
        })
        .collect()
}

pub fn ratio_statistics(model: &BranchModel, data: &[Instance]) -> Result<(RatioStats, Vec<f64>)> {
    let ratios = instance_ratios(model, data)?;
    Ok((RatioStats::from_values(&ratios)?, ratios))
}

fn reasoning_hits(model: &BranchModel, data: &[Instance]) -> Result<Vec<bool>> {
    data.par_iter()
        .map(|x| {
            let out = model.forward(&compose_query(BranchKind::Reasoning, x))?;
            Ok(predict(&out)? == x.rationale_label)
        })
        .collect()
}

fn share(hits: &[bool]) -> f64 {
    hits.iter().filter(|&&h| h).count() as f64 / hits.len() as f64
}

/// Reasoning accuracy with the question (`QA -> R`) and without it (`A -> R`).
pub fn answer_only_eval(model: &BranchModel, data: &[Instance]) -> Result<(f64, f64)> {
    if data.is_empty() {
        return Err(Error::param("empty split"));
    }
    let stripped: Vec<Instance> = data.iter().map(strip_question).collect();
    Ok((
        share(&reasoning_hits(model, data)?),
        share(&reasoning_hits(model, &stripped)?),
    ))
}

/// The pair on the split as given and after paraphrasing.
pub fn skew_eval(
    models: Models<'_>,
    data: &[Instance],
    map: &SynonymMap,
) -> Result<(MetricsRecord, MetricsRecord)> {
    Ok((
        evaluate(models, data, "val", EvalMode::Standard, map)?,
        evaluate(models, data, "val_paraphrased", EvalMode::Paraphrased, map)?,
    ))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Accuracies {
    pub qa: f64,
    pub qar: f64,
    pub joint: f64,
}

impl From<&MetricsRecord> for Accuracies {
    fn from(r: &MetricsRecord) -> Self {
        Accuracies {
            qa: r.acc_qa,
            qar: r.acc_qar,
            joint: r.acc_joint,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeRow {
    pub instance_id: usize,
    pub ratio_ans: f64,
    pub qa2r_correct: bool,
    pub a2r_correct: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProbeSummary {
    pub ratio_median: f64,
    pub ratio_q1: f64,
    pub ratio_q3: f64,
    pub acc_qar: f64,
    pub acc_ar: f64,
    pub acc_std: Accuracies,
    pub acc_skew: Accuracies,
    /// Configuration the probed models came from.
    #[serde(default)]
    pub config: serde_json::Value,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProbeReport {
    pub summary: ProbeSummary,
    pub rows: Vec<ProbeRow>,
}

impl ProbeReport {
    pub fn answer_gap(&self) -> f64 {
        self.summary.acc_qar - self.summary.acc_ar
    }
}

/// Every probe on one split.
pub fn run_probe(
    models: Models<'_>,
    data: &[Instance],
    map: &SynonymMap,
    config: serde_json::Value,
) -> Result<ProbeReport> {
    if data.is_empty() {
        return Err(Error::param("empty split"));
    }
    let (stats, ratios) = ratio_statistics(models.reasoning, data)?;
    let full = reasoning_hits(models.reasoning, data)?;
    let stripped: Vec<Instance> = data.iter().map(strip_question).collect();
    let answer_only = reasoning_hits(models.reasoning, &stripped)?;
    let (std, skew) = skew_eval(models, data, map)?;
    let rows = (0..data.len())
        .map(|i| ProbeRow {
            instance_id: i,
            ratio_ans: ratios[i],
            qa2r_correct: full[i],
            a2r_correct: answer_only[i],
        })
        .collect();
    Ok(ProbeReport {
        summary: ProbeSummary {
            ratio_median: stats.median,
            ratio_q1: stats.q1,
            ratio_q3: stats.q3,
            acc_qar: share(&full),
            acc_ar: share(&answer_only),
            acc_std: (&std).into(),
            acc_skew: (&skew).into(),
            config,
        },
        rows,
    })
}

fn render_table(s: &ProbeSummary) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "ratio_ans   median {:.4}  q1 {:.4}  q3 {:.4}", s.ratio_median, s.ratio_q1, s.ratio_q3);
    for (name, m) in REFERENCE_MEDIANS {
        let _ = writeln!(out, "  reference {name:<4} median {m:.2}");
    }
    let _ = writeln!(out, "QA->R {:.4}   A->R {:.4}   gap {:+.4}", s.acc_qar, s.acc_ar, s.acc_qar - s.acc_ar);
    let _ = writeln!(out, "{:<12} {:>7} {:>7} {:>7}", "split", "Q->A", "QA->R", "Q->AR");
    for (name, a) in [("standard", s.acc_std), ("paraphrased", s.acc_skew)] {
        let _ = writeln!(out, "{name:<12} {:>7.4} {:>7.4} {:>7.4}", a.qa, a.qar, a.joint);
    }
    out
}

/// Write the per-instance CSV, the JSON summary and a plain-text table into `dir`.
pub fn emit_report(report: &ProbeReport, dir: &Path) -> Result<Vec<PathBuf>> {
    if report.rows.is_empty() {
        return Err(Error::Validation("probe report has no instances".into()));
    }
    fs::create_dir_all(dir).map_err(|e| Error::file(dir, e))?;
    let mut csv = String::from(CSV_HEADER);
    csv.push('\n');
    for r in &report.rows {
        let _ = writeln!(
            csv,
            "{},{},{},{}",
            r.instance_id, r.ratio_ans, r.qa2r_correct as u8, r.a2r_correct as u8
        );
    }
    let paths = [dir.join(ROWS_FILE), dir.join(SUMMARY_FILE), dir.join(TABLE_FILE)];
    let contents = [
        csv,
        serde_json::to_string_pretty(&report.summary)? + "\n",
        render_table(&report.summary),
    ];
    for (path, body) in paths.iter().zip(contents) {
        fs::write(path, body).map_err(|e| Error::file(path, e))?;
    }
    Ok(paths.to_vec())
}

/// Parse a report written by [`emit_report`].
pub fn read_report(dir: &Path) -> Result<ProbeReport> {
    let rows_path = dir.join(ROWS_FILE);
    let text = fs::read_to_string(&rows_path).map_err(|e| Error::file(&rows_path, e))?;
    let mut lines = text.lines();
    let header = lines.next().unwrap_or_default();
    if header != CSV_HEADER {
        return Err(Error::Parse {
            line: 1,
            message: format!("unexpected header `{header}`"),
        });
    }
    let flag = |s: &str, line: usize| match s {
        "0" => Ok(false),
        "1" => Ok(true),
        _ => Err(Error::Parse {
            line,
            message: format!("expected 0 or 1, got `{s}`"),
        }),
    };
    let mut rows = Vec::new();
    for (k, line) in lines.enumerate() {
        let line_no = k + 2;
        let bad = |m: String| Error::Parse { line: line_no, message: m };
        let cols: Vec<&str> = line.split(',').collect();
        if cols.len() != 4 {
            return Err(bad(format!("expected 4 columns, got {}", cols.len())));
        }
        rows.push(ProbeRow {
            instance_id: cols[0].parse().map_err(|e| bad(format!("{e}")))?,
            ratio_ans: cols[1].parse().map_err(|e| bad(format!("{e}")))?,
            qa2r_correct: flag(cols[2], line_no)?,
            a2r_correct: flag(cols[3], line_no)?,
        });
    }
    let summary_path = dir.join(SUMMARY_FILE);
    let text = fs::read_to_string(&summary_path).map_err(|e| Error::file(&summary_path, e))?;
    let summary: ProbeSummary = serde_json::from_str(&text)?;
    Ok(ProbeReport { summary, rows })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn ratio_examples() {
        let w = Tensor::filled(&[8, 4], 0.25);
        assert_eq!(attention_ratio(&w, 5, 3).unwrap(), 0.375);
        let mut data = vec![0.0; 32];
        data[20..].iter_mut().for_each(|v| *v = 1.0);
        let w = Tensor::matrix(8, 4, data).unwrap();
        assert_eq!(attention_ratio(&w, 5, 3).unwrap(), 1.0);
        assert_eq!(attention_ratio(&Tensor::filled(&[4, 2], 0.5), 4, 0).unwrap(), 0.0);
        assert!(matches!(
            attention_ratio(&Tensor::zeros(&[8, 4]), 5, 3),
            Err(Error::Numeric(_))
        ));
        assert!(matches!(
            attention_ratio(&Tensor::filled(&[7, 4], 1.0), 5, 3),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn quantiles_interpolate() {
        let s = RatioStats::from_values(&[0.4, 0.1, 0.3, 0.2]).unwrap();
        assert!((s.median - 0.25).abs() < 1e-15);
        assert!((s.q1 - 0.175).abs() < 1e-15);
        assert!((s.q3 - 0.325).abs() < 1e-15);
        assert!(RatioStats::from_values(&[]).is_err());
    }

    proptest! {
        #[test]
        fn ratio_is_bounded_and_scale_free(
            vals in prop::collection::vec(0.01f64..1.0, 12),
            c in 0.1f64..100.0,
        ) {
            let w = Tensor::matrix(4, 3, vals).unwrap();
            let r = attention_ratio(&w, 2, 2).unwrap();
            prop_assert!((0.0..=1.0).contains(&r));
            let scaled = attention_ratio(&w.map(|v| v * c), 2, 2).unwrap();
            prop_assert!((r - scaled).abs() < 1e-12);
        }
    }
}
