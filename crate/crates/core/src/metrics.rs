//! Detection metrics with ID samples as the positive class.
//!
//! All metrics use the same acceptance rule as [`decide`]: a sample is
//! accepted as ID when `score >= threshold`.

use std::fmt::Write as _;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Decision {
    Id,
    Ood,
}

pub fn decide(score: f64, tau: f64) -> Decision {
    if score >= tau {
        Decision::Id
    } else {
        Decision::Ood
    }
}

fn check_scores(id: &[f64], ood: &[f64]) -> Result<()> {
    if id.is_empty() || ood.is_empty() {
        return Err(Error::InvalidParameter(
            "metrics need at least one ID and one OOD score".into(),
        ));
    }
    for (section, values) in [("ID scores", id), ("OOD scores", ood)] {
        if let Some(index) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite { section, index });
        }
    }
    Ok(())
}

/// FPR at the smallest threshold admitting at least `tpr_target` of ID:
/// `tau` is the `m`-th largest ID score with `m = ceil(tpr_target * |ID|)`.
pub fn fpr_at_tpr(id: &[f64], ood: &[f64], tpr_target: f64) -> Result<f64> {
    check_scores(id, ood)?;
    if !(tpr_target > 0.0 && tpr_target <= 1.0) {
        return Err(Error::InvalidParameter(format!(
            "TPR target must be in (0, 1], got {tpr_target}"
        )));
    }
    let m = ((tpr_target * id.len() as f64 - 1e-9).ceil() as usize).clamp(1, id.len());
    let mut sorted = id.to_vec();
    sorted.sort_unstable_by(|a, b| b.total_cmp(a));
    let tau = sorted[m - 1];
    let accepted = ood.iter().filter(|&&s| decide(s, tau) == Decision::Id).count();
    Ok(accepted as f64 / ood.len() as f64)
}

pub fn fpr95(id: &[f64], ood: &[f64]) -> Result<f64> {
    fpr_at_tpr(id, ood, 0.95)
}

/// Mann-Whitney `P(ID > OOD) + P(ID = OOD) / 2` by rank summation.
pub fn auroc(id: &[f64], ood: &[f64]) -> Result<f64> {
    check_scores(id, ood)?;
    let mut all: Vec<(f64, bool)> = id
        .iter()
        .map(|&s| (s, true))
        .chain(ood.iter().map(|&s| (s, false)))
        .collect();
    all.sort_unstable_by(|a, b| a.0.total_cmp(&b.0));
    // midranks (doubled, to stay integral) summed over ID members
    let mut rank_sum2: u128 = 0;
    let mut i = 0;
    while i < all.len() {
        let mut j = i;
        while j < all.len() && all[j].0 == all[i].0 {
            j += 1;
        }
        let ids = all[i..j].iter().filter(|e| e.1).count() as u128;
        // ranks i+1..=j average to (i + 1 + j) / 2
        rank_sum2 += ids * (i as u128 + 1 + j as u128);
        i = j;
    }
    let (m, n) = (id.len() as u128, ood.len() as u128);
    let u2 = rank_sum2 - m * (m + 1);
    Ok(u2 as f64 / (2 * m * n) as f64)
}

/// Average precision with ID positive; tied scores form one threshold step.
pub fn aupr(id: &[f64], ood: &[f64]) -> Result<f64> {
    check_scores(id, ood)?;
    let mut all: Vec<(f64, bool)> = id
        .iter()
        .map(|&s| (s, true))
        .chain(ood.iter().map(|&s| (s, false)))
        .collect();
    all.sort_unstable_by(|a, b| b.0.total_cmp(&a.0));
    let positives = id.len() as f64;
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut prev_recall = 0.0;
    let mut ap = 0.0;
    let mut i = 0;
    while i < all.len() {
        let mut j = i;
        while j < all.len() && all[j].0 == all[i].0 {
            if all[j].1 {
                tp += 1;
            } else {
                fp += 1;
            }
            j += 1;
        }
        let recall = tp as f64 / positives;
        let precision = tp as f64 / (tp + fp) as f64;
        ap += (recall - prev_recall) * precision;
        prev_recall = recall;
        i = j;
    }
    Ok(ap)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DetectionMetrics {
    pub fpr95: f64,
    pub auroc: f64,
    pub aupr: f64,
}

impl DetectionMetrics {
    pub fn compute(id: &[f64], ood: &[f64]) -> Result<Self> {
        Ok(DetectionMetrics {
            fpr95: fpr95(id, ood)?,
            auroc: auroc(id, ood)?,
            aupr: aupr(id, ood)?,
        })
    }
}

/// Name of the per-score mean row.
pub const AVERAGE: &str = "average";

/// One (score, OOD set) cell.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalRow {
    pub score: String,
    pub ood: String,
    pub metrics: DetectionMetrics,
}

/// Metrics for every (score, OOD set) pair, in insertion order. Average
/// rows are derived, never stored.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct EvalTable {
    rows: Vec<EvalRow>,
}

const TSV_HEADER: &str = "score\tood\tfpr95\tauroc\taupr";

fn check_name(name: &str) -> Result<()> {
    if name.is_empty() || name.contains(['\t', '\n', '\r']) {
        return Err(Error::InvalidParameter(format!(
            "name {name:?} must be nonempty and free of tabs and newlines"
        )));
    }
    Ok(())
}

/// Mean that does not depend on the order of `values`.
fn order_free_mean(values: &mut [f64]) -> f64 {
    values.sort_unstable_by(f64::total_cmp);
    values.iter().sum::<f64>() / values.len() as f64
}

impl EvalTable {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, score: &str, ood: &str, metrics: DetectionMetrics) -> Result<()> {
        check_name(score)?;
        check_name(ood)?;
        if ood == AVERAGE {
            return Err(Error::InvalidParameter(format!(
                "OOD set name {AVERAGE:?} is reserved"
            )));
        }
        if self.get(score, ood).is_some() {
            return Err(Error::InvalidParameter(format!(
                "duplicate row for score {score:?}, OOD set {ood:?}"
            )));
        }
        self.rows.push(EvalRow {
            score: score.to_string(),
            ood: ood.to_string(),
            metrics,
        });
        Ok(())
    }

    pub fn rows(&self) -> &[EvalRow] {
        &self.rows
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn get(&self, score: &str, ood: &str) -> Option<&DetectionMetrics> {
        self.rows
            .iter()
            .find(|r| r.score == score && r.ood == ood)
            .map(|r| &r.metrics)
    }

    /// Score names in first-appearance order.
    pub fn scores(&self) -> Vec<&str> {
        let mut out: Vec<&str> = Vec::new();
        for r in &self.rows {
            if !out.contains(&r.score.as_str()) {
                out.push(&r.score);
            }
        }
        out
    }

    /// Column means over the OOD sets of one score.
    pub fn average(&self, score: &str) -> Option<DetectionMetrics> {
        let rows: Vec<&DetectionMetrics> = self
            .rows
            .iter()
            .filter(|r| r.score == score)
            .map(|r| &r.metrics)
            .collect();
        if rows.is_empty() {
            return None;
        }
        let col = |f: fn(&DetectionMetrics) -> f64| {
            order_free_mean(&mut rows.iter().map(|m| f(m)).collect::<Vec<_>>())
        };
        Some(DetectionMetrics {
            fpr95: col(|m| m.fpr95),
            auroc: col(|m| m.auroc),
            aupr: col(|m| m.aupr),
        })
    }

    /// Data rows followed by average rows, grouped by score.
    pub fn all_rows(&self) -> Vec<EvalRow> {
        let mut out = Vec::with_capacity(self.rows.len() + 4);
        for score in self.scores() {
            out.extend(self.rows.iter().filter(|r| r.score == score).cloned());
            out.push(EvalRow {
                score: score.to_string(),
                ood: AVERAGE.to_string(),
                metrics: self.average(score).expect("score has rows"),
            });
        }
        out
    }

    /// Tab-separated values with a header line. Numbers use the shortest
    /// representation that parses back to the same `f64`.
    pub fn to_tsv(&self) -> String {
        let mut s = String::from(TSV_HEADER);
        s.push('\n');
        for r in self.all_rows() {
            let m = r.metrics;
            let _ = writeln!(s, "{}\t{}\t{}\t{}\t{}", r.score, r.ood, m.fpr95, m.auroc, m.aupr);
        }
        s
    }

    /// Inverse of [`EvalTable::to_tsv`]. Average rows must match the ones
    /// recomputed from the data rows.
    pub fn from_tsv(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        if lines.next() != Some(TSV_HEADER) {
            return Err(Error::Csv("missing eval table header".into()));
        }
        let mut table = EvalTable::new();
        let mut averages = Vec::new();
        for (no, line) in lines.enumerate() {
            if line.is_empty() {
                continue;
            }
            let cells: Vec<&str> = line.split('\t').collect();
            if cells.len() != 5 {
                return Err(Error::Csv(format!("line {}: expected 5 fields", no + 2)));
            }
            let num = |c: &str| {
                c.parse::<f64>()
                    .map_err(|_| Error::Csv(format!("line {}: bad number {c:?}", no + 2)))
            };
            let metrics = DetectionMetrics {
                fpr95: num(cells[2])?,
                auroc: num(cells[3])?,
                aupr: num(cells[4])?,
            };
            if cells[1] == AVERAGE {
                averages.push((cells[0].to_string(), metrics));
            } else {
                table.push(cells[0], cells[1], metrics)?;
            }
        }
        for (score, m) in averages {
            if table.average(&score) != Some(m) {
                return Err(Error::Csv(format!("average row for {score:?} does not match its rows")));
            }
        }
        Ok(table)
    }

    /// Aligned plain-text table; metrics are shown as percentages.
    pub fn to_table(&self) -> String {
        let rows = self.all_rows();
        let sw = rows.iter().map(|r| r.score.len()).chain([5]).max().unwrap_or(5);
        let ow = rows.iter().map(|r| r.ood.len()).chain([3]).max().unwrap_or(3);
        let mut s = String::new();
        let _ = writeln!(s, "{:<sw$}  {:<ow$}  {:>7}  {:>7}  {:>7}", "score", "ood", "FPR95", "AUROC", "AUPR");
        let _ = writeln!(s, "{}", "-".repeat(sw + ow + 31));
        for r in rows {
            let m = r.metrics;
            let _ = writeln!(
                s,
                "{:<sw$}  {:<ow$}  {:>7.2}  {:>7.2}  {:>7.2}",
                r.score,
                r.ood,
                100.0 * m.fpr95,
                100.0 * m.auroc,
                100.0 * m.aupr
            );
        }
        s
    }
}
