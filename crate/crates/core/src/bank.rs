//! Feature banks, classifier heads and bank subsampling.

use std::collections::BTreeMap;
use std::path::Path;

use crate::error::{Error, Result};
use crate::rng;

/// `n` penultimate-layer feature vectors with optional logits and labels.
///
/// Storage is row-major `f64`. The on-disk format keeps `f32`, so banks read
/// from files round-trip bit for bit.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureBank {
    n: usize,
    d: usize,
    num_classes: usize,
    features: Vec<f64>,
    logits: Option<Vec<f64>>,
    labels: Option<Vec<u32>>,
}

fn check_finite(values: &[f64], section: &'static str) -> Result<()> {
    match values.iter().position(|v| !v.is_finite()) {
        Some(index) => Err(Error::NonFinite { section, index }),
        None => Ok(()),
    }
}

impl FeatureBank {
    /// Builds a bank, checking every type invariant. `n` is inferred from
    /// `features.len() / d`.
    pub fn new(
        d: usize,
        num_classes: usize,
        features: Vec<f64>,
        logits: Option<Vec<f64>>,
        labels: Option<Vec<u32>>,
    ) -> Result<Self> {
        if d == 0 {
            return Err(Error::Dimension("feature dimension d must be at least 1".into()));
        }
        if !features.len().is_multiple_of(d) {
            return Err(Error::Dimension(format!(
                "{} feature entries is not a multiple of d = {d}",
                features.len()
            )));
        }
        let n = features.len() / d;
        check_finite(&features, "features")?;
        if (logits.is_some() || labels.is_some()) && num_classes == 0 {
            return Err(Error::Dimension(
                "logits or labels present but class count K is 0".into(),
            ));
        }
        if let Some(l) = &logits {
            if l.len() != n * num_classes {
                return Err(Error::Dimension(format!(
                    "expected {} logit entries (n={n}, K={num_classes}), got {}",
                    n * num_classes,
                    l.len()
                )));
            }
            check_finite(l, "logits")?;
        }
        if let Some(y) = &labels {
            if y.len() != n {
                return Err(Error::Dimension(format!(
                    "expected {n} labels, got {}",
                    y.len()
                )));
            }
            if let Some(row) = y.iter().position(|&c| c as usize >= num_classes) {
                return Err(Error::LabelOutOfRange {
                    row,
                    label: i64::from(y[row]),
                    num_classes,
                });
            }
        }
        Ok(FeatureBank {
            n,
            d,
            num_classes,
            features,
            logits,
            labels,
        })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn d(&self) -> usize {
        self.d
    }

    /// Class count `K` (0 for feature-only banks).
    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn features(&self) -> &[f64] {
        &self.features
    }

    pub fn feature(&self, row: usize) -> &[f64] {
        &self.features[row * self.d..(row + 1) * self.d]
    }

    pub fn logits(&self) -> Option<&[f64]> {
        self.logits.as_deref()
    }

    pub fn logit_row(&self, row: usize) -> Option<&[f64]> {
        let k = self.num_classes;
        self.logits.as_ref().map(|l| &l[row * k..(row + 1) * k])
    }

    pub fn labels(&self) -> Option<&[u32]> {
        self.labels.as_deref()
    }

    pub fn has_logits(&self) -> bool {
        self.logits.is_some()
    }

    pub fn has_labels(&self) -> bool {
        self.labels.is_some()
    }

    /// Logit row or a `Missing` error.
    pub(crate) fn require_logits(&self, row: usize) -> Result<&[f64]> {
        self.logit_row(row).ok_or(Error::Missing("logits in bank"))
    }

    /// New bank made of the given rows, in the given order.
    pub fn select_rows(&self, rows: &[usize]) -> FeatureBank {
        let d = self.d;
        let k = self.num_classes;
        let mut features = Vec::with_capacity(rows.len() * d);
        for &r in rows {
            features.extend_from_slice(self.feature(r));
        }
        let logits = self.logits.as_ref().map(|l| {
            let mut out = Vec::with_capacity(rows.len() * k);
            for &r in rows {
                out.extend_from_slice(&l[r * k..(r + 1) * k]);
            }
            out
        });
        let labels = self
            .labels
            .as_ref()
            .map(|y| rows.iter().map(|&r| y[r]).collect());
        FeatureBank {
            n: rows.len(),
            d,
            num_classes: k,
            features,
            logits,
            labels,
        }
    }

    /// Same rows with replaced features (same shape). Logits and labels are kept.
    pub fn with_features(&self, features: Vec<f64>) -> Result<FeatureBank> {
        if features.len() != self.features.len() {
            return Err(Error::Dimension("replacement features change the bank shape".into()));
        }
        FeatureBank::new(
            self.d,
            self.num_classes,
            features,
            self.logits.clone(),
            self.labels.clone(),
        )
    }

    /// Replaces the logits with `W z + b` for every row.
    pub fn with_head_logits(&self, head: &ClassifierHead) -> Result<FeatureBank> {
        head.check_bank(self)?;
        let mut logits = Vec::with_capacity(self.n * head.num_classes());
        for row in 0..self.n {
            logits.extend(head.logits(self.feature(row)));
        }
        FeatureBank::new(
            self.d,
            head.num_classes(),
            self.features.clone(),
            Some(logits),
            self.labels.clone(),
        )
    }

    pub fn without_logits(&self) -> FeatureBank {
        FeatureBank {
            logits: None,
            ..self.clone()
        }
    }
}

/// Final linear layer `f(x) = W z + b` with `W` of shape `K x d`.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierHead {
    num_classes: usize,
    d: usize,
    weights: Vec<f64>,
    bias: Vec<f64>,
}

impl ClassifierHead {
    pub fn new(num_classes: usize, d: usize, weights: Vec<f64>, bias: Vec<f64>) -> Result<Self> {
        if num_classes == 0 || d == 0 {
            return Err(Error::Dimension("classifier head needs K >= 1 and d >= 1".into()));
        }
        if weights.len() != num_classes * d {
            return Err(Error::Dimension(format!(
                "head weights: expected {} entries (K={num_classes}, d={d}), got {}",
                num_classes * d,
                weights.len()
            )));
        }
        if bias.len() != num_classes {
            return Err(Error::Dimension(format!(
                "head bias: expected {num_classes} entries, got {}",
                bias.len()
            )));
        }
        check_finite(&weights, "head weights")?;
        check_finite(&bias, "head bias")?;
        Ok(ClassifierHead {
            num_classes,
            d,
            weights,
            bias,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn weight_row(&self, class: usize) -> &[f64] {
        &self.weights[class * self.d..(class + 1) * self.d]
    }

    pub fn bias(&self) -> &[f64] {
        &self.bias
    }

    pub fn logits(&self, feature: &[f64]) -> Vec<f64> {
        debug_assert_eq!(feature.len(), self.d);
        (0..self.num_classes)
            .map(|c| {
                self.weight_row(c)
                    .iter()
                    .zip(feature)
                    .map(|(w, z)| w * z)
                    .sum::<f64>()
                    + self.bias[c]
            })
            .collect()
    }

    /// Errors unless the bank's `d` (and `K`, when the bank has classes) agree.
    pub fn check_bank(&self, bank: &FeatureBank) -> Result<()> {
        if bank.d() != self.d {
            return Err(Error::Dimension(format!(
                "bank d = {} but head d = {}",
                bank.d(),
                self.d
            )));
        }
        if bank.num_classes() != 0 && bank.num_classes() != self.num_classes {
            return Err(Error::Dimension(format!(
                "bank K = {} but head K = {}",
                bank.num_classes(),
                self.num_classes
            )));
        }
        Ok(())
    }
}

/// Row count for an `alpha_percent` sample of `n` rows: `ceil(alpha * n / 100)`
/// within `[1, n]`.
pub fn subsample_count(n: usize, alpha_percent: f64) -> Result<usize> {
    if !(alpha_percent > 0.0 && alpha_percent <= 100.0) {
        return Err(Error::InvalidParameter(format!(
            "alpha must be in (0, 100], got {alpha_percent}"
        )));
    }
    let raw = alpha_percent * n as f64 / 100.0;
    Ok(((raw - 1e-9).ceil().max(1.0) as usize).min(n))
}

/// Uniform sample without replacement of `ceil(alpha/100 * n)` rows, kept in
/// ascending original order. The procedure is documented in [`crate::rng`].
pub fn subsample_bank(bank: &FeatureBank, alpha_percent: f64, seed: u64) -> Result<FeatureBank> {
    if bank.n() == 0 {
        return Err(Error::InvalidParameter("cannot subsample an empty bank".into()));
    }
    let count = subsample_count(bank.n(), alpha_percent)?;
    let mut rng = rng::seeded(seed);
    let rows = rng::sample_indices(&mut rng, bank.n(), count);
    Ok(bank.select_rows(&rows))
}

/// Per-class variant: each label class contributes `ceil(alpha/100 * n_c)` rows.
pub fn subsample_bank_stratified(
    bank: &FeatureBank,
    alpha_percent: f64,
    seed: u64,
) -> Result<FeatureBank> {
    let labels = bank.labels().ok_or(Error::Missing("labels for stratified sampling"))?;
    if bank.n() == 0 {
        return Err(Error::InvalidParameter("cannot subsample an empty bank".into()));
    }
    subsample_count(bank.n(), alpha_percent)?;
    let mut by_class: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
    for (row, &c) in labels.iter().enumerate() {
        by_class.entry(c).or_default().push(row);
    }
    let mut rng = rng::seeded(seed);
    let mut rows = Vec::new();
    for members in by_class.values() {
        let count = subsample_count(members.len(), alpha_percent)?;
        rows.extend(
            rng::sample_indices(&mut rng, members.len(), count)
                .into_iter()
                .map(|i| members[i]),
        );
    }
    rows.sort_unstable();
    Ok(bank.select_rows(&rows))
}

/// Column layout for CSV ingestion: `features..., logits..., [label]`.
#[derive(Debug, Clone, Copy)]
pub struct CsvLayout {
    pub feature_columns: usize,
    pub logit_columns: usize,
    pub has_label: bool,
    /// Class count when there are no logit columns; defaults to `max label + 1`.
    pub num_classes: Option<usize>,
    pub has_header: bool,
}

/// Reads a bank from CSV. Every record must have exactly the declared columns.
pub fn read_csv(path: impl AsRef<Path>, layout: CsvLayout) -> Result<FeatureBank> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_csv_from(file, layout)
}

pub fn read_csv_from(reader: impl std::io::Read, layout: CsvLayout) -> Result<FeatureBank> {
    let width = layout.feature_columns + layout.logit_columns + usize::from(layout.has_label);
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(layout.has_header)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let mut features = Vec::new();
    let mut logits = Vec::new();
    let mut labels = Vec::new();
    for (line, record) in rdr.records().enumerate() {
        let record = record.map_err(|e| Error::Csv(e.to_string()))?;
        if record.len() != width {
            return Err(Error::Csv(format!(
                "record {line}: expected {width} columns, found {}",
                record.len()
            )));
        }
        let parse = |j: usize| -> Result<f64> {
            record[j]
                .parse::<f64>()
                .map_err(|e| Error::Csv(format!("record {line} column {j}: {e}")))
        };
        for j in 0..layout.feature_columns {
            features.push(parse(j)?);
        }
        for j in layout.feature_columns..layout.feature_columns + layout.logit_columns {
            logits.push(parse(j)?);
        }
        if layout.has_label {
            let j = width - 1;
            let label: i64 = record[j]
                .parse()
                .map_err(|e| Error::Csv(format!("record {line} label: {e}")))?;
            if label < 0 {
                return Err(Error::LabelOutOfRange {
                    row: line,
                    label,
                    num_classes: layout.num_classes.unwrap_or(layout.logit_columns),
                });
            }
            labels.push(label as u32);
        }
    }
    let num_classes = if layout.logit_columns > 0 {
        layout.logit_columns
    } else if let Some(k) = layout.num_classes {
        k
    } else {
        labels.iter().max().map_or(0, |&m| m as usize + 1)
    };
    FeatureBank::new(
        layout.feature_columns,
        num_classes,
        features,
        (layout.logit_columns > 0).then_some(logits),
        layout.has_label.then_some(labels),
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid_bank(n: usize) -> FeatureBank {
        let features = (0..n * 2).map(|i| i as f64).collect();
        let labels = (0..n as u32).map(|i| i % 3).collect();
        FeatureBank::new(2, 3, features, None, Some(labels)).unwrap()
    }

    #[test]
    fn rejects_zero_dimension() {
        assert!(matches!(
            FeatureBank::new(0, 2, vec![], None, None),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn rejects_bad_label_and_nan() {
        let e = FeatureBank::new(1, 2, vec![0.0, 1.0], None, Some(vec![0, 2])).unwrap_err();
        assert!(matches!(e, Error::LabelOutOfRange { row: 1, .. }));
        let e = FeatureBank::new(1, 0, vec![f64::NAN], None, None).unwrap_err();
        assert!(matches!(e, Error::NonFinite { section: "features", index: 0 }));
    }

    #[test]
    fn alpha_100_is_identity() {
        let bank = grid_bank(37);
        assert_eq!(subsample_bank(&bank, 100.0, 5).unwrap(), bank);
    }

    #[test]
    fn one_percent_of_thousand_is_ten() {
        assert_eq!(subsample_count(1000, 1.0).unwrap(), 10);
        assert_eq!(subsample_count(128_000, 1.0).unwrap(), 1280);
        assert_eq!(subsample_count(12_800, 0.5).unwrap(), 64);
        assert_eq!(subsample_count(3, 1.0).unwrap(), 1);
        let bank = grid_bank(1000);
        assert_eq!(subsample_bank(&bank, 1.0, 0).unwrap().n(), 10);
    }

    #[test]
    fn alpha_out_of_range() {
        let bank = grid_bank(4);
        for a in [0.0, -1.0, 100.5, f64::NAN] {
            assert!(matches!(
                subsample_bank(&bank, a, 0),
                Err(Error::InvalidParameter(_))
            ));
        }
    }

    #[test]
    fn subsample_is_deterministic_and_distinct() {
        let bank = grid_bank(500);
        let a = subsample_bank(&bank, 7.0, 99).unwrap();
        let b = subsample_bank(&bank, 7.0, 99).unwrap();
        assert_eq!(a, b);
        let firsts: Vec<f64> = (0..a.n()).map(|i| a.feature(i)[0]).collect();
        assert!(firsts.windows(2).all(|w| w[0] < w[1]));
        assert_ne!(a, subsample_bank(&bank, 7.0, 100).unwrap());
    }

    #[test]
    fn stratified_takes_from_every_class() {
        let bank = grid_bank(300);
        let s = subsample_bank_stratified(&bank, 10.0, 1).unwrap();
        let labels = s.labels().unwrap();
        for c in 0..3 {
            assert_eq!(labels.iter().filter(|&&l| l == c).count(), 10);
        }
        assert!(subsample_bank_stratified(&bank.select_rows(&[0]).without_logits(), 10.0, 0).is_ok());
    }

    #[test]
    fn head_logits_and_checks() {
        let head = ClassifierHead::new(2, 2, vec![1.0, 0.0, 0.0, 2.0], vec![0.5, -0.5]).unwrap();
        assert_eq!(head.logits(&[3.0, 4.0]), vec![3.5, 7.5]);
        let bank = FeatureBank::new(2, 0, vec![1.0, 1.0], None, None).unwrap();
        let with = bank.with_head_logits(&head).unwrap();
        assert_eq!(with.logit_row(0).unwrap(), &[1.5, 1.5]);
        let wrong = FeatureBank::new(3, 0, vec![1.0; 3], None, None).unwrap();
        assert!(head.check_bank(&wrong).is_err());
    }

    #[test]
    fn csv_layout() {
        let text = "0.5,1.0,2.0,-1.0,1\n-0.5,0.0,0.1,0.2,0\n";
        let bank = read_csv_from(
            text.as_bytes(),
            CsvLayout {
                feature_columns: 2,
                logit_columns: 2,
                has_label: true,
                num_classes: None,
                has_header: false,
            },
        )
        .unwrap();
        assert_eq!((bank.n(), bank.d(), bank.num_classes()), (2, 2, 2));
        assert_eq!(bank.logit_row(0).unwrap(), &[2.0, -1.0]);
        assert_eq!(bank.labels().unwrap(), &[1, 0]);

        let bad = read_csv_from(
            "1,2\n".as_bytes(),
            CsvLayout {
                feature_columns: 3,
                logit_columns: 0,
                has_label: false,
                num_classes: None,
                has_header: false,
            },
        );
        assert!(matches!(bad, Err(Error::Csv(_))));
    }
}
