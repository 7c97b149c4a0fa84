//! Classifier-based base confidences (higher = more in-distribution).

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;

use crate::bank::{ClassifierHead, FeatureBank};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum ConfidenceKind {
    /// Negative energy, `log sum_c exp f_c(x)`.
    #[default]
    Energy,
    /// Maximum softmax probability.
    Msp,
    MaxLogit,
    /// `KL(softmax(f(x)) || uniform) = log K - H(p)`.
    KlUniform,
    /// L1 norm of the gradient of the uniform-target cross-entropy with
    /// respect to the final weight matrix: `|p - u|_1 * |z|_1`. The bias is
    /// excluded; including it would add `|p - u|_1`.
    GradNorm,
}

impl ConfidenceKind {
    pub const ALL: [ConfidenceKind; 5] = [
        ConfidenceKind::Energy,
        ConfidenceKind::Msp,
        ConfidenceKind::MaxLogit,
        ConfidenceKind::KlUniform,
        ConfidenceKind::GradNorm,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ConfidenceKind::Energy => "energy",
            ConfidenceKind::Msp => "msp",
            ConfidenceKind::MaxLogit => "maxlogit",
            ConfidenceKind::KlUniform => "kl",
            ConfidenceKind::GradNorm => "gradnorm",
        }
    }

    pub fn needs_head(self) -> bool {
        self == ConfidenceKind::GradNorm
    }
}

impl fmt::Display for ConfidenceKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ConfidenceKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ConfidenceKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::UnknownScore(s.to_string()))
    }
}

pub fn log_sum_exp(logits: &[f64]) -> f64 {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + logits.iter().map(|f| (f - max).exp()).sum::<f64>().ln()
}

/// Max-shifted softmax.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|f| (f - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

pub fn base_confidence(
    kind: ConfidenceKind,
    logits: &[f64],
    feature: &[f64],
    head: Option<&ClassifierHead>,
) -> Result<f64> {
    if logits.is_empty() {
        return Err(Error::Dimension("empty logit vector".into()));
    }
    let num_classes = logits.len() as f64;
    Ok(match kind {
        ConfidenceKind::Energy => log_sum_exp(logits),
        ConfidenceKind::MaxLogit => logits.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        ConfidenceKind::Msp => softmax(logits).into_iter().fold(0.0, f64::max),
        ConfidenceKind::KlUniform => {
            let lse = log_sum_exp(logits);
            let kl: f64 = logits
                .iter()
                .map(|f| {
                    let log_p = f - lse;
                    log_p.exp() * (log_p + num_classes.ln())
                })
                .sum();
            kl.max(0.0)
        }
        ConfidenceKind::GradNorm => {
            let head = head.ok_or(Error::Missing("classifier head for gradnorm"))?;
            if head.num_classes() != logits.len() || head.d() != feature.len() {
                return Err(Error::Dimension("gradnorm head does not match inputs".into()));
            }
            let uniform = 1.0 / num_classes;
            let p_dev: f64 = softmax(logits).iter().map(|p| (p - uniform).abs()).sum();
            let z_l1: f64 = feature.iter().map(|z| z.abs()).sum();
            p_dev * z_l1
        }
    })
}

/// Bank confidences `s_i` with a count of the entries that violate the
/// nonnegative-range assumption of the guided score.
#[derive(Debug, Clone, PartialEq)]
pub struct BaseConfidences {
    pub values: Vec<f64>,
    pub negative: usize,
}

impl BaseConfidences {
    pub fn has_negative(&self) -> bool {
        self.negative > 0
    }

    /// `s <- max(s, 0)`.
    pub fn clamp_nonneg(mut self) -> Self {
        for v in &mut self.values {
            *v = v.max(0.0);
        }
        self.negative = 0;
        self
    }
}

pub fn batch_confidence(
    kind: ConfidenceKind,
    bank: &FeatureBank,
    head: Option<&ClassifierHead>,
) -> Result<BaseConfidences> {
    if !bank.has_logits() {
        return Err(Error::Missing("logits in bank"));
    }
    let values = (0..bank.n())
        .into_par_iter()
        .map(|i| base_confidence(kind, bank.require_logits(i)?, bank.feature(i), head))
        .collect::<Result<Vec<f64>>>()?;
    let negative = values.iter().filter(|&&v| v < 0.0).count();
    Ok(BaseConfidences { values, negative })
}

/// Scores for an evaluated set plus what produced them.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreReport {
    pub kind: String,
    pub params: BTreeMap<String, String>,
    pub scores: Vec<f64>,
}

impl ScoreReport {
    pub fn new(kind: impl Into<String>, scores: Vec<f64>) -> Self {
        ScoreReport {
            kind: kind.into(),
            params: BTreeMap::new(),
            scores,
        }
    }

    pub fn with_param(mut self, key: &str, value: impl ToString) -> Self {
        self.params.insert(key.to_string(), value.to_string());
        self
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::f64::consts::LN_2;

    fn conf(kind: ConfidenceKind, logits: &[f64]) -> f64 {
        base_confidence(kind, logits, &[], None).unwrap()
    }

    #[test]
    fn softmax_examples() {
        assert_eq!(softmax(&[0.0, 0.0]), vec![0.5, 0.5]);
        let p = softmax(&[LN_2, 0.0]);
        assert!((p[0] - 2.0 / 3.0).abs() < 1e-15 && (p[1] - 1.0 / 3.0).abs() < 1e-15);
        let p = softmax(&[1000.0, -1000.0]);
        assert_eq!(p, vec![1.0, 0.0]);
    }

    #[test]
    fn scalar_examples() {
        assert!((conf(ConfidenceKind::Energy, &[0.0, 0.0]) - LN_2).abs() < 1e-15);
        assert!(conf(ConfidenceKind::KlUniform, &[1.7; 6]).abs() < 1e-15);
        assert_eq!(conf(ConfidenceKind::MaxLogit, &[3.0, -1.0, 2.0]), 3.0);
        assert_eq!(conf(ConfidenceKind::Msp, &[0.0, 0.0, 0.0, 0.0]), 0.25);
    }

    #[test]
    fn gradnorm_examples() {
        let head = ClassifierHead::new(2, 2, vec![0.0; 4], vec![0.0; 2]).unwrap();
        let g = base_confidence(ConfidenceKind::GradNorm, &[50.0, -50.0], &[1.0, -1.0], Some(&head))
            .unwrap();
        assert!((g - 2.0).abs() < 1e-12);
        assert!(matches!(
            base_confidence(ConfidenceKind::GradNorm, &[0.0, 1.0], &[1.0, 0.0], None),
            Err(Error::Missing(_))
        ));
        assert!(base_confidence(ConfidenceKind::Energy, &[], &[], None).is_err());
    }

    #[test]
    fn names_round_trip() {
        for k in ConfidenceKind::ALL {
            assert_eq!(k.name().parse::<ConfidenceKind>().unwrap(), k);
        }
        assert!("softmax".parse::<ConfidenceKind>().is_err());
    }

    #[test]
    fn batch_matches_scalar_and_flags_negatives() {
        let bank = FeatureBank::new(
            1,
            2,
            vec![0.0, 1.0, 2.0],
            Some(vec![0.0, 0.0, 1.0, 3.0, -5.0, -6.0]),
            None,
        )
        .unwrap();
        let b = batch_confidence(ConfidenceKind::Energy, &bank, None).unwrap();
        for i in 0..3 {
            assert_eq!(b.values[i], conf(ConfidenceKind::Energy, bank.logit_row(i).unwrap()));
        }
        let m = batch_confidence(ConfidenceKind::MaxLogit, &bank, None).unwrap();
        assert_eq!(m.values, vec![0.0, 3.0, -5.0]);
        assert!(m.has_negative());
        assert_eq!(m.clone().clamp_nonneg().values, vec![0.0, 3.0, 0.0]);

        let flat = FeatureBank::new(1, 2, vec![0.0; 4], Some(vec![0.0; 8]), None).unwrap();
        let e = batch_confidence(ConfidenceKind::Energy, &flat, None).unwrap();
        assert!(e.values.iter().all(|&v| v == LN_2));
        assert!(matches!(
            batch_confidence(ConfidenceKind::Energy, &flat.without_logits(), None),
            Err(Error::Missing(_))
        ));
    }

    fn logits_strategy() -> impl Strategy<Value = Vec<f64>> {
        proptest::collection::vec(-30.0f64..30.0, 1..12)
    }

    proptest! {
        #[test]
        fn softmax_sums_to_one_and_keeps_order(logits in logits_strategy()) {
            let p = softmax(&logits);
            prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-6);
            for i in 0..logits.len() {
                for j in 0..logits.len() {
                    if logits[i] > logits[j] {
                        prop_assert!(p[i] >= p[j]);
                    }
                }
            }
        }

        #[test]
        fn ranges(logits in logits_strategy()) {
            let k = logits.len() as f64;
            let msp = conf(ConfidenceKind::Msp, &logits);
            prop_assert!(msp > 0.0 && msp <= 1.0);
            let kl = conf(ConfidenceKind::KlUniform, &logits);
            prop_assert!(kl >= 0.0 && kl <= k.ln() + 1e-12);
            let gap = conf(ConfidenceKind::Energy, &logits) - conf(ConfidenceKind::MaxLogit, &logits);
            prop_assert!(gap >= 0.0 && gap <= k.ln() + 1e-12);
        }

        #[test]
        fn constant_shift(logits in logits_strategy(), c in -20.0f64..20.0) {
            let shifted: Vec<f64> = logits.iter().map(|f| f + c).collect();
            for kind in [ConfidenceKind::Msp, ConfidenceKind::KlUniform] {
                prop_assert!((conf(kind, &logits) - conf(kind, &shifted)).abs() < 1e-9);
            }
            for kind in [ConfidenceKind::Energy, ConfidenceKind::MaxLogit] {
                prop_assert!((conf(kind, &shifted) - conf(kind, &logits) - c).abs() < 1e-9);
            }
            let (p, q) = (softmax(&logits), softmax(&shifted));
            for (a, b) in p.iter().zip(&q) {
                prop_assert!((a - b).abs() < 1e-12);
            }
        }

        #[test]
        fn class_permutation_invariance(logits in logits_strategy(), rot in 0usize..12) {
            let k = logits.len();
            let perm: Vec<usize> = (0..k).map(|i| (i + rot) % k).collect();
            let permuted: Vec<f64> = perm.iter().map(|&i| logits[i]).collect();
            let z = vec![0.5, -2.0, 1.0];
            let w: Vec<f64> = (0..k * 3).map(|i| i as f64 * 0.1).collect();
            let head = ClassifierHead::new(k, 3, w.clone(), vec![0.0; k]).unwrap();
            let pw: Vec<f64> = perm.iter().flat_map(|&c| w[c * 3..c * 3 + 3].to_vec()).collect();
            let phead = ClassifierHead::new(k, 3, pw, vec![0.0; k]).unwrap();
            for kind in ConfidenceKind::ALL {
                let a = base_confidence(kind, &logits, &z, Some(&head)).unwrap();
                let b = base_confidence(kind, &permuted, &z, Some(&phead)).unwrap();
                prop_assert!((a - b).abs() <= 1e-12 * a.abs().max(1.0));
            }
        }
    }
}
