//! ReAct activation clipping.

use crate::bank::{ClassifierHead, FeatureBank};
use crate::error::{Error, Result};

pub const DEFAULT_PERCENTILE: f64 = 90.0;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReactThreshold {
    pub c: f64,
    pub percentile: f64,
}

/// Percentile of sorted values, linear interpolation between order
/// statistics at position `(N - 1) * p / 100`.
pub fn percentile_sorted(sorted: &[f64], percentile: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * percentile / 100.0;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    let frac = h - lo as f64;
    if frac == 0.0 {
        sorted[lo]
    } else {
        sorted[lo] + frac * (sorted[hi] - sorted[lo])
    }
}

/// Clip value at `percentile` of all `n * d` bank activations pooled.
pub fn fit_react(bank: &FeatureBank, percentile: f64) -> Result<ReactThreshold> {
    if !(percentile > 0.0 && percentile <= 100.0) {
        return Err(Error::InvalidParameter(format!(
            "ReAct percentile must be in (0, 100], got {percentile}"
        )));
    }
    if bank.n() == 0 {
        return Err(Error::InvalidParameter("cannot fit ReAct on an empty bank".into()));
    }
    let mut pooled = bank.features().to_vec();
    pooled.sort_unstable_by(f64::total_cmp);
    Ok(ReactThreshold {
        c: percentile_sorted(&pooled, percentile),
        percentile,
    })
}

/// Elementwise `min(z_j, c)`.
pub fn apply_react(feature: &[f64], t: &ReactThreshold) -> Vec<f64> {
    feature.iter().map(|&z| z.min(t.c)).collect()
}

/// Clips every feature row. With a head the logits are recomputed as
/// `W clip(z) + b`; without one the stored logits are kept.
pub fn clip_bank(
    bank: &FeatureBank,
    t: &ReactThreshold,
    head: Option<&ClassifierHead>,
) -> Result<FeatureBank> {
    let clipped = bank.with_features(apply_react(bank.features(), t))?;
    match head {
        Some(h) => clipped.with_head_logits(h),
        None => Ok(clipped),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn bank(features: Vec<f64>, d: usize) -> FeatureBank {
        FeatureBank::new(d, 0, features, None, None).unwrap()
    }

    #[test]
    fn interpolated_percentile() {
        let t = fit_react(&bank(vec![4.0, 1.0, 3.0, 2.0], 2), 50.0).unwrap();
        assert_eq!(t.c, 2.5);
        let t = fit_react(&bank(vec![4.0, 1.0, 3.0, 2.0], 2), 100.0).unwrap();
        assert_eq!(t.c, 4.0);
        let t = fit_react(&bank(vec![0.7; 6], 3), 90.0).unwrap();
        assert_eq!(t.c, 0.7);
    }

    #[test]
    fn bad_percentiles() {
        let b = bank(vec![1.0, 2.0], 2);
        for p in [0.0, -1.0, 100.5, f64::NAN] {
            assert!(matches!(fit_react(&b, p), Err(Error::InvalidParameter(_))));
        }
        assert!(fit_react(&bank(vec![], 2), 50.0).is_err());
    }

    #[test]
    fn clipping() {
        let t = ReactThreshold { c: 3.0, percentile: 50.0 };
        assert_eq!(apply_react(&[1.0, 5.0], &t), vec![1.0, 3.0]);
        let inf = ReactThreshold { c: f64::INFINITY, percentile: 100.0 };
        assert_eq!(apply_react(&[1.0, -5.0, 1e300], &inf), vec![1.0, -5.0, 1e300]);
    }

    #[test]
    fn full_percentile_is_identity_on_bank() {
        let b = FeatureBank::new(2, 2, vec![1.0, -2.0, 3.5, 0.0], Some(vec![0.1, 0.2, 0.3, 0.4]), None)
            .unwrap();
        let t = fit_react(&b, 100.0).unwrap();
        assert_eq!(clip_bank(&b, &t, None).unwrap(), b);
    }

    #[test]
    fn clipped_logits_come_from_head() {
        let head = ClassifierHead::new(2, 2, vec![1.0, 0.0, 0.0, 1.0], vec![0.5, 0.0]).unwrap();
        let b = FeatureBank::new(2, 2, vec![1.0, 9.0], Some(vec![0.0, 0.0]), None).unwrap();
        let t = ReactThreshold { c: 2.0, percentile: 50.0 };
        let clipped = clip_bank(&b, &t, Some(&head)).unwrap();
        assert_eq!(clipped.features(), &[1.0, 2.0]);
        assert_eq!(clipped.logits().unwrap(), &[1.5, 2.0]);
    }

    proptest! {
        #[test]
        fn idempotent_and_lipschitz(
            a in proptest::collection::vec(-10.0f64..10.0, 1..20),
            shift in proptest::collection::vec(-1.0f64..1.0, 20),
            c in -5.0f64..5.0,
        ) {
            let t = ReactThreshold { c, percentile: 50.0 };
            let once = apply_react(&a, &t);
            prop_assert_eq!(apply_react(&once, &t), once.clone());
            let b: Vec<f64> = a.iter().zip(&shift).map(|(x, s)| x + s).collect();
            let cb = apply_react(&b, &t);
            for j in 0..a.len() {
                prop_assert!((once[j] - cb[j]).abs() <= (a[j] - b[j]).abs());
            }
        }

        #[test]
        fn percentile_within_range(v in proptest::collection::vec(-10.0f64..10.0, 1..50), p in 0.1f64..100.0) {
            let mut s = v.clone();
            s.sort_by(f64::total_cmp);
            let c = percentile_sorted(&s, p);
            prop_assert!(c >= s[0] && c <= s[s.len() - 1]);
        }
    }
}
