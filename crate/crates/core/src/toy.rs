//! Two-blob 2-D lab: a small classifier, near-OOD points between the blobs
//! and a far-OOD ring, with score heatmaps over a lattice.
//!
//! Points `x` become features through a fixed quadratic lift around the blob
//! centroid `c`,
//!
//! ```text
//! z = (x - c, (r^2 - |x - c|^2) / (2r))
//! ```
//!
//! with `r = lift_radius`. Nothing is learned in the lift. Points far from
//! the data acquire a strongly negative last coordinate, so their direction
//! turns away from every training feature while their norm, and with it the
//! linear classifier's confidence, keeps growing.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use crate::bank::{ClassifierHead, FeatureBank};
use crate::confidence::log_sum_exp;
use crate::detector::{Detector, DetectorConfig, ScoreName};
use crate::error::{Error, Result};
use crate::metrics::{DetectionMetrics, EvalTable};
use crate::rng;

pub const FEATURE_DIM: usize = 3;
pub const DEFAULT_LR: f64 = 0.1;
pub const DEFAULT_ITERS: usize = 2000;

#[derive(Debug, Clone, PartialEq)]
pub struct ToyConfig {
    pub class_means: [[f64; 2]; 2],
    pub class_std: f64,
    pub n_per_class: usize,
    /// Points in each OOD set.
    pub n_ood: usize,
    pub lift_radius: f64,
    /// Lattice half-width.
    pub grid_extent: f64,
    pub grid_resolution: usize,
    pub seed: u64,
}

impl Default for ToyConfig {
    fn default() -> Self {
        ToyConfig {
            class_means: [[-1.0, 0.0], [1.0, 0.0]],
            class_std: 0.5,
            n_per_class: 200,
            n_ood: 200,
            lift_radius: 4.0,
            grid_extent: 14.0,
            grid_resolution: 128,
            seed: 0,
        }
    }
}

impl ToyConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::InvalidParameter(msg.to_string()));
        if !(self.class_std > 0.0 && self.class_std.is_finite()) {
            return bad("class_std must be positive");
        }
        if self.grid_resolution < 2 {
            return bad("grid_resolution must be at least 2");
        }
        if !(self.grid_extent > 0.0 && self.grid_extent.is_finite()) {
            return bad("grid_extent must be positive");
        }
        if !(self.lift_radius > 0.0 && self.lift_radius.is_finite()) {
            return bad("lift_radius must be positive");
        }
        if self.n_per_class == 0 || self.n_ood == 0 {
            return bad("sample counts must be positive");
        }
        if self.mean_distance() == 0.0 {
            return bad("class means must differ");
        }
        Ok(())
    }

    pub fn centroid(&self) -> [f64; 2] {
        let [a, b] = self.class_means;
        [(a[0] + b[0]) / 2.0, (a[1] + b[1]) / 2.0]
    }

    pub fn mean_distance(&self) -> f64 {
        let [a, b] = self.class_means;
        (a[0] - b[0]).hypot(a[1] - b[1])
    }

    pub fn ring_radius(&self) -> f64 {
        6.0 * self.mean_distance()
    }

    pub fn lift(&self, p: [f64; 2]) -> [f64; 3] {
        let c = self.centroid();
        let (dx, dy) = (p[0] - c[0], p[1] - c[1]);
        let r = self.lift_radius;
        [dx, dy, (r * r - dx * dx - dy * dy) / (2.0 * r)]
    }
}

/// Raw 2-D points with their lifted bank.
#[derive(Debug, Clone, PartialEq)]
pub struct ToySet {
    pub points: Vec<[f64; 2]>,
    pub bank: FeatureBank,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToyData {
    pub train: ToySet,
    /// Held-out draw from the same blobs.
    pub id_test: ToySet,
    pub near_ood: ToySet,
    pub far_ood: ToySet,
}

fn to_set(config: &ToyConfig, points: Vec<[f64; 2]>, labels: Option<Vec<u32>>) -> ToySet {
    let features: Vec<f64> = points.iter().flat_map(|&p| config.lift(p)).collect();
    let classes = if labels.is_some() { 2 } else { 0 };
    let bank = FeatureBank::new(FEATURE_DIM, classes, features, None, labels)
        .expect("lifted toy points form a valid bank");
    ToySet { points, bank }
}

fn blobs(config: &ToyConfig, stream: u64) -> (Vec<[f64; 2]>, Vec<u32>) {
    let mut rng = rng::seeded_stream(config.seed, stream);
    let noise = Normal::new(0.0, config.class_std).expect("validated std");
    let mut points = Vec::with_capacity(2 * config.n_per_class);
    let mut labels = Vec::with_capacity(2 * config.n_per_class);
    for (c, mu) in config.class_means.iter().enumerate() {
        for _ in 0..config.n_per_class {
            points.push([mu[0] + noise.sample(&mut rng), mu[1] + noise.sample(&mut rng)]);
            labels.push(c as u32);
        }
    }
    (points, labels)
}

/// Seeded toy datasets.
///
/// Near OOD: uniform along the perpendicular bisector of the means, within
/// the training points' extent in that direction, and within
/// `0.5 * class_std` across it. Far OOD: uniform on a ring of radius
/// `6 * |mu_1 - mu_0|` around the centroid.
pub fn make_toy(config: &ToyConfig) -> Result<ToyData> {
    config.validate()?;
    let (train_points, train_labels) = blobs(config, 0);
    let (test_points, test_labels) = blobs(config, 1);
    let [a, b] = config.class_means;
    let dist = config.mean_distance();
    let along = [(b[0] - a[0]) / dist, (b[1] - a[1]) / dist];
    let across = [-along[1], along[0]];
    let mid = config.centroid();
    let proj = |p: &[f64; 2]| (p[0] - mid[0]) * across[0] + (p[1] - mid[1]) * across[1];
    let lo = train_points.iter().map(proj).fold(f64::INFINITY, f64::min);
    let hi = train_points.iter().map(proj).fold(f64::NEG_INFINITY, f64::max);
    let half_band = 0.5 * config.class_std;
    let mut rng = rng::seeded_stream(config.seed, 2);
    let near: Vec<[f64; 2]> = (0..config.n_ood)
        .map(|_| {
            let t = rng.random_range(lo..=hi);
            let s = rng.random_range(-half_band..=half_band);
            [
                mid[0] + t * across[0] + s * along[0],
                mid[1] + t * across[1] + s * along[1],
            ]
        })
        .collect();
    let mut rng = rng::seeded_stream(config.seed, 3);
    let radius = config.ring_radius();
    let far: Vec<[f64; 2]> = (0..config.n_ood)
        .map(|_| {
            let theta = rng.random_range(0.0..std::f64::consts::TAU);
            [mid[0] + radius * theta.cos(), mid[1] + radius * theta.sin()]
        })
        .collect();
    Ok(ToyData {
        train: to_set(config, train_points, Some(train_labels)),
        id_test: to_set(config, test_points, Some(test_labels)),
        near_ood: to_set(config, near, None),
        far_ood: to_set(config, far, None),
    })
}

fn mean_cross_entropy(bank: &FeatureBank, labels: &[u32], head: &ClassifierHead) -> f64 {
    (0..bank.n())
        .map(|i| {
            let logits = head.logits(bank.feature(i));
            log_sum_exp(&logits) - logits[labels[i] as usize]
        })
        .sum::<f64>()
        / bank.n() as f64
}

/// Multinomial logistic regression by full-batch gradient descent from zero
/// weights. A step that would raise the loss is rejected and `lr` halved.
pub fn fit_softmax_head(train: &FeatureBank, lr: f64, iters: usize) -> Result<ClassifierHead> {
    let labels = train.labels().ok_or(Error::Missing("labels for head training"))?;
    if !(lr >= 0.0 && lr.is_finite()) {
        return Err(Error::InvalidParameter(format!("learning rate must be >= 0, got {lr}")));
    }
    if labels.is_empty() {
        return Err(Error::InvalidParameter("head training needs samples".into()));
    }
    let k = labels.iter().copied().max().map_or(0, |m| m as usize + 1);
    if !labels.iter().any(|&c| c != labels[0]) {
        return Err(Error::InvalidParameter(
            "head training needs at least two classes".into(),
        ));
    }
    let (n, d) = (train.n(), train.d());
    let mut head = ClassifierHead::new(k, d, vec![0.0; k * d], vec![0.0; k])?;
    let mut loss = mean_cross_entropy(train, labels, &head);
    let mut lr = lr;
    for _ in 0..iters {
        if lr == 0.0 {
            break;
        }
        let mut gw = vec![0.0; k * d];
        let mut gb = vec![0.0; k];
        for i in 0..n {
            let z = train.feature(i);
            let p = crate::confidence::softmax(&head.logits(z));
            for c in 0..k {
                let r = p[c] - f64::from(u8::from(labels[i] as usize == c));
                gb[c] += r;
                for j in 0..d {
                    gw[c * d + j] += r * z[j];
                }
            }
        }
        let scale = lr / n as f64;
        let w: Vec<f64> = head.weights().iter().zip(&gw).map(|(w, g)| w - scale * g).collect();
        let b: Vec<f64> = head.bias().iter().zip(&gb).map(|(b, g)| b - scale * g).collect();
        let next = ClassifierHead::new(k, d, w, b)?;
        let next_loss = mean_cross_entropy(train, labels, &next);
        if next_loss > loss {
            lr /= 2.0;
            continue;
        }
        head = next;
        loss = next_loss;
    }
    Ok(head)
}

/// Score values on the lattice, row-major. Row 0 is `y = +extent`, column 0
/// is `x = -extent`.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid {
    pub resolution: usize,
    pub extent: f64,
    pub values: Vec<f64>,
}

impl Grid {
    /// Lattice coordinate of cell `(row, col)`.
    pub fn point(resolution: usize, extent: f64, row: usize, col: usize) -> [f64; 2] {
        let step = 2.0 * extent / (resolution - 1) as f64;
        [-extent + step * col as f64, extent - step * row as f64]
    }

    /// Binary 8-bit graymap, min-max normalized over this grid. A constant
    /// grid renders as mid-gray.
    pub fn to_pgm(&self) -> Vec<u8> {
        let min = self.values.iter().copied().fold(f64::INFINITY, f64::min);
        let max = self.values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut out = format!("P5\n{} {}\n255\n", self.resolution, self.resolution).into_bytes();
        out.extend(self.values.iter().map(|&v| {
            if max > min {
                (255.0 * (v - min) / (max - min)).round() as u8
            } else {
                128
            }
        }));
        out
    }

    /// One line per lattice row, comma-separated.
    pub fn to_csv(&self) -> String {
        let mut s = String::new();
        for row in self.values.chunks(self.resolution) {
            let line: Vec<String> = row.iter().map(f64::to_string).collect();
            s.push_str(&line.join(","));
            s.push('\n');
        }
        s
    }
}

/// Evaluates a fitted detector on every lattice point of `config`'s grid.
pub fn grid_scores(detector: &Detector, config: &ToyConfig) -> Result<Grid> {
    config.validate()?;
    let res = config.grid_resolution;
    let features: Vec<f64> = (0..res * res)
        .into_par_iter()
        .flat_map_iter(|cell| config.lift(Grid::point(res, config.grid_extent, cell / res, cell % res)))
        .collect();
    let bank = FeatureBank::new(FEATURE_DIM, 0, features, None, None)?;
    let values = detector.score(&bank)?.scores;
    Ok(Grid {
        resolution: res,
        extent: config.grid_extent,
        values,
    })
}

/// Data, trained head and the training bank with head logits.
#[derive(Debug, Clone)]
pub struct ToyLab {
    pub data: ToyData,
    pub head: ClassifierHead,
    pub bank: FeatureBank,
}

impl ToyLab {
    pub fn new(config: &ToyConfig) -> Result<Self> {
        let data = make_toy(config)?;
        let head = fit_softmax_head(&data.train.bank, DEFAULT_LR, DEFAULT_ITERS)?;
        let bank = data.train.bank.with_head_logits(&head)?;
        Ok(ToyLab { data, head, bank })
    }

    pub fn detector(&self, name: ScoreName, config: DetectorConfig) -> Result<Detector> {
        Detector::fit(name, &self.bank, Some(&self.head), config)
    }

    /// Metrics of each score for ID test vs. the "near" and "far" sets.
    pub fn evaluate(&self, scores: &[ScoreName], config: DetectorConfig) -> Result<EvalTable> {
        let mut table = EvalTable::new();
        for &name in scores {
            let det = self.detector(name, config)?;
            let id = det.score(&self.data.id_test.bank)?.scores;
            for (set, bank) in [("near", &self.data.near_ood.bank), ("far", &self.data.far_ood.bank)] {
                let ood = det.score(bank)?.scores;
                table.push(&det.label(), set, DetectionMetrics::compute(&id, &ood)?)?;
            }
        }
        Ok(table)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::confidence::ConfidenceKind;

    #[test]
    fn datasets_are_seeded() {
        let cfg = ToyConfig {
            n_per_class: 100,
            ..ToyConfig::default()
        };
        let a = make_toy(&cfg).unwrap();
        assert_eq!(a, make_toy(&cfg).unwrap());
        assert_eq!(a.train.bank.n(), 200);
        assert_ne!(a.train.points, a.id_test.points);
        let other = make_toy(&ToyConfig { seed: 1, ..cfg.clone() }).unwrap();
        assert_ne!(a.train.points, other.train.points);
    }

    #[test]
    fn ood_geometry() {
        let cfg = ToyConfig::default();
        let data = make_toy(&cfg).unwrap();
        let dist = cfg.mean_distance();
        for p in &data.far_ood.points {
            for m in cfg.class_means {
                assert!((p[0] - m[0]).hypot(p[1] - m[1]) >= 5.0 * dist);
            }
        }
        for p in &data.near_ood.points {
            assert!(p[0].abs() <= 0.5 * cfg.class_std + 1e-12);
        }
    }

    #[test]
    fn lift_matches_formula() {
        let cfg = ToyConfig::default();
        assert_eq!(cfg.lift([0.0, 0.0]), [0.0, 0.0, 2.0]);
        assert_eq!(cfg.lift([3.0, 4.0]), [3.0, 4.0, (16.0 - 25.0) / 8.0]);
    }

    #[test]
    fn head_training() {
        let cfg = ToyConfig {
            class_std: 0.2,
            ..ToyConfig::default()
        };
        let data = make_toy(&cfg).unwrap();
        let head = fit_softmax_head(&data.train.bank, DEFAULT_LR, DEFAULT_ITERS).unwrap();
        let labels = data.train.bank.labels().unwrap();
        let correct = (0..data.train.bank.n())
            .filter(|&i| {
                let l = head.logits(data.train.bank.feature(i));
                u32::from(l[1] > l[0]) == labels[i]
            })
            .count();
        assert!(correct as f64 / data.train.bank.n() as f64 >= 0.99);

        let zero = fit_softmax_head(&data.train.bank, 0.0, 100).unwrap();
        assert!(zero.weights().iter().chain(zero.bias()).all(|&v| v == 0.0));

        let one_class = data.train.bank.select_rows(&[0, 1, 2]);
        assert!(fit_softmax_head(&one_class, 0.1, 10).is_err());
    }

    #[test]
    fn symmetric_blobs_give_centered_boundary() {
        let cfg = ToyConfig::default();
        let data = make_toy(&cfg).unwrap();
        // mirror class 0 onto class 1 so the data are exactly symmetric in x
        let left: Vec<[f64; 2]> = data.train.points[..cfg.n_per_class].to_vec();
        let mut points = left.clone();
        points.extend(left.iter().map(|p| [-p[0], p[1]]));
        let labels: Vec<u32> = (0..2 * cfg.n_per_class).map(|i| u32::from(i >= cfg.n_per_class)).collect();
        let set = to_set(&cfg, points, Some(labels));
        let head = fit_softmax_head(&set.bank, DEFAULT_LR, DEFAULT_ITERS).unwrap();
        // logit difference along y = 0: find its sign change
        let diff = |x: f64| {
            let l = head.logits(&cfg.lift([x, 0.0]));
            l[1] - l[0]
        };
        let (mut lo, mut hi) = (-1.0, 1.0);
        assert!(diff(lo) < 0.0 && diff(hi) > 0.0);
        for _ in 0..60 {
            let m = 0.5 * (lo + hi);
            if diff(m) < 0.0 {
                lo = m;
            } else {
                hi = m;
            }
        }
        assert!(lo.abs() <= 0.1 * cfg.class_std);
    }

    #[test]
    fn energy_dips_between_means() {
        let lab = ToyLab::new(&ToyConfig::default()).unwrap();
        let energy = |p: [f64; 2]| log_sum_exp(&lab.head.logits(&ToyConfig::default().lift(p)));
        let mid = energy([0.0, 0.0]);
        assert!(mid < energy([-1.0, 0.0]));
        assert!(mid < energy([1.0, 0.0]));
    }

    #[test]
    fn grid_layout_and_images() {
        let cfg = ToyConfig {
            grid_resolution: 2,
            grid_extent: 3.0,
            ..ToyConfig::default()
        };
        assert_eq!(Grid::point(2, 3.0, 0, 0), [-3.0, 3.0]);
        assert_eq!(Grid::point(2, 3.0, 1, 1), [3.0, -3.0]);
        let lab = ToyLab::new(&cfg).unwrap();
        let det = lab
            .detector(ScoreName::Base(ConfidenceKind::Energy), DetectorConfig::default())
            .unwrap();
        let grid = grid_scores(&det, &cfg).unwrap();
        assert_eq!(grid.values.len(), 4);
        let corner = log_sum_exp(&lab.head.logits(&cfg.lift([-3.0, 3.0])));
        assert_eq!(grid.values[0], corner);
        assert_eq!(grid, grid_scores(&det, &cfg).unwrap());
        let pgm = grid.to_pgm();
        assert!(pgm.starts_with(b"P5\n2 2\n255\n"));
        assert_eq!(pgm.len(), 11 + 4);
        assert_eq!(grid.to_csv().lines().count(), 2);

        let flat = Grid {
            resolution: 2,
            extent: 1.0,
            values: vec![0.25; 4],
        };
        assert!(flat.to_pgm()[11..].iter().all(|&v| v == 128));
    }

    #[test]
    fn invalid_configs() {
        for cfg in [
            ToyConfig { class_std: 0.0, ..ToyConfig::default() },
            ToyConfig { grid_resolution: 1, ..ToyConfig::default() },
            ToyConfig { class_means: [[1.0, 1.0], [1.0, 1.0]], ..ToyConfig::default() },
        ] {
            assert!(make_toy(&cfg).is_err());
        }
    }
}
