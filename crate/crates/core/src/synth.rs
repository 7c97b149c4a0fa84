//! Seeded synthetic banks for tests, determinism checks and benchmarks.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::bank::{ClassifierHead, FeatureBank};
use crate::rng;

/// Training bank, head, ID test set and named OOD sets.
#[derive(Debug, Clone)]
pub struct Benchmark {
    pub train: FeatureBank,
    pub head: ClassifierHead,
    pub id: FeatureBank,
    pub ood: Vec<(String, FeatureBank)>,
}

const MEAN_NORM: f64 = 4.0;
const NOISE_NORM: f64 = 3.0;

fn random_unit<R: Rng>(rng: &mut R, d: usize) -> Vec<f64> {
    let v: Vec<f64> = (0..d).map(|_| StandardNormal.sample(rng)).collect();
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.into_iter().map(|x| x / norm).collect()
}

fn scaled(v: &[f64], s: f64) -> Vec<f64> {
    v.iter().map(|x| x * s).collect()
}

/// Isotropic blobs around `means`, `per_mean` rows each, with labels when
/// `labelled`. Logits come from `head`.
fn blobs<R: Rng>(
    rng: &mut R,
    means: &[Vec<f64>],
    per_mean: usize,
    head: &ClassifierHead,
    labelled: bool,
) -> FeatureBank {
    let d = means[0].len();
    let sigma = NOISE_NORM / (d as f64).sqrt();
    let mut features = Vec::with_capacity(means.len() * per_mean * d);
    let mut labels = Vec::new();
    for (c, mu) in means.iter().enumerate() {
        for _ in 0..per_mean {
            for m in mu {
                let e: f64 = StandardNormal.sample(rng);
                features.push(m + sigma * e);
            }
            labels.push(c as u32);
        }
    }
    let bank = FeatureBank::new(
        d,
        head.num_classes(),
        features,
        None,
        labelled.then_some(labels),
    )
    .expect("synthetic bank is well formed");
    bank.with_head_logits(head).expect("head matches bank")
}

/// Gaussian-mixture benchmark in `d` dimensions with `classes` classes.
///
/// Class means are random directions of norm 4 with per-sample noise of
/// expected norm 3. The head is the linear discriminant of equal-variance
/// blobs, `w_c = mu_c`, `b_c = -|mu_c|^2 / 2`. The "near" OOD set sits at
/// normalized midpoints of class pairs, the "far" set at fresh directions.
pub fn gaussian_mixture_benchmark(seed: u64, d: usize, classes: usize, per_class: usize) -> Benchmark {
    let mut rng = rng::seeded_stream(seed, 0);
    let means: Vec<Vec<f64>> = (0..classes)
        .map(|_| scaled(&random_unit(&mut rng, d), MEAN_NORM))
        .collect();
    let weights: Vec<f64> = means.iter().flatten().copied().collect();
    let bias: Vec<f64> = means
        .iter()
        .map(|m| -0.5 * m.iter().map(|x| x * x).sum::<f64>())
        .collect();
    let head = ClassifierHead::new(classes, d, weights, bias).expect("head is well formed");
    let near_means: Vec<Vec<f64>> = (0..classes)
        .map(|c| {
            let (a, b) = (&means[c], &means[(c + 1) % classes]);
            let mid: Vec<f64> = a.iter().zip(b).map(|(x, y)| x + y).collect();
            let norm = mid.iter().map(|x| x * x).sum::<f64>().sqrt();
            scaled(&mid, MEAN_NORM / norm)
        })
        .collect();
    let far_means: Vec<Vec<f64>> = (0..classes)
        .map(|_| scaled(&random_unit(&mut rng, d), MEAN_NORM))
        .collect();
    let eval_per = (per_class / 4).max(1);
    let train = blobs(&mut rng::seeded_stream(seed, 1), &means, per_class, &head, true);
    let id = blobs(&mut rng::seeded_stream(seed, 2), &means, eval_per, &head, true);
    let near = blobs(&mut rng::seeded_stream(seed, 3), &near_means, eval_per, &head, false);
    let far = blobs(&mut rng::seeded_stream(seed, 4), &far_means, eval_per, &head, false);
    Benchmark {
        train,
        head,
        id,
        ood: vec![("near".to_string(), near), ("far".to_string(), far)],
    }
}

/// `n x d` standard normal entries, row-major.
pub fn random_features(seed: u64, n: usize, d: usize) -> Vec<f64> {
    let mut rng = rng::seeded(seed);
    (0..n * d).map(|_| StandardNormal.sample(&mut rng)).collect()
}

/// `n` confidences uniform in `[0, 1)`.
pub fn random_confidences(seed: u64, n: usize) -> Vec<f64> {
    let mut rng = rng::seeded_stream(seed, 1);
    (0..n).map(|_| rng.random::<f64>()).collect()
}
