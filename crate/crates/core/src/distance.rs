//! Distance-based detectors: KNN, Mahalanobis, SSD and ViM.

use nalgebra::{DMatrix, DVector};

use crate::bank::{ClassifierHead, FeatureBank};
use crate::confidence::log_sum_exp;
use crate::error::{Error, Result};
use crate::guidance::GuidanceIndex;
use crate::kernel::{self, normalized};

/// Cosine similarity to the `k`-th most similar bank feature (plain ordering).
pub fn knn_score(query: &[f64], index: &GuidanceIndex, k: usize) -> Result<f64> {
    check_k(k, index.n())?;
    let sims = index.plain_similarities(query)?;
    Ok(kernel::top_k(&sims, k)[k - 1].value)
}

pub(crate) fn check_k(k: usize, n: usize) -> Result<()> {
    if k == 0 || k > n {
        return Err(Error::InvalidParameter(format!(
            "k = {k} outside 1..={n}"
        )));
    }
    Ok(())
}

/// Gaussian model with a shared covariance; one mean per class (Mahalanobis)
/// or a single global mean (SSD).
#[derive(Debug, Clone)]
pub struct GaussianModel {
    /// `C x d`, one row per mean.
    means: DMatrix<f64>,
    /// Class id of each mean row (empty for the single-mean model).
    classes: Vec<u32>,
    covariance: DMatrix<f64>,
    precision: DMatrix<f64>,
    /// Lower Cholesky factor of `covariance`.
    factor: DMatrix<f64>,
    /// `L^-1 mu_c` per row, so scoring needs one triangular solve per query.
    whitened_means: DMatrix<f64>,
    reg_eps: f64,
}

impl GaussianModel {
    /// Builds a model from explicit means (`C x d`) and an SPD covariance.
    pub fn from_parts(means: DMatrix<f64>, covariance: DMatrix<f64>) -> Result<Self> {
        Self::assemble(means, Vec::new(), covariance, 0.0)
    }

    fn assemble(
        means: DMatrix<f64>,
        classes: Vec<u32>,
        covariance: DMatrix<f64>,
        reg_eps: f64,
    ) -> Result<Self> {
        let d = covariance.nrows();
        if covariance.ncols() != d || means.ncols() != d || means.nrows() == 0 {
            return Err(Error::Dimension("gaussian means/covariance shapes disagree".into()));
        }
        let chol = covariance
            .clone()
            .cholesky()
            .ok_or_else(|| Error::Numerical("covariance is not positive definite".into()))?;
        let factor = chol.l();
        let precision = chol.inverse();
        let precision = (&precision + precision.transpose()) * 0.5;
        let mut whitened_means = DMatrix::zeros(means.nrows(), d);
        for c in 0..means.nrows() {
            let mu: DVector<f64> = means.row(c).transpose();
            let w = factor
                .solve_lower_triangular(&mu)
                .ok_or_else(|| Error::Numerical("singular Cholesky factor".into()))?;
            whitened_means.set_row(c, &w.transpose());
        }
        Ok(GaussianModel {
            means,
            classes,
            covariance,
            precision,
            factor,
            whitened_means,
            reg_eps,
        })
    }

    pub fn means(&self) -> &DMatrix<f64> {
        &self.means
    }

    pub fn classes(&self) -> &[u32] {
        &self.classes
    }

    pub fn covariance(&self) -> &DMatrix<f64> {
        &self.covariance
    }

    pub fn precision(&self) -> &DMatrix<f64> {
        &self.precision
    }

    pub fn reg_eps(&self) -> f64 {
        self.reg_eps
    }

    pub fn d(&self) -> usize {
        self.covariance.nrows()
    }

    /// `min_c (z - mu_c)^T Sigma^-1 (z - mu_c)`.
    pub fn min_sq_distance(&self, feature: &[f64]) -> Result<f64> {
        if feature.len() != self.d() {
            return Err(Error::Dimension(format!(
                "feature has d = {} but model has d = {}",
                feature.len(),
                self.d()
            )));
        }
        let z = DVector::from_column_slice(feature);
        let y = self
            .factor
            .solve_lower_triangular(&z)
            .ok_or_else(|| Error::Numerical("singular Cholesky factor".into()))?;
        let mut best = f64::INFINITY;
        for c in 0..self.whitened_means.nrows() {
            let dist: f64 = y
                .iter()
                .zip(self.whitened_means.row(c).iter())
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            best = best.min(dist);
        }
        Ok(best)
    }
}

/// Fits class-conditional (`per_class`) or global means with a shared,
/// population-form covariance plus `1e-6 * trace / d` on the diagonal.
pub fn fit_gaussian(bank: &FeatureBank, per_class: bool) -> Result<GaussianModel> {
    let (n, d) = (bank.n(), bank.d());
    if n == 0 {
        return Err(Error::InvalidParameter("cannot fit a gaussian to an empty bank".into()));
    }
    let assignment: Vec<usize>;
    let classes: Vec<u32>;
    if per_class {
        let labels = bank.labels().ok_or(Error::Missing("labels for per-class gaussian"))?;
        let mut present: Vec<u32> = labels.to_vec();
        present.sort_unstable();
        present.dedup();
        assignment = labels
            .iter()
            .map(|c| present.binary_search(c).unwrap())
            .collect();
        classes = present;
    } else {
        assignment = vec![0; n];
        classes = Vec::new();
    }
    let groups = if per_class { classes.len() } else { 1 };
    let mut means = DMatrix::<f64>::zeros(groups, d);
    let mut counts = vec![0usize; groups];
    for i in 0..n {
        let g = assignment[i];
        counts[g] += 1;
        for (j, z) in bank.feature(i).iter().enumerate() {
            means[(g, j)] += z;
        }
    }
    for g in 0..groups {
        let inv = 1.0 / counts[g] as f64;
        for j in 0..d {
            means[(g, j)] *= inv;
        }
    }
    let mut centered = DMatrix::<f64>::zeros(n, d);
    for i in 0..n {
        let g = assignment[i];
        for (j, z) in bank.feature(i).iter().enumerate() {
            centered[(i, j)] = z - means[(g, j)];
        }
    }
    let mut covariance = centered.tr_mul(&centered) / n as f64;
    let trace = covariance.trace();
    let reg_eps = if trace > 0.0 { 1e-6 * trace / d as f64 } else { 1e-6 };
    for j in 0..d {
        covariance[(j, j)] += reg_eps;
    }
    GaussianModel::assemble(means, classes, covariance, reg_eps)
}

/// Negative squared Mahalanobis distance to the nearest mean.
pub fn gaussian_score(model: &GaussianModel, feature: &[f64]) -> Result<f64> {
    Ok(-model.min_sq_distance(feature)?)
}

/// Virtual-logit model: residual projection off the principal subspace of
/// offset bank features, scaled to the bank's max-logit magnitude.
#[derive(Debug, Clone)]
pub struct VimModel {
    offset: Vec<f64>,
    /// `d x (d - D)` orthonormal columns spanning the minor subspace.
    residual_basis: DMatrix<f64>,
    alpha: f64,
    principal_dim: usize,
}

/// `min(512, d - 1)` for `d >= 1024`, else `ceil(d / 2)` (kept below `d`).
pub fn default_vim_dim(d: usize) -> usize {
    if d >= 1024 {
        512.min(d - 1)
    } else {
        d.div_ceil(2).min(d.saturating_sub(1))
    }
}

impl VimModel {
    pub fn offset(&self) -> &[f64] {
        &self.offset
    }

    pub fn residual_basis(&self) -> &DMatrix<f64> {
        &self.residual_basis
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn principal_dim(&self) -> usize {
        self.principal_dim
    }

    pub fn with_alpha(&self, alpha: f64) -> Self {
        VimModel {
            alpha,
            ..self.clone()
        }
    }

    /// `|R^T (z - o)|_2`.
    pub fn residual_norm(&self, feature: &[f64]) -> Result<f64> {
        if feature.len() != self.offset.len() {
            return Err(Error::Dimension("feature dimension differs from ViM model".into()));
        }
        let shifted: Vec<f64> = feature.iter().zip(&self.offset).map(|(z, o)| z - o).collect();
        let cols = self.residual_basis.ncols();
        let mut sq = 0.0;
        for c in 0..cols {
            let proj = kernel::dot(self.residual_basis.column(c).as_slice(), &shifted);
            sq += proj * proj;
        }
        Ok(sq.sqrt())
    }
}

pub fn fit_vim(bank: &FeatureBank, head: &ClassifierHead, principal_dim: usize) -> Result<VimModel> {
    head.check_bank(bank)?;
    let (n, d) = (bank.n(), bank.d());
    if principal_dim >= d {
        return Err(Error::InvalidParameter(format!(
            "ViM principal dimension {principal_dim} must be below d = {d}"
        )));
    }
    if n == 0 {
        return Err(Error::InvalidParameter("cannot fit ViM to an empty bank".into()));
    }
    let w = DMatrix::from_row_slice(head.num_classes(), d, head.weights());
    let b = DVector::from_column_slice(head.bias());
    let pinv = w
        .pseudo_inverse(1e-12)
        .map_err(|e| Error::Numerical(format!("pseudo-inverse of W: {e}")))?;
    let offset: Vec<f64> = (-(pinv * b)).iter().copied().collect();

    let mut shifted = DMatrix::<f64>::zeros(n, d);
    for i in 0..n {
        for (j, z) in bank.feature(i).iter().enumerate() {
            shifted[(i, j)] = z - offset[j];
        }
    }
    let second_moment = shifted.tr_mul(&shifted) / n as f64;
    let eig = second_moment.symmetric_eigen();
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| {
        eig.eigenvalues[a]
            .partial_cmp(&eig.eigenvalues[b])
            .unwrap()
            .then(a.cmp(&b))
    });
    let residual_dim = d - principal_dim;
    let mut residual_basis = DMatrix::<f64>::zeros(d, residual_dim);
    for (c, &idx) in order.iter().take(residual_dim).enumerate() {
        residual_basis.set_column(c, &eig.eigenvectors.column(idx));
    }
    let mut model = VimModel {
        offset,
        residual_basis,
        alpha: 1.0,
        principal_dim,
    };

    let mut logit_sum = 0.0;
    let mut residual_sum = 0.0;
    for i in 0..n {
        let logits = match bank.logit_row(i) {
            Some(l) => l.to_vec(),
            None => head.logits(bank.feature(i)),
        };
        logit_sum += logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        residual_sum += model.residual_norm(bank.feature(i))?;
    }
    let alpha = logit_sum / residual_sum;
    if !(alpha.is_finite() && alpha > 0.0) {
        return Err(Error::Numerical(format!(
            "ViM scale alpha = {alpha} (max-logit sum {logit_sum}, residual sum {residual_sum})"
        )));
    }
    model.alpha = alpha;
    Ok(model)
}

/// `log sum exp(logits) - alpha * |R^T (z - o)|`.
pub fn vim_score(model: &VimModel, feature: &[f64], logits: &[f64]) -> Result<f64> {
    if logits.is_empty() {
        return Err(Error::Dimension("empty logit vector".into()));
    }
    Ok(log_sum_exp(logits) - model.alpha * model.residual_norm(feature)?)
}

/// Cosine similarity of two raw vectors (for tests and small tools).
pub fn cosine(a: &[f64], b: &[f64]) -> Option<f64> {
    let (a, b) = (normalized(a)?, normalized(b)?);
    Some(kernel::dot(&a, &b))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_distr::{Distribution, StandardNormal};

    fn sample_normal(rng: &mut rand_chacha::ChaCha8Rng) -> f64 {
        StandardNormal.sample(rng)
    }

    #[test]
    fn knn_examples() {
        let idx = GuidanceIndex::from_features(2, &[1.0, 0.0], vec![1.0]).unwrap();
        assert_eq!(knn_score(&[1.0, 0.0], &idx, 1).unwrap(), 1.0);
        let idx = GuidanceIndex::from_features(2, &[1.0, 0.0, 0.0, 1.0], vec![1.0, 1.0]).unwrap();
        assert_eq!(knn_score(&[1.0, 0.0], &idx, 2).unwrap(), 0.0);
        assert!(knn_score(&[1.0, 0.0], &idx, 3).is_err());
        assert!(knn_score(&[1.0, 0.0], &idx, 0).is_err());
    }

    #[test]
    fn knn_matches_full_sort_and_is_scale_free() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let d = 6;
        let rows: Vec<f64> = (0..50 * d).map(|_| sample_normal(&mut rng)).collect();
        let idx = GuidanceIndex::from_features(d, &rows, vec![1.0; 50]).unwrap();
        let q: Vec<f64> = (0..d).map(|_| sample_normal(&mut rng)).collect();
        let mut sims: Vec<f64> = rows.chunks(d).map(|r| cosine(r, &q).unwrap()).collect();
        sims.sort_by(|a, b| b.partial_cmp(a).unwrap());
        let got = knn_score(&q, &idx, 7).unwrap();
        assert!((got - sims[6]).abs() < 1e-12);

        let scaled_rows: Vec<f64> = rows
            .chunks(d)
            .enumerate()
            .flat_map(|(i, r)| r.iter().map(move |x| x * (1.0 + i as f64)))
            .collect();
        let idx2 = GuidanceIndex::from_features(d, &scaled_rows, vec![1.0; 50]).unwrap();
        let q2: Vec<f64> = q.iter().map(|x| x * 37.5).collect();
        assert!((knn_score(&q2, &idx2, 7).unwrap() - got).abs() < 1e-12);
    }

    #[test]
    fn degenerate_two_class_fit() {
        let feats = vec![1.0, 0.0, 1.0, 0.0, -1.0, 0.0, -1.0, 0.0];
        let bank = FeatureBank::new(2, 2, feats, None, Some(vec![0, 0, 1, 1])).unwrap();
        let m = fit_gaussian(&bank, true).unwrap();
        assert_eq!(m.means().row(0).iter().copied().collect::<Vec<_>>(), vec![1.0, 0.0]);
        assert_eq!(m.means().row(1).iter().copied().collect::<Vec<_>>(), vec![-1.0, 0.0]);
        let eps = m.reg_eps();
        assert_eq!(m.covariance(), &(DMatrix::identity(2, 2) * eps));
        assert_eq!(gaussian_score(&m, &[1.0, 0.0]).unwrap(), 0.0);
        assert!(fit_gaussian(&bank.select_rows(&[0]).without_logits(), true).is_ok());
        let unlabeled = FeatureBank::new(2, 0, vec![1.0, 2.0], None, None).unwrap();
        assert!(matches!(fit_gaussian(&unlabeled, true), Err(Error::Missing(_))));
    }

    #[test]
    fn single_mean_is_column_average() {
        let feats = vec![1.0, 2.0, 3.0, 6.0, -1.0, 1.0];
        let bank = FeatureBank::new(2, 0, feats, None, None).unwrap();
        let m = fit_gaussian(&bank, false).unwrap();
        assert!((m.means()[(0, 0)] - 1.0).abs() < 1e-15);
        assert!((m.means()[(0, 1)] - 3.0).abs() < 1e-15);
    }

    #[test]
    fn recovers_known_covariance() {
        let a = DMatrix::from_row_slice(3, 3, &[1.0, 0.0, 0.0, 0.5, 1.2, 0.0, -0.3, 0.4, 0.8]);
        let truth = &a * a.transpose();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(2024);
        let mut feats = Vec::new();
        for _ in 0..500 {
            let e = DVector::from_fn(3, |_, _| sample_normal(&mut rng));
            feats.extend((&a * e).iter().map(|v| v + 2.0));
        }
        let bank = FeatureBank::new(3, 0, feats, None, None).unwrap();
        let m = fit_gaussian(&bank, false).unwrap();
        let rel = (m.covariance() - &truth).norm() / truth.norm();
        assert!(rel < 0.15, "relative Frobenius error {rel}");
    }

    #[test]
    fn euclidean_case_and_solve_oracle() {
        let m = GaussianModel::from_parts(DMatrix::zeros(1, 2), DMatrix::identity(2, 2)).unwrap();
        assert_eq!(gaussian_score(&m, &[3.0, 4.0]).unwrap(), -25.0);

        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(8);
        for _ in 0..20 {
            let d = 5;
            let a = DMatrix::from_fn(d, d, |_, _| sample_normal(&mut rng));
            let cov = &a * a.transpose() + DMatrix::identity(d, d) * 0.1;
            let means = DMatrix::from_fn(3, d, |_, _| sample_normal(&mut rng));
            let model = GaussianModel::from_parts(means.clone(), cov.clone()).unwrap();
            let z: Vec<f64> = (0..d).map(|_| sample_normal(&mut rng)).collect();
            let lu = cov.clone().lu();
            let oracle = (0..3)
                .map(|c| {
                    let diff = DVector::from_column_slice(&z) - means.row(c).transpose();
                    let sol = lu.solve(&diff).unwrap();
                    diff.dot(&sol)
                })
                .fold(f64::INFINITY, f64::min);
            let got = -gaussian_score(&model, &z).unwrap();
            assert!((got - oracle).abs() <= 1e-8 * oracle.max(1.0));
        }
    }

    #[test]
    fn affine_invariance() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(31);
        let d = 4;
        for _ in 0..20 {
            let b = DMatrix::from_fn(d, d, |_, _| sample_normal(&mut rng));
            let cov = &b * b.transpose() + DMatrix::identity(d, d) * 0.5;
            let means = DMatrix::from_fn(2, d, |_, _| sample_normal(&mut rng));
            let a = DMatrix::from_fn(d, d, |_, _| sample_normal(&mut rng)) + DMatrix::identity(d, d) * 3.0;
            let t = DVector::from_fn(d, |_, _| sample_normal(&mut rng));
            let z = DVector::from_fn(d, |_, _| sample_normal(&mut rng));

            let base = GaussianModel::from_parts(means.clone(), cov.clone()).unwrap();
            let mut mapped_means = DMatrix::zeros(2, d);
            for c in 0..2 {
                let mu = &a * means.row(c).transpose() + &t;
                mapped_means.set_row(c, &mu.transpose());
            }
            let mapped = GaussianModel::from_parts(mapped_means, &a * &cov * a.transpose()).unwrap();
            let za = &a * &z + &t;
            let s0 = gaussian_score(&base, z.as_slice()).unwrap();
            let s1 = gaussian_score(&mapped, za.as_slice()).unwrap();
            assert!((s0 - s1).abs() <= 1e-6 * s0.abs().max(1.0), "{s0} vs {s1}");
        }
    }

    fn vim_fixture() -> (FeatureBank, ClassifierHead) {
        // variance 4, 1, 0.01 along the axes; logits from a 2x3 head
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(77);
        let scales = [2.0, 1.0, 0.1];
        let mut feats = Vec::new();
        for _ in 0..400 {
            for s in scales {
                feats.push(s * sample_normal(&mut rng));
            }
        }
        let head = ClassifierHead::new(2, 3, vec![1.0, 0.5, 0.0, -1.0, 0.2, 0.3], vec![0.0, 0.0]).unwrap();
        let bank = FeatureBank::new(3, 2, feats, None, None).unwrap().with_head_logits(&head).unwrap();
        (bank, head)
    }

    #[test]
    fn vim_minor_direction_and_zero_offset() {
        let (bank, head) = vim_fixture();
        let m = fit_vim(&bank, &head, 2).unwrap();
        assert!(m.offset().iter().all(|&o| o.abs() < 1e-12));
        assert_eq!(m.residual_basis().ncols(), 1);
        assert!((m.residual_basis()[(2, 0)].abs() - 1.0).abs() < 1e-3);
        let cols = m.residual_basis();
        assert!(((cols.transpose() * cols)[(0, 0)] - 1.0).abs() < 1e-6);
        assert!(fit_vim(&bank, &head, 3).is_err());
    }

    #[test]
    fn vim_alpha_matches_direct_sum() {
        let (bank, head) = vim_fixture();
        let bank = bank.select_rows(&(0..4).collect::<Vec<_>>());
        let m = fit_vim(&bank, &head, 2).unwrap();
        let axis = m.residual_basis().column(0).into_owned();
        let mut num = 0.0;
        let mut den = 0.0;
        for i in 0..4 {
            let l = bank.logit_row(i).unwrap();
            num += l[0].max(l[1]);
            let z = DVector::from_column_slice(bank.feature(i));
            den += axis.dot(&z).abs();
        }
        assert!((m.alpha() - num / den).abs() < 1e-9 * (num / den).abs());
    }

    #[test]
    fn vim_score_arithmetic() {
        let (bank, head) = vim_fixture();
        let m = fit_vim(&bank, &head, 2).unwrap().with_alpha(1.0);
        let dir: Vec<f64> = m.residual_basis().column(0).iter().map(|v| v * 2.0).collect();
        let s = vim_score(&m, &dir, &[0.0, 0.0]).unwrap();
        assert!((s - (std::f64::consts::LN_2 - 2.0)).abs() < 1e-12);
        // principal-space feature: zero residual, score equals energy
        let principal = [1.0, -2.0, 0.0];
        let lead = m.residual_basis().column(0).into_owned();
        let p: Vec<f64> = {
            let v = DVector::from_column_slice(&principal);
            (v.clone() - &lead * lead.dot(&v)).iter().copied().collect()
        };
        let e = vim_score(&m, &p, &[0.3, 1.1]).unwrap();
        assert!((e - log_sum_exp(&[0.3, 1.1])).abs() < 1e-12);
        let doubled = m.with_alpha(2.0);
        let pen1 = log_sum_exp(&[0.0, 0.0]) - vim_score(&m, &dir, &[0.0, 0.0]).unwrap();
        let pen2 = log_sum_exp(&[0.0, 0.0]) - vim_score(&doubled, &dir, &[0.0, 0.0]).unwrap();
        assert!((pen2 - 2.0 * pen1).abs() < 1e-12);
    }

    #[test]
    fn default_dims() {
        assert_eq!(default_vim_dim(2048), 512);
        assert_eq!(default_vim_dim(1024), 512);
        assert_eq!(default_vim_dim(512), 256);
        assert_eq!(default_vim_dim(3), 2);
        assert_eq!(default_vim_dim(1), 0);
    }
}
