//! Nearest-neighbor guidance: the guidance index, confidence-scaled top-k
//! search, the guided score and its ablation variants.

use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;

use crate::bank::{ClassifierHead, FeatureBank};
use crate::confidence::{base_confidence, batch_confidence, ConfidenceKind, ScoreReport};
use crate::distance::GaussianModel;
use crate::error::{Error, Result};
use crate::kernel::{self, Neighbor, QUERY_BLOCK};

/// L2-normalized bank features `z_i / |z_i|` with their base confidences
/// `s_i` and the precomputed rows `s_i * z_i / |z_i|`.
///
/// Immutable once built; share it freely across threads.
#[derive(Debug, Clone, PartialEq)]
pub struct GuidanceIndex {
    d: usize,
    normalized: Vec<f64>,
    confidences: Vec<f64>,
    scaled: Vec<f64>,
    base_kind: Option<ConfidenceKind>,
    negative_confidences: usize,
    source_alpha: Option<f64>,
    source_seed: Option<u64>,
}

fn normalize_rows(d: usize, features: &[f64]) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(features.len());
    for (row, z) in features.chunks_exact(d).enumerate() {
        let unit = kernel::normalized(z).ok_or(Error::ZeroNormRow(row))?;
        out.extend(unit);
    }
    Ok(out)
}

fn scale_rows(d: usize, normalized: &[f64], confidences: &[f64]) -> Vec<f64> {
    normalized
        .chunks_exact(d)
        .zip(confidences)
        .flat_map(|(row, &s)| row.iter().map(move |v| s * v))
        .collect()
}

impl GuidanceIndex {
    /// Normalizes the bank features and scores every row with `base_kind`.
    pub fn build(
        bank: &FeatureBank,
        head: Option<&ClassifierHead>,
        base_kind: ConfidenceKind,
    ) -> Result<Self> {
        Self::build_with(bank, head, base_kind, false)
    }

    /// [`GuidanceIndex::build`], optionally clamping bank confidences at 0.
    pub fn build_with(
        bank: &FeatureBank,
        head: Option<&ClassifierHead>,
        base_kind: ConfidenceKind,
        clamp_nonneg: bool,
    ) -> Result<Self> {
        let mut confidences = batch_confidence(base_kind, bank, head)?;
        if clamp_nonneg {
            confidences = confidences.clamp_nonneg();
        }
        let mut index = Self::from_features(bank.d(), bank.features(), confidences.values)?;
        index.base_kind = Some(base_kind);
        Ok(index)
    }

    /// Index over explicit features and confidences.
    pub fn from_features(d: usize, features: &[f64], confidences: Vec<f64>) -> Result<Self> {
        if d == 0 || !features.len().is_multiple_of(d) {
            return Err(Error::Dimension("features are not a whole number of rows".into()));
        }
        let n = features.len() / d;
        if n == 0 {
            return Err(Error::InvalidParameter("guidance bank is empty".into()));
        }
        if confidences.len() != n {
            return Err(Error::Dimension(format!(
                "{} confidences for {n} bank rows",
                confidences.len()
            )));
        }
        if let Some(index) = confidences.iter().position(|s| !s.is_finite()) {
            return Err(Error::NonFinite {
                section: "bank confidences",
                index,
            });
        }
        let normalized = normalize_rows(d, features)?;
        let scaled = scale_rows(d, &normalized, &confidences);
        let negative_confidences = confidences.iter().filter(|&&s| s < 0.0).count();
        Ok(GuidanceIndex {
            d,
            normalized,
            confidences,
            scaled,
            base_kind: None,
            negative_confidences,
            source_alpha: None,
            source_seed: None,
        })
    }

    /// Same features, new confidences.
    pub fn with_confidences(&self, confidences: Vec<f64>) -> Result<Self> {
        if confidences.len() != self.n() {
            return Err(Error::Dimension("confidence count differs from bank rows".into()));
        }
        let scaled = scale_rows(self.d, &self.normalized, &confidences);
        Ok(GuidanceIndex {
            negative_confidences: confidences.iter().filter(|&&s| s < 0.0).count(),
            confidences,
            scaled,
            base_kind: None,
            ..self.clone()
        })
    }

    /// Records the sampling that produced the bank.
    pub fn with_source(mut self, alpha_percent: f64, seed: u64) -> Self {
        self.source_alpha = Some(alpha_percent);
        self.source_seed = Some(seed);
        self
    }

    pub fn n(&self) -> usize {
        self.confidences.len()
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn normalized_features(&self) -> &[f64] {
        &self.normalized
    }

    pub fn normalized_row(&self, row: usize) -> &[f64] {
        &self.normalized[row * self.d..(row + 1) * self.d]
    }

    pub fn confidences(&self) -> &[f64] {
        &self.confidences
    }

    pub fn scaled_rows(&self) -> &[f64] {
        &self.scaled
    }

    pub fn base_kind(&self) -> Option<ConfidenceKind> {
        self.base_kind
    }

    /// Rows whose confidence is negative, outside the range the guided
    /// score's guarantees assume.
    pub fn negative_confidences(&self) -> usize {
        self.negative_confidences
    }

    pub fn source_alpha(&self) -> Option<f64> {
        self.source_alpha
    }

    pub fn source_seed(&self) -> Option<u64> {
        self.source_seed
    }

    fn unit_query(&self, query: &[f64]) -> Result<Vec<f64>> {
        if query.len() != self.d {
            return Err(Error::Dimension(format!(
                "query has d = {} but bank has d = {}",
                query.len(),
                self.d
            )));
        }
        kernel::normalized(query).ok_or(Error::ZeroNormQuery)
    }

    fn similarities(&self, rows: &[f64], query: &[f64]) -> Result<Vec<f64>> {
        let q = self.unit_query(query)?;
        let mut out = vec![0.0; self.n()];
        kernel::similarity_block(rows, &q, self.d, &mut out);
        Ok(out)
    }

    /// `sim(z_i, z)` for every bank row.
    pub fn plain_similarities(&self, query: &[f64]) -> Result<Vec<f64>> {
        self.similarities(&self.normalized, query)
    }

    /// `s_i * sim(z_i, z)` for every bank row.
    pub fn scaled_similarities(&self, query: &[f64]) -> Result<Vec<f64>> {
        self.similarities(&self.scaled, query)
    }

    fn effective_k(&self, k: usize) -> Result<(usize, bool)> {
        if k == 0 {
            return Err(Error::InvalidParameter("k must be at least 1".into()));
        }
        Ok((k.min(self.n()), k > self.n()))
    }

    fn batch_topk(&self, rows: &[f64], queries: &[f64], k: usize) -> Result<Vec<TopK>> {
        let d = self.d;
        if !queries.len().is_multiple_of(d) {
            return Err(Error::Dimension("queries are not a whole number of rows".into()));
        }
        let (k_eff, clamped) = self.effective_k(k)?;
        let n = self.n();
        let blocks: Vec<Result<Vec<TopK>>> = queries
            .par_chunks(QUERY_BLOCK * d)
            .map(|block| {
                let mut units = Vec::with_capacity(block.len());
                for q in block.chunks_exact(d) {
                    units.extend(self.unit_query(q)?);
                }
                let m = block.len() / d;
                let mut sims = vec![0.0; m * n];
                kernel::similarity_block(rows, &units, d, &mut sims);
                Ok(sims
                    .chunks_exact(n)
                    .map(|row| TopK {
                        neighbors: kernel::top_k(row, k_eff),
                        clamped,
                    })
                    .collect())
            })
            .collect();
        let mut out = Vec::with_capacity(queries.len() / d);
        for b in blocks {
            out.extend(b?);
        }
        Ok(out)
    }
}

/// Result of a top-k search. `clamped` is set when the requested `k`
/// exceeded the bank size and was reduced to `n`.
#[derive(Debug, Clone, PartialEq)]
pub struct TopK {
    pub neighbors: Vec<Neighbor>,
    pub clamped: bool,
}

impl TopK {
    /// Arithmetic mean of the selected values.
    pub fn mean(&self) -> f64 {
        self.neighbors.iter().map(|n| n.value).sum::<f64>() / self.neighbors.len() as f64
    }

    /// Value of the last (k-th) neighbor.
    pub fn last(&self) -> f64 {
        self.neighbors.last().map_or(f64::NAN, |n| n.value)
    }
}

/// The `k` largest confidence-scaled similarities `s_i * sim(z_i, z)`, ties
/// to the lower bank row. `k > n` is clamped to `n` and flagged.
pub fn scaled_topk(index: &GuidanceIndex, query: &[f64], k: usize) -> Result<TopK> {
    let (k_eff, clamped) = index.effective_k(k)?;
    let sims = index.scaled_similarities(query)?;
    Ok(TopK {
        neighbors: kernel::top_k(&sims, k_eff),
        clamped,
    })
}

/// [`scaled_topk`] for a row-major batch of queries; bitwise identical to the
/// per-query results and independent of the thread count.
pub fn scaled_topk_batch(index: &GuidanceIndex, queries: &[f64], k: usize) -> Result<Vec<TopK>> {
    index.batch_topk(&index.scaled, queries, k)
}

/// Plain cosine top-k (no confidence scaling), same tie rule.
pub fn plain_topk(index: &GuidanceIndex, query: &[f64], k: usize) -> Result<TopK> {
    let (k_eff, clamped) = index.effective_k(k)?;
    let sims = index.plain_similarities(query)?;
    Ok(TopK {
        neighbors: kernel::top_k(&sims, k_eff),
        clamped,
    })
}

pub fn plain_topk_batch(index: &GuidanceIndex, queries: &[f64], k: usize) -> Result<Vec<TopK>> {
    index.batch_topk(&index.normalized, queries, k)
}

/// `G(x) = (1/k) sum_{i<=k} s_(i) sim(z_(i), z)` over the scaled ordering.
pub fn guidance_term(index: &GuidanceIndex, query: &[f64], k: usize) -> Result<f64> {
    Ok(scaled_topk(index, query, k)?.mean())
}

/// `S_base(x) * G(x)`.
pub fn nnguide_score(
    index: &GuidanceIndex,
    query_feature: &[f64],
    query_logits: &[f64],
    head: Option<&ClassifierHead>,
    base_kind: ConfidenceKind,
    k: usize,
) -> Result<f64> {
    let base = base_confidence(base_kind, query_logits, query_feature, head)?;
    Ok(base * guidance_term(index, query_feature, k)?)
}

/// Score name for a guided score on a given base.
pub fn guided_name(base_kind: ConfidenceKind) -> String {
    match base_kind {
        ConfidenceKind::Energy => "nnguide".to_string(),
        other => format!("nnguide-{other}"),
    }
}

pub(crate) fn query_bases(
    eval: &FeatureBank,
    head: Option<&ClassifierHead>,
    base_kind: ConfidenceKind,
) -> Result<Vec<f64>> {
    if !eval.has_logits() {
        return Err(Error::Missing("logits in evaluated bank"));
    }
    (0..eval.n())
        .into_par_iter()
        .map(|i| base_confidence(base_kind, eval.require_logits(i)?, eval.feature(i), head))
        .collect()
}

/// Guided scores for every row of `eval`.
pub fn batch_guided_scores(
    index: &GuidanceIndex,
    eval: &FeatureBank,
    head: Option<&ClassifierHead>,
    base_kind: ConfidenceKind,
    k: usize,
) -> Result<ScoreReport> {
    let bases = query_bases(eval, head, base_kind)?;
    let tops = scaled_topk_batch(index, eval.features(), k)?;
    let clamped = tops.first().is_some_and(|t| t.clamped);
    let scores = bases.iter().zip(&tops).map(|(b, t)| b * t.mean()).collect();
    Ok(ScoreReport::new(guided_name(base_kind), scores)
        .with_param("k", k)
        .with_param("k_effective", k.min(index.n()))
        .with_param("k_clamped", clamped)
        .with_param("base", base_kind))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum FusionKind {
    Product,
    Sum,
    Max,
    Min,
}

impl FusionKind {
    pub const ALL: [FusionKind; 4] = [
        FusionKind::Product,
        FusionKind::Sum,
        FusionKind::Max,
        FusionKind::Min,
    ];

    pub fn name(self) -> &'static str {
        match self {
            FusionKind::Product => "product",
            FusionKind::Sum => "sum",
            FusionKind::Max => "max",
            FusionKind::Min => "min",
        }
    }
}

/// Min-max coefficients fitted on the bank.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MinMax {
    pub min: f64,
    pub max: f64,
}

impl MinMax {
    pub fn fit(values: &[f64]) -> Result<Self> {
        let min = values.iter().copied().fold(f64::INFINITY, f64::min);
        let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if !(max > min) {
            return Err(Error::Numerical(format!(
                "min-max normalization needs a spread of scores, got [{min}, {max}]"
            )));
        }
        Ok(MinMax { min, max })
    }

    pub fn apply(&self, v: f64) -> f64 {
        (v - self.min) / (self.max - self.min)
    }
}

/// Coefficients for the naive fusions of KNN with the base confidence.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FusionCoefficients {
    pub knn: MinMax,
    pub base: MinMax,
}

/// Scores the bank's own rows (self-match included) and fits min-max
/// coefficients for the KNN and base-confidence constituents.
pub fn fit_fusion(
    index: &GuidanceIndex,
    bank: &FeatureBank,
    head: Option<&ClassifierHead>,
    base_kind: ConfidenceKind,
    k: usize,
) -> Result<FusionCoefficients> {
    let bases = query_bases(bank, head, base_kind)?;
    let knn: Vec<f64> = plain_topk_batch(index, bank.features(), k)?
        .iter()
        .map(TopK::last)
        .collect();
    Ok(FusionCoefficients {
        knn: MinMax::fit(&knn)?,
        base: MinMax::fit(&bases)?,
    })
}

/// Component ablations of the guided score.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Ablation {
    /// Mean plain cosine similarity of the `k` nearest neighbors.
    KnnAvg,
    /// `G(x)` alone.
    GuidanceOnly,
    /// `S_base(x) * knn_avg(x)`.
    NoConfScaling,
    /// `S_base(x) * exp(-min_c mahal^2(z) / (2d))`.
    MahalGuidance,
    Fuse(FusionKind),
}

impl Ablation {
    pub const ALL: [Ablation; 8] = [
        Ablation::KnnAvg,
        Ablation::GuidanceOnly,
        Ablation::NoConfScaling,
        Ablation::MahalGuidance,
        Ablation::Fuse(FusionKind::Product),
        Ablation::Fuse(FusionKind::Sum),
        Ablation::Fuse(FusionKind::Max),
        Ablation::Fuse(FusionKind::Min),
    ];

    pub fn name(self) -> &'static str {
        match self {
            Ablation::KnnAvg => "knn-avg",
            Ablation::GuidanceOnly => "guidance-only",
            Ablation::NoConfScaling => "no-scale",
            Ablation::MahalGuidance => "mahal-guide",
            Ablation::Fuse(FusionKind::Product) => "fuse-product",
            Ablation::Fuse(FusionKind::Sum) => "fuse-sum",
            Ablation::Fuse(FusionKind::Max) => "fuse-max",
            Ablation::Fuse(FusionKind::Min) => "fuse-min",
        }
    }

    pub fn needs_base(self) -> bool {
        !matches!(self, Ablation::KnnAvg | Ablation::GuidanceOnly)
    }

    pub fn needs_gaussian(self) -> bool {
        self == Ablation::MahalGuidance
    }

    pub fn needs_fusion(self) -> bool {
        matches!(
            self,
            Ablation::Fuse(FusionKind::Sum | FusionKind::Max | FusionKind::Min)
        )
    }

    /// Combines precomputed per-query quantities.
    pub fn combine(self, parts: &QueryParts, fusion: Option<&FusionCoefficients>) -> Result<f64> {
        let need = |v: Option<f64>, what: &'static str| v.ok_or(Error::Missing(what));
        Ok(match self {
            Ablation::KnnAvg => need(parts.knn_avg, "plain top-k")?,
            Ablation::GuidanceOnly => need(parts.guidance, "guidance term")?,
            Ablation::NoConfScaling => {
                need(parts.base, "base confidence")? * need(parts.knn_avg, "plain top-k")?
            }
            Ablation::MahalGuidance => {
                let sq = need(parts.mahal_sq, "fitted gaussian")?;
                need(parts.base, "base confidence")? * (-sq / (2.0 * parts.d as f64)).exp()
            }
            Ablation::Fuse(kind) => {
                let knn = need(parts.knn_kth, "plain top-k")?;
                let base = need(parts.base, "base confidence")?;
                if kind == FusionKind::Product {
                    knn * base
                } else {
                    let c = fusion.ok_or(Error::Missing("fitted fusion coefficients"))?;
                    let (a, b) = (c.knn.apply(knn), c.base.apply(base));
                    match kind {
                        FusionKind::Sum => a + b,
                        FusionKind::Max => a.max(b),
                        FusionKind::Min => a.min(b),
                        FusionKind::Product => unreachable!(),
                    }
                }
            }
        })
    }
}

impl fmt::Display for Ablation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Ablation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ablation::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| Error::UnknownScore(s.to_string()))
    }
}

/// Per-query quantities the guided score and its ablations are built from.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct QueryParts {
    pub d: usize,
    pub base: Option<f64>,
    /// Mean of the scaled top-k.
    pub guidance: Option<f64>,
    /// Mean of the plain top-k.
    pub knn_avg: Option<f64>,
    /// k-th plain similarity.
    pub knn_kth: Option<f64>,
    pub mahal_sq: Option<f64>,
}

/// Everything a scalar ablation evaluation needs besides the query.
#[derive(Debug, Clone, Copy)]
pub struct AblationContext<'a> {
    pub index: &'a GuidanceIndex,
    pub head: Option<&'a ClassifierHead>,
    pub base_kind: ConfidenceKind,
    pub k: usize,
    pub gaussian: Option<&'a GaussianModel>,
    pub fusion: Option<&'a FusionCoefficients>,
}

pub fn ablation_score(
    kind: Ablation,
    ctx: &AblationContext<'_>,
    feature: &[f64],
    logits: &[f64],
) -> Result<f64> {
    let mut parts = QueryParts {
        d: feature.len(),
        ..QueryParts::default()
    };
    if kind.needs_base() {
        parts.base = Some(base_confidence(ctx.base_kind, logits, feature, ctx.head)?);
    }
    match kind {
        Ablation::GuidanceOnly => {
            parts.guidance = Some(guidance_term(ctx.index, feature, ctx.k)?);
        }
        Ablation::MahalGuidance => {
            let g = ctx.gaussian.ok_or(Error::Missing("fitted gaussian"))?;
            parts.mahal_sq = Some(g.min_sq_distance(feature)?);
        }
        _ => {
            let top = plain_topk(ctx.index, feature, ctx.k)?;
            parts.knn_avg = Some(top.mean());
            parts.knn_kth = Some(top.last());
        }
    }
    kind.combine(&parts, ctx.fusion)
}
