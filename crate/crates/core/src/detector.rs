//! Named detectors: fit once on a bank, then score any evaluated set.

use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;

use crate::bank::{ClassifierHead, FeatureBank};
use crate::confidence::{ConfidenceKind, ScoreReport};
use crate::distance::{default_vim_dim, fit_gaussian, fit_vim, gaussian_score, vim_score, GaussianModel, VimModel};
use crate::error::{Error, Result};
use crate::guidance::{
    fit_fusion, guided_name, plain_topk_batch, query_bases, scaled_topk_batch, Ablation,
    FusionCoefficients, GuidanceIndex, QueryParts, TopK,
};
use crate::truncation::{apply_react, clip_bank, fit_react, ReactThreshold, DEFAULT_PERCENTILE};

pub const DEFAULT_K: usize = 10;

/// Every score the toolkit can evaluate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ScoreName {
    Base(ConfidenceKind),
    Knn,
    Mahalanobis,
    Ssd,
    Vim,
    NnGuide(ConfidenceKind),
    Ablation(Ablation),
}

impl ScoreName {
    pub fn all() -> Vec<ScoreName> {
        let mut out: Vec<ScoreName> = ConfidenceKind::ALL.into_iter().map(ScoreName::Base).collect();
        out.extend([ScoreName::Knn, ScoreName::Mahalanobis, ScoreName::Ssd, ScoreName::Vim]);
        out.extend(ConfidenceKind::ALL.into_iter().map(ScoreName::NnGuide));
        out.extend(Ablation::ALL.into_iter().map(ScoreName::Ablation));
        out
    }

    pub fn name(self) -> String {
        match self {
            ScoreName::Base(kind) => kind.name().to_string(),
            ScoreName::Knn => "knn".into(),
            ScoreName::Mahalanobis => "mahalanobis".into(),
            ScoreName::Ssd => "ssd".into(),
            ScoreName::Vim => "vim".into(),
            ScoreName::NnGuide(kind) => guided_name(kind),
            ScoreName::Ablation(a) => a.name().into(),
        }
    }

    /// Whether the classifier head must be available.
    pub fn needs_head(self, config: &DetectorConfig) -> bool {
        let base_needs = |kind: ConfidenceKind| kind.needs_head() || config.react.is_some();
        match self {
            ScoreName::Base(kind) | ScoreName::NnGuide(kind) => base_needs(kind),
            ScoreName::Vim => true,
            ScoreName::Knn | ScoreName::Mahalanobis | ScoreName::Ssd => false,
            ScoreName::Ablation(a) => {
                (a.needs_base() || a == Ablation::GuidanceOnly) && base_needs(config.base_kind)
            }
        }
    }
}

impl fmt::Display for ScoreName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.name())
    }
}

impl FromStr for ScoreName {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ScoreName::all()
            .into_iter()
            .find(|n| n.name() == s)
            .ok_or_else(|| Error::UnknownScore(s.to_string()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReactConfig {
    pub percentile: f64,
    /// Recompute bank confidences from clipped features (`true`) or keep the
    /// stored bank logits (`false`). Features are clipped either way.
    pub recompute_bank_confidence: bool,
}

impl Default for ReactConfig {
    fn default() -> Self {
        ReactConfig {
            percentile: DEFAULT_PERCENTILE,
            recompute_bank_confidence: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DetectorConfig {
    pub k: usize,
    /// Base confidence of the ablation variants.
    pub base_kind: ConfidenceKind,
    pub vim_dim: Option<usize>,
    pub react: Option<ReactConfig>,
    /// Clamp bank confidences at 0 before guidance.
    pub clamp_nonneg: bool,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        DetectorConfig {
            k: DEFAULT_K,
            base_kind: ConfidenceKind::Energy,
            vim_dim: None,
            react: None,
            clamp_nonneg: false,
        }
    }
}

#[derive(Debug, Clone)]
enum Model {
    Base(ConfidenceKind),
    Knn(GuidanceIndex),
    Gaussian(GaussianModel),
    Vim(VimModel),
    Guided(GuidanceIndex, ConfidenceKind),
    Ablation {
        kind: Ablation,
        index: GuidanceIndex,
        gaussian: Option<GaussianModel>,
        fusion: Option<FusionCoefficients>,
    },
}

/// A score fitted to one bank.
#[derive(Debug, Clone)]
pub struct Detector {
    name: ScoreName,
    config: DetectorConfig,
    head: Option<ClassifierHead>,
    react: Option<ReactThreshold>,
    d: usize,
    k_effective: usize,
    model: Model,
    warnings: Vec<String>,
}

fn unit_index(bank: &FeatureBank) -> Result<GuidanceIndex> {
    GuidanceIndex::from_features(bank.d(), bank.features(), vec![1.0; bank.n()])
}

impl Detector {
    pub fn fit(
        name: ScoreName,
        bank: &FeatureBank,
        head: Option<&ClassifierHead>,
        config: DetectorConfig,
    ) -> Result<Detector> {
        if config.k == 0 {
            return Err(Error::InvalidParameter("k must be at least 1".into()));
        }
        if let Some(h) = head {
            h.check_bank(bank)?;
        }
        if name.needs_head(&config) && head.is_none() {
            return Err(Error::Missing("classifier head"));
        }
        let mut warnings = Vec::new();
        let react = config
            .react
            .map(|r| fit_react(bank, r.percentile))
            .transpose()?;
        let fit_bank = match (&react, config.react) {
            (Some(t), Some(r)) if r.recompute_bank_confidence => clip_bank(bank, t, head)?,
            (Some(t), Some(_)) => clip_bank(bank, t, None)?,
            _ => bank.clone(),
        };
        let fit_bank = Self::eval_view(&fit_bank, head)?;
        if bank.n() == 0 {
            return Err(Error::InvalidParameter("bank is empty".into()));
        }
        let k_effective = config.k.min(bank.n());
        let uses_k = matches!(
            name,
            ScoreName::Knn | ScoreName::NnGuide(_) | ScoreName::Ablation(_)
        );
        if uses_k && config.k > bank.n() {
            warnings.push(format!(
                "{name}: k = {} exceeds the bank size {}; using k = {}",
                config.k,
                bank.n(),
                k_effective
            ));
        }
        let guided_index = |kind: ConfidenceKind, warnings: &mut Vec<String>| -> Result<GuidanceIndex> {
            let index = GuidanceIndex::build_with(&fit_bank, head, kind, config.clamp_nonneg)?;
            if index.negative_confidences() > 0 {
                warnings.push(format!(
                    "{name}: {} of {} bank confidences are negative",
                    index.negative_confidences(),
                    index.n()
                ));
            }
            Ok(index)
        };
        let model = match name {
            ScoreName::Base(kind) => Model::Base(kind),
            ScoreName::Knn => Model::Knn(unit_index(&fit_bank)?),
            ScoreName::Mahalanobis => Model::Gaussian(fit_gaussian(&fit_bank, true)?),
            ScoreName::Ssd => Model::Gaussian(fit_gaussian(&fit_bank, false)?),
            ScoreName::Vim => {
                let head = head.ok_or(Error::Missing("classifier head"))?;
                let dim = config.vim_dim.unwrap_or_else(|| default_vim_dim(bank.d()));
                Model::Vim(fit_vim(&fit_bank, head, dim)?)
            }
            ScoreName::NnGuide(kind) => Model::Guided(guided_index(kind, &mut warnings)?, kind),
            ScoreName::Ablation(kind) => {
                let index = if kind == Ablation::GuidanceOnly {
                    guided_index(config.base_kind, &mut warnings)?
                } else {
                    unit_index(&fit_bank)?
                };
                let gaussian = if kind.needs_gaussian() {
                    Some(fit_gaussian(&fit_bank, true)?)
                } else {
                    None
                };
                let fusion = if kind.needs_fusion() {
                    Some(fit_fusion(&index, &fit_bank, head, config.base_kind, k_effective)?)
                } else {
                    None
                };
                Model::Ablation {
                    kind,
                    index,
                    gaussian,
                    fusion,
                }
            }
        };
        Ok(Detector {
            name,
            config,
            head: head.cloned(),
            react,
            d: bank.d(),
            k_effective,
            model,
            warnings,
        })
    }

    pub fn name(&self) -> ScoreName {
        self.name
    }

    /// Label used in result tables, with a `react+` prefix when clipping.
    pub fn label(&self) -> String {
        match self.react {
            Some(_) => format!("react+{}", self.name),
            None => self.name.to_string(),
        }
    }

    pub fn config(&self) -> &DetectorConfig {
        &self.config
    }

    pub fn react_threshold(&self) -> Option<&ReactThreshold> {
        self.react.as_ref()
    }

    pub fn k_effective(&self) -> usize {
        self.k_effective
    }

    pub fn warnings(&self) -> &[String] {
        &self.warnings
    }

    /// Guidance index, for detectors that have one.
    pub fn index(&self) -> Option<&GuidanceIndex> {
        match &self.model {
            Model::Knn(i) | Model::Guided(i, _) => Some(i),
            Model::Ablation { index, .. } => Some(index),
            _ => None,
        }
    }

    /// Logits from the head when the set has none.
    fn eval_view(eval: &FeatureBank, head: Option<&ClassifierHead>) -> Result<FeatureBank> {
        match head {
            Some(h) if !eval.has_logits() => eval.with_head_logits(h),
            _ => Ok(eval.clone()),
        }
    }

    fn prepare(&self, eval: &FeatureBank) -> Result<FeatureBank> {
        if eval.d() != self.d {
            return Err(Error::Dimension(format!(
                "evaluated set has d = {} but the bank has d = {}",
                eval.d(),
                self.d
            )));
        }
        if let Some(h) = &self.head {
            h.check_bank(eval)?;
        }
        match &self.react {
            Some(t) => {
                let clipped = eval.with_features(apply_react(eval.features(), t))?;
                match &self.head {
                    Some(h) => clipped.with_head_logits(h),
                    None => Ok(clipped),
                }
            }
            None => Self::eval_view(eval, self.head.as_ref()),
        }
    }

    /// Scores every row of `eval`. Results do not depend on the thread count.
    pub fn score(&self, eval: &FeatureBank) -> Result<ScoreReport> {
        let eval = self.prepare(eval)?;
        let head = self.head.as_ref();
        let k = self.k_effective;
        let scores: Vec<f64> = match &self.model {
            Model::Base(kind) => query_bases(&eval, head, *kind)?,
            Model::Knn(index) => plain_topk_batch(index, eval.features(), k)?
                .iter()
                .map(TopK::last)
                .collect(),
            Model::Gaussian(g) => (0..eval.n())
                .into_par_iter()
                .map(|i| gaussian_score(g, eval.feature(i)))
                .collect::<Result<_>>()?,
            Model::Vim(v) => {
                if !eval.has_logits() {
                    return Err(Error::Missing("logits in evaluated bank"));
                }
                (0..eval.n())
                    .into_par_iter()
                    .map(|i| vim_score(v, eval.feature(i), eval.require_logits(i)?))
                    .collect::<Result<_>>()?
            }
            Model::Guided(index, kind) => {
                let bases = query_bases(&eval, head, *kind)?;
                let tops = scaled_topk_batch(index, eval.features(), k)?;
                bases.iter().zip(&tops).map(|(b, t)| b * t.mean()).collect()
            }
            Model::Ablation {
                kind,
                index,
                gaussian,
                fusion,
            } => {
                let n = eval.n();
                let mut parts = vec![
                    QueryParts {
                        d: self.d,
                        ..QueryParts::default()
                    };
                    n
                ];
                if kind.needs_base() {
                    let bases = query_bases(&eval, head, self.config.base_kind)?;
                    for (p, b) in parts.iter_mut().zip(bases) {
                        p.base = Some(b);
                    }
                }
                match kind {
                    Ablation::GuidanceOnly => {
                        let tops = scaled_topk_batch(index, eval.features(), k)?;
                        for (p, t) in parts.iter_mut().zip(&tops) {
                            p.guidance = Some(t.mean());
                        }
                    }
                    Ablation::MahalGuidance => {
                        let g = gaussian.as_ref().ok_or(Error::Missing("fitted gaussian"))?;
                        let sq: Vec<f64> = (0..n)
                            .into_par_iter()
                            .map(|i| g.min_sq_distance(eval.feature(i)))
                            .collect::<Result<_>>()?;
                        for (p, s) in parts.iter_mut().zip(sq) {
                            p.mahal_sq = Some(s);
                        }
                    }
                    _ => {
                        let tops = plain_topk_batch(index, eval.features(), k)?;
                        for (p, t) in parts.iter_mut().zip(&tops) {
                            p.knn_avg = Some(t.mean());
                            p.knn_kth = Some(t.last());
                        }
                    }
                }
                parts
                    .iter()
                    .map(|p| kind.combine(p, fusion.as_ref()))
                    .collect::<Result<_>>()?
            }
        };
        let mut report = ScoreReport::new(self.label(), scores);
        if matches!(
            self.name,
            ScoreName::Knn | ScoreName::NnGuide(_) | ScoreName::Ablation(_)
        ) {
            report = report
                .with_param("k", self.config.k)
                .with_param("k_effective", self.k_effective)
                .with_param("k_clamped", self.config.k > self.k_effective);
        }
        if let ScoreName::Ablation(a) = self.name {
            if a.needs_base() || a == Ablation::GuidanceOnly {
                report = report.with_param("base", self.config.base_kind);
            }
        }
        if let Some(t) = &self.react {
            report = report
                .with_param("react_percentile", t.percentile)
                .with_param("react_c", t.c);
        }
        Ok(report)
    }
}
