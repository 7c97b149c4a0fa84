//! End-to-end runs behind the CLI commands: evaluation tables, the
//! `(alpha, k)` sweep and the throughput benchmark.

use std::fmt::Write as _;
use std::time::Instant;

use rayon::prelude::*;

use crate::bank::{subsample_bank, ClassifierHead, FeatureBank};
use crate::detector::{Detector, DetectorConfig, ScoreName};
use crate::error::{Error, Result};
use crate::guidance::{scaled_topk, scaled_topk_batch, GuidanceIndex, TopK};
use crate::metrics::{DetectionMetrics, EvalTable};

/// Runs `f` on a pool of `threads` workers, or on the global pool.
pub fn with_threads<T: Send>(threads: Option<usize>, f: impl FnOnce() -> T + Send) -> Result<T> {
    match threads {
        None => Ok(f()),
        Some(0) => Err(Error::InvalidParameter("thread count must be at least 1".into())),
        Some(n) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build()
                .map_err(|e| Error::InvalidParameter(format!("thread pool: {e}")))?;
            Ok(pool.install(f))
        }
    }
}

/// Bank, head and evaluation sets of one run.
#[derive(Debug, Clone, Copy)]
pub struct EvalSets<'a> {
    pub bank: &'a FeatureBank,
    pub head: Option<&'a ClassifierHead>,
    pub id: &'a FeatureBank,
    pub ood: &'a [(String, FeatureBank)],
}

impl EvalSets<'_> {
    fn check(&self) -> Result<()> {
        if self.ood.is_empty() {
            return Err(Error::InvalidParameter("at least one OOD set is required".into()));
        }
        let k = self.head.map_or(self.bank.num_classes(), ClassifierHead::num_classes);
        let sets = std::iter::once(("id", self.id)).chain(self.ood.iter().map(|(n, b)| (n.as_str(), b)));
        for (name, set) in sets {
            if set.d() != self.bank.d() {
                return Err(Error::Dimension(format!(
                    "set {name:?} has d = {} but the bank has d = {}",
                    set.d(),
                    self.bank.d()
                )));
            }
            if k != 0 && set.num_classes() != 0 && set.num_classes() != k {
                return Err(Error::Dimension(format!(
                    "set {name:?} has K = {} but the bank has K = {k}",
                    set.num_classes()
                )));
            }
            if set.n() == 0 {
                return Err(Error::InvalidParameter(format!("set {name:?} is empty")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalOutput {
    pub table: EvalTable,
    pub warnings: Vec<String>,
}

fn eval_all(sets: &EvalSets<'_>, scores: &[ScoreName], config: DetectorConfig) -> Result<EvalOutput> {
    sets.check()?;
    let mut table = EvalTable::new();
    let mut warnings = Vec::new();
    for &name in scores {
        let det = Detector::fit(name, sets.bank, sets.head, config)?;
        warnings.extend(det.warnings().iter().cloned());
        let id = det.score(sets.id)?.scores;
        for (ood_name, ood) in sets.ood {
            let ood_scores = det.score(ood)?.scores;
            table.push(&det.label(), ood_name, DetectionMetrics::compute(&id, &ood_scores)?)?;
        }
    }
    Ok(EvalOutput { table, warnings })
}

/// Every score against every OOD set. The table does not depend on
/// `threads`.
pub fn run_eval(
    sets: &EvalSets<'_>,
    scores: &[ScoreName],
    config: DetectorConfig,
    threads: Option<usize>,
) -> Result<EvalOutput> {
    with_threads(threads, || eval_all(sets, scores, config))?
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub alpha: f64,
    pub k: usize,
    pub bank_rows: usize,
    pub k_effective: usize,
    /// Per OOD set.
    pub table: EvalTable,
    pub average: DetectionMetrics,
}

impl SweepRow {
    pub fn k_clamped(&self) -> bool {
        self.k > self.k_effective
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepTable {
    pub score: String,
    pub rows: Vec<SweepRow>,
}

impl SweepTable {
    /// One line per `(alpha, k)` with metrics averaged over the OOD sets.
    pub fn to_tsv(&self) -> String {
        let mut s = String::from("score\talpha\tk\tbank_rows\tk_effective\tk_clamped\tfpr95\tauroc\taupr\n");
        for r in &self.rows {
            let m = r.average;
            let _ = writeln!(
                s,
                "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}",
                self.score,
                r.alpha,
                r.k,
                r.bank_rows,
                r.k_effective,
                r.k_clamped(),
                m.fpr95,
                m.auroc,
                m.aupr
            );
        }
        s
    }

    pub fn to_table(&self) -> String {
        let mut s = format!(
            "{:>8}  {:>6}  {:>9}  {:>7}  {:>7}  {:>7}\n",
            "alpha", "k", "bank_rows", "FPR95", "AUROC", "AUPR"
        );
        for r in &self.rows {
            let m = r.average;
            let k = if r.k_clamped() {
                format!("{}*", r.k_effective)
            } else {
                r.k.to_string()
            };
            let _ = writeln!(
                s,
                "{:>8}  {:>6}  {:>9}  {:>7.2}  {:>7.2}  {:>7.2}",
                r.alpha,
                k,
                r.bank_rows,
                100.0 * m.fpr95,
                100.0 * m.auroc,
                100.0 * m.aupr
            );
        }
        if self.rows.iter().any(SweepRow::k_clamped) {
            s.push_str("* k clamped to the bank size\n");
        }
        s
    }
}

/// For each `alpha`, subsamples the bank with `seed`; for each `k`, fits
/// `score` and evaluates it.
#[allow(clippy::too_many_arguments)]
pub fn run_sweep(
    sets: &EvalSets<'_>,
    score: ScoreName,
    alphas: &[f64],
    ks: &[usize],
    seed: u64,
    config: DetectorConfig,
    threads: Option<usize>,
) -> Result<(SweepTable, Vec<String>)> {
    if alphas.is_empty() || ks.is_empty() {
        return Err(Error::InvalidParameter("sweep needs at least one alpha and one k".into()));
    }
    with_threads(threads, || {
        let mut rows = Vec::new();
        let mut warnings = Vec::new();
        for &alpha in alphas {
            let bank = subsample_bank(sets.bank, alpha, seed)?;
            for &k in ks {
                let sub = EvalSets { bank: &bank, ..*sets };
                let out = eval_all(&sub, &[score], DetectorConfig { k, ..config })?;
                warnings.extend(out.warnings);
                let label = out.table.scores()[0].to_string();
                rows.push(SweepRow {
                    alpha,
                    k,
                    bank_rows: bank.n(),
                    k_effective: k.min(bank.n()),
                    average: out.table.average(&label).expect("one row per OOD set"),
                    table: out.table,
                });
            }
        }
        let score = match config.react {
            Some(_) => format!("react+{score}"),
            None => score.to_string(),
        };
        Ok((SweepTable { score, rows }, warnings))
    })?
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BenchConfig {
    pub k: usize,
    pub repeats: usize,
    /// Workers for the multi-threaded pass (`None`: all cores).
    pub threads: Option<usize>,
    /// Queries timed one at a time for the latency percentiles, per repeat.
    pub latency_samples: usize,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig {
            k: 10,
            repeats: 3,
            threads: None,
            latency_samples: 100,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Timing {
    pub threads: usize,
    /// Batched throughput.
    pub queries_per_sec: f64,
    /// Single-query latency, milliseconds.
    pub p50_ms: f64,
    pub p99_ms: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchReport {
    pub bank_rows: usize,
    pub d: usize,
    pub queries: usize,
    pub repeats: usize,
    pub k: usize,
    pub single: Option<Timing>,
    pub multi: Option<Timing>,
    /// Top-k results agreed bitwise between the passes.
    pub identical: bool,
}

impl BenchReport {
    pub fn is_empty(&self) -> bool {
        self.single.is_none()
    }

    pub fn to_text(&self) -> String {
        let mut s = format!(
            "bank {} x {}, {} queries, k = {}, {} repeats\n",
            self.bank_rows, self.d, self.queries, self.k, self.repeats
        );
        for t in [self.single, self.multi].into_iter().flatten() {
            let _ = writeln!(
                s,
                "threads {:>3}  {:>10.1} queries/s  p50 {:.3} ms  p99 {:.3} ms",
                t.threads, t.queries_per_sec, t.p50_ms, t.p99_ms
            );
        }
        if !self.is_empty() {
            let _ = writeln!(s, "results identical across thread counts: {}", self.identical);
        }
        s
    }
}

/// Nearest-rank percentile of sorted samples.
fn nearest_rank(sorted: &[f64], p: f64) -> f64 {
    let rank = ((p / 100.0) * sorted.len() as f64).ceil() as usize;
    sorted[rank.clamp(1, sorted.len()) - 1]
}

fn time_pass(
    index: &GuidanceIndex,
    queries: &[f64],
    cfg: &BenchConfig,
) -> Result<(Timing, Vec<TopK>)> {
    let d = index.d();
    let m = queries.len() / d;
    let mut total = 0.0;
    let mut result = Vec::new();
    let mut latencies = Vec::new();
    let samples = cfg.latency_samples.min(m);
    for _ in 0..cfg.repeats {
        let start = Instant::now();
        result = scaled_topk_batch(index, queries, cfg.k)?;
        total += start.elapsed().as_secs_f64();
        let timed: Vec<f64> = (0..samples)
            .into_par_iter()
            .map(|j| {
                let start = Instant::now();
                scaled_topk(index, &queries[j * d..(j + 1) * d], cfg.k)
                    .map(|_| start.elapsed().as_secs_f64() * 1e3)
            })
            .collect::<Result<_>>()?;
        latencies.extend(timed);
    }
    latencies.sort_unstable_by(f64::total_cmp);
    let (p50_ms, p99_ms) = if latencies.is_empty() {
        (f64::NAN, f64::NAN)
    } else {
        (nearest_rank(&latencies, 50.0), nearest_rank(&latencies, 99.0))
    };
    let timing = Timing {
        threads: rayon::current_num_threads(),
        queries_per_sec: (m * cfg.repeats) as f64 / total,
        p50_ms,
        p99_ms,
    };
    Ok((timing, result))
}

/// Times [`scaled_topk`] over `queries` on one worker and on
/// `cfg.threads` workers. `repeats = 0` yields an empty report.
pub fn run_bench(index: &GuidanceIndex, queries: &[f64], cfg: BenchConfig) -> Result<BenchReport> {
    let d = index.d();
    if !queries.len().is_multiple_of(d) {
        return Err(Error::Dimension("queries are not a whole number of rows".into()));
    }
    let mut report = BenchReport {
        bank_rows: index.n(),
        d,
        queries: queries.len() / d,
        repeats: cfg.repeats,
        k: cfg.k,
        single: None,
        multi: None,
        identical: true,
    };
    if cfg.repeats == 0 || report.queries == 0 {
        return Ok(report);
    }
    let (single, a) = with_threads(Some(1), || time_pass(index, queries, &cfg))??;
    let (multi, b) = with_threads(cfg.threads, || time_pass(index, queries, &cfg))??;
    report.single = Some(single);
    report.multi = Some(multi);
    report.identical = a == b;
    Ok(report)
}
