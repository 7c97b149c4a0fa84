//! `nnguide` command-line front end.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use nnguide::bank::{read_csv, subsample_bank, subsample_bank_stratified, CsvLayout};
use nnguide::format::{read_bank, write_bank};
use nnguide::pipeline::{run_bench, run_eval, run_sweep, with_threads, BenchConfig, EvalSets};
use nnguide::toy::{grid_scores, ToyConfig, ToyLab};
use nnguide::{
    synth, ClassifierHead, ConfidenceKind, DetectorConfig, Error, FeatureBank, GuidanceIndex,
    ReactConfig, ScoreName,
};

#[derive(Parser)]
#[command(name = "nnguide", version, about = "Nearest-neighbor guided OOD scoring over feature banks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Subsample a training bank (OODB or CSV) into a guidance bank.
    Bank(BankArgs),
    /// Score ID and OOD sets and report FPR95 / AUROC / AUPR.
    Eval(EvalArgs),
    /// Evaluate one score over a grid of bank fractions and k.
    Sweep(SweepArgs),
    /// Time top-k guidance search.
    Bench(BenchArgs),
    /// Run the synthetic 2-D lab and write score maps.
    Toy(ToyArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Table,
    Tsv,
}

#[derive(Args)]
struct BankArgs {
    /// Training bank, OODB or CSV.
    #[arg(long)]
    train: PathBuf,
    /// Percentage of rows to keep, in (0, 100].
    #[arg(long, default_value_t = 1.0)]
    alpha: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Sample each class separately (needs labels).
    #[arg(long)]
    stratified: bool,
    /// Output OODB file; provenance goes to `<out>.provenance`.
    #[arg(long)]
    out: PathBuf,
    /// Read `--train` as CSV with this many feature columns.
    #[arg(long)]
    csv_features: Option<usize>,
    /// Logit columns following the features (CSV only).
    #[arg(long, default_value_t = 0)]
    csv_logits: usize,
    /// Last CSV column is an integer label.
    #[arg(long)]
    csv_label: bool,
    /// Skip the first CSV line.
    #[arg(long)]
    csv_header: bool,
}

#[derive(Args)]
struct ScoreArgs {
    /// Guidance bank (OODB). Its head is used when flagged.
    #[arg(long)]
    bank: PathBuf,
    /// ID evaluation set (OODB). Supplies the head if the bank has none.
    #[arg(long)]
    id: PathBuf,
    /// OOD evaluation set as `name=path`; repeatable.
    #[arg(long = "ood", value_name = "NAME=PATH", required = true)]
    ood: Vec<String>,
    /// Clip features with ReAct at this percentile (90 when given bare).
    #[arg(long, value_name = "PCT", num_args = 0..=1, default_missing_value = "90", require_equals = true)]
    react: Option<f64>,
    /// With --react, keep the stored bank logits instead of recomputing them.
    #[arg(long)]
    react_keep_bank_logits: bool,
    /// ViM principal subspace dimension.
    #[arg(long)]
    vim_dim: Option<usize>,
    /// Base confidence of the ablation variants.
    #[arg(long, default_value = "energy")]
    base: ConfidenceKind,
    /// Clamp bank confidences at zero before guidance.
    #[arg(long)]
    clamp_nonneg: bool,
    /// Write the TSV table here.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Standard output format.
    #[arg(long, value_enum, default_value_t = Format::Table)]
    format: Format,
    /// Worker threads (default: all cores).
    #[arg(long)]
    threads: Option<usize>,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    common: ScoreArgs,
    /// Nearest neighbours per query.
    #[arg(long, default_value_t = nnguide::detector::DEFAULT_K)]
    k: usize,
    /// Comma-separated score names.
    #[arg(long, value_delimiter = ',', default_value = "nnguide")]
    scores: Vec<ScoreName>,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    common: ScoreArgs,
    #[arg(long, default_value = "nnguide")]
    score: ScoreName,
    /// Comma-separated bank percentages.
    #[arg(long = "alpha", value_delimiter = ',', default_value = "0.5,1,5,10,25,50,100")]
    alphas: Vec<f64>,
    /// Comma-separated k values.
    #[arg(long = "k", value_delimiter = ',', default_value = "1,10,20,50,100")]
    ks: Vec<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct BenchArgs {
    /// Bank to search (OODB with logits or head). Without it a random
    /// `--rows x --dim` bank is generated.
    #[arg(long)]
    bank: Option<PathBuf>,
    #[arg(long, default_value_t = 12_800)]
    rows: usize,
    #[arg(long, default_value_t = 2048)]
    dim: usize,
    /// Query set (OODB). Defaults to random queries.
    #[arg(long)]
    queries: Option<PathBuf>,
    #[arg(long, default_value_t = 256)]
    num_queries: usize,
    #[arg(long, default_value_t = nnguide::detector::DEFAULT_K)]
    k: usize,
    #[arg(long, default_value_t = 3)]
    repeats: usize,
    /// Queries timed individually per repeat for latency percentiles.
    #[arg(long, default_value_t = 100)]
    latency_samples: usize,
    #[arg(long, default_value = "energy")]
    base: ConfidenceKind,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Workers of the multi-threaded pass (default: all cores).
    #[arg(long)]
    threads: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ToyArgs {
    /// Output directory for `<score>.pgm` and `<score>.csv`.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_delimiter = ',', default_value = "nnguide,energy,knn")]
    scores: Vec<ScoreName>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = nnguide::detector::DEFAULT_K)]
    k: usize,
    #[arg(long)]
    resolution: Option<usize>,
    #[arg(long)]
    extent: Option<f64>,
    #[arg(long, value_enum, default_value_t = Format::Table)]
    format: Format,
    #[arg(long)]
    threads: Option<usize>,
}

/// Failure with its exit code.
struct Failure {
    code: u8,
    message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure {
            code: e.exit_code() as u8,
            message: e.to_string(),
        }
    }
}

fn usage(message: impl Into<String>) -> Failure {
    Failure {
        code: 2,
        message: message.into(),
    }
}

type CliResult<T> = Result<T, Failure>;

fn write_file(path: &Path, bytes: impl AsRef<[u8]>) -> CliResult<()> {
    std::fs::write(path, bytes).map_err(|e| {
        Failure::from(Error::Io {
            path: path.to_path_buf(),
            source: e,
        })
    })
}

fn parse_ood(spec: &str) -> CliResult<(String, PathBuf)> {
    match spec.split_once('=') {
        Some((name, path)) if !name.is_empty() && !path.is_empty() => {
            Ok((name.to_string(), PathBuf::from(path)))
        }
        _ => Err(usage(format!("--ood expects NAME=PATH, got {spec:?}"))),
    }
}

fn emit(text_table: String, tsv: String, format: Format, out: Option<&Path>) -> CliResult<()> {
    if let Some(path) = out {
        write_file(path, &tsv)?;
    }
    match format {
        Format::Table => print!("{text_table}"),
        Format::Tsv => print!("{tsv}"),
    }
    Ok(())
}

fn warn_all(warnings: &[String]) {
    let mut seen = std::collections::HashSet::new();
    for w in warnings {
        if seen.insert(w) {
            eprintln!("warning: {w}");
        }
    }
}

fn cmd_bank(args: BankArgs) -> CliResult<()> {
    let (bank, head) = match args.csv_features {
        Some(features) => {
            let layout = CsvLayout {
                feature_columns: features,
                logit_columns: args.csv_logits,
                has_label: args.csv_label,
                num_classes: None,
                has_header: args.csv_header,
            };
            (read_csv(&args.train, layout)?, None)
        }
        None => read_bank(&args.train)?,
    };
    let sub = if args.stratified {
        subsample_bank_stratified(&bank, args.alpha, args.seed)?
    } else {
        subsample_bank(&bank, args.alpha, args.seed)?
    };
    write_bank(&args.out, &sub, head.as_ref())?;
    let mut prov = String::new();
    let _ = writeln!(prov, "source\t{}", args.train.display());
    let _ = writeln!(prov, "alpha\t{}", args.alpha);
    let _ = writeln!(prov, "seed\t{}", args.seed);
    let _ = writeln!(prov, "stratified\t{}", args.stratified);
    let _ = writeln!(prov, "rows_in\t{}", bank.n());
    let _ = writeln!(prov, "rows_out\t{}", sub.n());
    let _ = writeln!(prov, "rng\tchacha8 seed_from_u64, partial fisher-yates, ascending row order");
    let mut side = args.out.clone().into_os_string();
    side.push(".provenance");
    write_file(Path::new(&side), prov)?;
    eprintln!("wrote {} of {} rows to {}", sub.n(), bank.n(), args.out.display());
    Ok(())
}

struct Loaded {
    bank: FeatureBank,
    head: Option<ClassifierHead>,
    id: FeatureBank,
    ood: Vec<(String, FeatureBank)>,
}

fn load_sets(args: &ScoreArgs) -> CliResult<Loaded> {
    let specs = args.ood.iter().map(|s| parse_ood(s)).collect::<CliResult<Vec<_>>>()?;
    let (bank, bank_head) = read_bank(&args.bank)?;
    let (id, id_head) = read_bank(&args.id)?;
    let mut ood = Vec::with_capacity(specs.len());
    for (name, path) in specs {
        if ood.iter().any(|(n, _): &(String, FeatureBank)| *n == name) {
            return Err(usage(format!("OOD set name {name:?} given twice")));
        }
        ood.push((name, read_bank(&path)?.0));
    }
    Ok(Loaded {
        bank,
        head: bank_head.or(id_head),
        id,
        ood,
    })
}

fn detector_config(args: &ScoreArgs, k: usize) -> DetectorConfig {
    DetectorConfig {
        k,
        base_kind: args.base,
        vim_dim: args.vim_dim,
        react: args.react.map(|percentile| ReactConfig {
            percentile,
            recompute_bank_confidence: !args.react_keep_bank_logits,
        }),
        clamp_nonneg: args.clamp_nonneg,
    }
}

fn cmd_eval(args: EvalArgs) -> CliResult<()> {
    let c = &args.common;
    let data = load_sets(c)?;
    let sets = EvalSets {
        bank: &data.bank,
        head: data.head.as_ref(),
        id: &data.id,
        ood: &data.ood,
    };
    let out = run_eval(&sets, &args.scores, detector_config(c, args.k), c.threads)?;
    warn_all(&out.warnings);
    emit(out.table.to_table(), out.table.to_tsv(), c.format, c.out.as_deref())
}

fn cmd_sweep(args: SweepArgs) -> CliResult<()> {
    let c = &args.common;
    let data = load_sets(c)?;
    let sets = EvalSets {
        bank: &data.bank,
        head: data.head.as_ref(),
        id: &data.id,
        ood: &data.ood,
    };
    let (table, warnings) = run_sweep(
        &sets,
        args.score,
        &args.alphas,
        &args.ks,
        args.seed,
        detector_config(c, nnguide::detector::DEFAULT_K),
        c.threads,
    )?;
    warn_all(&warnings);
    emit(table.to_table(), table.to_tsv(), c.format, c.out.as_deref())
}

fn cmd_bench(args: BenchArgs) -> CliResult<()> {
    let index = match &args.bank {
        Some(path) => {
            let (bank, head) = read_bank(path)?;
            GuidanceIndex::build(&bank, head.as_ref(), args.base)?
        }
        None => {
            if args.rows == 0 || args.dim == 0 {
                return Err(usage("--rows and --dim must be positive"));
            }
            let features = synth::random_features(args.seed, args.rows, args.dim);
            let confidences = synth::random_confidences(args.seed, args.rows);
            GuidanceIndex::from_features(args.dim, &features, confidences)?
        }
    };
    let queries = match &args.queries {
        Some(path) => read_bank(path)?.0.features().to_vec(),
        None => synth::random_features(args.seed.wrapping_add(1), args.num_queries, index.d()),
    };
    let cfg = BenchConfig {
        k: args.k,
        repeats: args.repeats,
        threads: args.threads,
        latency_samples: args.latency_samples,
    };
    let report = run_bench(&index, &queries, cfg)?;
    let text = report.to_text();
    if let Some(path) = &args.out {
        write_file(path, &text)?;
    }
    print!("{text}");
    Ok(())
}

fn cmd_toy(args: ToyArgs) -> CliResult<()> {
    let defaults = ToyConfig::default();
    let config = ToyConfig {
        seed: args.seed,
        grid_resolution: args.resolution.unwrap_or(defaults.grid_resolution),
        grid_extent: args.extent.unwrap_or(defaults.grid_extent),
        ..defaults
    };
    config.validate()?;
    std::fs::create_dir_all(&args.out).map_err(|e| {
        Failure::from(Error::Io {
            path: args.out.clone(),
            source: e,
        })
    })?;
    let det_config = DetectorConfig {
        k: args.k,
        ..DetectorConfig::default()
    };
    let table = with_threads(args.threads, || -> CliResult<_> {
        let lab = ToyLab::new(&config)?;
        for &name in &args.scores {
            let det = lab.detector(name, det_config)?;
            warn_all(det.warnings());
            let grid = grid_scores(&det, &config)?;
            write_file(&args.out.join(format!("{name}.pgm")), grid.to_pgm())?;
            write_file(&args.out.join(format!("{name}.csv")), grid.to_csv())?;
        }
        Ok(lab.evaluate(&args.scores, det_config)?)
    })??;
    write_file(&args.out.join("eval.tsv"), table.to_tsv())?;
    match args.format {
        Format::Table => print!("{}", table.to_table()),
        Format::Tsv => print!("{}", table.to_tsv()),
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Bank(a) => cmd_bank(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Sweep(a) => cmd_sweep(a),
        Command::Bench(a) => cmd_bench(a),
        Command::Toy(a) => cmd_toy(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
