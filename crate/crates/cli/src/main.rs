//! `coshare`: runs co-training and transfer experiments on spectra, evaluates
//! checkpoints and compares strategies.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 data or file
//! error, 3 numerical failure.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand, ValueEnum};
use coshare::checkpoint::Checkpoint;
use coshare::dataio::{load_csv, write_demo_data};
use coshare::experiment::{
    load_comparison, read_runs_csv, run_compare, run_experiment, summary_tables, write_reports,
    ArchChoice, CompareMode, ExperimentConfig, ExperimentKind, Strategy,
};
use coshare::losses::{MetricReport, TargetMeans};
use coshare::stats::ComparisonTable;
use coshare::tensor::Tensor;
use coshare::transfer::{pad_spectra, spline_resample, PadValue};

#[derive(Parser)]
#[command(
    name = "coshare",
    version,
    about = "Weight-shared co-training and transfer learning for spectral regression"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train every dataset on its own.
    Train(RunArgs),
    /// Compare individual training with weight-shared co-training.
    Cotrain(RunArgs),
    /// Compare transfer strategies from a source to a target dataset.
    Transfer(RunArgs),
    /// Score a checkpoint on a CSV file.
    Evaluate(EvaluateArgs),
    /// Statistical comparison of strategy columns.
    Compare(CompareArgs),
    /// Rebuild summaries and comparisons from a run directory.
    Report(ReportArgs),
    /// Write synthetic demo datasets and their registry.
    DemoData(DemoArgs),
}

#[derive(Args)]
struct RunArgs {
    /// Experiment configuration (TOML).
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    /// Number of repetitions.
    #[arg(long)]
    reps: Option<usize>,
    /// Architectures to train: 1, 2 or both.
    #[arg(long)]
    arch: Option<String>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Comma-separated strategies, replacing the configured list.
    #[arg(long, value_delimiter = ',')]
    strategy: Vec<String>,
}

#[derive(Clone, Copy, ValueEnum)]
enum ResizeArg {
    Pad,
    Spline,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// CSV with the targets first, then the spectrum.
    #[arg(long)]
    data: PathBuf,
    /// The CSV has a header row.
    #[arg(long)]
    header: bool,
    /// Network to evaluate, by dataset name; required when the checkpoint
    /// holds several.
    #[arg(long)]
    net: Option<String>,
    /// Fit spectra of another length to the network input.
    #[arg(long, value_enum)]
    resize: Option<ResizeArg>,
    /// Write predictions to this CSV.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    /// Pairwise for two strategies, multiple otherwise.
    Auto,
    Pairwise,
    Multiple,
}

#[derive(Args)]
struct CompareArgs {
    /// Comparison CSVs: one column per strategy, one row per repetition.
    #[arg(required = true)]
    tables: Vec<PathBuf>,
    #[arg(long, value_enum, default_value = "auto")]
    mode: ModeArg,
    /// Significance level of the Nemenyi critical difference (0.05 or 0.10).
    #[arg(long, default_value_t = 0.05)]
    alpha: f64,
    /// Directory for compare.txt and compare.csv.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ReportArgs {
    /// Run directory holding runs.csv.
    #[arg(long)]
    out: PathBuf,
    /// Significance level of the Nemenyi critical difference.
    #[arg(long, default_value_t = 0.05)]
    alpha: f64,
}

#[derive(Args)]
struct DemoArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

/// A command line or configuration mistake.
#[derive(Debug)]
struct Usage(String);

impl std::fmt::Display for Usage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    Usage(msg.into()).into()
}

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.is::<Usage>() {
            return 1;
        }
        if let Some(e) = cause.downcast_ref::<coshare::Error>() {
            return match e {
                coshare::Error::InvalidArgument(_) => 1,
                coshare::Error::Data(_)
                | coshare::Error::Io { .. }
                | coshare::Error::Shape { .. } => 2,
                coshare::Error::Numerical(_) => 3,
            };
        }
        if cause.is::<std::io::Error>() {
            return 2;
        }
    }
    1
}

/// The cause chain, skipping causes already quoted by their parent.
fn message(err: &anyhow::Error) -> String {
    let mut out = String::new();
    for cause in err.chain() {
        let m = cause.to_string();
        if !out.ends_with(&m) {
            if !out.is_empty() {
                out.push_str(": ");
            }
            out.push_str(&m);
        }
    }
    out
}

/// Prints to stdout; a closed pipe ends the output quietly.
fn emit(text: &str) {
    use std::io::Write;
    let mut out = std::io::stdout().lock();
    if out
        .write_all(text.as_bytes())
        .and_then(|_| out.flush())
        .is_err()
    {
        std::process::exit(0);
    }
}

#[cfg(target_env = "gnu")]
fn tune_allocator() {
    // keep large short-lived buffers on the heap and never trim it per step
    unsafe {
        libc::mallopt(libc::M_MMAP_THRESHOLD, 32 << 20);
        libc::mallopt(libc::M_TRIM_THRESHOLD, 1 << 30);
    }
}

#[cfg(not(target_env = "gnu"))]
fn tune_allocator() {}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    tune_allocator();
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", message(&e));
            ExitCode::from(exit_code(&e))
        }
    }
}

fn dispatch(command: Command) -> anyhow::Result<()> {
    match command {
        Command::Train(a) => run(a, ExperimentKind::Single),
        Command::Cotrain(a) => run(a, ExperimentKind::Cotrain),
        Command::Transfer(a) => run(a, ExperimentKind::Transfer),
        Command::Evaluate(a) => evaluate(a),
        Command::Compare(a) => compare(a),
        Command::Report(a) => report(&a.out, a.alpha),
        Command::DemoData(a) => {
            let path = write_demo_data(&a.out, a.seed)?;
            emit(&format!("wrote {}\n", path.display()));
            Ok(())
        }
    }
}

fn load_config(
    args: &RunArgs,
    kind: ExperimentKind,
) -> anyhow::Result<(ExperimentConfig, PathBuf)> {
    let mut config = ExperimentConfig::load(&args.config)?;
    match config.kind {
        Some(k) if k != kind => {
            return Err(usage(format!(
                "{} describes a {k:?} experiment, not {kind:?}",
                args.config.display()
            )))
        }
        _ => config.kind = Some(kind),
    }
    if let Some(s) = args.seed {
        config.seed = s;
    }
    if let Some(r) = args.reps {
        config.repetitions = r;
    }
    if let Some(a) = &args.arch {
        config.arch = ArchChoice::parse(a)?;
    }
    if !args.strategy.is_empty() {
        config.strategies = args
            .strategy
            .iter()
            .map(|s| Strategy::parse(s))
            .collect::<coshare::Result<_>>()?;
    }
    let out = match (&args.out, &config.out) {
        (Some(o), _) => o.clone(),
        (None, Some(o)) => config.resolve(o),
        (None, None) => {
            let stem = args
                .config
                .file_stem()
                .and_then(|s| s.to_str())
                .unwrap_or("run");
            PathBuf::from("runs").join(stem)
        }
    };
    Ok((config, out))
}

fn run(args: RunArgs, kind: ExperimentKind) -> anyhow::Result<()> {
    let (config, out) = load_config(&args, kind)?;
    let result = run_experiment(&config, Some(&out))?;
    eprint!("{}", result.log);
    report(&out, 0.05)
}

/// Writes summaries, comparison tables and `compare.txt` for the records
/// in `dir/runs.csv`, and prints the summaries and tests.
fn report(dir: &Path, alpha: f64) -> anyhow::Result<()> {
    let runs = dir.join("runs.csv");
    let records = read_runs_csv(&runs)?;
    if records.is_empty() {
        return Err(coshare::Error::Data(format!("{}: no run records", runs.display())).into());
    }
    write_reports(&records, dir)?;
    let mut text = String::new();
    for t in summary_tables(&records)? {
        text.push_str(&t.to_text());
        text.push('\n');
    }
    let cmp_dir = dir.join("compare");
    let mut tests = String::new();
    let mut paths: Vec<PathBuf> = std::fs::read_dir(&cmp_dir)
        .with_context(|| cmp_dir.display().to_string())?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "csv"))
        .collect();
    paths.sort();
    for p in paths {
        let table = load_comparison(&p)?;
        match run_compare(std::slice::from_ref(&table), auto_mode(&table), alpha) {
            Ok(r) => tests.push_str(&r.text),
            Err(e) => {
                let _ = writeln!(tests, "{}: not tested ({e})", table.metric);
            }
        }
        tests.push('\n');
    }
    let p = dir.join("compare.txt");
    std::fs::write(&p, &tests).with_context(|| p.display().to_string())?;
    emit(&format!("{text}{tests}"));
    Ok(())
}

fn auto_mode(t: &ComparisonTable) -> CompareMode {
    if t.strategies.len() == 2 {
        CompareMode::Pairwise
    } else {
        CompareMode::Multiple
    }
}

fn compare(args: CompareArgs) -> anyhow::Result<()> {
    let tables = args
        .tables
        .iter()
        .map(|p| load_comparison(p))
        .collect::<coshare::Result<Vec<_>>>()?;
    let mode = match args.mode {
        ModeArg::Pairwise => CompareMode::Pairwise,
        ModeArg::Multiple => CompareMode::Multiple,
        ModeArg::Auto => {
            let modes: Vec<CompareMode> = tables.iter().map(auto_mode).collect();
            if modes.windows(2).any(|w| w[0] != w[1]) {
                return Err(usage("tables mix two and more strategies; pass --mode"));
            }
            modes[0]
        }
    };
    let r = run_compare(&tables, mode, args.alpha)?;
    if let Some(dir) = &args.out {
        std::fs::create_dir_all(dir).with_context(|| dir.display().to_string())?;
        for (name, body) in [("compare.txt", &r.text), ("compare.csv", &r.csv)] {
            let p = dir.join(name);
            std::fs::write(&p, body).with_context(|| p.display().to_string())?;
        }
    }
    emit(&r.text);
    Ok(())
}

type Resizer = dyn Fn(&[f64]) -> coshare::Result<Vec<f64>>;

fn evaluate(args: EvaluateArgs) -> anyhow::Result<()> {
    let ck = Checkpoint::load(&args.checkpoint)?;
    let nets = ck.networks()?;
    let k = match &args.net {
        Some(name) => ck
            .nets
            .iter()
            .position(|n| &n.spec.name == name)
            .ok_or_else(|| {
                let names: Vec<&str> = ck.nets.iter().map(|n| n.spec.name.as_str()).collect();
                usage(format!(
                    "checkpoint has no network {name:?}; it holds {}",
                    names.join(", ")
                ))
            })?,
        None if ck.nets.len() == 1 => 0,
        None => {
            let names: Vec<&str> = ck.nets.iter().map(|n| n.spec.name.as_str()).collect();
            return Err(usage(format!(
                "pick a network with --net: {}",
                names.join(", ")
            )));
        }
    };
    let record = &ck.nets[k];
    let net = &nets[k];
    let data = load_csv(&args.data, net.outputs(), args.header)?;
    let want = record.spec.input_len;
    let spectra = if data.input_len() == want {
        data.spectra.clone()
    } else {
        let f: Box<Resizer> = match args.resize {
            Some(ResizeArg::Pad) => Box::new(move |x| pad_spectra(x, want, PadValue::Edge)),
            Some(ResizeArg::Spline) => Box::new(move |x| spline_resample(x, want)),
            None => {
                return Err(usage(format!(
                    "spectra have {} points but the network takes {want}; pass --resize",
                    data.input_len()
                )))
            }
        };
        let mut rows = Vec::with_capacity(data.len() * want);
        for i in 0..data.len() {
            rows.extend(f(data.spectra.row(i))?);
        }
        Tensor::new(vec![data.len(), want], rows)?
    };
    let params = ck.eval_store()?;
    let pred = net.predict(&params, &spectra, 512)?;
    let means = if record.means.is_empty() {
        None
    } else {
        Some(TargetMeans::new(record.means.clone())?)
    };
    let report = MetricReport::compute(&pred, &data.targets, means.as_ref())?;
    let mut text = String::new();
    for (name, v) in coshare::experiment::metric_values(&report) {
        let _ = writeln!(text, "{name} {v:.6}");
    }
    emit(&text);
    if let Some(out) = &args.out {
        let t = pred.shape()[1];
        let mut csv: Vec<String> = (1..=t).map(|j| format!("target_{j}")).collect();
        csv.extend((1..=t).map(|j| format!("prediction_{j}")));
        let mut body = csv.join(",") + "\n";
        for i in 0..data.len() {
            let row: Vec<String> = data
                .targets
                .row(i)
                .iter()
                .chain(pred.row(i))
                .map(|v| format!("{v:?}"))
                .collect();
            body.push_str(&row.join(","));
            body.push('\n');
        }
        std::fs::write(out, body).with_context(|| out.display().to_string())?;
    }
    Ok(())
}
