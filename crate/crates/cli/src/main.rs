use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use deltak_core::config::{parse_override, RunConfig};
use deltak_core::denoiser::matrix_checksum;
use deltak_core::metrics::{auc_roc, coefficient_of_variation, entropy_series, token_column, token_intensity_in_layers, Label};
use deltak_core::theorem::{mass_concentration_suite, mc_orthogonality, MassSuiteReport, OrthogonalityExperiment, TailReport};
use deltak_core::trace_io::{write_atomic, TraceFile, TraceFooter};
use deltak_core::{init_model, run_delta_k, AttentionTrace, ConceptPartition, ScheduleRecord};
use serde::Serialize;

/// Minimum R^2 of the log-tail fit for the orthogonality check to pass.
const MIN_R2: f64 = 0.9;
/// Tolerance on the closed-form reweighting in the concentration suite.
const MASS_TOL: f64 = 1e-12;

#[derive(Parser)]
#[command(name = "deltak", version, about = "Delta-K key injection on a toy cross-attention denoiser")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Baseline and augmented sampling; writes both traces and a summary.
    Run(RunArgs),
    /// Intensity, CV and entropy series of a trace as CSV.
    Analyze(AnalyzeArgs),
    /// Monte Carlo and randomized checks of the two attention bounds.
    Verify(VerifyArgs),
    /// Plot-ready export of a trace's attention maps.
    Export(ExportArgs),
}

#[derive(Args)]
struct RunArgs {
    /// Config file, `demo`, or a profile name (`sdxl-like`, `dit-like`).
    #[arg(long)]
    config: Option<String>,
    /// Overrides the latent seed.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// `key=value` override, applied after the config file. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Args)]
struct AnalyzeArgs {
    trace: PathBuf,
    /// Baseline trace of the same run; adds its series and per-step AUC.
    #[arg(long)]
    baseline: Option<PathBuf>,
    /// Comma-separated metrics out of intensity, cv, entropy.
    #[arg(long, value_delimiter = ',', default_values_t = [Metric::Intensity, Metric::Cv, Metric::Entropy])]
    metrics: Vec<Metric>,
    /// Missing token positions; defaults to the partition in the trace footer.
    #[arg(long, value_delimiter = ',')]
    missing: Option<Vec<usize>>,
    /// Present token positions; defaults to the partition in the trace footer.
    #[arg(long, value_delimiter = ',')]
    present: Option<Vec<usize>>,
    /// Restrict the series to these layers.
    #[arg(long, value_delimiter = ',')]
    layers: Option<Vec<usize>>,
    /// Output CSV; stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct VerifyArgs {
    #[arg(long, value_enum, default_value_t = Theorem::All)]
    theorem: Theorem,
    /// Trials per dimension for the orthogonality tail.
    #[arg(long, default_value_t = 100_000)]
    trials: usize,
    /// Random instances for the mass concentration suite.
    #[arg(long, default_value_t = 1000)]
    instances: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

#[derive(Args)]
struct ExportArgs {
    trace: PathBuf,
    #[arg(long, value_enum)]
    format: Format,
    /// Output file; stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Metric {
    Intensity,
    Cv,
    Entropy,
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Metric::Intensity => "intensity",
            Metric::Cv => "cv",
            Metric::Entropy => "entropy",
        })
    }
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Theorem {
    #[value(name = "1")]
    Orthogonality,
    #[value(name = "2")]
    Concentration,
    All,
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Csv,
    Json,
}

/// Bad flags, config values or inputs; exit code 2.
#[derive(Debug)]
struct UsageError(String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn usage(e: impl fmt::Display) -> anyhow::Error {
    UsageError(e.to_string()).into()
}

/// A check ran to completion and did not hold; exit code 1.
#[derive(Debug)]
struct PropertyFailure(String);

impl fmt::Display for PropertyFailure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for PropertyFailure {}

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.is::<UsageError>() {
            return 2;
        }
        if let Some(e) = cause.downcast_ref::<deltak_core::Error>() {
            return match e {
                deltak_core::Error::Config(_) | deltak_core::Error::Input(_) => 2,
                _ => 1,
            };
        }
    }
    1
}

fn load_config(args: &RunArgs) -> Result<RunConfig> {
    let mut cfg = match &args.config {
        Some(name) => RunConfig::resolve(name).map_err(usage).with_context(|| format!("loading config {name:?}"))?,
        None => RunConfig::default(),
    };
    for o in &args.overrides {
        let (k, v) = parse_override(o).map_err(usage)?;
        cfg.set(&k, &v).map_err(usage)?;
    }
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    cfg.apply_env();
    cfg.validate().map_err(usage)?;
    Ok(cfg)
}

#[derive(Serialize)]
struct TokenDelta {
    index: usize,
    token: String,
    baseline: f64,
    augmented: f64,
    delta: f64,
}

#[derive(Serialize)]
struct RunSummary {
    config: BTreeMap<String, String>,
    schedule: ScheduleRecord,
    partition: ConceptPartition,
    warnings: Vec<String>,
    augmented_steps: usize,
    latents_identical: bool,
    baseline_latent_checksum: String,
    augmented_latent_checksum: String,
    /// Mean intensity per token over every sampling step.
    token_intensity: Vec<TokenDelta>,
}

fn mean_intensity(trace: &AttentionTrace, token: usize) -> Result<f64> {
    let tokens: BTreeSet<usize> = [token].into();
    let mut sum = 0.0;
    for rec in &trace.steps {
        sum += token_intensity_in_layers(trace, &tokens, rec.step, None)?;
    }
    Ok(sum / trace.len() as f64)
}

fn to_json(value: &impl Serialize) -> Result<String> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    Ok(s)
}

fn cmd_run(args: &RunArgs) -> Result<()> {
    let cfg = load_config(args)?;
    let model = init_model(&cfg.denoiser).map_err(usage)?;
    let run = run_delta_k(&cfg.prompt, &model, &cfg.oracle, &cfg.scheduler, cfg.seed)?;
    let echo = cfg.echo();

    fs::create_dir_all(&args.out).with_context(|| format!("creating {}", args.out.display()))?;
    let baseline = TraceFile::from_trace(
        "baseline",
        echo.clone(),
        &run.tokens,
        &run.baseline_trace,
        &run.baseline_latent,
        TraceFooter { partition: run.partition.clone(), warnings: run.warnings.clone(), ..TraceFooter::default() },
    );
    let augmented = TraceFile::from_trace(
        "augmented",
        echo.clone(),
        &run.tokens,
        &run.trace,
        &run.latent,
        TraceFooter {
            schedule: run.schedule.clone(),
            partition: run.partition.clone(),
            warnings: run.warnings.clone(),
            ..TraceFooter::default()
        },
    );
    baseline.write(&args.out.join("baseline.trace.jsonl"))?;
    augmented.write(&args.out.join("augmented.trace.jsonl"))?;

    let token_intensity = (0..run.tokens.len())
        .map(|i| {
            let b = mean_intensity(&run.baseline_trace, i)?;
            let a = mean_intensity(&run.trace, i)?;
            Ok(TokenDelta { index: i, token: run.tokens.surface[i].clone(), baseline: b, augmented: a, delta: a - b })
        })
        .collect::<Result<Vec<_>>>()?;
    let summary = RunSummary {
        config: echo,
        augmented_steps: run.schedule.entries.len(),
        latents_identical: run.latent == run.baseline_latent,
        baseline_latent_checksum: matrix_checksum(&run.baseline_latent),
        augmented_latent_checksum: matrix_checksum(&run.latent),
        schedule: run.schedule,
        partition: run.partition,
        warnings: run.warnings,
        token_intensity,
    };
    write_atomic(&args.out.join("summary.json"), to_json(&summary)?.as_bytes())?;

    let missing: Vec<&str> = summary.partition.missing.iter().map(|c| c.text.as_str()).collect();
    eprintln!(
        "missing {:?}; {} augmented steps; wrote {}",
        missing,
        summary.augmented_steps,
        args.out.display()
    );
    Ok(())
}

fn read_trace(path: &Path) -> Result<TraceFile> {
    TraceFile::read(path).with_context(|| format!("reading {}", path.display()))
}

struct Rows(String);

impl Rows {
    fn new() -> Self {
        Rows("step,metric,value,label\n".into())
    }

    fn push(&mut self, step: usize, metric: &str, value: f64, label: &str) {
        self.0.push_str(&format!("{step},{metric},{value},{label}\n"));
    }
}

fn token_groups(file: &TraceFile, args: &AnalyzeArgs) -> Vec<(&'static str, BTreeSet<usize>)> {
    let missing = match &args.missing {
        Some(m) => m.iter().copied().collect(),
        None => file.footer.partition.missing_indices(),
    };
    let present = match &args.present {
        Some(p) => p.iter().copied().collect(),
        None => file.footer.partition.present_indices(),
    };
    let mut groups = Vec::new();
    if !missing.is_empty() {
        groups.push(("missing", missing));
    }
    if !present.is_empty() {
        groups.push(("present", present));
    }
    if groups.is_empty() {
        groups.push(("all", (0..file.header.n_keys).collect()));
    }
    groups
}

fn analyze_trace(
    rows: &mut Rows,
    trace: &AttentionTrace,
    prefix: &str,
    groups: &[(&str, BTreeSet<usize>)],
    args: &AnalyzeArgs,
) -> Result<()> {
    let layers = args.layers.as_deref();
    for rec in &trace.steps {
        for (name, tokens) in groups {
            let label = format!("{prefix}{name}");
            if args.metrics.contains(&Metric::Intensity) {
                rows.push(rec.step, "intensity", token_intensity_in_layers(trace, tokens, rec.step, layers)?, &label);
            }
            if args.metrics.contains(&Metric::Cv) {
                let column = token_column(trace, tokens, rec.step, layers)?;
                rows.push(rec.step, "cv", coefficient_of_variation(&column)?, &label);
            }
        }
    }
    if args.metrics.contains(&Metric::Entropy) {
        for (step, h) in entropy_series(trace, layers)?.values {
            rows.push(step, "entropy", h, &format!("{prefix}stage"));
        }
    }
    Ok(())
}

/// Per-step AUC of concept intensities as a detector of the missing ones.
fn analyze_auc(rows: &mut Rows, trace: &AttentionTrace, prefix: &str, partition: &ConceptPartition, args: &AnalyzeArgs) -> Result<()> {
    let concepts: Vec<(Label, BTreeSet<usize>)> = partition
        .present
        .iter()
        .map(|c| (Label::Present, c.indices.clone()))
        .chain(partition.missing.iter().map(|c| (Label::Missing, c.indices.clone())))
        .filter(|(_, idx)| !idx.is_empty())
        .collect();
    let labels: Vec<Label> = concepts.iter().map(|(l, _)| *l).collect();
    if !labels.contains(&Label::Present) || !labels.contains(&Label::Missing) {
        bail!(usage("AUC needs at least one present and one missing concept"));
    }
    for rec in &trace.steps {
        let scores = concepts
            .iter()
            .map(|(_, idx)| token_intensity_in_layers(trace, idx, rec.step, args.layers.as_deref()))
            .collect::<deltak_core::Result<Vec<_>>>()?;
        rows.push(rec.step, "auc", auc_roc(&scores, &labels)?, &format!("{prefix}concepts"));
    }
    Ok(())
}

fn cmd_analyze(args: &AnalyzeArgs) -> Result<()> {
    let file = read_trace(&args.trace)?;
    let groups = token_groups(&file, args);
    let mut rows = Rows::new();
    let trace = file.to_trace();
    let prefix = if args.baseline.is_some() { format!("{}:", file.header.kind) } else { String::new() };
    analyze_trace(&mut rows, &trace, &prefix, &groups, args)?;
    if let Some(path) = &args.baseline {
        let base = read_trace(path)?;
        if base.header.tokens != file.header.tokens {
            bail!(usage("baseline trace was produced for a different prompt"));
        }
        let base_trace = base.to_trace();
        analyze_trace(&mut rows, &base_trace, "baseline:", &groups, args)?;
        let partition = if args.missing.is_some() || args.present.is_some() {
            let named = |label: &str, g: &[(&str, BTreeSet<usize>)]| {
                g.iter()
                    .filter(|(n, _)| *n == label)
                    .flat_map(|(_, idx)| idx.iter().map(|&i| deltak_core::Concept::new(file.header.tokens.surface[i].clone(), [i])))
                    .collect::<Vec<_>>()
            };
            ConceptPartition::new(named("present", &groups), named("missing", &groups))
        } else {
            file.footer.partition.clone()
        };
        analyze_auc(&mut rows, &base_trace, "baseline:", &partition, args)?;
        analyze_auc(&mut rows, &trace, &prefix, &partition, args)?;
    }
    emit(args.out.as_deref(), &rows.0)
}

fn emit(out: Option<&Path>, text: &str) -> Result<()> {
    match out {
        Some(path) => write_atomic(path, text.as_bytes()).with_context(|| format!("writing {}", path.display())),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn tail_csv(report: &TailReport) -> String {
    let mut s = String::from("dim,trials,exceedances,tail\n");
    for p in &report.points {
        s.push_str(&format!("{},{},{},{}\n", p.dim, report.experiment.trials, p.exceedances, p.tail));
    }
    s
}

fn cmd_verify(args: &VerifyArgs) -> Result<()> {
    let mut failures = Vec::new();
    let run_first = args.theorem != Theorem::Concentration;
    let run_second = args.theorem != Theorem::Orthogonality;
    let exp = OrthogonalityExperiment { trials: args.trials, seed: args.seed, ..OrthogonalityExperiment::default() };
    if run_first {
        exp.validate().map_err(usage)?;
    }
    if run_second && args.instances == 0 {
        bail!(usage("instances must be >= 1"));
    }
    fs::create_dir_all(&args.out).with_context(|| format!("creating {}", args.out.display()))?;

    if run_first {
        let report = mc_orthogonality(&exp)?;
        write_atomic(&args.out.join("tail_report.json"), to_json(&report)?.as_bytes())?;
        write_atomic(&args.out.join("tail_report.csv"), tail_csv(&report).as_bytes())?;
        let r2 = report.r_squared.map_or("n/a".into(), |r| format!("{r:.4}"));
        eprintln!("orthogonality: tails {:?}, R^2 {r2}", report.points.iter().map(|p| p.tail).collect::<Vec<_>>());
        if !report.passes(MIN_R2) {
            failures.push(format!("orthogonality tail not decaying (R^2 {r2})"));
        }
    }
    if run_second {
        let report: MassSuiteReport = mass_concentration_suite(args.instances, args.seed)?;
        write_atomic(&args.out.join("mass_report.json"), to_json(&report)?.as_bytes())?;
        eprintln!(
            "mass concentration: {} of {} instances failed, closed-form error {:.2e}",
            report.failures, report.instances, report.max_closed_form_error
        );
        if !report.passes(MASS_TOL) {
            failures.push(format!("{} concentration instances failed", report.failures));
        }
    }
    if !failures.is_empty() {
        bail!(PropertyFailure(failures.join("; ")));
    }
    Ok(())
}

fn cmd_export(args: &ExportArgs) -> Result<()> {
    let file = read_trace(&args.trace)?;
    let text = match args.format {
        Format::Csv => file.to_csv(),
        Format::Json => file.to_export().to_json()? + "\n",
    };
    emit(args.out.as_deref(), &text)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Run(a) => cmd_run(a),
        Command::Analyze(a) => cmd_analyze(a),
        Command::Verify(a) => cmd_verify(a),
        Command::Export(a) => cmd_export(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if let Some(deltak_core::Error::Protocol { raw, .. }) =
                e.chain().find_map(|c| c.downcast_ref::<deltak_core::Error>())
            {
                eprintln!("raw oracle reply: {raw}");
            }
            ExitCode::from(exit_code(&e))
        }
    }
}
