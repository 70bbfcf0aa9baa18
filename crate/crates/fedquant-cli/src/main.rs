//! Command line front end for the federated quantile simulator.
//!
//! Subcommands: `simulate` runs one experiment from a JSON config, `sweep`
//! runs a grid of them, `pivot-table` builds or inspects cached critical
//! values, `real-data` ingests a grouped CSV and runs on it, and
//! `validate-config` checks a config and prints schedule diagnostics.
//!
//! Reports go to stdout (or `--output`); progress notes go to stderr. Exit
//! codes: 0 success, 2 bad input, 3 numeric or protocol failure, 4 i/o.

use std::path::{Path, PathBuf};

use anyhow::Result;
use clap::{Args, Parser, Subcommand, ValueEnum};

use fedquant::dist::{DistributionSpec, SamplingMode};
use fedquant::harness::{emit_csv, emit_json, run_sweep, ReferenceKind, ReportRow, SweepPlan};
use fedquant::ingest::{ingest_csv, IngestOptions, IngestReport, Transform};
use fedquant::pivot::{schedule_critical_value, PivotTable, DEFAULT_PIVOT_PATHS};
use fedquant::schedule::{
    schedule_diagnostics, CommSchedule, Horizon, StepSizePolicy, Strategy,
};
use fedquant::{
    oracle_quantile, run_experiment, Error, ExperimentPlan, FederationConfig, Method,
};

/// Directory the default pivot table lives in when no flag names one.
const PIVOT_DIR_ENV: &str = "FEDQUANT_PIVOT_DIR";

#[derive(Parser)]
#[command(
    name = "fedquant",
    version,
    about = "Federated quantile estimation under local differential privacy"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment from a JSON config and emit a report row.
    Simulate(SimulateArgs),
    /// Run the full Cartesian grid of a JSON sweep plan.
    Sweep(SweepArgs),
    /// Build or inspect the cached pivot critical values.
    #[command(subcommand)]
    PivotTable(PivotCommand),
    /// Ingest a grouped CSV into clients and run on the result.
    RealData(Box<RealDataArgs>),
    /// Parse and validate a config, then print schedule diagnostics.
    ValidateConfig(ValidateArgs),
}

#[derive(Args)]
struct SimulateArgs {
    /// JSON experiment config.
    #[arg(long)]
    config: PathBuf,
    /// Estimation method: LDPFed, DPSGD, or DC.
    #[arg(long, default_value = "LDPFed")]
    method: String,
    /// Monte Carlo replications.
    #[arg(long, short = 'R', default_value_t = 100)]
    replications: u64,
    /// Override the config's master seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Override the config's interval miss level.
    #[arg(long)]
    alpha: Option<f64>,
    /// Scenario label stamped on the report row.
    #[arg(long, default_value = "custom")]
    scenario: String,
    #[command(flatten)]
    pivot: PivotOpts,
    #[command(flatten)]
    out: OutputOpts,
}

#[derive(Args)]
struct SweepArgs {
    /// JSON sweep plan.
    #[arg(long)]
    plan: PathBuf,
    #[command(flatten)]
    pivot: PivotOpts,
    #[command(flatten)]
    out: OutputOpts,
}

#[derive(Subcommand)]
enum PivotCommand {
    /// Compute and store the critical value for a schedule.
    Build(PivotBuildArgs),
    /// List the stored entries.
    Inspect(PivotInspectArgs),
}

#[derive(Args)]
struct PivotBuildArgs {
    /// Take the schedule (and default alpha) from this experiment config.
    #[arg(long, conflicts_with = "uniform")]
    config: Option<PathBuf>,
    /// Build for a uniform grid with this many points instead.
    #[arg(long, value_name = "POINTS")]
    uniform: Option<u64>,
    /// Interval miss level; defaults to the config's alpha, or 0.05.
    #[arg(long)]
    alpha: Option<f64>,
    #[command(flatten)]
    pivot: PivotOpts,
}

#[derive(Args)]
struct PivotInspectArgs {
    #[command(flatten)]
    pivot: PivotOpts,
}

#[derive(Args)]
struct RealDataArgs {
    /// Input CSV with a header row.
    #[arg(long)]
    data: PathBuf,
    /// Column holding group names; each group becomes one client.
    #[arg(long)]
    group_column: String,
    /// Column holding the numeric values.
    #[arg(long)]
    value_column: String,
    /// Fold this many of the smallest groups into an "Others" client.
    #[arg(long, default_value_t = 0)]
    merge_smallest: usize,
    /// Estimate in natural-log space; the reported interval is
    /// back-transformed with exp.
    #[arg(long)]
    log: bool,
    /// Field delimiter.
    #[arg(long, default_value_t = ',')]
    delimiter: char,
    /// Quantile level.
    #[arg(long, default_value_t = 0.5)]
    tau: f64,
    /// Truthful response rate stamped on every client.
    #[arg(long, default_value_t = 0.9)]
    rate: f64,
    /// Spread client rates equally over LO,HI instead of --rate.
    #[arg(long, value_name = "LO,HI", conflicts_with = "rate")]
    rate_range: Option<String>,
    /// Estimation method: LDPFed, DPSGD, or DC.
    #[arg(long, default_value = "LDPFed")]
    method: String,
    /// Communication strategy.
    #[arg(long, default_value = "C1")]
    strategy: String,
    /// Number of communication rounds.
    #[arg(long, conflicts_with = "total_samples")]
    rounds: Option<u64>,
    /// Per-client sample budget; defaults to the balanced group size.
    #[arg(long)]
    total_samples: Option<u64>,
    /// Fraction of the horizon spent in single-step warm-up rounds.
    #[arg(long, default_value_t = 0.05)]
    warmup_frac: f64,
    /// Interval miss level.
    #[arg(long, default_value_t = 0.05)]
    alpha: f64,
    /// Stream each client's rows once in a seeded order instead of
    /// resampling with replacement.
    #[arg(long)]
    single_pass: bool,
    /// Master seed for resampling and the run itself.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Monte Carlo replications; metrics beyond the first replication are
    /// scored against the pooled plug-in quantile.
    #[arg(long, short = 'R', default_value_t = 1)]
    replications: u64,
    #[command(flatten)]
    pivot: PivotOpts,
    /// Also write the report row here.
    #[arg(long, short = 'o')]
    output: Option<PathBuf>,
    /// Report format for --output.
    #[arg(long, value_enum, default_value_t = Format::Csv)]
    format: Format,
}

#[derive(Args)]
struct ValidateArgs {
    /// JSON experiment config.
    #[arg(long)]
    config: PathBuf,
}

/// Pivot-cache location and build parameters, shared by every subcommand
/// that may need a critical value.
#[derive(Args)]
struct PivotOpts {
    /// Pivot table file; defaults to pivot.json under $FEDQUANT_PIVOT_DIR,
    /// or the working directory.
    #[arg(long)]
    pivot_table: Option<PathBuf>,
    /// Monte Carlo paths when a value must be built.
    #[arg(long, default_value_t = DEFAULT_PIVOT_PATHS)]
    pivot_paths: u64,
    /// Seed for pivot path generation.
    #[arg(long, default_value_t = 0)]
    pivot_seed: u64,
}

impl PivotOpts {
    fn table_path(&self) -> PathBuf {
        self.pivot_table.clone().unwrap_or_else(|| {
            match std::env::var_os(PIVOT_DIR_ENV) {
                Some(dir) => PathBuf::from(dir).join("pivot.json"),
                None => PathBuf::from("pivot.json"),
            }
        })
    }
}

#[derive(Args)]
struct OutputOpts {
    /// Report destination; stdout when absent.
    #[arg(long, short = 'o')]
    output: Option<PathBuf>,
    /// Report format.
    #[arg(long, value_enum, default_value_t = Format::Csv)]
    format: Format,
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Csv,
    Json,
}

fn main() {
    let cli = Cli::parse();
    if let Err(err) = run(cli) {
        eprintln!("error: {err}");
        let code = err.downcast_ref::<Error>().map_or(1, Error::exit_code);
        std::process::exit(code);
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Simulate(args) => simulate(args),
        Command::Sweep(args) => sweep(args),
        Command::PivotTable(PivotCommand::Build(args)) => pivot_build(args),
        Command::PivotTable(PivotCommand::Inspect(args)) => pivot_inspect(args),
        Command::RealData(args) => real_data(*args),
        Command::ValidateConfig(args) => validate_config(args),
    }
}

/// Read a file with the path carried into the i/o error message.
fn read_file(path: &Path) -> fedquant::Result<String> {
    std::fs::read_to_string(path).map_err(|e| annotate_io(path, e))
}

fn write_file(path: &Path, text: &str) -> fedquant::Result<()> {
    std::fs::write(path, text).map_err(|e| annotate_io(path, e))
}

fn annotate_io(path: &Path, e: std::io::Error) -> Error {
    Error::from(std::io::Error::new(
        e.kind(),
        format!("{}: {e}", path.display()),
    ))
}

fn write_rows(rows: &[ReportRow], output: Option<&Path>, format: Format) -> Result<()> {
    let text = match format {
        Format::Csv => {
            let mut buf = Vec::new();
            emit_csv(rows, &mut buf)?;
            String::from_utf8(buf).expect("report csv is utf-8")
        }
        Format::Json => {
            let mut text = emit_json(rows)?;
            text.push('\n');
            text
        }
    };
    match output {
        Some(path) => write_file(path, &text)?,
        None => print!("{text}"),
    }
    Ok(())
}

fn simulate(args: SimulateArgs) -> Result<()> {
    let mut config = FederationConfig::from_json_str(&read_file(&args.config)?)?;
    if let Some(seed) = args.seed {
        config.master_seed = seed;
    }
    if let Some(alpha) = args.alpha {
        config.alpha = alpha;
    }
    config.validate()?;

    let mut plan = ExperimentPlan::new(
        config,
        Method::from_name(&args.method)?,
        args.replications,
        args.pivot.table_path(),
    );
    plan.pivot_paths = args.pivot.pivot_paths;
    plan.pivot_seed = args.pivot.pivot_seed;
    plan.scenario = args.scenario;

    let (report, _) = run_experiment(&plan)?;
    let reference = match report.reference {
        ReferenceKind::Oracle => "oracle",
        ReferenceKind::PlugIn => "plug-in",
    };
    eprintln!(
        "{} reference quantile {:.6}; wall clock {:.2?}",
        reference, report.qstar, report.wall_clock
    );
    write_rows(
        std::slice::from_ref(&report.row),
        args.out.output.as_deref(),
        args.out.format,
    )
}

fn sweep(args: SweepArgs) -> Result<()> {
    let plan = SweepPlan::from_json_str(&read_file(&args.plan)?)?;
    let rows = run_sweep(&plan, &args.pivot.table_path())?;
    eprintln!("sweep finished: {} cells", rows.len());
    write_rows(&rows, args.out.output.as_deref(), args.out.format)
}

fn pivot_build(args: PivotBuildArgs) -> Result<()> {
    let table_path = args.pivot.table_path();
    let (schedule, default_alpha) = match (&args.config, args.uniform) {
        (Some(path), None) => {
            let config = FederationConfig::from_json_str(&read_file(path)?)?;
            (config.schedule.clone(), config.alpha)
        }
        (None, Some(points)) => {
            // A uniform grid is exactly the single-step schedule's grid.
            let schedule = CommSchedule::build(Strategy::C1, Horizon::Rounds(points), 0.0)?;
            (schedule, 0.05)
        }
        _ => {
            return Err(Error::config(
                "pivot-table build needs exactly one of --config or --uniform",
            )
            .into())
        }
    };
    let alpha = args.alpha.unwrap_or(default_alpha);
    let v = schedule_critical_value(
        &table_path,
        &schedule,
        alpha,
        args.pivot.pivot_paths,
        args.pivot.pivot_seed,
    )?;
    println!(
        "{}\talpha {}\tv {:.6}\t({})",
        schedule.signature(),
        alpha,
        v,
        table_path.display()
    );
    Ok(())
}

fn pivot_inspect(args: PivotInspectArgs) -> Result<()> {
    let table_path = args.pivot.table_path();
    let table = PivotTable::load_or_empty(&table_path)?;
    println!("schedule_signature\talpha\tpaths\tseed\tv");
    for entry in table.entries() {
        println!(
            "{}\t{}\t{}\t{}\t{:.6}",
            entry.schedule_signature, entry.alpha, entry.paths, entry.seed, entry.v
        );
    }
    eprintln!(
        "{} entries in {}",
        table.entries().len(),
        table_path.display()
    );
    Ok(())
}

fn real_data(args: RealDataArgs) -> Result<()> {
    let mut options = IngestOptions::new(&args.group_column, &args.value_column);
    options.merge_smallest = args.merge_smallest;
    options.transform = if args.log { Transform::Log } else { Transform::None };
    options.delimiter = u8::try_from(args.delimiter)
        .map_err(|_| Error::config(format!("delimiter {:?} is not one byte", args.delimiter)))?;
    options.seed = args.seed;
    options.quantile_level = args.tau;
    options.truthful_rate = args.rate;

    let report = ingest_csv(&args.data, &options)?;
    print_ingest_summary(&report);

    let mut clients = report.clients;
    if let Some(range) = &args.rate_range {
        let (lo, hi) = parse_range(range)?;
        let k = clients.len();
        for (i, client) in clients.iter_mut().enumerate() {
            client.truthful_rate = if k == 1 {
                (lo + hi) / 2.0
            } else {
                lo + (hi - lo) * i as f64 / (k - 1) as f64
            };
        }
    }
    if args.single_pass {
        for client in &mut clients {
            if let DistributionSpec::Empirical { mode, .. } = &mut client.source {
                *mode = SamplingMode::SinglePass;
            }
        }
    }

    let balanced = report.groups[0].balanced_size as u64;
    let horizon = match (args.rounds, args.total_samples) {
        (Some(r), None) => Horizon::Rounds(r),
        (None, Some(s)) => Horizon::Samples(s),
        (None, None) => Horizon::Samples(balanced),
        (Some(_), Some(_)) => unreachable!("clap conflicts_with"),
    };
    let schedule = CommSchedule::build(
        Strategy::from_name(&args.strategy)?,
        horizon,
        args.warmup_frac,
    )?;
    let config = FederationConfig {
        clients,
        schedule,
        policy: StepSizePolicy::default(),
        alpha: args.alpha,
        master_seed: args.seed,
        clamp_bounds: None,
    };
    config.validate()?;

    let mut plan = ExperimentPlan::new(
        config,
        Method::from_name(&args.method)?,
        args.replications,
        args.pivot.table_path(),
    );
    plan.pivot_paths = args.pivot.pivot_paths;
    plan.pivot_seed = args.pivot.pivot_seed;
    plan.scenario = "real-data".to_string();

    let (metrics, records) = run_experiment(&plan)?;
    let first = &records[0];
    let level = 100.0 * (1.0 - plan.config.alpha);
    println!(
        "clients {}, per-client budget t_T = {}, rounds T = {} ({})",
        plan.config.clients.len(),
        plan.config.schedule.total_samples(),
        plan.config.schedule.rounds(),
        plan.config.schedule.strategy().name(),
    );
    if args.log {
        println!(
            "log-domain estimate {:.6}, {level:.0}% interval [{:.6}, {:.6}]",
            first.estimate, first.lo, first.hi
        );
        println!(
            "back-transformed estimate {:.6}, interval [{:.6}, {:.6}]",
            first.estimate.exp(),
            first.lo.exp(),
            first.hi.exp()
        );
        println!(
            "pooled plug-in quantile {:.6} (tau = {}, back-transformed)",
            metrics.qstar.exp(),
            args.tau
        );
    } else {
        println!(
            "estimate {:.6}, {level:.0}% interval [{:.6}, {:.6}]",
            first.estimate, first.lo, first.hi
        );
        println!(
            "pooled plug-in quantile {:.6} (tau = {})",
            metrics.qstar, args.tau
        );
    }
    if args.replications > 1 {
        println!(
            "over R = {} replications vs the plug-in reference: ECP {:.3}, MAE {:.6}",
            args.replications, metrics.row.ecp, metrics.row.mae
        );
    }
    if let Some(path) = &args.output {
        write_rows(std::slice::from_ref(&metrics.row), Some(path), args.format)?;
    }
    Ok(())
}

fn print_ingest_summary(report: &IngestReport) {
    println!("group\trows\tbalanced\tmerged-from");
    for group in &report.groups {
        let merged = group
            .merged_from
            .as_ref()
            .map_or("-".to_string(), |names| names.join(", "));
        println!(
            "{}\t{}\t{}\t{}",
            group.name, group.original_size, group.balanced_size, merged
        );
    }
}

fn parse_range(text: &str) -> fedquant::Result<(f64, f64)> {
    let parts: Vec<&str> = text.split(',').collect();
    let parse = |s: &str| {
        s.trim()
            .parse::<f64>()
            .map_err(|_| Error::config(format!("rate range: {s:?} is not a number")))
    };
    match parts.as_slice() {
        [lo, hi] => {
            let (lo, hi) = (parse(lo)?, parse(hi)?);
            if !(lo <= hi) {
                return Err(Error::config(format!(
                    "rate range needs lo <= hi, got {lo},{hi}"
                )));
            }
            Ok((lo, hi))
        }
        _ => Err(Error::config(format!(
            "rate range must look like LO,HI, got {text:?}"
        ))),
    }
}

fn validate_config(args: ValidateArgs) -> Result<()> {
    let config = FederationConfig::from_json_str(&read_file(&args.config)?)?;
    let schedule = &config.schedule;
    println!(
        "config ok: {} clients, global tau {:.4}, mean rate {:.4}, alpha {}",
        config.clients.len(),
        config.global_level(),
        config.mean_rate(),
        config.alpha
    );
    println!(
        "schedule {}: T = {} rounds ({} warm-up), t_T = {} samples per client, nu = {:.6}",
        schedule.strategy().name(),
        schedule.rounds(),
        schedule.warmup_rounds(),
        schedule.total_samples(),
        schedule.nu()
    );
    println!("signature {}", schedule.signature());

    let diagnostics = schedule_diagnostics(schedule, &config.policy, config.mean_rate())?;
    println!(
        "diagnostics: max block {}, delta moment ratio {:.6}, step proxies {:.4} / {:.4}",
        diagnostics.max_block,
        diagnostics.delta_moment_ratio,
        diagnostics.step_sum_proxy,
        diagnostics.step_tail_proxy
    );
    match oracle_quantile(&config.clients, config.global_level(), 1e-10) {
        Ok(solution) => match solution.sigma2 {
            Some(sigma2) => println!(
                "oracle: Q* = {:.6}, asymptotic variance {:.6} (at nu = 1)",
                solution.qstar, sigma2
            ),
            None => println!(
                "oracle: Q* = {:.6}, variance unavailable (empirical sources)",
                solution.qstar
            ),
        },
        Err(err) => println!("oracle unavailable: {err}"),
    }
    for warning in &diagnostics.warnings {
        println!("warning: {warning}");
    }
    Ok(())
}
