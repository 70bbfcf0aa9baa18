//! Replication engine, metrics, and report emission.
//!
//! Replications are embarrassingly parallel: each gets disjoint
//! counter-based streams, so reports are identical for any worker count.

use crate::baselines::{dc_run, dpsgd_run};
use crate::config::FederationConfig;
use crate::coordinator::run_federated;
use crate::dist::DistributionSpec;
use crate::error::{Error, Result};
use crate::inference::{confidence_interval, SelfNormAccumulators};
use crate::pivot::{schedule_critical_value, DEFAULT_PIVOT_PATHS};
use crate::scenarios::{make_scenario, oracle_quantile, ScenarioSpec};
use crate::schedule::{CommSchedule, Horizon, Strategy};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::io;
use std::path::PathBuf;
use std::time::{Duration, Instant};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Method {
    /// The main protocol: randomized-response local SGD with
    /// self-normalized intervals.
    LdpFed,
    /// Laplace-noise gradient perturbation on single-step rounds.
    DpSgd,
    /// One-shot divide-and-conquer averaging.
    Dc,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::LdpFed => "LDPFed",
            Method::DpSgd => "DPSGD",
            Method::Dc => "DC",
        }
    }

    pub fn from_name(name: &str) -> Result<Self> {
        match name.to_ascii_lowercase().replace(['-', '_'], "").as_str() {
            "ldpfed" => Ok(Method::LdpFed),
            "dpsgd" => Ok(Method::DpSgd),
            "dc" => Ok(Method::Dc),
            other => Err(Error::config(format!("unknown method '{other}'"))),
        }
    }
}

/// One experiment: a config, a method, and replication bookkeeping.
#[derive(Debug, Clone)]
pub struct ExperimentPlan {
    pub config: FederationConfig,
    pub method: Method,
    pub replications: u64,
    /// Where the pivot cache lives; built on demand.
    pub pivot_table: PathBuf,
    pub pivot_paths: u64,
    pub pivot_seed: u64,
    /// Label echoed into reports.
    pub scenario: String,
    /// Optional report destination, used by the CLI layer.
    pub output: Option<PathBuf>,
}

impl ExperimentPlan {
    pub fn new(
        config: FederationConfig,
        method: Method,
        replications: u64,
        pivot_table: PathBuf,
    ) -> Self {
        Self {
            config,
            method,
            replications,
            pivot_table,
            pivot_paths: DEFAULT_PIVOT_PATHS,
            pivot_seed: 0,
            scenario: "custom".to_string(),
            output: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.config.validate()?;
        if self.replications == 0 {
            return Err(Error::config("a plan needs at least one replication"));
        }
        Ok(())
    }
}

/// Outcome of a single replication, scored against the reference quantile.
#[derive(Debug, Clone, PartialEq)]
pub struct ReplicationRecord {
    pub replication: u64,
    pub estimate: f64,
    pub lo: f64,
    pub hi: f64,
    pub covered: bool,
    pub abs_error: f64,
}

/// What the records were scored against.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReferenceKind {
    /// Analytic mixture quantile from the scenario oracle.
    Oracle,
    /// Pooled plug-in quantile of the empirical sources; coverage against
    /// it is descriptive, not a correctness claim.
    PlugIn,
}

/// One emitted report row; exactly the columns of the report CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub scenario: String,
    pub method: String,
    pub strategy: String,
    pub tau: f64,
    pub rate: f64,
    #[serde(rename = "t_T")]
    pub t_total: u64,
    #[serde(rename = "T")]
    pub rounds: u64,
    #[serde(rename = "R")]
    pub replications: u64,
    #[serde(rename = "ECP")]
    pub ecp: f64,
    #[serde(rename = "MAE")]
    pub mae: f64,
    pub mean_ci_len: f64,
    pub seed: u64,
}

/// Summary metrics plus run metadata that stays out of the emitted rows.
#[derive(Debug, Clone)]
pub struct MetricsReport {
    pub row: ReportRow,
    pub qstar: f64,
    pub reference: ReferenceKind,
    pub wall_clock: Duration,
}

/// Left-continuous inverse of the weighted pooled empirical CDF: the
/// smallest stored value whose cumulative weight reaches tau.
pub fn plug_in_quantile(clients: &[crate::config::ClientSpec], tau: f64) -> Result<f64> {
    if !(tau > 0.0 && tau < 1.0) {
        return Err(Error::config(format!("level must lie in (0, 1), got {tau}")));
    }
    let mut points: Vec<(f64, f64)> = Vec::new();
    for client in clients {
        match &client.source {
            DistributionSpec::Empirical { values, .. } => {
                let mass = client.weight / values.len() as f64;
                points.extend(values.iter().map(|&v| (v, mass)));
            }
            other => {
                return Err(Error::config(format!(
                    "plug-in quantile needs empirical sources, client {} has {other:?}",
                    client.id
                )))
            }
        }
    }
    if points.is_empty() {
        return Err(Error::config("no values to take a quantile of"));
    }
    points.sort_by(|a, b| a.0.total_cmp(&b.0));
    let total: f64 = points.iter().map(|p| p.1).sum();
    let mut cum = 0.0;
    for &(v, w) in &points {
        cum += w;
        if cum >= tau * total - 1e-12 {
            return Ok(v);
        }
    }
    Ok(points.last().expect("non-empty").0)
}

fn reference_quantile(config: &FederationConfig) -> Result<(f64, ReferenceKind)> {
    let tau = config.global_level();
    if config.clients.iter().any(|c| c.source.is_empirical()) {
        Ok((plug_in_quantile(&config.clients, tau)?, ReferenceKind::PlugIn))
    } else {
        Ok((
            oracle_quantile(&config.clients, tau, 1e-10)?.qstar,
            ReferenceKind::Oracle,
        ))
    }
}

/// Run all replications of a plan. The pivot entry for (schedule, alpha) is
/// resolved up front (built and cached on a miss); each replication then
/// produces an estimate and interval via the plan's method.
pub fn run_replications(plan: &ExperimentPlan) -> Result<Vec<ReplicationRecord>> {
    plan.validate()?;
    let config = &plan.config;
    let (qref, _kind) = reference_quantile(config)?;

    let critical = match plan.method {
        Method::Dc => None,
        Method::LdpFed | Method::DpSgd => Some(schedule_critical_value(
            &plan.pivot_table,
            &config.schedule,
            config.alpha,
            plan.pivot_paths,
            plan.pivot_seed,
        )?),
    };

    (0..plan.replications)
        .into_par_iter()
        .map(|rep| {
            let (estimate, lo, hi) = match plan.method {
                Method::LdpFed => {
                    let v = critical.expect("pivot value resolved");
                    let traj = run_federated(config, rep)?;
                    let (acc, final_avg) = SelfNormAccumulators::from_trajectory(&traj)?;
                    let vhat = acc.normalizer(final_avg)?;
                    let ci = confidence_interval(final_avg, vhat, v, 1.0 - config.alpha)?;
                    (final_avg, ci.lo, ci.hi)
                }
                Method::DpSgd => {
                    let v = critical.expect("pivot value resolved");
                    let (traj, ci) = dpsgd_run(config, rep, v)?;
                    (traj.final_average(), ci.lo, ci.hi)
                }
                Method::Dc => {
                    let result = dc_run(config, rep)?;
                    let ci = result
                        .interval
                        .expect("divide-and-conquer defines an interval");
                    (result.estimate, ci.lo, ci.hi)
                }
            };
            Ok(ReplicationRecord {
                replication: rep,
                estimate,
                lo,
                hi,
                covered: lo <= qref && qref <= hi,
                abs_error: (estimate - qref).abs(),
            })
        })
        .collect()
}

/// Aggregate records into the metrics row.
pub fn summarize(
    plan: &ExperimentPlan,
    qstar: f64,
    reference: ReferenceKind,
    records: &[ReplicationRecord],
    wall_clock: Duration,
) -> Result<MetricsReport> {
    if records.is_empty() {
        return Err(Error::config("cannot summarize zero records"));
    }
    let n = records.len() as f64;
    let mae = records.iter().map(|r| r.abs_error).sum::<f64>() / n;
    let covered = records.iter().filter(|r| r.covered).count() as f64;
    let mean_ci_len = records.iter().map(|r| r.hi - r.lo).sum::<f64>() / n;
    let config = &plan.config;
    Ok(MetricsReport {
        row: ReportRow {
            scenario: plan.scenario.clone(),
            method: plan.method.name().to_string(),
            strategy: config.schedule.strategy().name().to_string(),
            tau: config.global_level(),
            rate: config.mean_rate(),
            t_total: config.schedule.total_samples(),
            rounds: config.schedule.rounds() as u64,
            replications: records.len() as u64,
            ecp: covered / n,
            mae,
            mean_ci_len,
            seed: config.master_seed,
        },
        qstar,
        reference,
        wall_clock,
    })
}

/// Replications plus summary, timed.
pub fn run_experiment(plan: &ExperimentPlan) -> Result<(MetricsReport, Vec<ReplicationRecord>)> {
    let start = Instant::now();
    let (qref, kind) = reference_quantile(&plan.config)?;
    let records = run_replications(plan)?;
    let report = summarize(plan, qref, kind, &records, start.elapsed())?;
    Ok((report, records))
}

/// Write rows as CSV with the fixed column order.
pub fn emit_csv<W: io::Write>(rows: &[ReportRow], w: W) -> Result<()> {
    let mut writer = csv::Writer::from_writer(w);
    for row in rows {
        writer
            .serialize(row)
            .map_err(|e| Error::config(format!("report serialization: {e}")))?;
    }
    writer.flush()?;
    Ok(())
}

pub fn parse_csv<R: io::Read>(r: R) -> Result<Vec<ReportRow>> {
    let mut reader = csv::Reader::from_reader(r);
    let mut rows = Vec::new();
    for record in reader.deserialize() {
        rows.push(record.map_err(|e| Error::config(format!("report parse: {e}")))?);
    }
    Ok(rows)
}

pub fn emit_json(rows: &[ReportRow]) -> Result<String> {
    serde_json::to_string_pretty(rows)
        .map_err(|e| Error::config(format!("report serialization: {e}")))
}

pub fn parse_json(text: &str) -> Result<Vec<ReportRow>> {
    serde_json::from_str(text).map_err(|e| Error::config(format!("report parse: {e}")))
}

fn default_alpha() -> f64 {
    0.05
}

/// A grid of experiments: the Cartesian product of scenarios, levels,
/// rates, strategies, and methods, sharing one master seed so paired cells
/// see common random numbers.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepPlan {
    pub scenarios: Vec<String>,
    pub clients: usize,
    pub taus: Vec<f64>,
    pub rates: Vec<f64>,
    pub strategies: Vec<String>,
    pub methods: Vec<String>,
    #[serde(default)]
    pub rounds: Option<u64>,
    #[serde(default)]
    pub total_samples: Option<u64>,
    pub warmup_frac: f64,
    pub replications: u64,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    pub master_seed: u64,
    /// Seed for scenario construction; defaults to the master seed.
    #[serde(default)]
    pub scenario_seed: Option<u64>,
    /// Draw heterogeneous parameters randomly instead of on a grid.
    #[serde(default)]
    pub randomized: bool,
}

impl SweepPlan {
    pub fn from_json_str(text: &str) -> Result<Self> {
        let plan: SweepPlan =
            serde_json::from_str(text).map_err(|e| Error::config(format!("sweep plan: {e}")))?;
        plan.validate()?;
        Ok(plan)
    }

    pub fn validate(&self) -> Result<()> {
        if self.scenarios.is_empty()
            || self.taus.is_empty()
            || self.rates.is_empty()
            || self.strategies.is_empty()
            || self.methods.is_empty()
        {
            return Err(Error::config("sweep grid has an empty axis"));
        }
        match (self.rounds, self.total_samples) {
            (Some(_), None) | (None, Some(_)) => {}
            _ => {
                return Err(Error::config(
                    "specify exactly one of rounds and total_samples",
                ))
            }
        }
        if self.replications == 0 {
            return Err(Error::config("sweep needs at least one replication"));
        }
        Ok(())
    }

    fn horizon(&self) -> Horizon {
        match (self.rounds, self.total_samples) {
            (Some(t), None) => Horizon::Rounds(t),
            (None, Some(s)) => Horizon::Samples(s),
            _ => unreachable!("validated"),
        }
    }
}

/// Run every cell of the grid in declaration order (scenario-major, method
/// last). Nothing is skipped: a cell that cannot run fails the sweep.
pub fn run_sweep(plan: &SweepPlan, pivot_table: &PathBuf) -> Result<Vec<ReportRow>> {
    plan.validate()?;
    let scenario_seed = plan.scenario_seed.unwrap_or(plan.master_seed);
    let mut rows = Vec::new();
    for scenario_name in &plan.scenarios {
        for &tau in &plan.taus {
            for &rate in &plan.rates {
                let mut spec = ScenarioSpec::preset(scenario_name, plan.clients, tau, rate)?;
                spec.randomized = plan.randomized;
                let clients = make_scenario(&spec, scenario_seed)?;
                for strategy_name in &plan.strategies {
                    let strategy = Strategy::from_name(strategy_name)?;
                    let schedule =
                        CommSchedule::build(strategy, plan.horizon(), plan.warmup_frac)?;
                    for method_name in &plan.methods {
                        let method = Method::from_name(method_name)?;
                        let config = FederationConfig {
                            clients: clients.clone(),
                            schedule: schedule.clone(),
                            policy: Default::default(),
                            alpha: plan.alpha,
                            master_seed: plan.master_seed,
                            clamp_bounds: None,
                        };
                        let mut cell = ExperimentPlan::new(
                            config,
                            method,
                            plan.replications,
                            pivot_table.clone(),
                        );
                        cell.scenario = scenario_name.clone();
                        let (report, _) = run_experiment(&cell)?;
                        rows.push(report.row);
                    }
                }
            }
        }
    }
    Ok(rows)
}
