//! Critical values for the self-normalized pivot, by Brownian Monte Carlo.
//!
//! The studentized estimator converges to U = B(1)/sqrt(V) where
//! V = sum_m (r_m - r_{m-1}) (B(r_m) - g(r_m) B(1))^2 over the schedule's
//! time grid, with g(r_m) = m/T. The critical value is the (1 - alpha/2)
//! quantile of U, which depends only on the grid, so values are cached in a
//! table keyed by the block-sequence signature.

use crate::error::{Error, Result};
use crate::schedule::CommSchedule;
use crate::streams::{substream, Domain};
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::fs;
use std::path::Path;

/// Default Monte Carlo effort per cached entry.
pub const DEFAULT_PIVOT_PATHS: u64 = 200_000;

/// Time grid and drift curve for one pivot simulation.
#[derive(Debug, Clone)]
pub struct PivotSpec {
    grid: Vec<f64>,
    g_values: Vec<f64>,
    alpha: f64,
}

impl PivotSpec {
    /// Grid taken from a communication schedule; g(r_m) = m/T.
    pub fn from_schedule(schedule: &CommSchedule, alpha: f64) -> Result<Self> {
        let t = schedule.rounds();
        let g_values = (1..=t).map(|m| m as f64 / t as f64).collect();
        Self::new(schedule.grid().to_vec(), g_values, alpha)
    }

    /// Uniform grid r_m = m/points with g(r) = r; this is the grid of a
    /// constant single-step schedule with `points` rounds.
    pub fn uniform(points: u64, alpha: f64) -> Result<Self> {
        let grid: Vec<f64> = (1..=points).map(|m| m as f64 / points as f64).collect();
        Self::new(grid.clone(), grid, alpha)
    }

    fn new(grid: Vec<f64>, g_values: Vec<f64>, alpha: f64) -> Result<Self> {
        if grid.len() < 2 {
            return Err(Error::config(format!(
                "pivot grid needs at least 2 points, got {}",
                grid.len()
            )));
        }
        if grid.len() != g_values.len() {
            return Err(Error::config("grid and g curve lengths differ"));
        }
        if !(alpha > 0.0 && alpha < 1.0) {
            return Err(Error::config(format!("alpha must lie in (0, 1), got {alpha}")));
        }
        let mut prev = 0.0;
        for &r in &grid {
            if !(r > prev) || !r.is_finite() {
                return Err(Error::config("pivot grid must be strictly increasing from 0"));
            }
            prev = r;
        }
        if (prev - 1.0).abs() > 1e-9 {
            return Err(Error::config(format!("pivot grid must end at 1, got {prev}")));
        }
        let mut gprev = 0.0;
        for &g in &g_values {
            if !(g >= gprev && g <= 1.0 + 1e-12) {
                return Err(Error::config("g curve must be non-decreasing into [0, 1]"));
            }
            gprev = g;
        }
        Ok(Self { grid, g_values, alpha })
    }

    pub fn grid(&self) -> &[f64] {
        &self.grid
    }

    pub fn g_values(&self) -> &[f64] {
        &self.g_values
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }
}

/// Brownian substeps per grid cell: short grids are refined so every cell
/// is simulated with at least ~50 increments overall.
pub(crate) fn substeps_for(points: usize) -> usize {
    if points >= 50 {
        1
    } else {
        (50 + points - 1) / points
    }
}

/// Simulate all pivot draws. Each path gets its own counter-based stream,
/// so the result is independent of thread count.
pub fn pivot_samples(spec: &PivotSpec, paths: u64, seed: u64) -> Result<Vec<f64>> {
    if paths < 10_000 {
        return Err(Error::config(format!(
            "pivot simulation needs at least 10000 paths, got {paths}"
        )));
    }
    let t = spec.grid.len();
    let k = substeps_for(t);
    let mut dt = Vec::with_capacity(t);
    let mut sub_sd = Vec::with_capacity(t);
    let mut prev = 0.0;
    for &r in &spec.grid {
        let d = r - prev;
        dt.push(d);
        sub_sd.push((d / k as f64).sqrt());
        prev = r;
    }
    let cg: f64 = dt
        .iter()
        .zip(&spec.g_values)
        .map(|(&w, &g)| w * g * g)
        .sum();

    let samples: Vec<f64> = (0..paths)
        .into_par_iter()
        .map(|path| {
            let mut rng = substream(seed, Domain::Pivot, path, 0);
            let mut b = 0.0;
            let mut s1 = 0.0;
            let mut s2 = 0.0;
            for m in 0..t {
                for _ in 0..k {
                    let z: f64 = rng.sample(StandardNormal);
                    b += sub_sd[m] * z;
                }
                let w = dt[m];
                s1 += w * b * b;
                s2 += w * spec.g_values[m] * b;
            }
            let b1 = b;
            let v = (s1 - 2.0 * b1 * s2 + b1 * b1 * cg).max(f64::MIN_POSITIVE);
            b1 / v.sqrt()
        })
        .collect();

    if samples.iter().any(|u| !u.is_finite()) {
        return Err(Error::numeric("non-finite pivot draw"));
    }
    Ok(samples)
}

/// Index of the empirical `level` quantile in a sample of size n:
/// ceil(level * n) - 1, zero-based.
fn quantile_index(n: usize, level: f64) -> usize {
    let idx = (level * n as f64).ceil() as usize;
    idx.clamp(1, n) - 1
}

fn empirical_quantile(samples: &mut [f64], level: f64) -> f64 {
    let idx = quantile_index(samples.len(), level);
    let (_, at, _) = samples.select_nth_unstable_by(idx, f64::total_cmp);
    *at
}

/// The (1 - alpha/2) quantile of the simulated pivot.
pub fn pivot_quantile(spec: &PivotSpec, paths: u64, seed: u64) -> Result<f64> {
    let mut samples = pivot_samples(spec, paths, seed)?;
    let v = empirical_quantile(&mut samples, 1.0 - spec.alpha / 2.0);
    if !(v > 0.0 && v.is_finite()) {
        return Err(Error::numeric(format!("pivot critical value {v} is not positive")));
    }
    Ok(v)
}

const TABLE_VERSION: u32 = 1;

/// One cached critical value with its provenance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PivotEntry {
    pub schedule_signature: String,
    pub alpha: f64,
    pub paths: u64,
    pub seed: u64,
    pub v: f64,
}

/// Persistent cache of critical values keyed by (block-sequence signature,
/// alpha).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PivotTable {
    version: u32,
    entries: Vec<PivotEntry>,
}

impl Default for PivotTable {
    fn default() -> Self {
        Self::new()
    }
}

impl PivotTable {
    pub fn new() -> Self {
        Self {
            version: TABLE_VERSION,
            entries: Vec::new(),
        }
    }

    pub fn entries(&self) -> &[PivotEntry] {
        &self.entries
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let table: PivotTable = serde_json::from_str(&text)
            .map_err(|e| Error::config(format!("pivot table {}: {e}", path.display())))?;
        if table.version != TABLE_VERSION {
            return Err(Error::config(format!(
                "pivot table version {} unsupported (expected {TABLE_VERSION})",
                table.version
            )));
        }
        for entry in &table.entries {
            if !(entry.v > 0.0 && entry.v.is_finite()) {
                return Err(Error::config(format!(
                    "pivot table entry for {} has non-positive value {}",
                    entry.schedule_signature, entry.v
                )));
            }
        }
        Ok(table)
    }

    /// Load, treating a missing file as an empty table.
    pub fn load_or_empty(path: &Path) -> Result<Self> {
        match fs::metadata(path) {
            Ok(_) => Self::load(path),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(Self::new()),
            Err(e) => Err(e.into()),
        }
    }

    /// Atomic save: write a sibling temp file, then rename over the target.
    /// Concurrent builders of the same entry write identical bytes, so
    /// last-writer-wins is harmless.
    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            if !parent.as_os_str().is_empty() {
                fs::create_dir_all(parent)?;
            }
        }
        let text = serde_json::to_string_pretty(self)
            .map_err(|e| Error::config(format!("pivot table serialization: {e}")))?;
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, text)?;
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn get(&self, signature: &str, alpha: f64) -> Option<f64> {
        self.entries
            .iter()
            .find(|e| e.schedule_signature == signature && e.alpha == alpha)
            .map(|e| e.v)
    }

    /// Insert or replace the entry for (signature, alpha).
    pub fn insert(&mut self, entry: PivotEntry) {
        if let Some(existing) = self
            .entries
            .iter_mut()
            .find(|e| e.schedule_signature == entry.schedule_signature && e.alpha == entry.alpha)
        {
            *existing = entry;
        } else {
            self.entries.push(entry);
        }
    }

    /// Cached value for (signature, alpha), computing and inserting it on a
    /// miss. A hit returns the stored value even if it was built with a
    /// different path count or seed; rebuild by removing the file.
    pub fn ensure(
        &mut self,
        spec: &PivotSpec,
        signature: &str,
        paths: u64,
        seed: u64,
    ) -> Result<f64> {
        if let Some(v) = self.get(signature, spec.alpha) {
            return Ok(v);
        }
        let v = pivot_quantile(spec, paths, seed)?;
        self.insert(PivotEntry {
            schedule_signature: signature.to_string(),
            alpha: spec.alpha,
            paths,
            seed,
            v,
        });
        Ok(v)
    }
}

/// Critical value for a schedule, served from the table at `table_path`
/// (built and persisted on a miss).
pub fn schedule_critical_value(
    table_path: &Path,
    schedule: &CommSchedule,
    alpha: f64,
    paths: u64,
    seed: u64,
) -> Result<f64> {
    let spec = PivotSpec::from_schedule(schedule, alpha)?;
    let signature = schedule.signature();
    let mut table = PivotTable::load_or_empty(table_path)?;
    if let Some(v) = table.get(&signature, alpha) {
        return Ok(v);
    }
    let v = table.ensure(&spec, &signature, paths, seed)?;
    table.save(table_path)?;
    Ok(v)
}
