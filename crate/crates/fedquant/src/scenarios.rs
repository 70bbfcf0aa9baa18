//! Scenario generation and ground-truth oracles.
//!
//! Scenarios assemble client populations along three axes: the data law,
//! the per-client quantile levels, and the per-client truthful-response
//! rates. Oracles solve for the global quantile of the weighted mixture and
//! evaluate the asymptotic variance of the averaged estimator.

use rand::Rng;
use rand_distr::Distribution;

use crate::config::ClientSpec;
use crate::dist::DistributionSpec;
use crate::error::{Error, Result};
use crate::streams::{substream, Domain};

/// Data-law axis of a scenario.
#[derive(Debug, Clone, PartialEq)]
pub enum DataScenario {
    /// Every client draws from the same source.
    Shared(DistributionSpec),
    /// Client k draws from N(mu_k, 1) with mu_k ~ N(0,1) from the scenario
    /// stream.
    RandomLocations,
    /// Normal(0,1), Uniform(-1,1), and Cauchy(0,1) clients in proportions
    /// 3:3:4 (largest-remainder rounding away from K = 10).
    MixedFamilies,
}

/// Per-client quantile-level axis.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LevelAxis {
    Fixed(f64),
    /// Levels spread over [lo, hi]: an inclusive equally spaced grid, or
    /// uniform draws when the scenario is randomized.
    Range(f64, f64),
}

/// Per-client truthful-rate axis.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum RateAxis {
    Fixed(f64),
    Range(f64, f64),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioSpec {
    pub data: DataScenario,
    pub levels: LevelAxis,
    pub rates: RateAxis,
    pub clients: usize,
    /// Draw range axes uniformly at random instead of on a grid.
    pub randomized: bool,
}

impl ScenarioSpec {
    /// Named presets. `tau` and `rate` fill the axes a preset leaves free.
    pub fn preset(name: &str, clients: usize, tau: f64, rate: f64) -> Result<Self> {
        let base = ScenarioSpec {
            data: DataScenario::Shared(DistributionSpec::standard_normal()),
            levels: LevelAxis::Fixed(tau),
            rates: RateAxis::Fixed(rate),
            clients,
            randomized: false,
        };
        Ok(match name {
            "homogeneous" => base,
            "tau_low" => ScenarioSpec {
                levels: LevelAxis::Range(0.3, 0.5),
                ..base
            },
            "tau_high" => ScenarioSpec {
                levels: LevelAxis::Range(0.5, 0.8),
                ..base
            },
            "hetero_rates" => ScenarioSpec {
                rates: RateAxis::Range(0.25, 0.9),
                ..base
            },
            "hete_l" | "HeteL" => ScenarioSpec {
                data: DataScenario::RandomLocations,
                ..base
            },
            "hete_d" | "HeteD" => ScenarioSpec {
                data: DataScenario::MixedFamilies,
                ..base
            },
            other => {
                return Err(Error::config(format!(
                    "unknown scenario preset {other:?}; expected homogeneous, tau_low, \
                     tau_high, hetero_rates, hete_l, or hete_d"
                )))
            }
        })
    }
}

/// Inclusive equally spaced grid over [lo, hi]; midpoint for a single point.
fn linspace(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![(lo + hi) / 2.0];
    }
    (0..n)
        .map(|k| lo + (hi - lo) * k as f64 / (n - 1) as f64)
        .collect()
}

/// Build the client population for a scenario.
///
/// Deterministic given the seed. The scenario stream is consumed in a fixed
/// order: locations first, then randomized levels, then randomized rates.
pub fn make_scenario(spec: &ScenarioSpec, seed: u64) -> Result<Vec<ClientSpec>> {
    let k = spec.clients;
    if k == 0 {
        return Err(Error::config("scenario needs at least one client"));
    }
    let mut rng = substream(seed, Domain::Scenario, 0, 0);

    let sources: Vec<DistributionSpec> = match &spec.data {
        DataScenario::Shared(source) => {
            source.validate()?;
            vec![source.clone(); k]
        }
        DataScenario::RandomLocations => {
            let normal = rand_distr::StandardNormal;
            (0..k)
                .map(|_| {
                    let mu: f64 = normal.sample(&mut rng);
                    DistributionSpec::Normal { mu, sigma: 1.0 }
                })
                .collect()
        }
        DataScenario::MixedFamilies => {
            let counts = largest_remainder(k, &[0.3, 0.3, 0.4]);
            let mut v = Vec::with_capacity(k);
            v.extend(vec![DistributionSpec::standard_normal(); counts[0]]);
            v.extend(vec![
                DistributionSpec::Uniform { lo: -1.0, hi: 1.0 };
                counts[1]
            ]);
            v.extend(vec![
                DistributionSpec::Cauchy { x0: 0.0, gamma: 1.0 };
                counts[2]
            ]);
            v
        }
    };

    let levels = fill_axis_levels(spec.levels, k, spec.randomized, &mut rng)?;
    let rates = fill_axis_rates(spec.rates, k, spec.randomized, &mut rng)?;

    let weight = 1.0 / k as f64;
    let clients: Vec<ClientSpec> = (0..k)
        .map(|i| ClientSpec {
            id: i as u64,
            weight,
            quantile_level: levels[i],
            truthful_rate: rates[i],
            source: sources[i].clone(),
        })
        .collect();
    for c in &clients {
        c.validate()?;
    }
    Ok(clients)
}

fn fill_axis_levels(
    axis: LevelAxis,
    k: usize,
    randomized: bool,
    rng: &mut impl Rng,
) -> Result<Vec<f64>> {
    let vals = match axis {
        LevelAxis::Fixed(tau) => vec![tau; k],
        LevelAxis::Range(lo, hi) => range_values(lo, hi, k, randomized, rng)?,
    };
    for &tau in &vals {
        if !(tau > 0.0 && tau < 1.0) {
            return Err(Error::config(format!(
                "scenario produced quantile level {tau} outside (0, 1)"
            )));
        }
    }
    Ok(vals)
}

fn fill_axis_rates(
    axis: RateAxis,
    k: usize,
    randomized: bool,
    rng: &mut impl Rng,
) -> Result<Vec<f64>> {
    let vals = match axis {
        RateAxis::Fixed(rate) => vec![rate; k],
        RateAxis::Range(lo, hi) => range_values(lo, hi, k, randomized, rng)?,
    };
    for &rate in &vals {
        if !(rate > 0.0 && rate <= 1.0) {
            return Err(Error::config(format!(
                "scenario produced truthful rate {rate} outside (0, 1]"
            )));
        }
    }
    Ok(vals)
}

fn range_values(
    lo: f64,
    hi: f64,
    k: usize,
    randomized: bool,
    rng: &mut impl Rng,
) -> Result<Vec<f64>> {
    if !(lo.is_finite() && hi.is_finite() && lo < hi) {
        return Err(Error::config(format!(
            "scenario range needs lo < hi, got [{lo}, {hi}]"
        )));
    }
    Ok(if randomized {
        (0..k).map(|_| lo + (hi - lo) * rng.random::<f64>()).collect()
    } else {
        linspace(lo, hi, k)
    })
}

/// Apportion k slots to quotas by the largest-remainder rule; ties go to
/// the earlier entry so the split is deterministic.
fn largest_remainder(k: usize, shares: &[f64]) -> Vec<usize> {
    let quotas: Vec<f64> = shares.iter().map(|s| s * k as f64).collect();
    let mut counts: Vec<usize> = quotas.iter().map(|q| q.floor() as usize).collect();
    let assigned: usize = counts.iter().sum();
    let mut order: Vec<usize> = (0..shares.len()).collect();
    order.sort_by(|&a, &b| {
        let fa = quotas[a] - quotas[a].floor();
        let fb = quotas[b] - quotas[b].floor();
        fb.partial_cmp(&fa).unwrap().then(a.cmp(&b))
    });
    for &idx in order.iter().take(k - assigned) {
        counts[idx] += 1;
    }
    counts
}

/// Weighted mixture CDF over a client population.
pub fn mixture_cdf(clients: &[ClientSpec], x: f64) -> f64 {
    clients
        .iter()
        .map(|c| c.weight * c.source.cdf(x))
        .sum()
}

/// Ground truth for a scenario: the global quantile, each client's CDF at
/// it, the weighted density sum, and the asymptotic variance (at nu as
/// given; `None` where empirical sources leave the density undefined).
#[derive(Debug, Clone)]
pub struct OracleSolution {
    pub qstar: f64,
    /// F_k(qstar) per client, in input order.
    pub per_client_cdf: Vec<f64>,
    /// Sum of p_k f_k(qstar); `None` when any client is empirical.
    pub density_sum: Option<f64>,
    /// Asymptotic variance of sqrt(t_T)(Qhat - Q*); `None` when the density
    /// sum is unavailable or zero.
    pub sigma2: Option<f64>,
    /// Block-imbalance factor the variance was computed at.
    pub nu: f64,
}

/// Solve mixture_cdf(Q) = tau by bisection after doubling the bracket out
/// from [-1, 1]. The variance in the solution is computed at nu = 1; use
/// `theoretical_variance` for other schedules.
pub fn oracle_quantile(clients: &[ClientSpec], tau: f64, tol: f64) -> Result<OracleSolution> {
    if clients.is_empty() {
        return Err(Error::config("oracle needs at least one client"));
    }
    if !(tau > 0.0 && tau < 1.0) {
        return Err(Error::config(format!(
            "quantile level must lie in (0, 1), got {tau}"
        )));
    }
    if !(tol > 0.0) {
        return Err(Error::config(format!("tolerance must be positive, got {tol}")));
    }

    let f = |x: f64| mixture_cdf(clients, x);
    let mut lo = -1.0f64;
    let mut hi = 1.0f64;
    let mut doublings = 0;
    while f(lo) > tau {
        lo *= 2.0;
        doublings += 1;
        if doublings > 120 {
            return Err(Error::numeric(
                "bracket expansion failed after 120 doublings (lower end)",
            ));
        }
    }
    doublings = 0;
    while f(hi) < tau {
        hi *= 2.0;
        doublings += 1;
        if doublings > 120 {
            return Err(Error::numeric(
                "bracket expansion failed after 120 doublings (upper end)",
            ));
        }
    }

    let mut qstar = 0.5 * (lo + hi);
    let mut converged = false;
    for _ in 0..10_000 {
        qstar = 0.5 * (lo + hi);
        let val = f(qstar);
        if (val - tau).abs() <= tol {
            converged = true;
            break;
        }
        if val < tau {
            lo = qstar;
        } else {
            hi = qstar;
        }
    }
    if !converged {
        return Err(Error::numeric(format!(
            "bisection did not reach |F(Q) - tau| <= {tol}; the mixture CDF may be flat \
             (empirical sources) near the target level"
        )));
    }

    let per_client_cdf: Vec<f64> = clients.iter().map(|c| c.source.cdf(qstar)).collect();
    let density_sum = clients
        .iter()
        .map(|c| c.source.pdf(qstar).map(|d| c.weight * d))
        .sum::<Option<f64>>();

    let mut solution = OracleSolution {
        qstar,
        per_client_cdf,
        density_sum,
        sigma2: None,
        nu: 1.0,
    };
    if matches!(density_sum, Some(d) if d > 0.0) {
        let rates: Vec<f64> = clients.iter().map(|c| c.truthful_rate).collect();
        let weights: Vec<f64> = clients.iter().map(|c| c.weight).collect();
        solution.sigma2 = Some(theoretical_variance(&solution, &rates, &weights, 1.0)?);
    }
    Ok(solution)
}

/// Asymptotic variance of sqrt(t_T)(Qhat_T - Q*):
/// nu * sum p_k^2 (r_k^-2 - (2 F_k(Q*) - 1)^2) / (4 (sum p_k f_k(Q*))^2).
pub fn theoretical_variance(
    oracle: &OracleSolution,
    rates: &[f64],
    weights: &[f64],
    nu: f64,
) -> Result<f64> {
    if rates.len() != weights.len() || rates.len() != oracle.per_client_cdf.len() {
        return Err(Error::config(
            "rates, weights, and oracle per-client CDFs must have equal lengths",
        ));
    }
    if !(nu >= 1.0) {
        return Err(Error::config(format!(
            "block-imbalance factor must be >= 1, got {nu}"
        )));
    }
    let density_sum = match oracle.density_sum {
        Some(d) if d > 0.0 => d,
        Some(_) => {
            return Err(Error::numeric(
                "mixture density at the quantile is zero; variance undefined",
            ))
        }
        None => {
            return Err(Error::numeric(
                "variance unavailable: empirical sources have no density",
            ))
        }
    };
    let mut num = 0.0;
    for ((&r, &p), &qk) in rates.iter().zip(weights).zip(&oracle.per_client_cdf) {
        if !(r > 0.0 && r <= 1.0) {
            return Err(Error::config(format!(
                "truthful rate must lie in (0, 1], got {r}"
            )));
        }
        num += p * p * (r.powi(-2) - (2.0 * qk - 1.0).powi(2));
    }
    Ok(nu * num / (4.0 * density_sum * density_sum))
}
