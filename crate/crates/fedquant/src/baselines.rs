//! Comparison methods: Laplace-noise DP-SGD and one-shot divide-and-conquer.
//!
//! DP-SGD privatizes the subgradient by adding Laplace noise calibrated to
//! the same budget as the randomized-response rate, runs single-step rounds,
//! and reuses the coordinator loop and self-normalized inference unchanged.
//! Divide-and-conquer runs every local step without communication and
//! averages once at the end; it has no path to self-normalize over, so its
//! interval is a cross-client normal approximation.

use crate::client::{local_step, step_coefficients};
use crate::config::FederationConfig;
use crate::coordinator::{assemble_slots, run_rounds, InProcessBarrier, RunOptions, Trajectory};
use crate::error::{Error, Result};
use crate::inference::{confidence_interval, ConfidenceInterval, SelfNormAccumulators};
use crate::mechanism::{epsilon_of, privatize};
use crate::schedule::step_sizes;
use crate::streams::{substream, Domain};
use rand::Rng;
use rand_distr::Exp1;
use statrs::distribution::{ContinuousCDF, Normal};
use std::collections::HashMap;
use std::sync::Arc;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BaselineMethod {
    DpSgd,
    Dc,
}

/// Point estimate plus whatever interval the method defines.
#[derive(Debug, Clone)]
pub struct BaselineResult {
    pub estimate: f64,
    pub interval: Option<ConfidenceInterval>,
    pub method: BaselineMethod,
}

/// Mean-zero Laplace draw via the difference of two unit exponentials.
pub fn laplace<R: Rng + ?Sized>(scale: f64, rng: &mut R) -> f64 {
    let e1: f64 = rng.sample(Exp1);
    let e2: f64 = rng.sample(Exp1);
    scale * (e1 - e2)
}

/// Noise scale matching a truthful-response rate: 1/epsilon, with the
/// fully truthful rate mapping to zero noise.
pub fn laplace_scale_for_rate(rate: f64) -> Result<f64> {
    let eps = epsilon_of(rate)?;
    if eps.is_infinite() {
        Ok(0.0)
    } else {
        Ok(1.0 / eps)
    }
}

/// One noisy subgradient step: q + eta * (tau 1(x>q) - (1-tau) 1(x<q) + Z)
/// with Z ~ Laplace(0, 1/eps). An infinite budget gives Z = 0 and consumes
/// no randomness.
pub fn dpsgd_step<R: Rng + ?Sized>(
    q: f64,
    x: f64,
    eta: f64,
    tau: f64,
    eps: f64,
    rng: &mut R,
) -> Result<f64> {
    if !(eps > 0.0) {
        return Err(Error::config(format!(
            "privacy budget must be positive, got {eps}"
        )));
    }
    let z = if eps.is_infinite() {
        0.0
    } else {
        laplace(1.0 / eps, rng)
    };
    let up = if x > q { tau } else { 0.0 };
    let down = if x < q { 1.0 - tau } else { 0.0 };
    Ok(q + eta * (up - down + z))
}

/// One replication of the DP-SGD comparison: the coordinator loop with the
/// noisy subgradient step in place of the privatized debiased step. Clients
/// target their own levels here, matching the method being reproduced.
/// Requires single-step rounds.
pub fn dpsgd_run(
    config: &FederationConfig,
    replication: u64,
    critical: f64,
) -> Result<(Trajectory, ConfidenceInterval)> {
    config.validate()?;
    if config.schedule.blocks().iter().any(|&e| e != 1) {
        return Err(Error::config(
            "the DP-SGD comparison is defined for single-step rounds only",
        ));
    }
    let schedule = Arc::new(config.schedule.clone());
    let steps = step_sizes(&config.policy, &schedule, config.mean_rate())?;
    let (mut slots, _q0) = assemble_slots(config, replication)?;

    let mut own_tau = HashMap::new();
    let mut budgets = HashMap::new();
    for spec in &config.clients {
        own_tau.insert(spec.id, spec.quantile_level);
        budgets.insert(spec.id, epsilon_of(spec.truthful_rate)?);
    }
    for slot in slots.iter_mut() {
        slot.tau = own_tau[&slot.id];
    }
    let mut noise: HashMap<u64, _> = config
        .clients
        .iter()
        .map(|spec| {
            (
                spec.id,
                substream(config.master_seed, Domain::Noise, replication, spec.id),
            )
        })
        .collect();

    let mut transport = InProcessBarrier::new(slots.iter().map(|s| s.id).collect());
    let traj = run_rounds(
        &schedule,
        &steps,
        &mut slots,
        &mut transport,
        |slot, m, _block_len, eta| {
            let x = slot.data.next_sample().ok_or_else(|| {
                Error::numeric(format!(
                    "client {} exhausted its data source at round {m}",
                    slot.id
                ))
            })?;
            let rng = noise.get_mut(&slot.id).expect("noise stream per client");
            let mut q = dpsgd_step(slot.state.q, x, eta, slot.tau, budgets[&slot.id], rng)?;
            if let Some((lo, hi)) = slot.state.clamp {
                q = q.clamp(lo, hi);
            }
            slot.state.q = q;
            slot.state.steps_taken += 1;
            Ok(())
        },
        &RunOptions::default(),
    )?;

    let (acc, final_avg) = SelfNormAccumulators::from_trajectory(&traj)?;
    let vhat = acc.normalizer(final_avg)?;
    let ci = confidence_interval(final_avg, vhat, critical, 1.0 - config.alpha)?;
    Ok((traj, ci))
}

/// Per-client divide-and-conquer paths: every client runs all of its
/// privatized steps locally with the decayed step rule, no communication.
/// Returns (final iterate, running-mean average) per client in ascending
/// id order.
pub fn dc_client_paths(config: &FederationConfig, replication: u64) -> Result<Vec<(f64, f64)>> {
    config.validate()?;
    let n = config.schedule.total_samples();
    if n == 0 {
        return Err(Error::config("divide-and-conquer needs at least one sample"));
    }
    let rbar = config.mean_rate();
    let global_tau = config.global_level();
    let etas: Vec<f64> = (1..=n)
        .map(|t| 2.0 * rbar / ((t as f64).powf(0.51) + 100.0))
        .collect();

    let (slots, _q0) = assemble_slots(config, replication)?;
    let mut out = Vec::with_capacity(slots.len());
    for mut slot in slots {
        let coeffs = step_coefficients(slot.rate, global_tau)?;
        let mut sum = 0.0;
        for (t, &eta) in etas.iter().enumerate() {
            let x = slot.data.next_sample().ok_or_else(|| {
                Error::numeric(format!(
                    "client {} exhausted its data source at step {}",
                    slot.id,
                    t + 1
                ))
            })?;
            let s = privatize(x, slot.state.q, slot.rate, &mut slot.state.rng);
            local_step(&mut slot.state, s, eta, coeffs);
            sum += slot.state.q;
        }
        if !slot.state.q.is_finite() {
            return Err(Error::numeric(format!(
                "client {} diverged during local steps",
                slot.id
            )));
        }
        out.push((slot.state.q, sum / n as f64));
    }
    Ok(out)
}

/// One replication of divide-and-conquer: weighted mean of the clients'
/// averaged paths, with a cross-client normal interval (standard error =
/// weighted spread scaled by the effective-size factor sqrt(sum p_k^2)).
pub fn dc_run(config: &FederationConfig, replication: u64) -> Result<BaselineResult> {
    let paths = dc_client_paths(config, replication)?;

    let mut order: Vec<&crate::config::ClientSpec> = config.clients.iter().collect();
    order.sort_by_key(|c| c.id);
    let estimate: f64 = order
        .iter()
        .zip(&paths)
        .map(|(spec, &(_, avg))| spec.weight * avg)
        .sum();
    let spread: f64 = order
        .iter()
        .zip(&paths)
        .map(|(spec, &(_, avg))| spec.weight * (avg - estimate) * (avg - estimate))
        .sum();
    let effective: f64 = order.iter().map(|spec| spec.weight * spec.weight).sum();
    let se = spread.sqrt() * effective.sqrt();

    let normal = Normal::new(0.0, 1.0).expect("standard normal");
    let z = normal.inverse_cdf(1.0 - config.alpha / 2.0);
    let interval = confidence_interval(estimate, se * se, z.max(f64::MIN_POSITIVE), 1.0 - config.alpha)?;

    Ok(BaselineResult {
        estimate,
        interval: Some(interval),
        method: BaselineMethod::Dc,
    })
}
