//! Client-side local updates.
//!
//! Each local step privatizes one comparison and moves the iterate by an
//! asymmetric pair of coefficients that exactly cancels the randomized
//! response bias: in expectation the step drifts toward the target quantile
//! at a rate independent of the truthful-response rate.

use rand_chacha::ChaCha8Rng;

use crate::dist::SampleStream;
use crate::error::{Error, Result};
use crate::mechanism::{privatize, PrivatizedResponse};

#[derive(Debug, Clone)]
pub struct ClientState {
    pub client_id: u64,
    /// Current local iterate.
    pub q: f64,
    /// Local steps taken since the start of the run.
    pub steps_taken: u64,
    /// Mechanism randomness; one stream per (replication, client).
    pub rng: ChaCha8Rng,
    /// Optional projection interval for the iterate.
    pub clamp: Option<(f64, f64)>,
}

impl ClientState {
    pub fn new(client_id: u64, q0: f64, rng: ChaCha8Rng, clamp: Option<(f64, f64)>) -> Self {
        ClientState {
            client_id,
            q: q0,
            steps_taken: 0,
            rng,
            clamp,
        }
    }
}

/// Debiasing coefficients (up, down) for a given rate and level.
///
/// up = (1 - r + 2*tau*r) / (2r), down = (1 + r - 2*tau*r) / (2r).
/// They satisfy up + down = 1/r and up - down = 2*tau - 1.
pub fn step_coefficients(rate: f64, tau: f64) -> Result<(f64, f64)> {
    if !(rate > 0.0 && rate <= 1.0) {
        return Err(Error::config(format!(
            "truthful rate must lie in (0, 1], got {rate}"
        )));
    }
    if !(tau > 0.0 && tau < 1.0) {
        return Err(Error::config(format!(
            "quantile level must lie in (0, 1), got {tau}"
        )));
    }
    let up = (1.0 - rate + 2.0 * tau * rate) / (2.0 * rate);
    let down = (1.0 + rate - 2.0 * tau * rate) / (2.0 * rate);
    Ok((up, down))
}

/// Apply one debiased step: move up by `eta * up` on a 1-answer, down by
/// `eta * down` on a 0-answer, then project if a clamp is set.
#[inline]
pub fn local_step(state: &mut ClientState, s: bool, eta: f64, coeffs: (f64, f64)) {
    let (up, down) = coeffs;
    if s {
        state.q += eta * up;
    } else {
        state.q -= eta * down;
    }
    if let Some((lo, hi)) = state.clamp {
        state.q = state.q.clamp(lo, hi);
    }
    state.steps_taken += 1;
}

/// Run one communication block of `block_len` local steps at step size
/// `eta`. Consumes one data sample and two mechanism draws per step.
pub fn run_block(
    state: &mut ClientState,
    block_len: u64,
    eta: f64,
    tau: f64,
    rate: f64,
    data: &mut dyn SampleStream,
    round: u64,
) -> Result<()> {
    let coeffs = step_coefficients(rate, tau)?;
    for _ in 0..block_len {
        let x = data.next_sample().ok_or_else(|| {
            Error::numeric(format!(
                "client {} ran out of data in round {round} after {} steps",
                state.client_id, state.steps_taken
            ))
        })?;
        let response = PrivatizedResponse {
            s: privatize(x, state.q, rate, &mut state.rng),
            round,
            local_step: state.steps_taken + 1,
        };
        local_step(state, response.s, eta, coeffs);
    }
    if !state.q.is_finite() {
        return Err(Error::numeric(format!(
            "client {} iterate diverged to {} in round {round}",
            state.client_id, state.q
        )));
    }
    Ok(())
}

/// Expected per-step drift divided by eta, for a client whose sample CDF is
/// `cdf`: equals tau - cdf(q) regardless of the truthful rate.
pub fn expected_increment(q: f64, tau: f64, rate: f64, cdf: impl Fn(f64) -> f64) -> Result<f64> {
    let (up, down) = step_coefficients(rate, tau)?;
    let p_one = crate::mechanism::response_prob(1.0 - cdf(q), rate);
    Ok(p_one * up - (1.0 - p_one) * down)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dist::DistributionSpec;
    use crate::streams::{substream, Domain};

    fn state_with(q0: f64) -> ClientState {
        ClientState::new(0, q0, substream(1, Domain::Mechanism, 0, 0), None)
    }

    #[test]
    fn coefficient_identities_hold() {
        for rate in [0.25, 0.5, 0.9, 1.0] {
            for tau in [0.1, 0.4, 0.5, 0.8] {
                let (up, down) = step_coefficients(rate, tau).unwrap();
                assert!(
                    (up + down - 1.0 / rate).abs() < 1e-12,
                    "sum identity at rate {rate}, tau {tau}"
                );
                assert!(
                    (up - down - (2.0 * tau - 1.0)).abs() < 1e-12,
                    "difference identity at rate {rate}, tau {tau}"
                );
            }
        }
    }

    #[test]
    fn rate_one_recovers_plain_quantile_steps() {
        // Without privacy the step is the standard pinball gradient: up by
        // eta*tau, down by eta*(1-tau).
        let (up, down) = step_coefficients(1.0, 0.3).unwrap();
        assert!((up - 0.3).abs() < 1e-15);
        assert!((down - 0.7).abs() < 1e-15);
    }

    #[test]
    fn local_step_moves_by_the_stated_amounts() {
        let coeffs = step_coefficients(0.5, 0.5).unwrap();
        let mut state = state_with(1.0);
        local_step(&mut state, true, 0.1, coeffs);
        assert!((state.q - (1.0 + 0.1 * coeffs.0)).abs() < 1e-15);
        local_step(&mut state, false, 0.1, coeffs);
        assert!((state.q - (1.0 + 0.1 * coeffs.0 - 0.1 * coeffs.1)).abs() < 1e-15);
        assert_eq!(state.steps_taken, 2);
    }

    #[test]
    fn clamp_projects_the_iterate() {
        let coeffs = step_coefficients(1.0, 0.5).unwrap();
        let mut state = ClientState::new(0, 0.9, substream(1, Domain::Mechanism, 0, 0), Some((-1.0, 1.0)));
        local_step(&mut state, true, 10.0, coeffs);
        assert_eq!(state.q, 1.0);
        local_step(&mut state, false, 10.0, coeffs);
        assert_eq!(state.q, -1.0);
    }

    #[test]
    fn expected_drift_is_rate_free_and_vanishes_at_the_quantile() {
        let cdf = |x: f64| DistributionSpec::standard_normal().cdf(x);
        for tau in [0.3, 0.5, 0.8] {
            let q_star = statrs::distribution::ContinuousCDF::inverse_cdf(
                &statrs::distribution::Normal::new(0.0, 1.0).unwrap(),
                tau,
            );
            let drifts: Vec<f64> = [0.25, 0.5, 0.9, 1.0]
                .iter()
                .map(|&r| expected_increment(q_star, tau, r, cdf).unwrap())
                .collect();
            for d in &drifts {
                assert!(d.abs() < 1e-10, "drift {d} at tau {tau}");
            }
            // Away from the quantile the drift equals tau - F(q) for any rate.
            for q in [-1.0, 0.2, 2.0] {
                for &r in &[0.25, 0.9] {
                    let d = expected_increment(q, tau, r, cdf).unwrap();
                    assert!(
                        (d - (tau - cdf(q))).abs() < 1e-12,
                        "drift mismatch at q={q}, tau={tau}, rate={r}"
                    );
                }
            }
        }
    }

    #[test]
    fn run_block_consumes_exactly_block_len_samples() {
        struct Counting {
            left: u64,
        }
        impl crate::dist::SampleStream for Counting {
            fn next_sample(&mut self) -> Option<f64> {
                if self.left == 0 {
                    None
                } else {
                    self.left -= 1;
                    Some(0.0)
                }
            }
        }
        let mut state = state_with(0.0);
        let mut data = Counting { left: 7 };
        run_block(&mut state, 7, 0.01, 0.5, 0.9, &mut data, 1).unwrap();
        assert_eq!(state.steps_taken, 7);
        assert_eq!(data.left, 0);
        // The next block finds the stream dry and reports it.
        let err = run_block(&mut state, 1, 0.01, 0.5, 0.9, &mut data, 2).unwrap_err();
        assert!(matches!(err, Error::Numeric(_)));
    }

    #[test]
    fn iterates_drift_toward_the_target_quantile() {
        // Long single-client run with decaying steps lands near the true
        // 0.7-quantile of N(0,1).
        let spec = DistributionSpec::standard_normal();
        let mut data = spec.sampler(substream(2, Domain::Data, 0, 0)).unwrap();
        let mut state = state_with(0.0);
        let tau = 0.7;
        let n = 60_000u64;
        for t in 1..=n {
            let eta = 2.0 / ((t as f64).powf(0.51) + 100.0);
            run_block(&mut state, 1, eta, tau, 0.9, data.as_mut(), t).unwrap();
        }
        let target = statrs::distribution::ContinuousCDF::inverse_cdf(
            &statrs::distribution::Normal::new(0.0, 1.0).unwrap(),
            tau,
        );
        assert!(
            (state.q - target).abs() < 0.08,
            "iterate {} vs quantile {target}",
            state.q
        );
    }
}
