//! Randomized response over the quantile indicator.
//!
//! A client never reveals its sample: it answers whether the sample exceeds
//! the current iterate, truthfully with probability `rate` and by a fair
//! coin otherwise. The privacy budget follows from the rate alone.

use rand::Rng;

use crate::error::{Error, Result};

/// One bit per local step is all a client ever transmits.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PrivatizedResponse {
    pub s: bool,
    pub round: u64,
    pub local_step: u64,
}

/// Privacy budget implied by a truthful-response rate in (0, 1].
/// A rate of 1 means no privacy (infinite budget).
pub fn epsilon_of(rate: f64) -> Result<f64> {
    if !(rate > 0.0 && rate <= 1.0) {
        return Err(Error::config(format!(
            "truthful rate must lie in (0, 1], got {rate}"
        )));
    }
    Ok(((1.0 + rate) / (1.0 - rate)).ln())
}

/// Inverse of `epsilon_of`: the rate that spends a given budget.
pub fn rate_of(epsilon: f64) -> Result<f64> {
    if epsilon.is_nan() || epsilon <= 0.0 {
        return Err(Error::config(format!(
            "privacy budget must be positive, got {epsilon}"
        )));
    }
    if epsilon.is_infinite() {
        return Ok(1.0);
    }
    Ok((epsilon.exp() - 1.0) / (epsilon.exp() + 1.0))
}

/// Quantile level seen through the mechanism: rate * tau + (1 - rate) / 2.
pub fn shifted_level(rate: f64, tau: f64) -> Result<f64> {
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
    Ok(rate * tau + (1.0 - rate) / 2.0)
}

/// Probability the mechanism answers 1 when the exceedance probability of
/// the sample is `p_exceed`.
pub fn response_prob(p_exceed: f64, rate: f64) -> f64 {
    debug_assert!((0.0..=1.0).contains(&p_exceed));
    rate * p_exceed + (1.0 - rate) / 2.0
}

/// Randomize one comparison. Always consumes exactly two draws from `rng`
/// (truth coin, then noise coin) so parallel stream layouts stay aligned
/// regardless of the outcome.
#[inline]
pub fn privatize<R: Rng + ?Sized>(x: f64, q: f64, rate: f64, rng: &mut R) -> bool {
    let truthful = rng.random::<f64>() < rate;
    let noise = rng.random::<f64>() < 0.5;
    if truthful {
        x > q
    } else {
        noise
    }
}
