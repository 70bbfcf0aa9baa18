//! Client data sources: analytic families and empirical pools.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use statrs::distribution::{Continuous, ContinuousCDF};

use crate::error::{Error, Result};

/// How an empirical pool is streamed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SamplingMode {
    /// I.i.d. draws from the pool, unbounded stream.
    #[default]
    WithReplacement,
    /// A seeded random permutation of the pool, exhausted once.
    SinglePass,
}

/// A client's data-generating source.
#[derive(Debug, Clone, PartialEq)]
pub enum DistributionSpec {
    Normal { mu: f64, sigma: f64 },
    Uniform { lo: f64, hi: f64 },
    Cauchy { x0: f64, gamma: f64 },
    Empirical { values: Vec<f64>, mode: SamplingMode },
}

impl DistributionSpec {
    pub fn standard_normal() -> Self {
        DistributionSpec::Normal { mu: 0.0, sigma: 1.0 }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            DistributionSpec::Normal { mu, sigma } => {
                if !mu.is_finite() || !(sigma.is_finite() && *sigma > 0.0) {
                    return Err(Error::config(format!(
                        "normal source needs finite mu and sigma > 0, got mu={mu}, sigma={sigma}"
                    )));
                }
            }
            DistributionSpec::Uniform { lo, hi } => {
                if !lo.is_finite() || !hi.is_finite() || lo >= hi {
                    return Err(Error::config(format!(
                        "uniform source needs finite lo < hi, got [{lo}, {hi}]"
                    )));
                }
            }
            DistributionSpec::Cauchy { x0, gamma } => {
                if !x0.is_finite() || !(gamma.is_finite() && *gamma > 0.0) {
                    return Err(Error::config(format!(
                        "cauchy source needs finite x0 and gamma > 0, got x0={x0}, gamma={gamma}"
                    )));
                }
            }
            DistributionSpec::Empirical { values, .. } => {
                if values.is_empty() {
                    return Err(Error::config("empirical source has no values"));
                }
                if values.iter().any(|v| !v.is_finite()) {
                    return Err(Error::config("empirical source contains non-finite values"));
                }
            }
        }
        Ok(())
    }

    pub fn is_empirical(&self) -> bool {
        matches!(self, DistributionSpec::Empirical { .. })
    }

    /// CDF at x. Empirical pools use the step ECDF.
    pub fn cdf(&self, x: f64) -> f64 {
        match self {
            DistributionSpec::Normal { mu, sigma } => {
                statrs::distribution::Normal::new(*mu, *sigma)
                    .expect("validated")
                    .cdf(x)
            }
            DistributionSpec::Uniform { lo, hi } => {
                if x <= *lo {
                    0.0
                } else if x >= *hi {
                    1.0
                } else {
                    (x - lo) / (hi - lo)
                }
            }
            DistributionSpec::Cauchy { x0, gamma } => {
                statrs::distribution::Cauchy::new(*x0, *gamma)
                    .expect("validated")
                    .cdf(x)
            }
            DistributionSpec::Empirical { values, .. } => {
                let count = values.iter().filter(|&&v| v <= x).count();
                count as f64 / values.len() as f64
            }
        }
    }

    /// Density at x; `None` for empirical pools, which have no density.
    pub fn pdf(&self, x: f64) -> Option<f64> {
        match self {
            DistributionSpec::Normal { mu, sigma } => Some(
                statrs::distribution::Normal::new(*mu, *sigma)
                    .expect("validated")
                    .pdf(x),
            ),
            DistributionSpec::Uniform { lo, hi } => {
                Some(if x >= *lo && x <= *hi { 1.0 / (hi - lo) } else { 0.0 })
            }
            DistributionSpec::Cauchy { x0, gamma } => Some(
                statrs::distribution::Cauchy::new(*x0, *gamma)
                    .expect("validated")
                    .pdf(x),
            ),
            DistributionSpec::Empirical { .. } => None,
        }
    }

    /// Build the sampling stream, consuming the given stream of randomness.
    pub fn sampler(&self, rng: ChaCha8Rng) -> Result<Box<dyn SampleStream>> {
        self.validate()?;
        Ok(match self {
            DistributionSpec::Normal { mu, sigma } => Box::new(NormalStream {
                dist: rand_distr::Normal::new(*mu, *sigma)
                    .map_err(|e| Error::config(format!("normal source: {e}")))?,
                rng,
            }),
            DistributionSpec::Uniform { lo, hi } => Box::new(UniformStream {
                lo: *lo,
                span: hi - lo,
                rng,
            }),
            DistributionSpec::Cauchy { x0, gamma } => Box::new(CauchyStream {
                dist: rand_distr::Cauchy::new(*x0, *gamma)
                    .map_err(|e| Error::config(format!("cauchy source: {e}")))?,
                rng,
            }),
            DistributionSpec::Empirical { values, mode } => match mode {
                SamplingMode::WithReplacement => Box::new(ResampleStream {
                    values: values.clone(),
                    rng,
                }),
                SamplingMode::SinglePass => {
                    let mut order = values.clone();
                    let mut rng = rng;
                    order.shuffle(&mut rng);
                    Box::new(PermutationStream { order, at: 0 })
                }
            },
        })
    }
}

/// Produces one sample per local step. Analytic sources never run dry;
/// single-pass empirical streams end after one permutation.
pub trait SampleStream: Send {
    fn next_sample(&mut self) -> Option<f64>;
}

struct NormalStream {
    dist: rand_distr::Normal<f64>,
    rng: ChaCha8Rng,
}

impl SampleStream for NormalStream {
    fn next_sample(&mut self) -> Option<f64> {
        Some(rand_distr::Distribution::sample(&self.dist, &mut self.rng))
    }
}

struct UniformStream {
    lo: f64,
    span: f64,
    rng: ChaCha8Rng,
}

impl SampleStream for UniformStream {
    fn next_sample(&mut self) -> Option<f64> {
        Some(self.lo + self.span * self.rng.random::<f64>())
    }
}

struct CauchyStream {
    dist: rand_distr::Cauchy<f64>,
    rng: ChaCha8Rng,
}

impl SampleStream for CauchyStream {
    fn next_sample(&mut self) -> Option<f64> {
        Some(rand_distr::Distribution::sample(&self.dist, &mut self.rng))
    }
}

struct ResampleStream {
    values: Vec<f64>,
    rng: ChaCha8Rng,
}

impl SampleStream for ResampleStream {
    fn next_sample(&mut self) -> Option<f64> {
        let idx = self.rng.random_range(0..self.values.len());
        Some(self.values[idx])
    }
}

struct PermutationStream {
    order: Vec<f64>,
    at: usize,
}

impl SampleStream for PermutationStream {
    fn next_sample(&mut self) -> Option<f64> {
        let v = self.order.get(self.at).copied();
        self.at += 1;
        v
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::streams::{substream, Domain};

    #[test]
    fn validation_rejects_degenerate_parameters() {
        assert!(DistributionSpec::Normal { mu: 0.0, sigma: 0.0 }.validate().is_err());
        assert!(DistributionSpec::Uniform { lo: 1.0, hi: 1.0 }.validate().is_err());
        assert!(DistributionSpec::Cauchy { x0: 0.0, gamma: -1.0 }.validate().is_err());
        assert!(DistributionSpec::Empirical {
            values: vec![],
            mode: SamplingMode::WithReplacement
        }
        .validate()
        .is_err());
        assert!(DistributionSpec::Empirical {
            values: vec![1.0, f64::NAN],
            mode: SamplingMode::WithReplacement
        }
        .validate()
        .is_err());
    }

    #[test]
    fn normal_cdf_reference_points() {
        let n = DistributionSpec::standard_normal();
        assert!((n.cdf(0.0) - 0.5).abs() < 1e-12);
        assert!((n.cdf(1.959963984540054) - 0.975).abs() < 1e-9);
    }

    #[test]
    fn uniform_cdf_is_clamped_linear() {
        let u = DistributionSpec::Uniform { lo: -1.0, hi: 1.0 };
        assert_eq!(u.cdf(-2.0), 0.0);
        assert_eq!(u.cdf(2.0), 1.0);
        assert!((u.cdf(0.0) - 0.5).abs() < 1e-15);
        assert!((u.cdf(0.5) - 0.75).abs() < 1e-15);
        assert!((u.pdf(0.0).unwrap() - 0.5).abs() < 1e-15);
    }

    #[test]
    fn cauchy_cdf_reference_points() {
        let c = DistributionSpec::Cauchy { x0: 0.0, gamma: 1.0 };
        assert!((c.cdf(0.0) - 0.5).abs() < 1e-12);
        assert!((c.cdf(1.0) - 0.75).abs() < 1e-12);
        assert!((c.pdf(0.0).unwrap() - 1.0 / std::f64::consts::PI).abs() < 1e-12);
    }

    #[test]
    fn empirical_cdf_is_a_right_continuous_step() {
        let e = DistributionSpec::Empirical {
            values: vec![1.0, 2.0, 2.0, 4.0],
            mode: SamplingMode::WithReplacement,
        };
        assert_eq!(e.cdf(0.0), 0.0);
        assert_eq!(e.cdf(1.0), 0.25);
        assert_eq!(e.cdf(2.0), 0.75);
        assert_eq!(e.cdf(3.9), 0.75);
        assert_eq!(e.cdf(4.0), 1.0);
        assert!(e.pdf(1.0).is_none());
    }

    #[test]
    fn single_pass_stream_is_a_permutation_then_ends() {
        let pool = vec![1.0, 2.0, 3.0, 4.0, 5.0];
        let e = DistributionSpec::Empirical {
            values: pool.clone(),
            mode: SamplingMode::SinglePass,
        };
        let mut s = e.sampler(substream(1, Domain::Data, 0, 0)).unwrap();
        let mut seen: Vec<f64> = (0..5).map(|_| s.next_sample().unwrap()).collect();
        assert!(s.next_sample().is_none());
        seen.sort_by(f64::total_cmp);
        assert_eq!(seen, pool);
    }

    #[test]
    fn with_replacement_stream_only_emits_pool_values() {
        let e = DistributionSpec::Empirical {
            values: vec![10.0, 20.0],
            mode: SamplingMode::WithReplacement,
        };
        let mut s = e.sampler(substream(2, Domain::Data, 0, 0)).unwrap();
        let mut seen_10 = false;
        let mut seen_20 = false;
        for _ in 0..100 {
            match s.next_sample().unwrap() {
                v if v == 10.0 => seen_10 = true,
                v if v == 20.0 => seen_20 = true,
                v => panic!("unexpected sample {v}"),
            }
        }
        assert!(seen_10 && seen_20);
    }

    #[test]
    fn analytic_sample_means_match_the_family() {
        let n = 100_000;
        let spec = DistributionSpec::Normal { mu: 3.0, sigma: 2.0 };
        let mut s = spec.sampler(substream(3, Domain::Data, 0, 0)).unwrap();
        let mean: f64 = (0..n).map(|_| s.next_sample().unwrap()).sum::<f64>() / n as f64;
        assert!((mean - 3.0).abs() < 0.05, "normal mean {mean}");

        let spec = DistributionSpec::Uniform { lo: -1.0, hi: 1.0 };
        let mut s = spec.sampler(substream(3, Domain::Data, 0, 1)).unwrap();
        let mean: f64 = (0..n).map(|_| s.next_sample().unwrap()).sum::<f64>() / n as f64;
        assert!(mean.abs() < 0.02, "uniform mean {mean}");
    }

    #[test]
    fn cauchy_sample_median_matches_location() {
        let spec = DistributionSpec::Cauchy { x0: 1.5, gamma: 1.0 };
        let mut s = spec.sampler(substream(4, Domain::Data, 0, 0)).unwrap();
        let mut draws: Vec<f64> = (0..50_001).map(|_| s.next_sample().unwrap()).collect();
        draws.sort_by(f64::total_cmp);
        let median = draws[25_000];
        assert!((median - 1.5).abs() < 0.05, "cauchy median {median}");
    }

    #[test]
    fn same_stream_key_reproduces_samples() {
        let spec = DistributionSpec::standard_normal();
        let mut a = spec.sampler(substream(9, Domain::Data, 2, 7)).unwrap();
        let mut b = spec.sampler(substream(9, Domain::Data, 2, 7)).unwrap();
        for _ in 0..32 {
            assert_eq!(a.next_sample(), b.next_sample());
        }
    }
}
