//! Online self-normalized inference.
//!
//! Four scalar accumulators, updated once per round, are enough to recover
//! the full self-normalizer at the end of a run: the quadratic expansion of
//! the centered partial-sum process collapses into them. No variance
//! estimation and no second pass over the trajectory is needed.

use crate::coordinator::Trajectory;
use crate::error::{Error, Result};
use crate::schedule::CommSchedule;

/// Running sums for the self-normalizer. After m rounds:
/// va = sum i^2 A_i^2 / E_i, vb = sum i^2 A_i / E_i, vs = sum 1/E_i,
/// vp = sum i^2 / E_i, where A_i is the running average at round i.
#[derive(Debug, Clone, Default)]
pub struct SelfNormAccumulators {
    va: f64,
    vb: f64,
    vs: f64,
    vp: f64,
    rounds_seen: u64,
}

impl SelfNormAccumulators {
    pub fn new() -> Self {
        Self::default()
    }

    /// Fold in round m. Rounds must arrive in order starting at 1; the
    /// value folded is the running average after round m, not the round
    /// aggregate.
    pub fn update(&mut self, m: u64, running_average: f64, block_len: u64) -> Result<()> {
        if m != self.rounds_seen + 1 {
            return Err(Error::protocol(format!(
                "accumulator update for round {m} after {} rounds",
                self.rounds_seen
            )));
        }
        if block_len == 0 {
            return Err(Error::config("block length must be positive"));
        }
        let w = 1.0 / block_len as f64;
        let m2 = (m as f64) * (m as f64);
        self.va += m2 * running_average * running_average * w;
        self.vb += m2 * running_average * w;
        self.vs += w;
        self.vp += m2 * w;
        self.rounds_seen = m;
        Ok(())
    }

    pub fn rounds_seen(&self) -> u64 {
        self.rounds_seen
    }

    pub fn components(&self) -> (f64, f64, f64, f64) {
        (self.va, self.vb, self.vs, self.vp)
    }

    /// The self-normalizer after the final round:
    /// (va - 2 vb A_T + vp A_T^2) / (T^2 vs), clipped at zero.
    pub fn normalizer(&self, final_average: f64) -> Result<f64> {
        Ok(self.normalizer_flagged(final_average)?.0)
    }

    /// As `normalizer`, also reporting whether floating-point cancellation
    /// drove the raw value negative before clipping.
    pub fn normalizer_flagged(&self, final_average: f64) -> Result<(f64, bool)> {
        if self.rounds_seen == 0 {
            return Err(Error::numeric("normalizer undefined before any round"));
        }
        let t = self.rounds_seen as f64;
        let raw = (self.va - 2.0 * self.vb * final_average
            + self.vp * final_average * final_average)
            / (t * t * self.vs);
        if raw < 0.0 {
            Ok((0.0, true))
        } else {
            Ok((raw, false))
        }
    }

    /// Replay a stored trajectory; returns the accumulators and the final
    /// running average.
    pub fn from_trajectory(traj: &Trajectory) -> Result<(Self, f64)> {
        let mut acc = Self::new();
        for (idx, (&avg, &e)) in traj
            .running_averages()
            .iter()
            .zip(traj.schedule().blocks())
            .enumerate()
        {
            acc.update((idx + 1) as u64, avg, e)?;
        }
        Ok((acc, traj.final_average()))
    }
}

/// Two-sided interval around the estimate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConfidenceInterval {
    pub lo: f64,
    pub hi: f64,
    /// Nominal coverage 1 - alpha.
    pub level: f64,
}

impl ConfidenceInterval {
    pub fn width(&self) -> f64 {
        self.hi - self.lo
    }

    pub fn contains(&self, x: f64) -> bool {
        self.lo <= x && x <= self.hi
    }
}

/// Interval centered at the estimate with half-width critical * sqrt(vhat).
pub fn confidence_interval(
    estimate: f64,
    vhat: f64,
    critical: f64,
    level: f64,
) -> Result<ConfidenceInterval> {
    if vhat < 0.0 {
        return Err(Error::numeric(format!(
            "negative normalizer {vhat} reached interval construction"
        )));
    }
    if !(critical > 0.0 && critical.is_finite()) {
        return Err(Error::config(format!(
            "critical value must be positive and finite, got {critical}"
        )));
    }
    if !(level > 0.0 && level < 1.0) {
        return Err(Error::config(format!(
            "confidence level must lie in (0, 1), got {level}"
        )));
    }
    let half = critical * vhat.sqrt();
    Ok(ConfidenceInterval {
        lo: estimate - half,
        hi: estimate + half,
        level,
    })
}

/// Scaled partial-sum path at the schedule grid: the value at r_m is
/// (sqrt(t_T)/T) * sum of (aggregate_i - center) over i <= m. Against the
/// true quantile this is the process whose endpoint is
/// sqrt(t_T) * (final_average - center).
pub fn fclt_path(traj: &Trajectory, center: f64) -> Vec<(f64, f64)> {
    let t_total = traj.schedule().total_samples() as f64;
    let rounds = traj.rounds() as f64;
    let scale = t_total.sqrt() / rounds;
    let grid = traj.schedule().grid();
    let mut acc = 0.0;
    traj.round_aggregates()
        .iter()
        .zip(grid)
        .map(|(&q, &r)| {
            acc += q - center;
            (r, scale * acc)
        })
        .collect()
}

/// Number of grid points inside the first s-fraction of inverse-block time:
/// the largest n with sum_{i<=n} 1/E_i <= s * sum_{i<=T} 1/E_i. Zero when
/// even the first round lies beyond the fraction.
pub fn h_index(schedule: &CommSchedule, s: f64) -> Result<usize> {
    if !(s > 0.0 && s <= 1.0) {
        return Err(Error::config(format!(
            "time fraction must lie in (0, 1], got {s}"
        )));
    }
    let threshold = s * schedule.inv_block_sum();
    let mut prefix = 0.0;
    let mut n = 0;
    for &e in schedule.blocks() {
        prefix += 1.0 / e as f64;
        if prefix <= threshold {
            n += 1;
        } else {
            break;
        }
    }
    Ok(n)
}

/// Sup- and L1-style alternatives to the quadratic self-normalizer,
/// computed from the centered path (centering at the final average makes
/// them free of the unknown quantile). Diagnostics only.
pub fn alt_normalizers(traj: &Trajectory) -> (f64, f64) {
    let final_avg = traj.final_average();
    let path = fclt_path(traj, final_avg);
    let mut sup = 0.0f64;
    let mut l1 = 0.0f64;
    let mut prev_r = 0.0;
    for &(r, z) in &path {
        let a = z.abs();
        sup = sup.max(a);
        l1 += (r - prev_r) * a;
        prev_r = r;
    }
    (sup, l1)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::schedule::{CommSchedule, Horizon, Strategy};
    use crate::streams::{substream, Domain};
    use rand::Rng;
    use std::sync::Arc;

    fn trajectory_from(blocks: Vec<u64>, aggregates: Vec<f64>) -> Trajectory {
        let schedule = Arc::new(CommSchedule::from_blocks(blocks).unwrap());
        let mut buf = Vec::new();
        {
            use std::io::Write;
            writeln!(buf, "m,t_m,E_m,round_aggregate,running_average").unwrap();
            let mut running = 0.0;
            for (i, &q) in aggregates.iter().enumerate() {
                running = (i as f64 * running + q) / (i + 1) as f64;
                writeln!(
                    buf,
                    "{},{},{},{},{}",
                    i + 1,
                    schedule.cumulative()[i],
                    schedule.blocks()[i],
                    q,
                    running
                )
                .unwrap();
            }
        }
        Trajectory::read_csv(&buf[..]).unwrap()
    }

    /// Direct second-pass evaluation of the normalizer for cross-checking
    /// the one-pass accumulators: weighted mean square of the centered
    /// round process m*(A_m - A_T).
    fn direct_normalizer(traj: &Trajectory) -> f64 {
        let t = traj.rounds() as f64;
        let final_avg = traj.final_average();
        let inv_sum: f64 = traj
            .schedule()
            .blocks()
            .iter()
            .map(|&e| 1.0 / e as f64)
            .sum();
        let mut num = 0.0;
        for (idx, (&avg, &e)) in traj
            .running_averages()
            .iter()
            .zip(traj.schedule().blocks())
            .enumerate()
        {
            let m = (idx + 1) as f64;
            num += (1.0 / e as f64) * m * m * (avg - final_avg) * (avg - final_avg);
        }
        num / (t * t * inv_sum)
    }

    #[test]
    fn first_update_matches_hand_values() {
        let mut acc = SelfNormAccumulators::new();
        acc.update(1, 0.7, 1).unwrap();
        let (va, vb, vs, vp) = acc.components();
        assert!((va - 0.49).abs() < 1e-15);
        assert!((vb - 0.7).abs() < 1e-15);
        assert_eq!(vs, 1.0);
        assert_eq!(vp, 1.0);
    }

    #[test]
    fn unit_blocks_make_vs_count_rounds() {
        let mut acc = SelfNormAccumulators::new();
        for m in 1..=50 {
            acc.update(m, 0.1, 1).unwrap();
        }
        assert_eq!(acc.components().2, 50.0);
    }

    #[test]
    fn out_of_order_updates_are_rejected() {
        let mut acc = SelfNormAccumulators::new();
        acc.update(1, 0.0, 1).unwrap();
        assert!(acc.update(3, 0.0, 1).is_err());
        assert!(acc.update(1, 0.0, 1).is_err());
        assert!(acc.update(2, 0.0, 0).is_err());
    }

    #[test]
    fn single_round_normalizes_to_zero() {
        let mut acc = SelfNormAccumulators::new();
        acc.update(1, 1.234, 3).unwrap();
        assert_eq!(acc.normalizer(1.234).unwrap(), 0.0);
    }

    #[test]
    fn two_round_hand_value() {
        // Unit blocks, aggregates (a, b): the normalizer is (a-b)^2/32.
        let (a, b) = (1.9, -0.3);
        let traj = trajectory_from(vec![1, 1], vec![a, b]);
        let (acc, final_avg) = SelfNormAccumulators::from_trajectory(&traj).unwrap();
        let got = acc.normalizer(final_avg).unwrap();
        let expect = (a - b) * (a - b) / 32.0;
        assert!((got - expect).abs() < 1e-14, "got {got}, expect {expect}");
    }

    #[test]
    fn online_equals_direct_on_random_trajectories() {
        let mut rng = substream(42, Domain::Scenario, 0, 1);
        for case in 0..100 {
            let t = rng.random_range(1..=200);
            let blocks: Vec<u64> = (0..t).map(|_| rng.random_range(1..=8)).collect();
            let aggregates: Vec<f64> = (0..t)
                .map(|_| 4.0 * rng.random::<f64>() - 2.0)
                .collect();
            let traj = trajectory_from(blocks, aggregates);
            let (acc, final_avg) = SelfNormAccumulators::from_trajectory(&traj).unwrap();
            let online = acc.normalizer(final_avg).unwrap();
            let direct = direct_normalizer(&traj);
            let denom = direct.abs().max(1e-300);
            assert!(
                (online - direct).abs() / denom <= 1e-10 || (online - direct).abs() < 1e-18,
                "case {case}: online {online} vs direct {direct}"
            );
        }
    }

    #[test]
    fn incremental_state_equals_recomputation_from_scratch() {
        let traj = trajectory_from(vec![1, 2, 2, 3], vec![0.5, -0.1, 0.2, 0.4]);
        let (acc, _) = SelfNormAccumulators::from_trajectory(&traj).unwrap();
        let mut fresh = SelfNormAccumulators::new();
        for (i, (&avg, &e)) in traj
            .running_averages()
            .iter()
            .zip(traj.schedule().blocks())
            .enumerate()
        {
            fresh.update((i + 1) as u64, avg, e).unwrap();
        }
        assert_eq!(acc.components(), fresh.components());
    }

    #[test]
    fn location_shift_leaves_the_normalizer_unchanged() {
        let aggregates = vec![0.3, -0.2, 0.8, 0.1, 0.5];
        let traj = trajectory_from(vec![1; 5], aggregates.clone());
        let shifted = trajectory_from(vec![1; 5], aggregates.iter().map(|a| a + 10.0).collect());
        let (acc_a, fa) = SelfNormAccumulators::from_trajectory(&traj).unwrap();
        let (acc_b, fb) = SelfNormAccumulators::from_trajectory(&shifted).unwrap();
        assert!((fb - (fa + 10.0)).abs() < 1e-12);
        let va = acc_a.normalizer(fa).unwrap();
        let vb = acc_b.normalizer(fb).unwrap();
        assert!((va - vb).abs() < 1e-10, "{va} vs {vb}");
    }

    #[test]
    fn scaling_aggregates_scales_the_normalizer_quadratically() {
        let aggregates = vec![0.3, -0.2, 0.8, 0.1];
        let lam = 3.0;
        let traj = trajectory_from(vec![2; 4], aggregates.clone());
        let scaled = trajectory_from(vec![2; 4], aggregates.iter().map(|a| a * lam).collect());
        let (acc_a, fa) = SelfNormAccumulators::from_trajectory(&traj).unwrap();
        let (acc_b, fb) = SelfNormAccumulators::from_trajectory(&scaled).unwrap();
        let va = acc_a.normalizer(fa).unwrap();
        let vb = acc_b.normalizer(fb).unwrap();
        assert!((vb - lam * lam * va).abs() < 1e-10 * vb.max(1.0));
        // The studentized statistic is scale-invariant.
        let sa = fa / va.sqrt();
        let sb = fb / vb.sqrt();
        assert!((sa - sb).abs() < 1e-9);
    }

    #[test]
    fn interval_arithmetic() {
        let ci = confidence_interval(1.0, 0.04, 5.0, 0.95).unwrap();
        assert!((ci.lo - 0.0).abs() < 1e-15);
        assert!((ci.hi - 2.0).abs() < 1e-15);
        assert_eq!(ci.level, 0.95);
        assert!(ci.contains(1.0) && !ci.contains(2.1));

        // Degenerate normalizer gives a point interval.
        let ci = confidence_interval(0.5, 0.0, 5.0, 0.95).unwrap();
        assert_eq!((ci.lo, ci.hi), (0.5, 0.5));

        // Doubling the critical value doubles the width.
        let a = confidence_interval(0.0, 0.25, 2.0, 0.95).unwrap();
        let b = confidence_interval(0.0, 0.25, 4.0, 0.95).unwrap();
        assert!((b.width() - 2.0 * a.width()).abs() < 1e-12);

        assert!(confidence_interval(0.0, -0.1, 5.0, 0.95).is_err());
        assert!(confidence_interval(0.0, 0.1, 0.0, 0.95).is_err());
    }

    #[test]
    fn fclt_endpoint_identity() {
        let traj = trajectory_from(vec![1, 2, 1, 3], vec![0.4, -0.6, 0.9, 0.2]);
        let center = 0.1;
        let path = fclt_path(&traj, center);
        assert_eq!(path.len(), 4);
        let t_total = traj.schedule().total_samples() as f64;
        let endpoint = path.last().unwrap();
        assert_eq!(endpoint.0, 1.0);
        let expect = t_total.sqrt() * (traj.final_average() - center);
        assert!((endpoint.1 - expect).abs() < 1e-12);
    }

    #[test]
    fn centered_path_is_identically_zero() {
        let traj = trajectory_from(vec![1; 6], vec![0.7; 6]);
        for (_, z) in fclt_path(&traj, 0.7) {
            assert_eq!(z, 0.0);
        }
    }

    #[test]
    fn fclt_increments_match_aggregate_deviations() {
        let traj = trajectory_from(vec![2, 2, 2], vec![0.5, 0.1, -0.2]);
        let center = 0.05;
        let path = fclt_path(&traj, center);
        let scale = (traj.schedule().total_samples() as f64).sqrt() / 3.0;
        let mut prev = 0.0;
        for (i, &(_, z)) in path.iter().enumerate() {
            let inc = z - prev;
            let expect = scale * (traj.round_aggregates()[i] - center);
            assert!((inc - expect).abs() < 1e-12);
            prev = z;
        }
    }

    #[test]
    fn h_index_uniform_reference() {
        let schedule = CommSchedule::build(Strategy::C1, Horizon::Rounds(10), 0.0).unwrap();
        assert_eq!(h_index(&schedule, 0.35).unwrap(), 3);
        assert_eq!(h_index(&schedule, 1.0).unwrap(), 10);
        assert_eq!(h_index(&schedule, 0.05).unwrap(), 0);
        assert!(h_index(&schedule, 0.0).is_err());
        assert!(h_index(&schedule, 1.1).is_err());
    }

    #[test]
    fn h_index_counts_inverse_block_mass() {
        let schedule = CommSchedule::from_blocks(vec![1, 1, 2, 2, 4]).unwrap();
        // Inverse blocks: 1, 1, 0.5, 0.5, 0.25; total 3.25.
        // s = 0.5: threshold 1.625 -> prefix 1 (n=1), 2 > 1.625 stop.
        assert_eq!(h_index(&schedule, 0.5).unwrap(), 1);
        // s = 0.8: threshold 2.6 -> prefixes 1, 2, 2.5 <= 2.6 -> n = 3.
        assert_eq!(h_index(&schedule, 0.8).unwrap(), 3);
    }

    #[test]
    fn alt_normalizers_hand_values() {
        // T = 1: both zero.
        let traj = trajectory_from(vec![1], vec![0.9]);
        assert_eq!(alt_normalizers(&traj), (0.0, 0.0));

        // T = 2, unit blocks, aggregates (a, b):
        // sup = (sqrt(2)/2)|a-b|/2, and the L1 form weights it by the first
        // grid increment 1/2.
        let (a, b) = (1.25, 0.45);
        let traj = trajectory_from(vec![1, 1], vec![a, b]);
        let (sup, l1) = alt_normalizers(&traj);
        let expect_sup = (2.0f64.sqrt() / 2.0) * (a - b).abs() / 2.0;
        assert!((sup - expect_sup).abs() < 1e-14, "sup {sup} vs {expect_sup}");
        assert!((l1 - 0.5 * expect_sup).abs() < 1e-14, "l1 {l1}");
    }

    #[test]
    fn weighted_l1_alt_is_below_the_quadratic_by_cauchy_schwarz() {
        let mut rng = substream(9, Domain::Scenario, 0, 2);
        for _ in 0..20 {
            let t = rng.random_range(2..=60);
            let blocks: Vec<u64> = (0..t).map(|_| rng.random_range(1..=5)).collect();
            let aggregates: Vec<f64> = (0..t).map(|_| rng.random::<f64>() - 0.5).collect();
            let traj = trajectory_from(blocks, aggregates);
            let (_, l1) = alt_normalizers(&traj);
            // Quadratic counterpart under the same grid weights.
            let final_avg = traj.final_average();
            let path = fclt_path(&traj, final_avg);
            let mut quad = 0.0;
            let mut prev = 0.0;
            for &(r, z) in &path {
                quad += (r - prev) * z * z;
                prev = r;
            }
            // Grid weights sum to 1, so sum w|z| <= sqrt(sum w z^2).
            assert!(l1 * l1 <= quad + 1e-12, "l1 {l1}, quad {quad}");
        }
    }
}
