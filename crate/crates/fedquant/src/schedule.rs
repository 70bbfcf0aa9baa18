//! Communication schedules and step-size policies.
//!
//! A schedule fixes the number of local steps per communication round. The
//! inference layer depends on the induced time grid and the block-imbalance
//! factor nu, so both are materialized here once and reused everywhere.

use crate::error::{Error, Result};

/// Built-in block-length rules. `Custom` covers schedules built directly
/// from an explicit block list (e.g. read back from a trajectory file).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Strategy {
    /// One local step per round.
    C1,
    /// Five local steps per round.
    C5,
    /// Logarithmically growing blocks: block j has ceil(log2(j + 1)) steps.
    Log,
    Custom,
}

impl Strategy {
    pub fn name(self) -> &'static str {
        match self {
            Strategy::C1 => "C1",
            Strategy::C5 => "C5",
            Strategy::Log => "Log",
            Strategy::Custom => "Custom",
        }
    }

    pub fn from_name(name: &str) -> Result<Self> {
        match name {
            "C1" | "c1" => Ok(Strategy::C1),
            "C5" | "c5" => Ok(Strategy::C5),
            "Log" | "log" => Ok(Strategy::Log),
            other => Err(Error::config(format!(
                "unknown schedule strategy {other:?}; expected C1, C5, or Log"
            ))),
        }
    }

    /// Block length of the j-th post-warm-up block, j >= 1.
    fn block_len(self, j: u64) -> u64 {
        match self {
            Strategy::C1 => 1,
            Strategy::C5 => 5,
            Strategy::Log => ceil_log2(j + 1).max(1),
            Strategy::Custom => unreachable!("custom schedules carry explicit blocks"),
        }
    }
}

/// Exact integer ceil(log2(n)) for n >= 1.
fn ceil_log2(n: u64) -> u64 {
    if n <= 1 {
        0
    } else {
        64 - u64::from((n - 1).leading_zeros())
    }
}

/// Run length: either a round count or a total per-client sample count.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Horizon {
    Rounds(u64),
    Samples(u64),
}

/// A fully materialized schedule: block lengths E_m, cumulative sample
/// counts t_m, the normalized time grid r_m, and the imbalance factor nu.
#[derive(Debug, Clone)]
pub struct CommSchedule {
    strategy: Strategy,
    horizon: Horizon,
    warmup_frac: f64,
    warmup_rounds: usize,
    blocks: Vec<u64>,
    cumulative: Vec<u64>,
    grid: Vec<f64>,
    inv_block_sum: f64,
    nu: f64,
}

impl CommSchedule {
    /// Build a schedule from a named strategy.
    ///
    /// Warm-up replaces the first `warmup_frac` share of the horizon with
    /// single-step rounds; the strategy's block rule then restarts from its
    /// first block. Under a sample horizon the last block is truncated so
    /// the cumulative count meets the target exactly.
    pub fn build(strategy: Strategy, horizon: Horizon, warmup_frac: f64) -> Result<Self> {
        if strategy == Strategy::Custom {
            return Err(Error::config(
                "custom strategy requires an explicit block list; use from_blocks",
            ));
        }
        if !(0.0..1.0).contains(&warmup_frac) {
            return Err(Error::config(format!(
                "warmup_frac must lie in [0, 1), got {warmup_frac}"
            )));
        }

        let mut blocks: Vec<u64> = Vec::new();
        match horizon {
            Horizon::Rounds(rounds) => {
                if rounds == 0 {
                    return Err(Error::config("schedule horizon must be positive"));
                }
                let warm = (warmup_frac * rounds as f64).ceil() as u64;
                blocks.extend(std::iter::repeat(1).take(warm as usize));
                for j in 1..=(rounds - warm) {
                    blocks.push(strategy.block_len(j));
                }
            }
            Horizon::Samples(total) => {
                if total == 0 {
                    return Err(Error::config("schedule horizon must be positive"));
                }
                let warm = (warmup_frac * total as f64).ceil() as u64;
                blocks.extend(std::iter::repeat(1).take(warm as usize));
                let mut used = warm;
                let mut j = 1;
                while used < total {
                    let len = strategy.block_len(j).min(total - used);
                    blocks.push(len);
                    used += len;
                    j += 1;
                }
            }
        }

        let warmup_rounds = (warmup_frac
            * match horizon {
                Horizon::Rounds(r) => r,
                Horizon::Samples(s) => s,
            } as f64)
            .ceil() as usize;

        Self::materialize(strategy, horizon, warmup_frac, warmup_rounds, blocks)
    }

    /// Build directly from explicit block lengths, no warm-up bookkeeping.
    pub fn from_blocks(blocks: Vec<u64>) -> Result<Self> {
        let total: u64 = blocks.iter().sum();
        Self::materialize(Strategy::Custom, Horizon::Samples(total), 0.0, 0, blocks)
    }

    fn materialize(
        strategy: Strategy,
        horizon: Horizon,
        warmup_frac: f64,
        warmup_rounds: usize,
        blocks: Vec<u64>,
    ) -> Result<Self> {
        if blocks.is_empty() {
            return Err(Error::config("schedule has no rounds"));
        }
        if blocks.iter().any(|&e| e == 0) {
            return Err(Error::config("block lengths must be positive"));
        }

        let rounds = blocks.len();
        let mut cumulative = Vec::with_capacity(rounds);
        let mut running = 0u64;
        for &e in &blocks {
            running += e;
            cumulative.push(running);
        }

        let mut grid = Vec::with_capacity(rounds);
        let mut inv_prefix = 0.0f64;
        for &e in &blocks {
            inv_prefix += 1.0 / e as f64;
            grid.push(inv_prefix);
        }
        let inv_block_sum = inv_prefix;
        for r in &mut grid {
            *r /= inv_block_sum;
        }

        // nu = (sum E)(sum 1/E)/T^2. Equal blocks give exactly 1; computing
        // that case directly keeps the >= 1 invariant safe from round-off.
        let constant = blocks.iter().all(|&e| e == blocks[0]);
        let nu = if constant {
            1.0
        } else {
            let sum_e: f64 = blocks.iter().map(|&e| e as f64).sum();
            sum_e * inv_block_sum / (rounds as f64 * rounds as f64)
        };

        Ok(CommSchedule {
            strategy,
            horizon,
            warmup_frac,
            warmup_rounds,
            blocks,
            cumulative,
            grid,
            inv_block_sum,
            nu,
        })
    }

    pub fn strategy(&self) -> Strategy {
        self.strategy
    }

    pub fn horizon(&self) -> Horizon {
        self.horizon
    }

    pub fn warmup_frac(&self) -> f64 {
        self.warmup_frac
    }

    pub fn warmup_rounds(&self) -> usize {
        self.warmup_rounds
    }

    /// Number of communication rounds T.
    pub fn rounds(&self) -> usize {
        self.blocks.len()
    }

    /// Total per-client samples t_T.
    pub fn total_samples(&self) -> u64 {
        *self.cumulative.last().expect("schedule is non-empty")
    }

    /// Block lengths E_1..E_T.
    pub fn blocks(&self) -> &[u64] {
        &self.blocks
    }

    /// Cumulative sample counts t_1..t_T.
    pub fn cumulative(&self) -> &[u64] {
        &self.cumulative
    }

    /// Normalized time grid r_1..r_T; strictly increasing with r_T = 1.
    pub fn grid(&self) -> &[f64] {
        &self.grid
    }

    /// Sum of 1/E_m over all rounds.
    pub fn inv_block_sum(&self) -> f64 {
        self.inv_block_sum
    }

    /// Block-imbalance factor; 1 exactly when all blocks are equal.
    pub fn nu(&self) -> f64 {
        self.nu
    }

    pub fn constant_blocks(&self) -> bool {
        self.blocks.iter().all(|&e| e == self.blocks[0])
    }

    /// FNV-1a hash of the block sequence; keys pivot-table entries.
    pub fn signature(&self) -> String {
        let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
        for &e in &self.blocks {
            for byte in e.to_le_bytes() {
                hash ^= u64::from(byte);
                hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
            }
        }
        format!("{hash:016x}")
    }
}

/// Step-size scale: resolved against the mean truthful-response rate when
/// left automatic.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Scale {
    /// 20 times the mean rate.
    Auto,
    Fixed(f64),
}

/// Polynomially decaying round step sizes gamma_m = scale / (m^exponent + offset).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepSizePolicy {
    pub scale: Scale,
    pub exponent: f64,
    pub offset: f64,
}

impl Default for StepSizePolicy {
    fn default() -> Self {
        StepSizePolicy {
            scale: Scale::Auto,
            exponent: 0.51,
            offset: 100.0,
        }
    }
}

impl StepSizePolicy {
    pub fn validate(&self) -> Result<()> {
        if let Scale::Fixed(c) = self.scale {
            if !(c > 0.0 && c.is_finite()) {
                return Err(Error::config(format!(
                    "step-size scale must be a positive finite number, got {c}"
                )));
            }
        }
        if !(self.exponent > 0.0 && self.exponent.is_finite()) {
            return Err(Error::config(format!(
                "step-size exponent must be positive, got {}",
                self.exponent
            )));
        }
        if !(self.offset >= 0.0 && self.offset.is_finite()) {
            return Err(Error::config(format!(
                "step-size offset must be non-negative, got {}",
                self.offset
            )));
        }
        Ok(())
    }

    pub fn resolve_scale(&self, mean_rate: f64) -> Result<f64> {
        match self.scale {
            Scale::Fixed(c) => Ok(c),
            Scale::Auto => {
                if !(mean_rate > 0.0 && mean_rate <= 1.0) {
                    return Err(Error::config(format!(
                        "mean rate must lie in (0, 1] to resolve the step scale, got {mean_rate}"
                    )));
                }
                Ok(20.0 * mean_rate)
            }
        }
    }
}

/// Round step size gamma and the per-local-step size eta = gamma / E.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepSize {
    pub gamma: f64,
    pub eta: f64,
}

/// Materialize step sizes for every round of a schedule.
pub fn step_sizes(
    policy: &StepSizePolicy,
    schedule: &CommSchedule,
    mean_rate: f64,
) -> Result<Vec<StepSize>> {
    policy.validate()?;
    if !(mean_rate > 0.0 && mean_rate <= 1.0) {
        return Err(Error::config(format!(
            "mean rate must lie in (0, 1], got {mean_rate}"
        )));
    }
    let scale = policy.resolve_scale(mean_rate)?;
    let steps = schedule
        .blocks()
        .iter()
        .enumerate()
        .map(|(idx, &e)| {
            let m = (idx + 1) as f64;
            let gamma = scale / (m.powf(policy.exponent) + policy.offset);
            StepSize {
                gamma,
                eta: gamma / e as f64,
            }
        })
        .collect();
    Ok(steps)
}

/// Assumption health check for a (schedule, policy) pair. Warnings flag
/// regimes the asymptotic theory does not cover; nothing here is fatal.
#[derive(Debug, Clone)]
pub struct DiagnosticsReport {
    pub nu: f64,
    pub blocks_non_decreasing: bool,
    pub blocks_constant: bool,
    pub max_block: u64,
    /// (1/T^2)(sum E^(1+d))(sum E^-(1+d)) at d = 0.1; finiteness proxy for
    /// the moment condition on block imbalance.
    pub delta_moment_ratio: f64,
    /// (sqrt(t_T)/T) * sum of gamma_m, evaluated at the full horizon.
    pub step_sum_proxy: f64,
    /// (sqrt(t_T)/T) / sqrt(gamma_T), evaluated at the full horizon.
    pub step_tail_proxy: f64,
    pub warnings: Vec<String>,
}

/// Evaluate schedule and step-size diagnostics. The two step proxies must
/// eventually decrease for the theory to apply; they are checked over the
/// last 20% of rounds and reported as warnings when still growing.
pub fn schedule_diagnostics(
    schedule: &CommSchedule,
    policy: &StepSizePolicy,
    mean_rate: f64,
) -> Result<DiagnosticsReport> {
    let steps = step_sizes(policy, schedule, mean_rate)?;
    let blocks = schedule.blocks();
    let rounds = blocks.len();

    let blocks_non_decreasing = blocks.windows(2).all(|w| w[0] <= w[1]);
    let blocks_constant = schedule.constant_blocks();
    let max_block = *blocks.iter().max().expect("non-empty");

    let delta = 0.1;
    let sum_hi: f64 = blocks.iter().map(|&e| (e as f64).powf(1.0 + delta)).sum();
    let sum_lo: f64 = blocks.iter().map(|&e| (e as f64).powf(-(1.0 + delta))).sum();
    let delta_moment_ratio = sum_hi * sum_lo / (rounds as f64 * rounds as f64);

    // Prefix-horizon evaluations of the two step proxies.
    let proxy = |upto: usize, gamma_prefix_sum: f64| -> (f64, f64) {
        let t = schedule.cumulative()[upto - 1] as f64;
        let tt = upto as f64;
        let sum = t.sqrt() / tt * gamma_prefix_sum;
        let tail = t.sqrt() / tt / steps[upto - 1].gamma.sqrt();
        (sum, tail)
    };

    let mut gamma_prefix: Vec<f64> = Vec::with_capacity(rounds);
    let mut acc = 0.0;
    for s in &steps {
        acc += s.gamma;
        gamma_prefix.push(acc);
    }

    let (step_sum_proxy, step_tail_proxy) = proxy(rounds, gamma_prefix[rounds - 1]);

    let mut warnings = Vec::new();
    let tail_start = (rounds as f64 * 0.8).floor() as usize;
    let tail_start = tail_start.clamp(1, rounds);
    if rounds - tail_start >= 2 {
        let mut sum_decreasing = true;
        let mut tail_decreasing = true;
        let mut prev = proxy(tail_start, gamma_prefix[tail_start - 1]);
        for upto in (tail_start + 1)..=rounds {
            let cur = proxy(upto, gamma_prefix[upto - 1]);
            if cur.0 > prev.0 {
                sum_decreasing = false;
            }
            if cur.1 > prev.1 {
                tail_decreasing = false;
            }
            prev = cur;
        }
        if !sum_decreasing {
            warnings.push(
                "step-sum proxy (sqrt(t)/T * sum gamma) is not yet decreasing over the last 20% \
                 of rounds; the horizon may be too short for the step policy"
                    .to_string(),
            );
        }
        if !tail_decreasing {
            warnings.push(
                "step-tail proxy (sqrt(t)/T / sqrt(gamma_T)) is not yet decreasing over the \
                 last 20% of rounds"
                    .to_string(),
            );
        }
    }
    if policy.exponent <= 0.5 || policy.exponent >= 1.0 {
        warnings.push(format!(
            "step exponent {} lies outside (0.5, 1); convergence guarantees need a rate in \
             that range",
            policy.exponent
        ));
    }
    if !blocks_non_decreasing && !blocks_constant {
        warnings.push("block lengths are neither constant nor non-decreasing".to_string());
    }

    Ok(DiagnosticsReport {
        nu: schedule.nu(),
        blocks_non_decreasing,
        blocks_constant,
        max_block,
        delta_moment_ratio,
        step_sum_proxy,
        step_tail_proxy,
        warnings,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn log_blocks_follow_the_ceil_log_rule() {
        let s = CommSchedule::build(Strategy::Log, Horizon::Rounds(7), 0.0).unwrap();
        assert_eq!(s.blocks(), &[1, 2, 2, 3, 3, 3, 3]);
    }

    #[test]
    fn constant_schedule_has_unit_nu_exactly() {
        for strat in [Strategy::C1, Strategy::C5] {
            let s = CommSchedule::build(strat, Horizon::Rounds(40), 0.0).unwrap();
            assert_eq!(s.nu(), 1.0);
        }
    }

    #[test]
    fn mixed_blocks_push_nu_above_one() {
        let s = CommSchedule::from_blocks(vec![1, 2]).unwrap();
        // (1+2)(1+1/2)/4 = 9/8
        assert!((s.nu() - 1.125).abs() < 1e-15, "nu = {}", s.nu());
        let log = CommSchedule::build(Strategy::Log, Horizon::Rounds(100), 0.0).unwrap();
        assert!(log.nu() > 1.0);
    }

    #[test]
    fn grid_is_strictly_increasing_and_ends_at_one() {
        let s = CommSchedule::build(Strategy::Log, Horizon::Samples(500), 0.05).unwrap();
        let grid = s.grid();
        assert!(grid.windows(2).all(|w| w[0] < w[1]));
        assert_eq!(*grid.last().unwrap(), 1.0);
        assert!(grid[0] > 0.0);
    }

    #[test]
    fn sample_horizon_is_met_exactly_with_truncation() {
        for total in [1u64, 7, 53, 500, 1234] {
            for strat in [Strategy::C1, Strategy::C5, Strategy::Log] {
                let s = CommSchedule::build(strat, Horizon::Samples(total), 0.05).unwrap();
                assert_eq!(s.total_samples(), total, "{strat:?} at {total}");
                assert_eq!(
                    s.cumulative().last().copied().unwrap(),
                    total,
                    "cumulative mismatch"
                );
            }
        }
    }

    #[test]
    fn warmup_prepends_single_step_rounds() {
        let s = CommSchedule::build(Strategy::C5, Horizon::Samples(100), 0.05).unwrap();
        // ceil(0.05 * 100) = 5 warm-up rounds of one step each.
        assert_eq!(s.warmup_rounds(), 5);
        assert_eq!(&s.blocks()[..5], &[1, 1, 1, 1, 1]);
        assert_eq!(s.blocks()[5], 5);
        assert_eq!(s.total_samples(), 100);
    }

    #[test]
    fn round_horizon_counts_rounds_not_samples() {
        let s = CommSchedule::build(Strategy::C5, Horizon::Rounds(10), 0.0).unwrap();
        assert_eq!(s.rounds(), 10);
        assert_eq!(s.total_samples(), 50);
    }

    #[test]
    fn zero_horizon_is_rejected() {
        assert!(CommSchedule::build(Strategy::C1, Horizon::Rounds(0), 0.0).is_err());
        assert!(CommSchedule::build(Strategy::C1, Horizon::Samples(0), 0.0).is_err());
    }

    #[test]
    fn empty_or_zero_blocks_are_rejected() {
        assert!(CommSchedule::from_blocks(vec![]).is_err());
        assert!(CommSchedule::from_blocks(vec![2, 0, 1]).is_err());
    }

    #[test]
    fn signature_depends_on_block_sequence_only() {
        let a = CommSchedule::build(Strategy::C1, Horizon::Rounds(20), 0.0).unwrap();
        let b = CommSchedule::from_blocks(vec![1; 20]).unwrap();
        assert_eq!(a.signature(), b.signature());
        let c = CommSchedule::from_blocks(vec![1; 21]).unwrap();
        assert_ne!(a.signature(), c.signature());
    }

    #[test]
    fn default_policy_matches_reference_values() {
        let policy = StepSizePolicy::default();
        let sched = CommSchedule::build(Strategy::C1, Horizon::Rounds(3), 0.0).unwrap();
        let steps = step_sizes(&policy, &sched, 0.9).unwrap();
        // gamma_1 = 18 / (1 + 100)
        assert!((steps[0].gamma - 18.0 / 101.0).abs() < 1e-15);
        assert_eq!(steps[0].gamma, steps[0].eta);
        // gamma_2 = 18 / (2^0.51 + 100)
        let g2 = 18.0 / (2f64.powf(0.51) + 100.0);
        assert!((steps[1].gamma - g2).abs() < 1e-15);
    }

    #[test]
    fn eta_divides_gamma_by_block_length() {
        let policy = StepSizePolicy {
            scale: Scale::Fixed(1.0),
            ..StepSizePolicy::default()
        };
        let sched = CommSchedule::from_blocks(vec![1, 4, 10]).unwrap();
        let steps = step_sizes(&policy, &sched, 0.5).unwrap();
        for (s, &e) in steps.iter().zip(sched.blocks()) {
            assert!((s.eta - s.gamma / e as f64).abs() < 1e-18);
        }
    }

    #[test]
    fn step_sizes_reject_bad_inputs() {
        let sched = CommSchedule::build(Strategy::C1, Horizon::Rounds(5), 0.0).unwrap();
        let bad_scale = StepSizePolicy {
            scale: Scale::Fixed(-1.0),
            ..StepSizePolicy::default()
        };
        assert!(step_sizes(&bad_scale, &sched, 0.9).is_err());
        assert!(step_sizes(&StepSizePolicy::default(), &sched, 0.0).is_err());
        assert!(step_sizes(&StepSizePolicy::default(), &sched, 1.5).is_err());
    }

    #[test]
    fn diagnostics_flag_out_of_range_exponent() {
        let sched = CommSchedule::build(Strategy::C1, Horizon::Rounds(100), 0.0).unwrap();
        let policy = StepSizePolicy {
            exponent: 1.2,
            ..StepSizePolicy::default()
        };
        let report = schedule_diagnostics(&sched, &policy, 0.9).unwrap();
        assert!(report.warnings.iter().any(|w| w.contains("exponent")));
    }

    #[test]
    fn diagnostics_report_nu_and_block_shape() {
        let sched = CommSchedule::build(Strategy::Log, Horizon::Rounds(200), 0.0).unwrap();
        let report = schedule_diagnostics(&sched, &StepSizePolicy::default(), 0.9).unwrap();
        assert!(report.nu > 1.0);
        assert!(report.blocks_non_decreasing);
        assert!(!report.blocks_constant);
        assert_eq!(report.max_block, ceil_log2(201));
        assert!(report.delta_moment_ratio.is_finite());
    }

    #[test]
    fn ceil_log2_matches_float_reference() {
        for n in 1u64..=4096 {
            let expect = (n as f64).log2().ceil() as u64;
            // Float log2 is exact enough on this range for a reference.
            assert_eq!(ceil_log2(n), expect, "n = {n}");
        }
    }
}
