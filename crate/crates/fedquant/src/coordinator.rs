//! Round orchestration: dispatch local blocks, enforce the synchronization
//! barrier, aggregate with weights, broadcast, and maintain the running
//! average that is the reported estimator.

use std::io;
use std::sync::Arc;

use rand_distr::Distribution;

use crate::client::{run_block, ClientState};
use crate::config::FederationConfig;
use crate::dist::SampleStream;
use crate::error::{Error, Result};
use crate::schedule::{step_sizes, CommSchedule, StepSize};
use crate::streams::{substream, Domain};

/// What a client sends at the end of a round: its iterate, nothing else.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RoundMessage {
    pub client_id: u64,
    pub round: u64,
    pub q_end: f64,
}

/// Message fabric between clients and the coordinator. The contract:
/// exactly one message per (client, round), and a full barrier before the
/// round can be collected. The in-process implementation is the reference;
/// a process-separated one can slot in without touching the protocol.
pub trait Transport {
    /// Deliver one client's round message. Duplicate or out-of-round
    /// submissions are protocol violations.
    fn submit(&mut self, msg: RoundMessage) -> Result<()>;

    /// Collect the completed round. Errors unless every expected client
    /// has reported exactly once.
    fn take_round(&mut self, round: u64, expected: usize) -> Result<Vec<RoundMessage>>;

    /// Deliver the aggregate back to the clients; returns the value as the
    /// clients receive it.
    fn broadcast(&mut self, round: u64, value: f64) -> Result<f64>;
}

/// Reference transport: an in-memory barrier over client slots.
#[derive(Debug)]
pub struct InProcessBarrier {
    ids: Vec<u64>,
    inbox: Vec<Option<RoundMessage>>,
    open_round: u64,
}

impl InProcessBarrier {
    pub fn new(ids: Vec<u64>) -> Self {
        let n = ids.len();
        InProcessBarrier {
            ids,
            inbox: vec![None; n],
            open_round: 1,
        }
    }
}

impl Transport for InProcessBarrier {
    fn submit(&mut self, msg: RoundMessage) -> Result<()> {
        if msg.round != self.open_round {
            return Err(Error::protocol(format!(
                "client {} submitted for round {} while round {} is open",
                msg.client_id, msg.round, self.open_round
            )));
        }
        let slot = self
            .ids
            .iter()
            .position(|&id| id == msg.client_id)
            .ok_or_else(|| {
                Error::protocol(format!("message from unknown client {}", msg.client_id))
            })?;
        if self.inbox[slot].is_some() {
            return Err(Error::protocol(format!(
                "duplicate message from client {} in round {}",
                msg.client_id, msg.round
            )));
        }
        self.inbox[slot] = Some(msg);
        Ok(())
    }

    fn take_round(&mut self, round: u64, expected: usize) -> Result<Vec<RoundMessage>> {
        if round != self.open_round {
            return Err(Error::protocol(format!(
                "collect requested for round {round} while round {} is open",
                self.open_round
            )));
        }
        if expected != self.ids.len() {
            return Err(Error::protocol(format!(
                "barrier expects {} clients, coordinator asked for {expected}",
                self.ids.len()
            )));
        }
        // Verify completeness before draining so a failed collect leaves
        // the inbox intact for a retry.
        if let Some(slot) = self.inbox.iter().position(Option::is_none) {
            return Err(Error::protocol(format!(
                "round {round} incomplete: no message from client {}",
                self.ids[slot]
            )));
        }
        let out = self
            .inbox
            .iter_mut()
            .map(|msg| msg.take().expect("checked complete"))
            .collect();
        self.open_round += 1;
        Ok(out)
    }

    fn broadcast(&mut self, round: u64, value: f64) -> Result<f64> {
        if round + 1 != self.open_round {
            return Err(Error::protocol(format!(
                "broadcast for round {round} before it was collected"
            )));
        }
        Ok(value)
    }
}

/// Weighted mean with the weights required to sum to 1.
pub fn aggregate(values: &[f64], weights: &[f64]) -> Result<f64> {
    if values.len() != weights.len() {
        return Err(Error::config(format!(
            "aggregate length mismatch: {} values vs {} weights",
            values.len(),
            weights.len()
        )));
    }
    if values.is_empty() {
        return Err(Error::config("aggregate over zero clients"));
    }
    let wsum: f64 = weights.iter().sum();
    if (wsum - 1.0).abs() > 1e-9 {
        return Err(Error::config(format!(
            "aggregation weights must sum to 1, got {wsum}"
        )));
    }
    Ok(values.iter().zip(weights).map(|(v, w)| v * w).sum())
}

/// Everything the coordinator records about one run.
#[derive(Debug, Clone)]
pub struct Trajectory {
    schedule: Arc<CommSchedule>,
    round_aggregates: Vec<f64>,
    running_averages: Vec<f64>,
}

impl Trajectory {
    pub fn schedule(&self) -> &CommSchedule {
        &self.schedule
    }

    pub fn round_aggregates(&self) -> &[f64] {
        &self.round_aggregates
    }

    pub fn running_averages(&self) -> &[f64] {
        &self.running_averages
    }

    pub fn rounds(&self) -> usize {
        self.round_aggregates.len()
    }

    /// The reported estimator: the running average after the last round.
    pub fn final_average(&self) -> f64 {
        *self.running_averages.last().expect("non-empty trajectory")
    }

    /// Diagnostic CSV: one row per round.
    pub fn write_csv<W: io::Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "m,t_m,E_m,round_aggregate,running_average")?;
        for m in 0..self.rounds() {
            writeln!(
                w,
                "{},{},{},{},{}",
                m + 1,
                self.schedule.cumulative()[m],
                self.schedule.blocks()[m],
                self.round_aggregates[m],
                self.running_averages[m],
            )?;
        }
        Ok(())
    }

    /// Rebuild from the diagnostic CSV. The schedule comes back as a custom
    /// block list; values round-trip exactly through decimal text.
    pub fn read_csv<R: io::Read>(r: R) -> Result<Self> {
        let mut reader = csv::Reader::from_reader(r);
        let mut blocks = Vec::new();
        let mut aggregates = Vec::new();
        let mut averages = Vec::new();
        for (i, row) in reader.records().enumerate() {
            let row = row.map_err(|e| Error::config(format!("trajectory CSV: {e}")))?;
            if row.len() != 5 {
                return Err(Error::config(format!(
                    "trajectory CSV row {} has {} fields, expected 5",
                    i + 1,
                    row.len()
                )));
            }
            let parse_f = |s: &str, what: &str| -> Result<f64> {
                s.parse::<f64>()
                    .map_err(|e| Error::config(format!("trajectory CSV {what}: {e}")))
            };
            let m: usize = row[0]
                .parse()
                .map_err(|e| Error::config(format!("trajectory CSV round index: {e}")))?;
            if m != i + 1 {
                return Err(Error::config(format!(
                    "trajectory CSV rounds out of order at row {}",
                    i + 1
                )));
            }
            let e: u64 = row[2]
                .parse()
                .map_err(|e| Error::config(format!("trajectory CSV block length: {e}")))?;
            blocks.push(e);
            aggregates.push(parse_f(&row[3], "aggregate")?);
            averages.push(parse_f(&row[4], "running average")?);
        }
        let schedule = CommSchedule::from_blocks(blocks)?;
        if aggregates.is_empty() {
            return Err(Error::config("trajectory CSV has no rounds"));
        }
        Ok(Trajectory {
            schedule: Arc::new(schedule),
            round_aggregates: aggregates,
            running_averages: averages,
        })
    }
}

/// Protocol variants that are not part of the JSON config surface.
#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    /// Weight the round aggregate by p_k * r_k (normalized) instead of p_k.
    /// An investigation-only variant of the averaging rule; the default
    /// plain p_k mean is the protocol.
    pub rate_weighted_aggregation: bool,
}

/// One client as the round loop sees it.
pub struct ClientSlot {
    pub id: u64,
    pub weight: f64,
    /// Level targeted by this client's update rule.
    pub tau: f64,
    pub rate: f64,
    pub state: ClientState,
    pub data: Box<dyn SampleStream>,
}

/// Drive the full round loop over externally assembled clients. `block`
/// advances one client through one communication block; the coordinator
/// then enforces the barrier, aggregates, broadcasts, and accumulates the
/// running average.
pub fn run_rounds<T, F>(
    schedule: &Arc<CommSchedule>,
    steps: &[StepSize],
    slots: &mut [ClientSlot],
    transport: &mut T,
    mut block: F,
    options: &RunOptions,
) -> Result<Trajectory>
where
    T: Transport,
    F: FnMut(&mut ClientSlot, u64, u64, f64) -> Result<()>,
{
    if slots.is_empty() {
        return Err(Error::config("run needs at least one client"));
    }
    if steps.len() != schedule.rounds() {
        return Err(Error::config(format!(
            "{} step sizes for {} rounds",
            steps.len(),
            schedule.rounds()
        )));
    }

    let weights: Vec<f64> = if options.rate_weighted_aggregation {
        let raw: Vec<f64> = slots.iter().map(|s| s.weight * s.rate).collect();
        let total: f64 = raw.iter().sum();
        raw.into_iter().map(|w| w / total).collect()
    } else {
        slots.iter().map(|s| s.weight).collect()
    };

    let rounds = schedule.rounds();
    let mut round_aggregates = Vec::with_capacity(rounds);
    let mut running_averages = Vec::with_capacity(rounds);
    let mut running = 0.0f64;
    let mut values = vec![0.0f64; slots.len()];

    for (idx, (&block_len, step)) in schedule.blocks().iter().zip(steps).enumerate() {
        let m = (idx + 1) as u64;
        for slot in slots.iter_mut() {
            block(slot, m, block_len, step.eta)?;
            transport.submit(RoundMessage {
                client_id: slot.id,
                round: m,
                q_end: slot.state.q,
            })?;
        }
        let msgs = transport.take_round(m, slots.len())?;
        for (v, msg) in values.iter_mut().zip(&msgs) {
            *v = msg.q_end;
        }
        let qbar = aggregate(&values, &weights)?;
        if !qbar.is_finite() {
            return Err(Error::numeric(format!(
                "round {m}: aggregate is {qbar}; iterates diverged"
            )));
        }
        let delivered = transport.broadcast(m, qbar)?;
        for slot in slots.iter_mut() {
            slot.state.q = delivered;
        }
        running = ((m - 1) as f64 * running + qbar) / m as f64;
        round_aggregates.push(qbar);
        running_averages.push(running);
    }

    Ok(Trajectory {
        schedule: Arc::clone(schedule),
        round_aggregates,
        running_averages,
    })
}

/// Assemble the client slots for one replication of a config: shared
/// initial iterate, per-client data and mechanism streams, ids in
/// ascending order so aggregation is permutation-invariant.
pub fn assemble_slots(
    config: &FederationConfig,
    replication: u64,
) -> Result<(Vec<ClientSlot>, f64)> {
    let mut init_rng = substream(config.master_seed, Domain::Init, replication, 0);
    let q0: f64 = rand_distr::StandardNormal.sample(&mut init_rng);
    let global_tau = config.global_level();

    let mut order: Vec<&crate::config::ClientSpec> = config.clients.iter().collect();
    order.sort_by_key(|c| c.id);

    let mut slots = Vec::with_capacity(order.len());
    for spec in order {
        let data = spec
            .source
            .sampler(substream(config.master_seed, Domain::Data, replication, spec.id))?;
        let state = ClientState::new(
            spec.id,
            q0,
            substream(config.master_seed, Domain::Mechanism, replication, spec.id),
            config.clamp_bounds,
        );
        slots.push(ClientSlot {
            id: spec.id,
            weight: spec.weight,
            tau: global_tau,
            rate: spec.truthful_rate,
            state,
            data,
        });
    }
    Ok((slots, q0))
}

/// Run one replication of the main protocol.
pub fn run_federated(config: &FederationConfig, replication: u64) -> Result<Trajectory> {
    run_federated_with(config, replication, &RunOptions::default())
}

pub fn run_federated_with(
    config: &FederationConfig,
    replication: u64,
    options: &RunOptions,
) -> Result<Trajectory> {
    config.validate()?;
    let schedule = Arc::new(config.schedule.clone());
    let steps = step_sizes(&config.policy, &schedule, config.mean_rate())?;
    let (mut slots, _q0) = assemble_slots(config, replication)?;
    let mut transport = InProcessBarrier::new(slots.iter().map(|s| s.id).collect());

    run_rounds(
        &schedule,
        &steps,
        &mut slots,
        &mut transport,
        |slot, m, block_len, eta| {
            run_block(
                &mut slot.state,
                block_len,
                eta,
                slot.tau,
                slot.rate,
                slot.data.as_mut(),
                m,
            )
        },
        options,
    )
}
