//! Exact event-driven simulation of the branching particle system under
//! the original measure.
//!
//! Each particle carries two competing exponential clocks: motion exit
//! (total jump-plus-kill rate at its state) and fission (rate `beta` at its
//! state). Clocks are resampled at every event; memorylessness makes this
//! exact. On fission the particle is replaced by `k` children at the same
//! state, `k` drawn from the offspring law. A killed particle disappears
//! from the population but its genealogy weight stays parked at the
//! cemetery, which keeps the unit-mass identity exact.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BinaryHeap};

use rand::Rng;
use rand_chacha::ChaCha12Rng;
use serde::Serialize;

use crate::branching::BranchingLaw;
use crate::error::{Error, Result};
use crate::motion::{MotionExit, MotionModel};
use crate::spectral::SpectralTriple;
use crate::streams::{exp_variate, replicate_rng};

/// Particle identifier: replicate plus birth order, giving deterministic
/// tree reconstruction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
pub struct ParticleId {
    pub replicate: u64,
    pub birth_order: u64,
}

/// Population snapshot as a multiset of (state, particle id).
#[derive(Debug, Clone, Serialize)]
pub struct PointMeasure {
    pub time: f64,
    pub particles: Vec<(usize, ParticleId)>,
}

impl PointMeasure {
    /// Initial measure with particles at the given states, birth orders
    /// `0..k`.
    pub fn roots(replicate: u64, states: &[usize]) -> Self {
        PointMeasure {
            time: 0.0,
            particles: states
                .iter()
                .enumerate()
                .map(|(i, &s)| {
                    (
                        s,
                        ParticleId {
                            replicate,
                            birth_order: i as u64,
                        },
                    )
                })
                .collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.particles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.particles.is_empty()
    }
}

/// Snapshot reduced to per-state counts.
#[derive(Debug, Clone, Serialize)]
pub struct StateCounts {
    pub time: f64,
    pub counts: Vec<u64>,
}

impl StateCounts {
    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// `<f, X_t>`.
    pub fn observe(&self, f: &[f64]) -> f64 {
        self.counts
            .iter()
            .zip(f)
            .map(|(&c, &v)| c as f64 * v)
            .sum()
    }

    /// Count of particles in the state subset `b`.
    pub fn mass_in(&self, b: &[usize]) -> u64 {
        b.iter().map(|&s| self.counts[s]).sum()
    }
}

/// `<f, X_t>`: sum of `f` over alive particles.
pub fn observable(snapshot: &PointMeasure, f: &[f64]) -> f64 {
    snapshot.particles.iter().map(|&(s, _)| f[s]).sum()
}

/// One event in the population history.
#[derive(Debug, Clone, Serialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum Event {
    Jump {
        t: f64,
        id: u64,
        from: usize,
        to: usize,
    },
    Kill {
        t: f64,
        id: u64,
        state: usize,
    },
    Fission {
        t: f64,
        parent: u64,
        state: usize,
        count: u32,
        first_child: u64,
    },
}

impl Event {
    pub fn time(&self) -> f64 {
        match self {
            Event::Jump { t, .. } | Event::Kill { t, .. } | Event::Fission { t, .. } => *t,
        }
    }
}

/// Ordered event history of one realization.
#[derive(Debug, Clone, Serialize)]
pub struct EventLog {
    pub replicate: u64,
    pub events: Vec<Event>,
    pub checkpoints: Vec<f64>,
}

/// Terminal status of a realization.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum SimStatus {
    Completed,
    /// The population exceeded the cap; the log is partial and the run is
    /// flagged, never silently truncated.
    Overflowed { at: f64 },
}

impl SimStatus {
    pub fn overflowed(&self) -> bool {
        matches!(self, SimStatus::Overflowed { .. })
    }
}

/// Simulation window, checkpoint grid, cap, and stream identity.
#[derive(Debug, Clone, Serialize)]
pub struct SimConfig {
    pub horizon: f64,
    pub checkpoints: Vec<f64>,
    pub population_cap: usize,
    pub master_seed: u64,
    pub replicate: u64,
    /// Keep the full event history. Disable for large ensembles where only
    /// snapshots matter.
    pub record_log: bool,
    /// Keep particle-level snapshots in addition to per-state counts.
    pub full_snapshots: bool,
}

pub const DEFAULT_POPULATION_CAP: usize = 1_000_000;

impl SimConfig {
    pub fn new(horizon: f64, checkpoints: Vec<f64>, master_seed: u64, replicate: u64) -> Self {
        SimConfig {
            horizon,
            checkpoints,
            population_cap: DEFAULT_POPULATION_CAP,
            master_seed,
            replicate,
            record_log: true,
            full_snapshots: true,
        }
    }

    pub fn with_cap(mut self, cap: usize) -> Self {
        self.population_cap = cap;
        self
    }

    pub fn lean(mut self) -> Self {
        self.record_log = false;
        self.full_snapshots = false;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.population_cap == 0 {
            return Err(Error::InvalidSimConfig("population cap must be >= 1".into()));
        }
        if !(self.horizon >= 0.0) {
            return Err(Error::InvalidSimConfig(format!(
                "horizon {} must be nonnegative",
                self.horizon
            )));
        }
        let sorted = self.checkpoints.windows(2).all(|w| w[0] <= w[1]);
        let in_range = self
            .checkpoints
            .iter()
            .all(|&c| (0.0..=self.horizon).contains(&c));
        if !sorted || !in_range {
            return Err(Error::InvalidSimConfig(
                "checkpoints must be sorted within [0, horizon]".into(),
            ));
        }
        Ok(())
    }

    /// The replicate's RNG stream per the seeding contract.
    pub fn rng(&self) -> ChaCha12Rng {
        replicate_rng(self.master_seed, self.replicate)
    }
}

/// Everything one realization produced.
#[derive(Debug, Clone)]
pub struct SimResult {
    pub log: EventLog,
    /// Particle-level snapshots (when `full_snapshots` is set).
    pub snapshots: Vec<PointMeasure>,
    /// Per-state counts at every checkpoint, always recorded.
    pub counts: Vec<StateCounts>,
    pub status: SimStatus,
    /// First unused birth order, for callers that keep allocating ids.
    pub next_birth_order: u64,
}

/// Pending event in the queue; ties in time are broken by insertion
/// sequence so the processing order is a deterministic total order.
#[derive(Debug, Clone, Copy)]
struct Pending {
    time: f64,
    seq: u64,
    id: u64,
}

impl PartialEq for Pending {
    fn eq(&self, other: &Self) -> bool {
        self.time == other.time && self.seq == other.seq
    }
}
impl Eq for Pending {}
impl PartialOrd for Pending {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for Pending {
    fn cmp(&self, other: &Self) -> Ordering {
        // reversed: BinaryHeap is a max-heap, we want earliest first
        other
            .time
            .total_cmp(&self.time)
            .then_with(|| other.seq.cmp(&self.seq))
    }
}

/// Run one realization from the given initial measure.
///
/// The caller supplies the RNG stream; `SimConfig::rng` gives the
/// canonical stream for (master seed, replicate index).
pub fn simulate(
    motion: &MotionModel,
    law: &BranchingLaw,
    initial: &PointMeasure,
    config: &SimConfig,
    rng: &mut ChaCha12Rng,
) -> Result<SimResult> {
    config.validate()?;
    if initial.is_empty() {
        return Err(Error::EmptyInitialMeasure);
    }
    if law.n_states() != motion.n_states() {
        return Err(Error::DimensionMismatch {
            context: "branching law states",
            expected: motion.n_states(),
            got: law.n_states(),
        });
    }
    for &(s, _) in &initial.particles {
        motion.check_state(s)?;
    }

    let n = motion.n_states();
    let total_rate: Vec<f64> = (0..n).map(|x| motion.exit_rate(x) + law.beta(x)).collect();

    let mut alive: BTreeMap<u64, usize> = BTreeMap::new();
    let mut heap: BinaryHeap<Pending> = BinaryHeap::new();
    let mut seq = 0u64;
    let mut events: Vec<Event> = Vec::new();
    let mut snapshots: Vec<PointMeasure> = Vec::new();
    let mut counts: Vec<StateCounts> = Vec::new();
    let mut next_birth = 0u64;

    let schedule = |heap: &mut BinaryHeap<Pending>,
                        seq: &mut u64,
                        rng: &mut ChaCha12Rng,
                        id: u64,
                        state: usize,
                        now: f64| {
        if let Some(hold) = exp_variate(rng, total_rate[state]) {
            *seq += 1;
            heap.push(Pending {
                time: now + hold,
                seq: *seq,
                id,
            });
        }
    };

    for &(s, pid) in &initial.particles {
        alive.insert(pid.birth_order, s);
        next_birth = next_birth.max(pid.birth_order + 1);
    }
    for &(s, pid) in &initial.particles {
        schedule(&mut heap, &mut seq, rng, pid.birth_order, s, 0.0);
    }

    let replicate = config.replicate;
    let record =
        |alive: &BTreeMap<u64, usize>, t: f64, snaps: &mut Vec<PointMeasure>, cts: &mut Vec<StateCounts>| {
            let mut per_state = vec![0u64; n];
            for &s in alive.values() {
                per_state[s] += 1;
            }
            cts.push(StateCounts {
                time: t,
                counts: per_state,
            });
            if config.full_snapshots {
                snaps.push(PointMeasure {
                    time: t,
                    particles: alive
                        .iter()
                        .map(|(&bo, &s)| {
                            (
                                s,
                                ParticleId {
                                    replicate,
                                    birth_order: bo,
                                },
                            )
                        })
                        .collect(),
                });
            }
        };

    let mut next_checkpoint = 0usize;
    let mut status = SimStatus::Completed;

    'main: while let Some(&Pending { time, .. }) = heap.peek() {
        // flush checkpoints strictly before the next event
        while next_checkpoint < config.checkpoints.len()
            && config.checkpoints[next_checkpoint] < time
        {
            record(&alive, config.checkpoints[next_checkpoint], &mut snapshots, &mut counts);
            next_checkpoint += 1;
        }
        if time > config.horizon {
            break;
        }
        let Pending { time: t, id, .. } = heap.pop().expect("peeked");
        let state = *alive.get(&id).expect("pending particle is alive");

        let u: f64 = rng.random::<f64>() * total_rate[state];
        if u < motion.exit_rate(state) {
            match motion.pick_exit(state, u) {
                MotionExit::Jump(to) => {
                    alive.insert(id, to);
                    if config.record_log {
                        events.push(Event::Jump {
                            t,
                            id,
                            from: state,
                            to,
                        });
                    }
                    schedule(&mut heap, &mut seq, rng, id, to, t);
                }
                MotionExit::Kill => {
                    alive.remove(&id);
                    if config.record_log {
                        events.push(Event::Kill { t, id, state });
                    }
                }
            }
        } else {
            let k = law.offspring(state).sample(rng);
            let first_child = next_birth;
            alive.remove(&id);
            if config.record_log {
                events.push(Event::Fission {
                    t,
                    parent: id,
                    state,
                    count: k as u32,
                    first_child,
                });
            }
            for _ in 0..k {
                let child = next_birth;
                next_birth += 1;
                alive.insert(child, state);
                schedule(&mut heap, &mut seq, rng, child, state, t);
            }
            if alive.len() > config.population_cap {
                status = SimStatus::Overflowed { at: t };
                break 'main;
            }
        }
    }

    if !status.overflowed() {
        while next_checkpoint < config.checkpoints.len() {
            record(&alive, config.checkpoints[next_checkpoint], &mut snapshots, &mut counts);
            next_checkpoint += 1;
        }
    }

    Ok(SimResult {
        log: EventLog {
            replicate,
            events,
            checkpoints: config.checkpoints.clone(),
        },
        snapshots,
        counts,
        status,
        next_birth_order: next_birth,
    })
}

/// Additive martingale along the checkpoints:
/// `W_t = e^{-lambda1 t} <X_t, phi>`.
pub fn martingale_path(counts: &[StateCounts], triple: &SpectralTriple) -> Vec<(f64, f64)> {
    counts
        .iter()
        .map(|c| {
            (
                c.time,
                (-triple.lambda1 * c.time).exp() * c.observe(&triple.phi),
            )
        })
        .collect()
}

/// Weighted companion series `U_t(f phi) = e^{-lambda1 t} <X_t, f phi>`.
pub fn weighted_path(
    counts: &[StateCounts],
    triple: &SpectralTriple,
    f: &[f64],
) -> Vec<(f64, f64)> {
    let fphi: Vec<f64> = f
        .iter()
        .zip(&triple.phi)
        .map(|(a, b)| a * b)
        .collect();
    counts
        .iter()
        .map(|c| {
            (
                c.time,
                (-triple.lambda1 * c.time).exp() * c.observe(&fphi),
            )
        })
        .collect()
}

/// Replay the genealogy and sum, over particles alive at `t` plus lineages
/// parked at the cemetery, the product of reciprocal offspring counts along
/// each ancestry. For a single root the sum is exactly 1 at every time.
pub fn genealogy_weight_sum(initial: &PointMeasure, log: &EventLog, t: f64) -> f64 {
    let mut weights: BTreeMap<u64, f64> = initial
        .particles
        .iter()
        .map(|&(_, pid)| (pid.birth_order, 1.0))
        .collect();
    let mut cemetery = 0.0;
    for ev in &log.events {
        if ev.time() > t {
            break;
        }
        match *ev {
            Event::Jump { .. } => {}
            Event::Kill { id, .. } => {
                if let Some(w) = weights.remove(&id) {
                    cemetery += w;
                }
            }
            Event::Fission {
                parent,
                count,
                first_child,
                ..
            } => {
                if let Some(w) = weights.remove(&parent) {
                    let share = w / count as f64;
                    for c in 0..count as u64 {
                        weights.insert(first_child + c, share);
                    }
                }
            }
        }
    }
    weights.values().sum::<f64>() + cemetery
}
