//! The branching system under the size-biased change of measure, built
//! through the spine construction.
//!
//! One distinguished particle (the spine) moves under the h-transformed
//! motion and undergoes fission at the accelerated rate `A(x) beta(x)`,
//! exact between motion jumps because the rate is piecewise constant along
//! the path. At each fission the offspring count is drawn size-biased, one
//! child continues the spine uniformly at random, and every other child
//! seeds an independent forward simulation under the original measure,
//! started at the fission's space-time point. Subtree streams are derived
//! by hashing the fission index and child slot, so one replicate is fully
//! reproducible and the spine marginal does not depend on how many
//! subtrees get built.

use rand::Rng;
use serde::Serialize;

use crate::branching::{BranchingLaw, SizeBiasedPmf};
use crate::error::{Error, Result};
use crate::forward::{
    genealogy_weight_sum, simulate, PointMeasure, SimConfig, SimResult, SimStatus, StateCounts,
};
use crate::motion::{MotionExit, MotionModel, Trajectory};
use crate::spectral::{h_transform, FeynmanKacOperator, SpectralTriple};
use crate::stats::{self, ChiSquaredFit, Summary};
use crate::streams::{exp_variate, StreamKey};

/// One fission on the spine.
#[derive(Debug, Clone, Serialize)]
pub struct SpineFission {
    pub time: f64,
    pub state: usize,
    /// Offspring count, drawn from the size-biased law.
    pub offspring: u64,
    /// Which child continues the spine (uniform on `0..offspring`).
    pub spine_child: u64,
}

/// A non-spine subtree: an independent forward realization born at its
/// fission's space-time point.
#[derive(Debug, Clone)]
pub struct SubtreeRun {
    pub fission_index: usize,
    pub birth_time: f64,
    pub birth_state: usize,
    /// Index of the first global checkpoint the subtree covers.
    pub checkpoint_offset: usize,
    pub root: PointMeasure,
    pub result: SimResult,
}

/// One realization under the changed measure.
#[derive(Debug, Clone)]
pub struct SpineRecord {
    pub replicate: u64,
    pub x0: usize,
    pub horizon: f64,
    pub checkpoints: Vec<f64>,
    /// Spine path under the h-transformed (conservative) motion.
    pub trajectory: Trajectory,
    pub fissions: Vec<SpineFission>,
    pub subtrees: Vec<SubtreeRun>,
    /// True when subtree simulation was skipped (spine-marginal studies).
    pub spine_only: bool,
    pub status: SimStatus,
}

impl SpineRecord {
    pub fn spine_state_at(&self, t: f64) -> usize {
        self.trajectory
            .state_at(t)
            .expect("spine is conservative, never killed")
    }

    /// Index of the checkpoint at time `t`.
    fn checkpoint_index(&self, t: f64) -> Result<usize> {
        self.checkpoints
            .iter()
            .position(|&c| (c - t).abs() <= 1e-12)
            .ok_or(Error::IncompatibleHorizon {
                horizon: self.horizon,
                t,
            })
    }

    /// Full population at a checkpoint: the spine particle plus every
    /// alive particle of every subtree born by then.
    pub fn reconstructed_counts(&self, t: f64) -> Result<StateCounts> {
        let idx = self.checkpoint_index(t)?;
        let n = self.trajectory_state_count();
        let mut counts = vec![0u64; n];
        counts[self.spine_state_at(t)] += 1;
        for sub in &self.subtrees {
            if sub.birth_time > t {
                continue;
            }
            let local = idx - sub.checkpoint_offset;
            let c = &sub.result.counts[local];
            for (s, v) in c.counts.iter().enumerate() {
                counts[s] += v;
            }
        }
        Ok(StateCounts { time: t, counts })
    }

    fn trajectory_state_count(&self) -> usize {
        self.subtrees
            .first()
            .map(|s| s.result.counts.first().map(|c| c.counts.len()))
            .flatten()
            .unwrap_or(self.max_state_seen() + 1)
    }

    fn max_state_seen(&self) -> usize {
        let mut m = self.x0.max(self.trajectory.initial);
        for &(_, s) in &self.trajectory.jumps {
            m = m.max(s);
        }
        for f in &self.fissions {
            m = m.max(f.state);
        }
        m
    }

    /// Spine-decomposition functional
    /// `e^{-lambda1 t} phi(Y_t) + sum_{fissions <= t} (r - 1) phi(Y_zeta) e^{-lambda1 zeta}`.
    pub fn spine_functional(&self, triple: &SpectralTriple, t: f64) -> f64 {
        let mut acc = (-triple.lambda1 * t).exp() * triple.phi[self.spine_state_at(t)];
        for f in &self.fissions {
            if f.time <= t {
                acc += (f.offspring - 1) as f64
                    * triple.phi[f.state]
                    * (-triple.lambda1 * f.time).exp();
            }
        }
        acc
    }
}

/// Precomputed machinery for spine realizations over one system.
#[derive(Debug, Clone)]
pub struct SpineSimulator {
    motion: MotionModel,
    law: BranchingLaw,
    h_motion: MotionModel,
    size_biased: Vec<SizeBiasedPmf>,
    /// `A(x) beta(x)`, the accelerated fission intensity.
    fission_rate: Vec<f64>,
}

impl SpineSimulator {
    pub fn new(
        motion: &MotionModel,
        law: &BranchingLaw,
        triple: &SpectralTriple,
    ) -> Result<Self> {
        let op = FeynmanKacOperator::new(motion, law)?;
        let h_motion = h_transform(&op, triple)?;
        let n = motion.n_states();
        let size_biased = (0..n).map(|x| law.size_biased(x)).collect();
        let fission_rate = (0..n)
            .map(|x| law.mean_offspring(x) * law.beta(x))
            .collect();
        Ok(SpineSimulator {
            motion: motion.clone(),
            law: law.clone(),
            h_motion,
            size_biased,
            fission_rate,
        })
    }

    pub fn h_motion(&self) -> &MotionModel {
        &self.h_motion
    }

    /// Run one realization. The spine draws from the replicate stream;
    /// subtree `j` of fission `i` draws from `key.child(1 + i).child(j)`.
    pub fn run(&self, x0: usize, config: &SimConfig, spine_only: bool) -> Result<SpineRecord> {
        config.validate()?;
        self.motion.check_state(x0)?;
        let key = StreamKey::root(config.master_seed).child(config.replicate);
        let mut rng = key.rng();

        // phase 1: the spine itself
        let mut jumps: Vec<(f64, usize)> = Vec::new();
        let mut fissions: Vec<SpineFission> = Vec::new();
        let mut t = 0.0;
        let mut state = x0;
        loop {
            let motion_rate = self.h_motion.exit_rate(state);
            let total = motion_rate + self.fission_rate[state];
            let Some(hold) = exp_variate(&mut rng, total) else {
                break;
            };
            t += hold;
            if t > config.horizon {
                break;
            }
            let u: f64 = rng.random::<f64>() * total;
            if u < motion_rate {
                match self.h_motion.pick_exit(state, u) {
                    MotionExit::Jump(y) => {
                        jumps.push((t, y));
                        state = y;
                    }
                    MotionExit::Kill => unreachable!("h-transformed motion is conservative"),
                }
            } else {
                let r = self.size_biased[state].sample(&mut rng);
                let spine_child = rng.random_range(0..r);
                fissions.push(SpineFission {
                    time: t,
                    state,
                    offspring: r,
                    spine_child,
                });
            }
        }
        let trajectory = Trajectory {
            initial: x0,
            jumps,
            end_time: config.horizon,
            kill_time: None,
        };

        // phase 2: immigrated subtrees
        let mut subtrees = Vec::new();
        let mut status = SimStatus::Completed;
        if !spine_only {
            let mut next_birth = 1u64; // spine particle holds birth order 0
            for (i, fission) in fissions.iter().enumerate() {
                let offset = self
                    .checkpoints_from(&config.checkpoints, fission.time);
                let local_checkpoints: Vec<f64> = config.checkpoints[offset..]
                    .iter()
                    .map(|c| c - fission.time)
                    .collect();
                for j in 0..fission.offspring - 1 {
                    let sub_key = key.child(1 + i as u64).child(j);
                    let mut sub_rng = sub_key.rng();
                    let root = PointMeasure {
                        time: 0.0,
                        particles: vec![(
                            fission.state,
                            crate::forward::ParticleId {
                                replicate: config.replicate,
                                birth_order: next_birth,
                            },
                        )],
                    };
                    let sub_config = SimConfig {
                        horizon: config.horizon - fission.time,
                        checkpoints: local_checkpoints.clone(),
                        population_cap: config.population_cap,
                        master_seed: config.master_seed,
                        replicate: config.replicate,
                        record_log: config.record_log,
                        full_snapshots: false,
                    };
                    let result =
                        simulate(&self.motion, &self.law, &root, &sub_config, &mut sub_rng)?;
                    if let SimStatus::Overflowed { at } = result.status {
                        status = SimStatus::Overflowed {
                            at: fission.time + at,
                        };
                    }
                    next_birth = result.next_birth_order;
                    subtrees.push(SubtreeRun {
                        fission_index: i,
                        birth_time: fission.time,
                        birth_state: fission.state,
                        checkpoint_offset: offset,
                        root,
                        result,
                    });
                }
            }
        }

        Ok(SpineRecord {
            replicate: config.replicate,
            x0,
            horizon: config.horizon,
            checkpoints: config.checkpoints.clone(),
            trajectory,
            fissions,
            subtrees,
            spine_only,
            status,
        })
    }

    fn checkpoints_from(&self, checkpoints: &[f64], birth: f64) -> usize {
        checkpoints.partition_point(|&c| c < birth)
    }
}

/// The genealogy identity: over the particles alive at `t` (with killed
/// lineages parked at the cemetery), the products of reciprocal offspring
/// counts along each ancestry sum to exactly one.
pub fn unit_mass_identity(record: &SpineRecord, t: f64) -> Result<f64> {
    if t > record.horizon {
        return Err(Error::IncompatibleHorizon {
            horizon: record.horizon,
            t,
        });
    }
    if record.spine_only {
        return Err(Error::InvalidSimConfig(
            "unit-mass identity needs subtree genealogies; record was run spine-only".into(),
        ));
    }
    let mut spine_weight = 1.0;
    let mut total = 0.0;
    let mut sub_iter = record.subtrees.iter().peekable();
    for (i, fission) in record.fissions.iter().enumerate() {
        if fission.time > t {
            break;
        }
        let child_weight = spine_weight / fission.offspring as f64;
        while let Some(sub) = sub_iter.peek() {
            if sub.fission_index != i {
                break;
            }
            let sub = sub_iter.next().unwrap();
            total += child_weight
                * genealogy_weight_sum(&sub.root, &sub.result.log, t - sub.birth_time);
        }
        spine_weight = child_weight;
    }
    Ok(total + spine_weight)
}

/// Two estimates of the same expectation under the changed measure: the
/// reconstructed-population martingale versus the spine-only functional.
#[derive(Debug, Clone, Serialize)]
pub struct SpineDecompositionReport {
    pub t: f64,
    /// `phi(x) M_t(phi)` from full reconstructions.
    pub population_side: Summary,
    /// Spine functional from the decomposition.
    pub spine_side: Summary,
    /// Paired z-statistic of the difference.
    pub z_difference: f64,
}

pub fn spine_decomposition_check(
    records: &[SpineRecord],
    triple: &SpectralTriple,
    t: f64,
) -> Result<SpineDecompositionReport> {
    let mut lhs = Vec::with_capacity(records.len());
    let mut rhs = Vec::with_capacity(records.len());
    let mut diffs = Vec::with_capacity(records.len());
    for rec in records {
        if t > rec.horizon {
            return Err(Error::IncompatibleHorizon {
                horizon: rec.horizon,
                t,
            });
        }
        let counts = rec.reconstructed_counts(t)?;
        let w = (-triple.lambda1 * t).exp() * counts.observe(&triple.phi);
        let s = rec.spine_functional(triple, t);
        lhs.push(w);
        rhs.push(s);
        diffs.push(w - s);
    }
    let z = stats::mean(&diffs) / stats::standard_error(&diffs);
    Ok(SpineDecompositionReport {
        t,
        population_side: stats::summarize(&lhs),
        spine_side: stats::summarize(&rhs),
        z_difference: z,
    })
}

/// Radon-Nikodym consistency check: the martingale-weighted mean of an
/// observable under the original measure against its plain mean under the
/// changed measure.
#[derive(Debug, Clone, Serialize)]
pub struct MeasureChangeReport {
    pub t: f64,
    pub replicates: u64,
    /// Ensemble mean of `M_t(phi) g(X_t)` under forward simulation.
    pub forward_side: Summary,
    /// Ensemble mean of `g(X_t)` under spine simulation.
    pub spine_side: Summary,
    pub z_difference: f64,
    pub forward_overflows: usize,
    pub spine_overflows: usize,
}

/// Fraction of overflowed replicates above which the comparison is
/// rejected as contaminated.
const OVERFLOW_BUDGET: f64 = 0.001;

pub fn measure_change_check(
    motion: &MotionModel,
    law: &BranchingLaw,
    triple: &SpectralTriple,
    x0: usize,
    t: f64,
    g: impl Fn(&StateCounts) -> f64,
    replicates: u64,
    master_seed: u64,
    cap: usize,
) -> Result<MeasureChangeReport> {
    let sim = SpineSimulator::new(motion, law, triple)?;
    let mut forward_vals = Vec::new();
    let mut spine_vals = Vec::new();
    let mut forward_overflows = 0usize;
    let mut spine_overflows = 0usize;

    for rep in 0..replicates {
        let config = SimConfig::new(t, vec![t], master_seed, rep)
            .with_cap(cap)
            .lean();
        let initial = PointMeasure::roots(rep, &[x0]);
        let mut rng = config.rng();
        let res = simulate(motion, law, &initial, &config, &mut rng)?;
        if res.status.overflowed() {
            forward_overflows += 1;
        } else {
            let counts = &res.counts[0];
            let m_t = (-triple.lambda1 * t).exp() * counts.observe(&triple.phi)
                / triple.phi[x0];
            forward_vals.push(m_t * g(counts));
        }

        let spine_config = SimConfig {
            master_seed: master_seed ^ SPINE_CHANNEL_SALT,
            ..SimConfig::new(t, vec![t], master_seed, rep).with_cap(cap)
        };
        let record = sim.run(x0, &spine_config, false)?;
        if record.status.overflowed() {
            spine_overflows += 1;
        } else {
            spine_vals.push(g(&record.reconstructed_counts(t)?));
        }
    }

    let total_overflow = forward_overflows + spine_overflows;
    if (total_overflow as f64) > OVERFLOW_BUDGET * (2 * replicates) as f64 {
        return Err(Error::OverflowContamination {
            overflowed: total_overflow,
            total: 2 * replicates as usize,
            limit: OVERFLOW_BUDGET * 100.0,
        });
    }

    let z = (stats::mean(&forward_vals) - stats::mean(&spine_vals))
        / (stats::standard_error(&forward_vals).powi(2)
            + stats::standard_error(&spine_vals).powi(2))
        .sqrt();
    Ok(MeasureChangeReport {
        t,
        replicates,
        forward_side: stats::summarize(&forward_vals),
        spine_side: stats::summarize(&spine_vals),
        z_difference: z,
        forward_overflows,
        spine_overflows,
    })
}

/// Distinct seed channel for the spine ensemble ("spine" in ASCII), so the
/// two sides of the comparison draw independent streams.
const SPINE_CHANNEL_SALT: u64 = 0x7370_696e_65;

/// Chi-squared fit of the spine fission counts at time `t` against a
/// Poisson law — valid on fixtures where `A beta` is constant.
pub fn fission_count_chi2(records: &[SpineRecord], t: f64, lambda: f64) -> ChiSquaredFit {
    let k_hi = (lambda + 10.0 * lambda.sqrt()).ceil() as usize + 2;
    let mut observed = vec![0u64; k_hi];
    for rec in records {
        let count = rec.fissions.iter().filter(|f| f.time <= t).count();
        if count < k_hi {
            observed[count] += 1;
        }
    }
    let probs: Vec<f64> = (0..k_hi as u64)
        .map(|k| stats::poisson_pmf(lambda, k))
        .collect();
    stats::chi_squared_gof(&observed, &probs, records.len() as u64)
}

/// Occupancy of the spine at time `t` against the stationary law
/// `phi phi_tilde m` of the h-transformed motion.
#[derive(Debug, Clone, Serialize)]
pub struct OccupancyCell {
    pub state: usize,
    pub observed: f64,
    pub expected: f64,
    pub z: f64,
}

pub fn spine_occupancy(
    records: &[SpineRecord],
    triple: &SpectralTriple,
    t: f64,
) -> Vec<OccupancyCell> {
    let n = triple.n_states();
    let total = records.len() as f64;
    let mut counts = vec![0u64; n];
    for rec in records {
        counts[rec.spine_state_at(t)] += 1;
    }
    let pi = triple.stationary_law();
    (0..n)
        .map(|s| {
            let observed = counts[s] as f64 / total;
            let expected = pi[s];
            let se = (expected * (1.0 - expected) / total).sqrt();
            OccupancyCell {
                state: s,
                observed,
                expected,
                z: if se > 0.0 { (observed - expected) / se } else { 0.0 },
            }
        })
        .collect()
}

/// Chi-squared fit of offspring counts observed at spine fissions in a
/// given state against the size-biased law.
pub fn offspring_chi2(records: &[SpineRecord], state: usize, sb: &SizeBiasedPmf) -> ChiSquaredFit {
    let k_hi = sb.probs().len().min(64) + 2;
    let mut observed = vec![0u64; k_hi];
    let mut total = 0u64;
    for rec in records {
        for f in rec.fissions.iter().filter(|f| f.state == state) {
            total += 1;
            let idx = (f.offspring - 2) as usize;
            if idx < k_hi {
                observed[idx] += 1;
            }
        }
    }
    let probs: Vec<f64> = (0..k_hi as u64).map(|i| sb.prob(i + 2)).collect();
    stats::chi_squared_gof(&observed, &probs, total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::branching::OffspringLaw;
    use approx::assert_relative_eq;
    use nalgebra::DMatrix;

    fn yule2() -> (MotionModel, BranchingLaw, SpectralTriple) {
        let rates = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 1.0, 0.0]);
        let motion = MotionModel::new(vec![1.0, 1.0], rates, vec![0.0, 0.0]).unwrap();
        let law =
            BranchingLaw::homogeneous(2, 1.0, OffspringLaw::point_mass(2).unwrap()).unwrap();
        let op = FeynmanKacOperator::new(&motion, &law).unwrap();
        let triple = op.principal_triple().unwrap();
        (motion, law, triple)
    }

    fn spine_records(
        sim: &SpineSimulator,
        x0: usize,
        horizon: f64,
        checkpoints: Vec<f64>,
        reps: u64,
        seed: u64,
        spine_only: bool,
    ) -> Vec<SpineRecord> {
        (0..reps)
            .map(|rep| {
                let config = SimConfig::new(horizon, checkpoints.clone(), seed, rep);
                sim.run(x0, &config, spine_only).unwrap()
            })
            .collect()
    }

    #[test]
    fn zero_rate_spine_never_branches() {
        let (motion, _, _) = yule2();
        let law =
            BranchingLaw::homogeneous(2, 0.0, OffspringLaw::point_mass(2).unwrap()).unwrap();
        let op = FeynmanKacOperator::new(&motion, &law).unwrap();
        let triple = op.principal_triple().unwrap();
        let sim = SpineSimulator::new(&motion, &law, &triple).unwrap();
        let config = SimConfig::new(5.0, vec![5.0], 3, 0);
        let rec = sim.run(0, &config, false).unwrap();
        assert!(rec.fissions.is_empty());
        assert!(rec.subtrees.is_empty());
        assert!(!rec.trajectory.was_killed());
    }

    #[test]
    fn yule2_fission_count_is_poisson_two_t() {
        let (motion, law, triple) = yule2();
        let sim = SpineSimulator::new(&motion, &law, &triple).unwrap();
        let records = spine_records(&sim, 0, 2.0, vec![2.0], 10_000, 40, true);
        let counts: Vec<f64> = records
            .iter()
            .map(|r| r.fissions.len() as f64)
            .collect();
        // rate A*beta = 2, so mean fissions by t=2 is 4
        let z = stats::z_against(&counts, 4.0);
        assert!(z.abs() < 4.0, "z = {z}");
        let fit = fission_count_chi2(&records, 2.0, 4.0);
        assert!(fit.p_value > 1e-3, "{fit:?}");
    }

    #[test]
    fn point_mass_offspring_always_two() {
        let (motion, law, triple) = yule2();
        let sim = SpineSimulator::new(&motion, &law, &triple).unwrap();
        let records = spine_records(&sim, 0, 3.0, vec![3.0], 200, 41, true);
        for rec in &records {
            for f in &rec.fissions {
                assert_eq!(f.offspring, 2);
                assert!(f.spine_child < 2);
            }
        }
    }

    #[test]
    fn unit_mass_identity_exact_on_every_path() {
        let (motion, law, triple) = yule2();
        let sim = SpineSimulator::new(&motion, &law, &triple).unwrap();
        let checkpoints = vec![0.5, 1.0, 1.5, 2.0];
        let records = spine_records(&sim, 0, 2.0, checkpoints.clone(), 100, 42, false);
        for rec in &records {
            for &t in &checkpoints {
                let s = unit_mass_identity(rec, t).unwrap();
                assert!(
                    (s - 1.0).abs() < 1e-12,
                    "rep {}: t={t} sum={s}",
                    rec.replicate
                );
            }
        }
    }

    #[test]
    fn unit_mass_identity_before_first_fission_is_trivial() {
        let (motion, law, triple) = yule2();
        let sim = SpineSimulator::new(&motion, &law, &triple).unwrap();
        let config = SimConfig::new(1e-9, vec![1e-9], 5, 0);
        let rec = sim.run(0, &config, false).unwrap();
        assert!(rec.fissions.is_empty());
        assert_relative_eq!(unit_mass_identity(&rec, 1e-9).unwrap(), 1.0);
    }

    #[test]
    fn unit_mass_after_single_fission_enumerates() {
        // size-biased of p2=p3=0.5 gives r in {2,3}; after one fission the
        // sum is r * (1/r) = 1 by direct enumeration
        let (motion, _, _) = yule2();
        let law = BranchingLaw::homogeneous(
            2,
            1.0,
            OffspringLaw::finite(vec![0.5, 0.5]).unwrap(),
        )
        .unwrap();
        let op = FeynmanKacOperator::new(&motion, &law).unwrap();
        let triple = op.principal_triple().unwrap();
        let sim = SpineSimulator::new(&motion, &law, &triple).unwrap();
        let mut seen_three = false;
        for rep in 0..50 {
            let config = SimConfig::new(0.3, vec![0.3], 101, rep);
            let rec = sim.run(0, &config, false).unwrap();
            if rec.fissions.len() == 1 {
                seen_three |= rec.fissions[0].offspring == 3;
                assert_relative_eq!(
                    unit_mass_identity(&rec, 0.3).unwrap(),
                    1.0,
                    epsilon = 1e-13
                );
            }
        }
        assert!(seen_three, "expected at least one r=3 fission");
    }

    #[test]
    fn spine_decomposition_two_estimators_agree_with_oracle() {
        let (motion, law, triple) = yule2();
        let sim = SpineSimulator::new(&motion, &law, &triple).unwrap();
        let records = spine_records(&sim, 0, 1.0, vec![1.0], 10_000, 43, false);
        let report = spine_decomposition_check(&records, &triple, 1.0).unwrap();
        // E_Q[M_t] = E_P[M_t^2] = 2 - e^{-t} from the Yule second moment
        let oracle = 2.0 - (-1.0f64).exp();
        let zp = (report.population_side.mean - oracle) / report.population_side.se;
        let zs = (report.spine_side.mean - oracle) / report.spine_side.se;
        assert!(zp.abs() < 4.0, "population side z = {zp}");
        assert!(zs.abs() < 4.0, "spine side z = {zs}");
        assert!(report.z_difference.abs() < 4.0);
    }

    #[test]
    fn spine_decomposition_at_time_zero_is_phi() {
        let (motion, law, triple) = yule2();
        let sim = SpineSimulator::new(&motion, &law, &triple).unwrap();
        let records = spine_records(&sim, 0, 1.0, vec![0.0, 1.0], 50, 44, false);
        for rec in &records {
            let counts = rec.reconstructed_counts(0.0).unwrap();
            assert_eq!(counts.total(), 1);
            assert_relative_eq!(rec.spine_functional(&triple, 0.0), triple.phi[0]);
        }
    }

    #[test]
    fn zero_branching_spine_matches_h_transform_expectation() {
        // beta = 0 and conservative motion: lambda1 = 0, phi constant, and
        // the functional phi(Y_t) is exactly 1 on every path
        let (motion, _, _) = yule2();
        let law =
            BranchingLaw::homogeneous(2, 0.0, OffspringLaw::point_mass(2).unwrap()).unwrap();
        let op = FeynmanKacOperator::new(&motion, &law).unwrap();
        let triple = op.principal_triple().unwrap();
        let sim = SpineSimulator::new(&motion, &law, &triple).unwrap();
        let t = 1.0;
        let records = spine_records(&sim, 0, t, vec![t], 200, 45, false);
        for rec in &records {
            assert!(rec.fissions.is_empty());
            assert!((rec.spine_functional(&triple, t) - 1.0).abs() < 1e-12);
        }

        // beta = 0 with killing: subcritical, phi varies, and the spine
        // functional mean matches the h-transform matrix exponential
        let rates = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 1.0, 0.0]);
        let killed = MotionModel::new(vec![1.0, 1.0], rates, vec![0.5, 0.0]).unwrap();
        let op = FeynmanKacOperator::new(&killed, &law).unwrap();
        let triple = op.principal_triple().unwrap();
        assert!(!triple.supercritical);
        let sim = SpineSimulator::new(&killed, &law, &triple).unwrap();
        let records = spine_records(&sim, 0, t, vec![t], 20_000, 45, false);
        let vals: Vec<f64> = records
            .iter()
            .map(|r| r.spine_functional(&triple, t))
            .collect();
        let p = sim.h_motion().transition_matrix(t);
        let oracle: f64 = (0..2)
            .map(|y| p[(0, y)] * triple.phi[y])
            .sum::<f64>()
            * (-triple.lambda1 * t).exp();
        let z = stats::z_against(&vals, oracle);
        assert!(z.abs() < 4.0, "z = {z} against oracle {oracle}");
    }

    #[test]
    fn measure_change_count_observable() {
        let (motion, law, triple) = yule2();
        // g = <1, X_t> at t = 1: oracle 2e - 1
        let report = measure_change_check(
            &motion,
            &law,
            &triple,
            0,
            1.0,
            |c| c.total() as f64,
            10_000,
            46,
            DEFAULT_CAP_FOR_TESTS,
        )
        .unwrap();
        let oracle = 2.0 * std::f64::consts::E - 1.0;
        let zf = (report.forward_side.mean - oracle) / report.forward_side.se;
        let zs = (report.spine_side.mean - oracle) / report.spine_side.se;
        assert!(zf.abs() < 4.0, "forward z = {zf}");
        assert!(zs.abs() < 4.0, "spine z = {zs}");
        assert!(report.z_difference.abs() < 4.0);
    }

    const DEFAULT_CAP_FOR_TESTS: usize = 1_000_000;

    #[test]
    fn measure_change_unit_observable_is_exact_mean() {
        let (motion, law, triple) = yule2();
        let report = measure_change_check(
            &motion, &law, &triple, 0, 0.5, |_| 1.0, 4000, 47, DEFAULT_CAP_FOR_TESTS,
        )
        .unwrap();
        // forward side is E[M_t] = 1, spine side is literally 1
        let zf = (report.forward_side.mean - 1.0) / report.forward_side.se;
        assert!(zf.abs() < 4.0);
        assert!((report.spine_side.mean - 1.0).abs() < 1e-12);
    }

    #[test]
    fn measure_change_indicator_observable() {
        let (motion, law, triple) = yule2();
        let t = 1.0;
        let report = measure_change_check(
            &motion,
            &law,
            &triple,
            0,
            t,
            |c| if c.total() >= 2 { 1.0 } else { 0.0 },
            10_000,
            48,
            DEFAULT_CAP_FOR_TESTS,
        )
        .unwrap();
        // brute force over the Yule law: E[M 1{N>=2}] = e^{-t}(E N - P(N=1))
        // with N geometric: P(N=1) = e^{-t}
        let oracle = (-t).exp() * (t.exp() - (-t).exp());
        let zf = (report.forward_side.mean - oracle) / report.forward_side.se;
        let zs = (report.spine_side.mean - oracle) / report.spine_side.se;
        assert!(zf.abs() < 4.0, "forward z = {zf} oracle {oracle}");
        assert!(zs.abs() < 4.0, "spine z = {zs}");
    }

    #[test]
    fn spine_occupancy_converges_to_stationary_law() {
        let (motion, law, triple) = yule2();
        let sim = SpineSimulator::new(&motion, &law, &triple).unwrap();
        let records = spine_records(&sim, 0, 10.0, vec![10.0], 10_000, 49, true);
        for cell in spine_occupancy(&records, &triple, 10.0) {
            assert!(cell.z.abs() < 4.0, "{cell:?}");
        }
    }

    #[test]
    fn size_biased_histogram_matches() {
        let (motion, _, _) = yule2();
        let law = BranchingLaw::homogeneous(
            2,
            1.0,
            OffspringLaw::finite(vec![0.5, 0.5]).unwrap(),
        )
        .unwrap();
        let op = FeynmanKacOperator::new(&motion, &law).unwrap();
        let triple = op.principal_triple().unwrap();
        let sim = SpineSimulator::new(&motion, &law, &triple).unwrap();
        let records = spine_records(&sim, 0, 3.0, vec![3.0], 3000, 50, true);
        for state in 0..2 {
            let fit = offspring_chi2(&records, state, &law.size_biased(state));
            assert!(fit.p_value > 1e-3, "state {state}: {fit:?}");
        }
    }

    #[test]
    fn incompatible_horizon_rejected() {
        let (motion, law, triple) = yule2();
        let sim = SpineSimulator::new(&motion, &law, &triple).unwrap();
        let records = spine_records(&sim, 0, 1.0, vec![1.0], 3, 51, false);
        assert!(matches!(
            spine_decomposition_check(&records, &triple, 2.0),
            Err(Error::IncompatibleHorizon { .. })
        ));
        assert!(matches!(
            unit_mass_identity(&records[0], 5.0),
            Err(Error::IncompatibleHorizon { .. })
        ));
    }

    #[test]
    fn subtree_overflow_propagates() {
        let (motion, law, triple) = yule2();
        let sim = SpineSimulator::new(&motion, &law, &triple).unwrap();
        let config = SimConfig::new(6.0, vec![6.0], 52, 0).with_cap(8);
        let rec = sim.run(0, &config, false).unwrap();
        assert!(rec.status.overflowed());
    }

    #[test]
    fn spine_reproducible_for_fixed_stream() {
        let (motion, law, triple) = yule2();
        let sim = SpineSimulator::new(&motion, &law, &triple).unwrap();
        let config = SimConfig::new(2.0, vec![1.0, 2.0], 53, 9);
        let a = sim.run(0, &config, false).unwrap();
        let b = sim.run(0, &config, false).unwrap();
        assert_eq!(
            serde_json::to_string(&a.fissions).unwrap(),
            serde_json::to_string(&b.fissions).unwrap()
        );
        assert_eq!(
            a.reconstructed_counts(2.0).unwrap().counts,
            b.reconstructed_counts(2.0).unwrap().counts
        );
    }
}
