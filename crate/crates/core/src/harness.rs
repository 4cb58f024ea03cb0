//! Ensemble experiment runner and the statistics layer that turns
//! replicate simulations into verdicts: martingale flatness, the strong
//! law of large numbers, the ratio limit, and the `L log L` dichotomy.
//!
//! Replicates run in parallel with independent derived streams and are
//! aggregated by replicate index, so every verdict is reproducible
//! bit-for-bit for a fixed (master seed, replicate count, fixture). All
//! summary statistics are computed single-threaded from the collected
//! series. Overflowed replicates are excluded and counted — supercritical
//! growth makes overflow correlate with large martingale values, so silent
//! exclusion would bias medians downward.

use rayon::prelude::*;
use serde::Serialize;

use crate::branching::BranchingLaw;
use crate::error::{Error, Result};
use crate::forward::{
    martingale_path, simulate, weighted_path, PointMeasure, SimConfig, SimStatus, StateCounts,
};
use crate::motion::MotionModel;
use crate::spectral::{FeynmanKacOperator, SpectralTriple};
use crate::stats::{self, Summary};

/// Replicate-ensemble parameters.
#[derive(Debug, Clone, Serialize)]
pub struct EnsembleConfig {
    pub replicates: u64,
    pub horizon: f64,
    pub checkpoints: Vec<f64>,
    pub population_cap: usize,
    pub master_seed: u64,
}

impl EnsembleConfig {
    pub fn new(replicates: u64, horizon: f64, checkpoints: Vec<f64>, master_seed: u64) -> Self {
        EnsembleConfig {
            replicates,
            horizon,
            checkpoints,
            population_cap: crate::forward::DEFAULT_POPULATION_CAP,
            master_seed,
        }
    }

    pub fn with_cap(mut self, cap: usize) -> Self {
        self.population_cap = cap;
        self
    }

    fn sim_config(&self, replicate: u64) -> SimConfig {
        SimConfig::new(
            self.horizon,
            self.checkpoints.clone(),
            self.master_seed,
            replicate,
        )
        .with_cap(self.population_cap)
        .lean()
    }
}

/// One replicate's checkpoint series.
#[derive(Debug, Clone, Serialize)]
pub struct ReplicateSeries {
    pub replicate: u64,
    pub status: SimStatus,
    /// Per-checkpoint per-state occupancy counts (truncated at overflow).
    pub counts: Vec<StateCounts>,
    /// Martingale `W_t(phi)` at each covered checkpoint.
    pub w: Vec<f64>,
    /// Companion `U_t(f phi)` for the ensemble's observable `f`.
    pub u: Vec<f64>,
}

impl ReplicateSeries {
    fn accepted(&self) -> bool {
        !self.status.overflowed()
    }

    /// A replicate's data at checkpoint `idx` is valid exactly when the
    /// overflow (if any) happened later — inclusion is then unconditional
    /// on the future, so early checkpoints carry no exclusion bias.
    fn covers(&self, idx: usize) -> bool {
        idx < self.counts.len()
    }
}

/// Ensemble output: raw per-replicate series plus acceptance bookkeeping.
#[derive(Debug, Clone, Serialize)]
pub struct EnsembleResult {
    pub x0: usize,
    pub checkpoints: Vec<f64>,
    pub replicates: Vec<ReplicateSeries>,
    pub n_overflow: usize,
    /// Replicates whose population died out by the horizon (possible only
    /// with killing); they stay in the accepted statistics with `W = 0`.
    pub n_extinct: usize,
    /// Martingale summaries per checkpoint over the replicates covering
    /// that checkpoint.
    pub w_summaries: Vec<Summary>,
    /// Replicates excluded at each checkpoint (overflowed before it);
    /// together with each summary's `n` this accounts for every replicate.
    pub n_excluded_at: Vec<usize>,
}

impl EnsembleResult {
    /// Replicates that survived to the horizon.
    pub fn n_accepted(&self) -> usize {
        self.replicates.len() - self.n_overflow
    }

    /// Values of `W` at checkpoint `idx` over covering replicates.
    pub fn w_at(&self, idx: usize) -> Vec<f64> {
        self.replicates
            .iter()
            .filter(|r| r.covers(idx))
            .map(|r| r.w[idx])
            .collect()
    }
}

/// Run `config.replicates` forward realizations from a single ancestor at
/// `x0`, in parallel, and aggregate deterministically by replicate index.
pub fn run_ensemble(
    motion: &MotionModel,
    law: &BranchingLaw,
    triple: &SpectralTriple,
    x0: usize,
    f: &[f64],
    config: &EnsembleConfig,
) -> Result<EnsembleResult> {
    motion.check_state(x0)?;
    if f.len() != motion.n_states() {
        return Err(Error::DimensionMismatch {
            context: "observable f",
            expected: motion.n_states(),
            got: f.len(),
        });
    }
    let series: Vec<Result<ReplicateSeries>> = (0..config.replicates)
        .into_par_iter()
        .map(|rep| {
            let sim_config = config.sim_config(rep);
            let initial = PointMeasure::roots(rep, &[x0]);
            let mut rng = sim_config.rng();
            let res = simulate(motion, law, &initial, &sim_config, &mut rng)?;
            let w = martingale_path(&res.counts, triple)
                .into_iter()
                .map(|(_, v)| v)
                .collect();
            let u = weighted_path(&res.counts, triple, f)
                .into_iter()
                .map(|(_, v)| v)
                .collect();
            Ok(ReplicateSeries {
                replicate: rep,
                status: res.status,
                counts: res.counts,
                w,
                u,
            })
        })
        .collect();
    let replicates: Vec<ReplicateSeries> = series.into_iter().collect::<Result<_>>()?;

    let n_overflow = replicates.iter().filter(|r| !r.accepted()).count();
    if n_overflow == replicates.len() {
        return Err(Error::AllReplicatesOverflowed(replicates.len()));
    }
    let n_extinct = replicates
        .iter()
        .filter(|r| r.accepted() && r.counts.last().is_some_and(|c| c.total() == 0))
        .count();
    let w_summaries: Vec<Summary> = (0..config.checkpoints.len())
        .map(|i| {
            let ws: Vec<f64> = replicates
                .iter()
                .filter(|r| r.covers(i))
                .map(|r| r.w[i])
                .collect();
            stats::summarize(&ws)
        })
        .collect();
    let n_excluded_at = w_summaries
        .iter()
        .map(|s| replicates.len() - s.n)
        .collect();

    Ok(EnsembleResult {
        x0,
        checkpoints: config.checkpoints.clone(),
        replicates,
        n_overflow,
        n_extinct,
        w_summaries,
        n_excluded_at,
    })
}

/// Minimum surviving replicates for any verdict.
const MIN_ACCEPTED: usize = 100;

/// Ratio summary of `R_t(f) = e^{-lambda1 t} <X_t, f> / W_t(phi)` at one
/// checkpoint.
#[derive(Debug, Clone, Serialize)]
pub struct RatioSummary {
    pub t: f64,
    pub median: f64,
    pub q25: f64,
    pub q75: f64,
    pub n: usize,
}

/// Strong-law verdict: the ratio's ensemble median must land on the
/// deterministic profile integral, with a tightening inter-quartile band.
#[derive(Debug, Clone, Serialize)]
pub struct SllnVerdict {
    /// `sum phi_tilde f m`, the limit constant.
    pub target: f64,
    pub tolerance: f64,
    pub per_checkpoint: Vec<RatioSummary>,
    pub terminal_median: f64,
    pub median_within_tolerance: bool,
    pub iqr_shrinking: bool,
    pub pass: bool,
    pub n_accepted: usize,
    pub n_overflow: usize,
}

pub fn verify_slln(
    ensemble: &EnsembleResult,
    triple: &SpectralTriple,
    f: &[f64],
    tolerance: f64,
) -> Result<SllnVerdict> {
    let accepted = ensemble.n_accepted();
    if accepted < MIN_ACCEPTED {
        return Err(Error::InsufficientReplicates {
            accepted,
            required: MIN_ACCEPTED,
        });
    }
    let target = triple.profile_integral(f);
    let mut per_checkpoint = Vec::with_capacity(ensemble.checkpoints.len());
    for (i, &t) in ensemble.checkpoints.iter().enumerate() {
        let ratios: Vec<f64> = ensemble
            .replicates
            .iter()
            .filter(|r| r.covers(i) && r.w[i] > 0.0)
            .map(|r| {
                let decay = (-triple.lambda1 * t).exp();
                decay * r.counts[i].observe(f) / r.w[i]
            })
            .collect();
        per_checkpoint.push(RatioSummary {
            t,
            median: stats::median(&ratios),
            q25: stats::quantile(&ratios, 0.25),
            q75: stats::quantile(&ratios, 0.75),
            n: ratios.len(),
        });
    }
    let last = per_checkpoint.last().expect("nonempty checkpoint grid");
    let terminal_median = last.median;
    let median_within_tolerance = (terminal_median - target).abs() <= tolerance;
    let widths: Vec<f64> = per_checkpoint
        .iter()
        .rev()
        .take(3)
        .map(|r| r.q75 - r.q25)
        .collect();
    // widths are reversed: widths[0] is terminal
    let iqr_shrinking = widths.len() >= 3 && widths[0] < widths[1] && widths[1] < widths[2];
    Ok(SllnVerdict {
        target,
        tolerance,
        per_checkpoint,
        terminal_median,
        median_within_tolerance,
        iqr_shrinking,
        pass: median_within_tolerance && iqr_shrinking,
        n_accepted: accepted,
        n_overflow: ensemble.n_overflow,
    })
}

/// Ratio-limit comparison: `X_t(B) / E[X_t(B)]` against `W_t / phi(x0)`,
/// replicate by replicate.
#[derive(Debug, Clone, Serialize)]
pub struct RatioLimitReport {
    pub subset: Vec<usize>,
    /// `(t, mean |X_t(B)/E X_t(B) - W_t/phi(x0)|)` per checkpoint.
    pub per_checkpoint_mad: Vec<(f64, f64)>,
    pub terminal_mad: f64,
}

pub fn verify_ratio_limit(
    ensemble: &EnsembleResult,
    op: &FeynmanKacOperator,
    triple: &SpectralTriple,
    subset: &[usize],
) -> Result<RatioLimitReport> {
    let accepted = ensemble.n_accepted();
    if accepted < MIN_ACCEPTED {
        return Err(Error::InsufficientReplicates {
            accepted,
            required: MIN_ACCEPTED,
        });
    }
    let n = op.n_states();
    if subset.is_empty() || subset.iter().any(|&s| s >= n) {
        return Err(Error::InvalidSimConfig(
            "state subset must be nonempty and within range".into(),
        ));
    }
    let indicator: Vec<f64> = (0..n)
        .map(|s| if subset.contains(&s) { 1.0 } else { 0.0 })
        .collect();
    let phi_x0 = triple.phi[ensemble.x0];
    let mut per_checkpoint_mad = Vec::with_capacity(ensemble.checkpoints.len());
    for (i, &t) in ensemble.checkpoints.iter().enumerate() {
        let oracle = op.first_moment(t, &indicator)[ensemble.x0];
        let deviations: Vec<f64> = ensemble
            .replicates
            .iter()
            .filter(|r| r.covers(i))
            .map(|r| {
                let ratio_b = r.counts[i].mass_in(subset) as f64 / oracle;
                let ratio_w = r.w[i] / phi_x0;
                (ratio_b - ratio_w).abs()
            })
            .collect();
        per_checkpoint_mad.push((t, stats::mean(&deviations)));
    }
    let terminal_mad = per_checkpoint_mad.last().expect("nonempty grid").1;
    Ok(RatioLimitReport {
        subset: subset.to_vec(),
        per_checkpoint_mad,
        terminal_mad,
    })
}

/// Trend data for one law in the dichotomy experiment.
#[derive(Debug, Clone, Serialize)]
pub struct LawTrend {
    pub lambda1: f64,
    /// Martingale summaries per checkpoint over accepted replicates.
    pub w_summaries: Vec<Summary>,
    /// z-statistics of the mean against the martingale value `phi(x0)`.
    pub mean_z: Vec<f64>,
    pub n_overflow: usize,
    pub n_accepted: usize,
}

/// Dichotomy verdict: at matched growth normalization, the control law's
/// martingale median stabilizes while the heavy law's decays to zero.
#[derive(Debug, Clone, Serialize)]
pub struct DichotomyReport {
    pub control: LawTrend,
    pub heavy: LawTrend,
    pub control_terminal_median: f64,
    pub control_band: (f64, f64),
    pub control_stable: bool,
    pub heavy_median_strictly_decreasing: bool,
    pub means_consistent: bool,
    pub pass: bool,
}

/// Stability band for the control law's terminal median.
pub const CONTROL_MEDIAN_BAND: (f64, f64) = (0.1, 10.0);
/// Refuse a dichotomy verdict when more than this fraction of replicates
/// overflowed.
pub const MAX_EXCLUDED_FRACTION: f64 = 0.2;

fn refusal(reason: String) -> Error {
    Error::InvalidSimConfig(reason)
}

/// Run both laws on the same motion and compare martingale trends.
///
/// Refuses a verdict when the heavy tail is truncated below the horizon's
/// reach: degeneracy at horizon `T` is driven by offspring counts up to
/// `e^{lambda1 T} / min phi`, so a smaller `kmax` simulates a law whose
/// true martingale limit is nondegenerate and the experiment cannot
/// distinguish the two.
pub fn dichotomy_experiment(
    motion: &MotionModel,
    heavy_law: &BranchingLaw,
    control_law: &BranchingLaw,
    x0: usize,
    config: &EnsembleConfig,
) -> Result<DichotomyReport> {
    let heavy_op = FeynmanKacOperator::new(motion, heavy_law)?;
    let heavy_triple = heavy_op.principal_triple()?;
    let control_op = FeynmanKacOperator::new(motion, control_law)?;
    let control_triple = control_op.principal_triple()?;

    let report = heavy_law.l_report(&heavy_triple.phi, &heavy_triple.phi_tilde, &heavy_triple.m)?;
    if !report.is_divergent() {
        return Err(refusal(
            "dichotomy experiment needs a heavy law flagged divergent by the L log L analysis"
                .into(),
        ));
    }
    let min_phi = heavy_triple.phi.iter().cloned().fold(f64::INFINITY, f64::min);
    let reach = (heavy_triple.lambda1 * config.horizon).exp() / min_phi;
    for x in 0..heavy_law.n_states() {
        if let Some((family, kmax)) = heavy_law.offspring(x).heavy_family() {
            if (kmax as f64) < reach {
                return Err(Error::DichotomyTruncationRefusal {
                    family: family.name(),
                    kmax,
                    needed: reach,
                });
            }
        }
    }

    // independent seed channels for the two ensembles
    let control_config = EnsembleConfig {
        master_seed: config.master_seed,
        ..config.clone()
    };
    let heavy_config = EnsembleConfig {
        master_seed: config.master_seed ^ 0x6865_6176_79, // "heavy"
        ..config.clone()
    };
    let ones = vec![1.0; motion.n_states()];
    let control_ens = run_ensemble(motion, control_law, &control_triple, x0, &ones, &control_config)?;
    let heavy_ens = run_ensemble(motion, heavy_law, &heavy_triple, x0, &ones, &heavy_config)?;

    for (name, ens) in [("control", &control_ens), ("heavy", &heavy_ens)] {
        let frac = ens.n_overflow as f64 / ens.replicates.len() as f64;
        if frac > MAX_EXCLUDED_FRACTION {
            return Err(refusal(format!(
                "{name} law: {:.1}% of replicates overflowed, above the {:.0}% budget",
                100.0 * frac,
                100.0 * MAX_EXCLUDED_FRACTION
            )));
        }
    }

    let trend = |ens: &EnsembleResult, triple: &SpectralTriple| LawTrend {
        lambda1: triple.lambda1,
        w_summaries: ens.w_summaries.clone(),
        mean_z: ens
            .w_summaries
            .iter()
            .map(|s| (s.mean - triple.phi[x0]) / s.se)
            .collect(),
        n_overflow: ens.n_overflow,
        n_accepted: ens.n_accepted(),
    };
    let control = trend(&control_ens, &control_triple);
    let heavy = trend(&heavy_ens, &heavy_triple);

    let control_terminal_median = control
        .w_summaries
        .last()
        .expect("nonempty grid")
        .median;
    let control_stable = control_terminal_median > CONTROL_MEDIAN_BAND.0
        && control_terminal_median < CONTROL_MEDIAN_BAND.1;
    let heavy_medians: Vec<f64> = heavy.w_summaries.iter().map(|s| s.median).collect();
    let heavy_median_strictly_decreasing =
        heavy_medians.windows(2).all(|w| w[1] < w[0]);
    let means_consistent = control
        .mean_z
        .iter()
        .chain(heavy.mean_z.iter())
        .all(|z| z.abs() < 4.0);

    Ok(DichotomyReport {
        pass: control_stable && heavy_median_strictly_decreasing && means_consistent,
        control,
        heavy,
        control_terminal_median,
        control_band: CONTROL_MEDIAN_BAND,
        control_stable,
        heavy_median_strictly_decreasing,
        means_consistent,
    })
}
