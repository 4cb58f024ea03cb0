//! Finite-state continuous-time Markov jump process with optional killing.
//!
//! States are indices `0..n`. The process carries a strictly positive
//! reference measure `m`, off-diagonal jump rates `q(x,y)`, and a per-state
//! kill rate sending the particle to the cemetery. Transition densities are
//! taken with respect to `m`: `p(t,x,y) = [exp(tG)]_{xy} / m(y)` where `G`
//! is the generator. With zero kill rates the semigroup is conservative.

use nalgebra::DMatrix;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::streams::exp_variate;

/// What a particle does when its motion clock rings.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MotionExit {
    Jump(usize),
    Kill,
}

/// Finite-state jump process: reference measure, rates, optional killing.
#[derive(Debug, Clone)]
pub struct MotionModel {
    m: Vec<f64>,
    /// Generator matrix: off-diagonal `q(x,y)`, diagonal `-(sum_y q(x,y) + kill(x))`.
    generator: DMatrix<f64>,
    kill: Vec<f64>,
    /// Total exit rate per state (jumps plus killing).
    exit_rate: Vec<f64>,
    /// Per-state cumulative exit table for sampling.
    exit_table: Vec<Vec<(f64, MotionExit)>>,
    irreducible: bool,
}

/// JSON wire format for a motion model. The diagonal of `rates` is ignored
/// on input and recomputed from the row.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MotionSpec {
    pub states: usize,
    pub m: Vec<f64>,
    pub rates: Vec<Vec<f64>>,
    pub kill: Vec<f64>,
}

impl MotionModel {
    /// Build a model from per-state weights, off-diagonal rates, and kill
    /// rates. `rates` must be `n x n`; its diagonal is ignored.
    pub fn new(m: Vec<f64>, rates: DMatrix<f64>, kill: Vec<f64>) -> Result<Self> {
        let n = m.len();
        if n == 0 {
            return Err(Error::EmptyStateSpace);
        }
        if rates.nrows() != n || rates.ncols() != n {
            return Err(Error::DimensionMismatch {
                context: "rate matrix",
                expected: n,
                got: rates.nrows().max(rates.ncols()),
            });
        }
        if kill.len() != n {
            return Err(Error::DimensionMismatch {
                context: "kill rate vector",
                expected: n,
                got: kill.len(),
            });
        }
        for (x, &w) in m.iter().enumerate() {
            if !(w > 0.0) || !w.is_finite() {
                return Err(Error::NonpositiveWeight { state: x, value: w });
            }
        }
        for x in 0..n {
            for y in 0..n {
                if x != y && !(rates[(x, y)] >= 0.0) {
                    return Err(Error::NegativeRate {
                        from: x,
                        to: y,
                        value: rates[(x, y)],
                    });
                }
            }
            if !(kill[x] >= 0.0) {
                return Err(Error::NegativeKillRate {
                    state: x,
                    value: kill[x],
                });
            }
        }

        let mut generator = DMatrix::zeros(n, n);
        let mut exit_rate = vec![0.0; n];
        let mut exit_table = Vec::with_capacity(n);
        for x in 0..n {
            let mut total = 0.0;
            let mut table = Vec::new();
            for y in 0..n {
                if x != y && rates[(x, y)] > 0.0 {
                    generator[(x, y)] = rates[(x, y)];
                    total += rates[(x, y)];
                    table.push((total, MotionExit::Jump(y)));
                }
            }
            if kill[x] > 0.0 {
                total += kill[x];
                table.push((total, MotionExit::Kill));
            }
            generator[(x, x)] = -total;
            exit_rate[x] = total;
            exit_table.push(table);
        }

        let irreducible = strongly_connected(&generator);
        Ok(MotionModel {
            m,
            generator,
            kill,
            exit_rate,
            exit_table,
            irreducible,
        })
    }

    pub fn from_spec(spec: &MotionSpec) -> Result<Self> {
        if spec.m.len() != spec.states {
            return Err(Error::DimensionMismatch {
                context: "m",
                expected: spec.states,
                got: spec.m.len(),
            });
        }
        if spec.rates.len() != spec.states {
            return Err(Error::DimensionMismatch {
                context: "rates",
                expected: spec.states,
                got: spec.rates.len(),
            });
        }
        for row in &spec.rates {
            if row.len() != spec.states {
                return Err(Error::DimensionMismatch {
                    context: "rates row",
                    expected: spec.states,
                    got: row.len(),
                });
            }
        }
        let n = spec.states;
        let rates = DMatrix::from_fn(n, n, |x, y| spec.rates[x][y]);
        MotionModel::new(spec.m.clone(), rates, spec.kill.clone())
    }

    /// Nearest-neighbour birth-death chain on the unit interval with
    /// reflecting ends: `n` cells, neighbour rate `d (n-1)^2`, uniform
    /// reference weights `1/n`. A desk-scale stand-in for a reflected
    /// diffusion.
    pub fn grid_diffusion(n: usize, d: f64) -> Result<Self> {
        if n == 0 {
            return Err(Error::EmptyStateSpace);
        }
        let c = if n > 1 { d * ((n - 1) as f64).powi(2) } else { 0.0 };
        let mut rates = DMatrix::zeros(n, n);
        for i in 0..n {
            if i > 0 {
                rates[(i, i - 1)] = c;
            }
            if i + 1 < n {
                rates[(i, i + 1)] = c;
            }
        }
        MotionModel::new(vec![1.0 / n as f64; n], rates, vec![0.0; n])
    }

    pub fn n_states(&self) -> usize {
        self.m.len()
    }

    pub fn m(&self) -> &[f64] {
        &self.m
    }

    pub fn kill_rate(&self, x: usize) -> f64 {
        self.kill[x]
    }

    pub fn is_conservative(&self) -> bool {
        self.kill.iter().all(|&k| k == 0.0)
    }

    /// Density-positivity analogue: the embedded jump chain is irreducible,
    /// hence `p(t,x,y) > 0` for all `t > 0`.
    pub fn is_irreducible(&self) -> bool {
        self.irreducible
    }

    /// Jump rate q(x,y) for x != y.
    pub fn rate(&self, x: usize, y: usize) -> f64 {
        if x == y {
            0.0
        } else {
            self.generator[(x, y)]
        }
    }

    /// Total exit rate (jumps plus killing) at a state.
    pub fn exit_rate(&self, x: usize) -> f64 {
        self.exit_rate[x]
    }

    pub fn generator(&self) -> &DMatrix<f64> {
        &self.generator
    }

    /// `exp(tG)`: entry `(x,y)` is the probability of being alive at `y`
    /// at time `t` starting from `x`.
    pub fn transition_matrix(&self, t: f64) -> DMatrix<f64> {
        (self.generator.clone() * t).exp()
    }

    /// Transition density with respect to `m`.
    pub fn transition_density(&self, t: f64, x: usize, y: usize) -> Result<f64> {
        if !(t > 0.0) {
            return Err(Error::NonpositiveTime(t));
        }
        self.check_state(x)?;
        self.check_state(y)?;
        Ok(self.transition_matrix(t)[(x, y)] / self.m[y])
    }

    /// Dual density: `p_hat(t,x,y) = p(t,y,x)`.
    pub fn dual_transition_density(&self, t: f64, x: usize, y: usize) -> Result<f64> {
        self.transition_density(t, y, x)
    }

    pub fn check_state(&self, x: usize) -> Result<()> {
        if x >= self.n_states() {
            return Err(Error::StateOutOfRange {
                state: x,
                n: self.n_states(),
            });
        }
        Ok(())
    }

    /// Pick the exit move at state `x` from a uniform draw
    /// `u in [0, exit_rate(x))`: jump target proportional to `q(x,.)`,
    /// killing proportional to the kill rate.
    pub fn pick_exit(&self, x: usize, u: f64) -> MotionExit {
        let table = &self.exit_table[x];
        let idx = table.partition_point(|(cum, _)| *cum <= u);
        table[idx.min(table.len() - 1)].1
    }

    /// Draw the exit move at state `x`: holding time and what happens.
    /// `None` when the state has zero exit rate (the particle sits forever).
    fn sample_exit<R: Rng>(&self, x: usize, rng: &mut R) -> Option<(f64, MotionExit)> {
        let hold = exp_variate(rng, self.exit_rate[x])?;
        let u: f64 = rng.random::<f64>() * self.exit_rate[x];
        Some((hold, self.pick_exit(x, u)))
    }

    /// Exact Gillespie path up to `t_end`.
    pub fn sample_path<R: Rng>(&self, x0: usize, t_end: f64, rng: &mut R) -> Result<Trajectory> {
        self.check_state(x0)?;
        if !(t_end >= 0.0) {
            return Err(Error::InvalidSimConfig(format!(
                "path horizon {t_end} must be nonnegative"
            )));
        }
        let mut traj = Trajectory {
            initial: x0,
            jumps: Vec::new(),
            end_time: t_end,
            kill_time: None,
        };
        let mut t = 0.0;
        let mut x = x0;
        loop {
            let Some((hold, exit)) = self.sample_exit(x, rng) else {
                break;
            };
            t += hold;
            if t > t_end {
                break;
            }
            match exit {
                MotionExit::Jump(y) => {
                    traj.jumps.push((t, y));
                    x = y;
                }
                MotionExit::Kill => {
                    traj.kill_time = Some(t);
                    break;
                }
            }
        }
        Ok(traj)
    }
}

/// One sample path: initial state, jump times with landing states, horizon,
/// and the kill time if the path reached the cemetery.
#[derive(Debug, Clone, Serialize)]
pub struct Trajectory {
    pub initial: usize,
    pub jumps: Vec<(f64, usize)>,
    pub end_time: f64,
    pub kill_time: Option<f64>,
}

impl Trajectory {
    /// State at time `t`, or `None` once killed.
    pub fn state_at(&self, t: f64) -> Option<usize> {
        if self.kill_time.is_some_and(|k| t >= k) {
            return None;
        }
        let idx = self.jumps.partition_point(|(s, _)| *s <= t);
        if idx == 0 {
            Some(self.initial)
        } else {
            Some(self.jumps[idx - 1].1)
        }
    }

    pub fn was_killed(&self) -> bool {
        self.kill_time.is_some()
    }
}

/// Strong connectivity of the directed graph with edges `q(x,y) > 0`.
fn strongly_connected(generator: &DMatrix<f64>) -> bool {
    let n = generator.nrows();
    reaches_all(generator, false) && reaches_all(generator, true) || n == 1
}

fn reaches_all(generator: &DMatrix<f64>, transpose: bool) -> bool {
    let n = generator.nrows();
    let mut seen = vec![false; n];
    let mut stack = vec![0usize];
    seen[0] = true;
    while let Some(x) = stack.pop() {
        for y in 0..n {
            let r = if transpose {
                generator[(y, x)]
            } else {
                generator[(x, y)]
            };
            if x != y && r > 0.0 && !seen[y] {
                seen[y] = true;
                stack.push(y);
            }
        }
    }
    seen.into_iter().all(|s| s)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::streams::replicate_rng;
    use approx::assert_relative_eq;

    pub(crate) fn symmetric_two_state() -> MotionModel {
        let rates = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 1.0, 0.0]);
        MotionModel::new(vec![1.0, 1.0], rates, vec![0.0, 0.0]).unwrap()
    }

    #[test]
    fn builds_symmetric_chain_irreducible() {
        let m = symmetric_two_state();
        assert!(m.is_irreducible());
        assert!(m.is_conservative());
        assert_relative_eq!(m.exit_rate(0), 1.0);
    }

    #[test]
    fn absorbing_state_breaks_positivity() {
        let rates = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 0.0, 0.0]);
        let m = MotionModel::new(vec![1.0, 1.0], rates, vec![0.0, 0.0]).unwrap();
        assert!(!m.is_irreducible());
    }

    #[test]
    fn zero_weight_rejected() {
        let rates = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 1.0, 0.0]);
        let err = MotionModel::new(vec![1.0, 0.0], rates, vec![0.0, 0.0]).unwrap_err();
        assert!(matches!(err, Error::NonpositiveWeight { state: 1, .. }));
    }

    #[test]
    fn negative_rate_rejected() {
        let rates = DMatrix::from_row_slice(2, 2, &[0.0, -1.0, 1.0, 0.0]);
        assert!(matches!(
            MotionModel::new(vec![1.0, 1.0], rates, vec![0.0, 0.0]),
            Err(Error::NegativeRate { .. })
        ));
    }

    #[test]
    fn empty_state_space_rejected() {
        assert!(matches!(
            MotionModel::new(vec![], DMatrix::zeros(0, 0), vec![]),
            Err(Error::EmptyStateSpace)
        ));
    }

    #[test]
    fn diagonal_of_input_rates_is_ignored() {
        let rates = DMatrix::from_row_slice(2, 2, &[99.0, 1.0, 1.0, -7.0]);
        let m = MotionModel::new(vec![1.0, 1.0], rates, vec![0.0, 0.0]).unwrap();
        assert_relative_eq!(m.generator()[(0, 0)], -1.0);
        assert_relative_eq!(m.generator()[(1, 1)], -1.0);
    }

    #[test]
    fn two_state_density_matches_closed_form() {
        // p(t,0,0) = (1 + e^{-2t}) / 2 for the symmetric chain
        let m = symmetric_two_state();
        let p = m.transition_density(1.0, 0, 0).unwrap();
        assert_relative_eq!(p, (1.0 + (-2.0f64).exp()) / 2.0, epsilon = 1e-12);
        assert_relative_eq!(p, 0.567_667_641_618_306_4, epsilon = 1e-12);
    }

    #[test]
    fn density_vanishes_off_diagonal_at_small_times() {
        let m = symmetric_two_state();
        assert!(m.transition_density(1e-9, 0, 1).unwrap() < 1e-8);
    }

    #[test]
    fn nonpositive_time_rejected() {
        let m = symmetric_two_state();
        assert!(matches!(
            m.transition_density(0.0, 0, 0),
            Err(Error::NonpositiveTime(_))
        ));
    }

    #[test]
    fn conservative_rows_sum_to_one() {
        let m = symmetric_two_state();
        for &t in &[0.1, 1.0, 10.0] {
            let p = m.transition_matrix(t);
            for x in 0..2 {
                let mass: f64 = (0..2)
                    .map(|y| m.transition_density(t, x, y).unwrap() * m.m()[y])
                    .sum();
                assert!((mass - 1.0).abs() < 1e-10, "t={t} x={x} mass={mass}");
                assert_relative_eq!(p.row(x).sum(), 1.0, epsilon = 1e-10);
            }
        }
    }

    #[test]
    fn killed_mass_strictly_decreasing() {
        let rates = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 1.0, 0.0]);
        let m = MotionModel::new(vec![1.0, 1.0], rates, vec![0.5, 0.1]).unwrap();
        let mass = |t: f64| m.transition_matrix(t).row(0).sum();
        let ms: Vec<f64> = [0.5, 1.0, 2.0, 4.0].iter().map(|&t| mass(t)).collect();
        for w in ms.windows(2) {
            assert!(w[1] < w[0]);
        }
    }

    #[test]
    fn duality_identity_with_random_functions() {
        let rates = DMatrix::from_row_slice(3, 3, &[0.0, 1.0, 0.3, 2.0, 0.0, 1.0, 0.1, 1.0, 0.0]);
        let model = MotionModel::new(vec![0.5, 1.5, 2.0], rates, vec![0.0, 0.2, 0.0]).unwrap();
        let mut rng = replicate_rng(11, 0);
        let t = 0.7;
        let p = model.transition_matrix(t);
        for _ in 0..16 {
            let f: Vec<f64> = (0..3).map(|_| rng.random::<f64>()).collect();
            let g: Vec<f64> = (0..3).map(|_| rng.random::<f64>()).collect();
            // <f, P_t g>_m vs <g, P_hat_t f>_m with p_hat(t,x,y) = p(t,y,x)
            let lhs: f64 = (0..3)
                .map(|x| {
                    let ptg: f64 = (0..3).map(|y| p[(x, y)] * g[y]).sum();
                    f[x] * ptg * model.m()[x]
                })
                .sum();
            let rhs: f64 = (0..3)
                .map(|x| {
                    let phat_f: f64 = (0..3)
                        .map(|y| {
                            model.dual_transition_density(t, x, y).unwrap() * f[y] * model.m()[y]
                        })
                        .sum();
                    g[x] * phat_f * model.m()[x]
                })
                .sum();
            assert!((lhs - rhs).abs() < 1e-10, "duality violated: {lhs} vs {rhs}");
        }
    }

    #[test]
    fn semigroup_property_random_times() {
        let rates = DMatrix::from_row_slice(3, 3, &[0.0, 1.0, 0.3, 2.0, 0.0, 1.0, 0.1, 1.0, 0.0]);
        let model = MotionModel::new(vec![0.5, 1.5, 2.0], rates, vec![0.0, 0.2, 0.0]).unwrap();
        let mut rng = replicate_rng(12, 0);
        for _ in 0..8 {
            let s = 2.0 * rng.random::<f64>().max(1e-3);
            let t = 2.0 * rng.random::<f64>().max(1e-3);
            let lhs = model.transition_matrix(s + t);
            let rhs = model.transition_matrix(s) * model.transition_matrix(t);
            assert!((&lhs - &rhs).abs().max() < 1e-9);
        }
    }

    #[test]
    fn degenerate_horizon_path() {
        let m = symmetric_two_state();
        let mut rng = replicate_rng(1, 0);
        let tr = m.sample_path(0, 0.0, &mut rng).unwrap();
        assert!(tr.jumps.is_empty());
        assert_eq!(tr.state_at(0.0), Some(0));
    }

    #[test]
    fn pure_killing_matches_exponential_law() {
        let model =
            MotionModel::new(vec![1.0], DMatrix::zeros(1, 1), vec![1.0]).unwrap();
        let n = 100_000;
        let mut rng = replicate_rng(2, 0);
        let mut killed = 0u64;
        for _ in 0..n {
            let tr = model.sample_path(0, 1.0, &mut rng).unwrap();
            if tr.was_killed() {
                killed += 1;
            }
        }
        let p_hat = killed as f64 / n as f64;
        let p = 1.0 - (-1.0f64).exp();
        let se = (p * (1.0 - p) / n as f64).sqrt();
        assert!(
            (p_hat - p).abs() < 4.0 * se,
            "killed fraction {p_hat} vs {p} (se {se})"
        );
    }

    #[test]
    fn empirical_occupancy_matches_density() {
        let model = symmetric_two_state();
        let n = 100_000;
        let mut rng = replicate_rng(3, 0);
        let mut at_zero = 0u64;
        for _ in 0..n {
            if model.sample_path(0, 1.0, &mut rng).unwrap().state_at(1.0) == Some(0) {
                at_zero += 1;
            }
        }
        let p = model.transition_density(1.0, 0, 0).unwrap() * model.m()[0];
        let se = (p * (1.0 - p) / n as f64).sqrt();
        let p_hat = at_zero as f64 / n as f64;
        assert!((p_hat - p).abs() < 4.0 * se);
    }

    #[test]
    fn end_state_histogram_passes_chi_squared() {
        let rates = DMatrix::from_row_slice(3, 3, &[0.0, 1.0, 0.3, 2.0, 0.0, 1.0, 0.1, 1.0, 0.0]);
        let model = MotionModel::new(vec![1.0, 1.0, 1.0], rates, vec![0.0, 0.0, 0.0]).unwrap();
        let n = 100_000u64;
        let mut rng = replicate_rng(4, 0);
        let mut counts = [0u64; 3];
        for _ in 0..n {
            let y = model.sample_path(0, 1.0, &mut rng).unwrap().state_at(1.0).unwrap();
            counts[y] += 1;
        }
        let p = model.transition_matrix(1.0);
        let probs: Vec<f64> = (0..3).map(|y| p[(0, y)]).collect();
        let fit = crate::stats::chi_squared_gof(&counts, &probs, n);
        assert!(fit.p_value > 1e-3, "chi2 fit: {fit:?}");
    }

    #[test]
    fn zero_exit_state_sits_forever() {
        let model = MotionModel::new(vec![1.0], DMatrix::zeros(1, 1), vec![0.0]).unwrap();
        let mut rng = replicate_rng(5, 0);
        let tr = model.sample_path(0, 100.0, &mut rng).unwrap();
        assert!(tr.jumps.is_empty() && !tr.was_killed());
        assert_eq!(tr.state_at(99.0), Some(0));
    }

    #[test]
    fn grid_diffusion_is_reflecting_and_irreducible() {
        let g = MotionModel::grid_diffusion(11, 1.0).unwrap();
        assert!(g.is_irreducible());
        assert!(g.is_conservative());
        assert_relative_eq!(g.rate(0, 1), 100.0);
        assert_relative_eq!(g.rate(5, 4), 100.0);
        assert_relative_eq!(g.rate(0, 2), 0.0);
        assert_relative_eq!(g.exit_rate(0), 100.0);
        assert_relative_eq!(g.exit_rate(5), 200.0);
    }
}
