//! Branching rates and offspring distributions.
//!
//! Offspring laws live on counts `k >= 2`: laws with mass at 0 are outside
//! the model, and mass at 1 must be folded into the branching rate first
//! (see [`BranchingLaw::with_p1_reduction`]). A law is either an explicit
//! finite vector or a parametric heavy-tail family truncated at `kmax` for
//! sampling. Heavy laws keep their family descriptor so the `L log L`
//! functional can analyse the infinite tail symbolically — the truncated
//! table alone would certify every law as integrable.

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Number of dyadic blocks inspected by the divergence test.
pub const DYADIC_BLOCKS: usize = 64;
/// Scaled block sums whose tail ratio exceeds this are declared divergent.
pub const DYADIC_RATIO_THRESHOLD: f64 = 0.9;

/// Parametric heavy-tail families, named by their weight sequence.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum HeavyFamily {
    /// `w_k = 1 / (k^2 log^2 k)`: finite mean, divergent `k log k` series.
    K2Log2,
    /// `w_k = 1 / (k^2 log k)`: divergent mean; rejected at construction.
    K2Log1,
    /// `w_k = 1 / k^3`: finite mean and finite `k log k` series.
    K3,
}

impl HeavyFamily {
    pub fn parse(name: &str) -> Option<Self> {
        match name {
            "k2log2" => Some(HeavyFamily::K2Log2),
            "k2log1" => Some(HeavyFamily::K2Log1),
            "k3" => Some(HeavyFamily::K3),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            HeavyFamily::K2Log2 => "k2log2",
            HeavyFamily::K2Log1 => "k2log1",
            HeavyFamily::K3 => "k3",
        }
    }

    /// Smooth extension of the weight sequence.
    fn weight(self, x: f64) -> f64 {
        let ln = x.ln();
        match self {
            HeavyFamily::K2Log2 => 1.0 / (x * x * ln * ln),
            HeavyFamily::K2Log1 => 1.0 / (x * x * ln),
            HeavyFamily::K3 => 1.0 / (x * x * x),
        }
    }

    /// Integral bound on the unnormalized mass beyond `kmax`.
    fn norm_tail_bound(self, kmax: u64) -> f64 {
        let k = kmax as f64;
        match self {
            HeavyFamily::K2Log2 => 1.0 / (k * k.ln() * k.ln()),
            HeavyFamily::K2Log1 => 1.0 / (k * k.ln()),
            HeavyFamily::K3 => 1.0 / (2.0 * k * k),
        }
    }

    /// Integral bound on the unnormalized mean mass beyond `kmax`;
    /// `None` when the mean series diverges.
    fn mean_tail_bound(self, kmax: u64) -> Option<f64> {
        let k = kmax as f64;
        match self {
            HeavyFamily::K2Log2 => Some(1.0 / k.ln()),
            HeavyFamily::K2Log1 => None,
            HeavyFamily::K3 => Some(1.0 / k),
        }
    }
}

#[derive(Debug, Clone)]
enum LawKind {
    Finite,
    Heavy {
        family: HeavyFamily,
        kmax: u64,
        /// Unnormalized truncated mass, kept for tail diagnostics.
        normalizer: f64,
        norm_tail_bound: f64,
        mean_tail_bound: f64,
    },
}

/// Offspring distribution of one state: pmf over counts `k >= 2`.
///
/// Heavy laws are truncated at `kmax` and renormalized, so the sampled law
/// has an exact finite mean; the family descriptor is retained for tail
/// analysis.
#[derive(Debug, Clone)]
pub struct OffspringLaw {
    /// `probs[i]` is the probability of `k = i + 2`.
    probs: Vec<f64>,
    cdf: Vec<f64>,
    mean: f64,
    kind: LawKind,
}

const PMF_TOL: f64 = 1e-12;

fn build_cdf(probs: &[f64]) -> Vec<f64> {
    let mut cdf = Vec::with_capacity(probs.len());
    let mut acc = 0.0;
    for &p in probs {
        acc += p;
        cdf.push(acc);
    }
    cdf
}

/// Mean of a pmf over `k = 2..`, summed smallest-terms-first.
fn pmf_mean(probs: &[f64]) -> f64 {
    let mut acc = 0.0;
    for (i, &p) in probs.iter().enumerate().rev() {
        acc += (i as f64 + 2.0) * p;
    }
    acc
}

impl OffspringLaw {
    /// Explicit finite law; `probs[i]` is the probability of `k = i + 2`.
    /// The vector must already be a pmf — silent renormalization hides bugs.
    pub fn finite(probs: Vec<f64>) -> Result<Self> {
        let invalid = |reason: String| Error::InvalidOffspringLaw { state: 0, reason };
        if probs.is_empty() {
            return Err(invalid("empty offspring vector".into()));
        }
        if let Some(p) = probs.iter().find(|p| !(**p >= 0.0) || !p.is_finite()) {
            return Err(invalid(format!("negative or non-finite probability {p}")));
        }
        let total: f64 = probs.iter().sum();
        if (total - 1.0).abs() > PMF_TOL {
            return Err(invalid(format!(
                "probabilities sum to {total}, must be 1 within {PMF_TOL:e}"
            )));
        }
        let mean = pmf_mean(&probs);
        let cdf = build_cdf(&probs);
        Ok(OffspringLaw {
            probs,
            cdf,
            mean,
            kind: LawKind::Finite,
        })
    }

    /// Single atom at `k`.
    pub fn point_mass(k: u64) -> Result<Self> {
        if k < 2 {
            return Err(Error::InvalidOffspringLaw {
                state: 0,
                reason: format!("offspring count {k} below 2"),
            });
        }
        let mut probs = vec![0.0; (k - 1) as usize];
        *probs.last_mut().unwrap() = 1.0;
        Self::finite(probs)
    }

    /// Finite law given as a `count -> probability` map (counts `>= 2`).
    pub fn finite_map(map: &BTreeMap<u64, f64>) -> Result<Self> {
        let invalid = |reason: String| Error::InvalidOffspringLaw { state: 0, reason };
        let &max_k = map.keys().next_back().ok_or_else(|| invalid("empty offspring map".into()))?;
        if let Some((&k, _)) = map.iter().find(|(k, _)| **k < 2) {
            return Err(invalid(format!(
                "offspring count {k} below 2; fold p_1 into the rate with the p1-reduction helper"
            )));
        }
        let mut probs = vec![0.0; (max_k - 1) as usize];
        for (&k, &p) in map {
            probs[(k - 2) as usize] = p;
        }
        Self::finite(probs)
    }

    /// Heavy-tail family truncated at `kmax` and renormalized. Families
    /// whose infinite mean diverges are rejected: they violate the
    /// bounded-mean assumption no matter the truncation.
    pub fn heavy(family: HeavyFamily, kmax: u64) -> Result<Self> {
        if kmax < 3 {
            return Err(Error::InvalidOffspringLaw {
                state: 0,
                reason: format!("heavy-tail truncation kmax = {kmax} too small"),
            });
        }
        let Some(mean_tail) = family.mean_tail_bound(kmax) else {
            return Err(Error::UnboundedMeanOffspring {
                family: family.name(),
            });
        };
        // sum smallest-first for accuracy
        let mut normalizer = 0.0;
        for k in (2..=kmax).rev() {
            normalizer += family.weight(k as f64);
        }
        let probs: Vec<f64> = (2..=kmax)
            .map(|k| family.weight(k as f64) / normalizer)
            .collect();
        let mean = pmf_mean(&probs);
        let cdf = build_cdf(&probs);
        Ok(OffspringLaw {
            probs,
            cdf,
            mean,
            kind: LawKind::Heavy {
                family,
                kmax,
                normalizer,
                norm_tail_bound: family.norm_tail_bound(kmax) / normalizer,
                mean_tail_bound: mean_tail / normalizer,
            },
        })
    }

    /// Mean offspring count `A` of the (truncated) law — exact on its support.
    pub fn mean(&self) -> f64 {
        self.mean
    }

    /// Probability of producing exactly `k` offspring.
    pub fn prob(&self, k: u64) -> f64 {
        if k < 2 {
            return 0.0;
        }
        self.probs.get((k - 2) as usize).copied().unwrap_or(0.0)
    }

    pub fn max_count(&self) -> u64 {
        self.probs.len() as u64 + 1
    }

    pub fn is_heavy(&self) -> bool {
        matches!(self.kind, LawKind::Heavy { .. })
    }

    pub fn heavy_family(&self) -> Option<(HeavyFamily, u64)> {
        match self.kind {
            LawKind::Heavy { family, kmax, .. } => Some((family, kmax)),
            _ => None,
        }
    }

    /// For heavy laws: integral bounds on the infinite family's mass and
    /// mean beyond the truncation point, relative to the truncated
    /// normalizer. `(0, 0)` for finite laws.
    pub fn truncation_tail_bounds(&self) -> (f64, f64) {
        match self.kind {
            LawKind::Finite => (0.0, 0.0),
            LawKind::Heavy {
                norm_tail_bound,
                mean_tail_bound,
                ..
            } => (norm_tail_bound, mean_tail_bound),
        }
    }

    /// Generating function `sum_k p_k z^k` for `|z| <= 1`.
    pub fn gf(&self, z: f64) -> Result<f64> {
        if z.abs() > 1.0 {
            return Err(Error::GfArgumentOutOfRange(z.abs()));
        }
        let mut acc = 0.0;
        let mut zk = z * z;
        for &p in &self.probs {
            acc += p * zk;
            zk *= z;
        }
        Ok(acc)
    }

    /// Draw an offspring count by inverting the cdf.
    pub fn sample<R: Rng>(&self, rng: &mut R) -> u64 {
        let u: f64 = rng.random();
        let idx = self.cdf.partition_point(|c| *c <= u);
        (idx.min(self.probs.len() - 1) + 2) as u64
    }

    /// Size-biased law `k p_k / A`.
    pub fn size_biased(&self) -> SizeBiasedPmf {
        let probs: Vec<f64> = self
            .probs
            .iter()
            .enumerate()
            .map(|(i, &p)| (i as f64 + 2.0) * p / self.mean)
            .collect();
        let mean = pmf_mean(&probs);
        let cdf = build_cdf(&probs);
        SizeBiasedPmf { probs, cdf, mean }
    }
}

/// Size-biased offspring pmf over `k >= 2`.
#[derive(Debug, Clone)]
pub struct SizeBiasedPmf {
    probs: Vec<f64>,
    cdf: Vec<f64>,
    mean: f64,
}

impl SizeBiasedPmf {
    pub fn prob(&self, k: u64) -> f64 {
        if k < 2 {
            return 0.0;
        }
        self.probs.get((k - 2) as usize).copied().unwrap_or(0.0)
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    /// Mean of the size-biased law, `E[K^2] / E[K]`.
    pub fn mean(&self) -> f64 {
        self.mean
    }

    pub fn total(&self) -> f64 {
        self.cdf.last().copied().unwrap_or(0.0)
    }

    pub fn sample<R: Rng>(&self, rng: &mut R) -> u64 {
        let u: f64 = rng.random();
        let idx = self.cdf.partition_point(|c| *c <= u);
        (idx.min(self.probs.len() - 1) + 2) as u64
    }
}

/// Per-state `l` outcome: a finite value with a tail bound, or divergence
/// with the observed dyadic ratio.
#[derive(Debug, Clone, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LValue {
    Finite { value: f64, tail_bound: f64 },
    Divergent { block_ratio: f64 },
}

impl LValue {
    pub fn is_divergent(&self) -> bool {
        matches!(self, LValue::Divergent { .. })
    }

    pub fn value(&self) -> Option<f64> {
        match self {
            LValue::Finite { value, .. } => Some(*value),
            LValue::Divergent { .. } => None,
        }
    }
}

/// Report on the `L log L` functional and its weighted integral.
#[derive(Debug, Clone, Serialize)]
pub struct LlogLReport {
    pub per_state: Vec<LValue>,
    /// `sum_x phi_tilde(x) beta(x) l(x) m(x)`, or divergence.
    pub integral: LValue,
    /// Divergence rule: scaled dyadic block sums `j * B_j` are declared
    /// non-decaying when their tail geometric ratio exceeds this threshold.
    pub ratio_threshold: f64,
    pub blocks: usize,
}

impl LlogLReport {
    pub fn is_divergent(&self) -> bool {
        self.integral.is_divergent()
    }
}

/// Branching rate and per-state offspring law.
#[derive(Debug, Clone)]
pub struct BranchingLaw {
    beta: Vec<f64>,
    offspring: Vec<OffspringLaw>,
}

/// JSON wire format for a branching law.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LawSpec {
    pub beta: Vec<f64>,
    pub offspring: Vec<OffspringSpec>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase", deny_unknown_fields)]
pub enum OffspringSpec {
    Finite { p: BTreeMap<String, f64> },
    Heavy { exponent_family: String, kmax: u64 },
}

impl BranchingLaw {
    pub fn new(beta: Vec<f64>, offspring: Vec<OffspringLaw>) -> Result<Self> {
        if beta.is_empty() {
            return Err(Error::EmptyStateSpace);
        }
        if beta.len() != offspring.len() {
            return Err(Error::DimensionMismatch {
                context: "offspring laws",
                expected: beta.len(),
                got: offspring.len(),
            });
        }
        for (x, &b) in beta.iter().enumerate() {
            if !(b >= 0.0) || !b.is_finite() {
                return Err(Error::NegativeBeta { state: x, value: b });
            }
        }
        Ok(BranchingLaw { beta, offspring })
    }

    /// Same rate and offspring law at every state.
    pub fn homogeneous(n: usize, beta: f64, law: OffspringLaw) -> Result<Self> {
        Self::new(vec![beta; n], vec![law; n])
    }

    /// Explicit reduction of laws with `p_1 > 0`: a unit-offspring event is
    /// no branching at all, so it is folded away as `beta' = beta (1 - p_1)`,
    /// `p'_k = p_k / (1 - p_1)`. `raw[x]` gives probabilities for counts
    /// `k >= 1` (index 0 is `p_1`).
    pub fn with_p1_reduction(beta: Vec<f64>, raw: Vec<Vec<f64>>) -> Result<Self> {
        if beta.len() != raw.len() {
            return Err(Error::DimensionMismatch {
                context: "raw offspring vectors",
                expected: beta.len(),
                got: raw.len(),
            });
        }
        let mut reduced_beta = Vec::with_capacity(beta.len());
        let mut laws = Vec::with_capacity(beta.len());
        for (x, (b, probs)) in beta.iter().zip(&raw).enumerate() {
            let state_err = |reason: String| Error::InvalidOffspringLaw { state: x, reason };
            if probs.is_empty() {
                return Err(state_err("empty offspring vector".into()));
            }
            let p1 = probs[0];
            if !(0.0..=1.0).contains(&p1) {
                return Err(state_err(format!("p_1 = {p1} outside [0,1]")));
            }
            if (1.0 - p1).abs() < PMF_TOL {
                return Err(state_err("p_1 = 1 leaves no offspring mass to branch with".into()));
            }
            let rescaled: Vec<f64> = probs[1..].iter().map(|p| p / (1.0 - p1)).collect();
            let law = OffspringLaw::finite(rescaled)
                .map_err(|e| state_err(format!("after p1 reduction: {e}")))?;
            reduced_beta.push(b * (1.0 - p1));
            laws.push(law);
        }
        Self::new(reduced_beta, laws)
    }

    pub fn from_spec(spec: &LawSpec) -> Result<Self> {
        let mut laws = Vec::with_capacity(spec.offspring.len());
        for (x, os) in spec.offspring.iter().enumerate() {
            let law = match os {
                OffspringSpec::Finite { p } => {
                    let mut map = BTreeMap::new();
                    for (key, &prob) in p {
                        let k: u64 = key.parse().map_err(|_| Error::InvalidOffspringLaw {
                            state: x,
                            reason: format!("offspring count key `{key}` is not an integer"),
                        })?;
                        map.insert(k, prob);
                    }
                    OffspringLaw::finite_map(&map)
                }
                OffspringSpec::Heavy {
                    exponent_family,
                    kmax,
                } => {
                    let family = HeavyFamily::parse(exponent_family).ok_or_else(|| {
                        Error::InvalidOffspringLaw {
                            state: x,
                            reason: format!("unknown exponent family `{exponent_family}`"),
                        }
                    })?;
                    OffspringLaw::heavy(family, *kmax)
                }
            };
            laws.push(law.map_err(|e| match e {
                Error::InvalidOffspringLaw { reason, .. } => {
                    Error::InvalidOffspringLaw { state: x, reason }
                }
                other => other,
            })?);
        }
        Self::new(spec.beta.clone(), laws)
    }

    pub fn n_states(&self) -> usize {
        self.beta.len()
    }

    pub fn beta(&self, x: usize) -> f64 {
        self.beta[x]
    }

    pub fn beta_slice(&self) -> &[f64] {
        &self.beta
    }

    pub fn offspring(&self, x: usize) -> &OffspringLaw {
        &self.offspring[x]
    }

    /// `A(x)`, the mean offspring count.
    pub fn mean_offspring(&self, x: usize) -> f64 {
        self.offspring[x].mean()
    }

    /// Feynman-Kac potential `(A(x) - 1) beta(x)`.
    pub fn potential(&self, x: usize) -> f64 {
        (self.mean_offspring(x) - 1.0) * self.beta[x]
    }

    pub fn evaluate_gf(&self, x: usize, z: f64) -> Result<f64> {
        self.offspring[x].gf(z)
    }

    pub fn size_biased(&self, x: usize) -> SizeBiasedPmf {
        self.offspring[x].size_biased()
    }

    /// `l(x) = sum_k k phi(x) log+(k phi(x)) p_k(x)` for one state.
    pub fn l_value(&self, x: usize, phi_x: f64) -> LValue {
        let law = &self.offspring[x];
        match law.kind {
            LawKind::Finite => LValue::Finite {
                value: finite_l_sum(&law.probs, phi_x),
                tail_bound: 0.0,
            },
            LawKind::Heavy {
                family, normalizer, kmax, ..
            } => heavy_l_value(law, family, normalizer, kmax, phi_x),
        }
    }

    /// Full `L log L` report: per-state values and the weighted integral
    /// `sum_x phi_tilde(x) beta(x) l(x) m(x)`.
    pub fn l_report(&self, phi: &[f64], phi_tilde: &[f64], m: &[f64]) -> Result<LlogLReport> {
        let n = self.n_states();
        if phi.len() != n || phi_tilde.len() != n || m.len() != n {
            return Err(Error::DimensionMismatch {
                context: "l_report vectors",
                expected: n,
                got: phi.len().min(phi_tilde.len()).min(m.len()),
            });
        }
        let per_state: Vec<LValue> = (0..n).map(|x| self.l_value(x, phi[x])).collect();
        let mut total = 0.0;
        let mut tail = 0.0;
        let mut integral = None;
        for (x, lv) in per_state.iter().enumerate() {
            let weight = phi_tilde[x] * self.beta[x] * m[x];
            match lv {
                LValue::Finite { value, tail_bound } => {
                    total += weight * value;
                    tail += weight * tail_bound;
                }
                LValue::Divergent { block_ratio } => {
                    if weight > 0.0 {
                        integral = Some(LValue::Divergent {
                            block_ratio: *block_ratio,
                        });
                    }
                }
            }
        }
        Ok(LlogLReport {
            per_state,
            integral: integral.unwrap_or(LValue::Finite {
                value: total,
                tail_bound: tail,
            }),
            ratio_threshold: DYADIC_RATIO_THRESHOLD,
            blocks: DYADIC_BLOCKS,
        })
    }
}

fn log_plus(v: f64) -> f64 {
    if v > 1.0 {
        v.ln()
    } else {
        0.0
    }
}

fn finite_l_sum(probs: &[f64], phi_x: f64) -> f64 {
    let mut acc = 0.0;
    for (i, &p) in probs.iter().enumerate().rev() {
        let k = i as f64 + 2.0;
        acc += k * phi_x * log_plus(k * phi_x) * p;
    }
    acc
}

/// Dyadic-block analysis of the infinite family's `l` series. Block `j`
/// covers counts `[2^j, 2^{j+1})`; its sum is evaluated by Simpson
/// quadrature of the smooth term function in log space. Scaled sums
/// `T_j = j B_j` tend to zero exactly when the series converges faster than
/// the harmonic comparison scale `1 / log K`.
fn heavy_l_value(
    law: &OffspringLaw,
    family: HeavyFamily,
    normalizer: f64,
    kmax: u64,
    phi_x: f64,
) -> LValue {
    let term = |x: f64| x * phi_x * log_plus(x * phi_x) * family.weight(x) / normalizer;
    let mut scaled = [0.0f64; DYADIC_BLOCKS];
    for (j, slot) in scaled.iter_mut().enumerate() {
        let block = j + 1;
        let lo = (block as f64) * std::f64::consts::LN_2;
        let hi = (block as f64 + 1.0) * std::f64::consts::LN_2;
        let b = simpson_log_space(term, lo, hi);
        *slot = block as f64 * b;
    }
    let t_mid = scaled[DYADIC_BLOCKS / 2 - 1];
    let t_end = scaled[DYADIC_BLOCKS - 1];
    if t_mid > 0.0 {
        let steps = (DYADIC_BLOCKS / 2) as f64;
        let ratio = (t_end / t_mid).powf(1.0 / steps);
        if ratio > DYADIC_RATIO_THRESHOLD {
            return LValue::Divergent { block_ratio: ratio };
        }
    }
    // convergent: exact partial sum over the truncated support plus the
    // integral bound on the remaining blocks
    let value = finite_l_sum(&law.probs, phi_x);
    let tail: f64 = {
        let lo = (kmax as f64).ln();
        let hi = ((DYADIC_BLOCKS + 1) as f64) * std::f64::consts::LN_2;
        if hi > lo {
            simpson_log_space(term, lo, hi)
        } else {
            0.0
        }
    };
    LValue::Finite {
        value,
        tail_bound: tail,
    }
}

/// `int exp-scale f`: integrates `f(x) dx` over `x in [e^lo, e^hi]` via the
/// substitution `x = e^u`.
fn simpson_log_space(f: impl Fn(f64) -> f64, lo: f64, hi: f64) -> f64 {
    const STEPS: usize = 64; // even
    let h = (hi - lo) / STEPS as f64;
    let g = |u: f64| {
        let x = u.exp();
        f(x) * x
    };
    let mut acc = g(lo) + g(hi);
    for i in 1..STEPS {
        let w = if i % 2 == 1 { 4.0 } else { 2.0 };
        acc += w * g(lo + h * i as f64);
    }
    acc * h / 3.0
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::streams::replicate_rng;
    use approx::assert_relative_eq;

    fn binary() -> OffspringLaw {
        OffspringLaw::point_mass(2).unwrap()
    }

    fn two_three() -> OffspringLaw {
        OffspringLaw::finite(vec![0.5, 0.5]).unwrap()
    }

    #[test]
    fn gf_at_one_is_normalization() {
        for law in [binary(), two_three(), OffspringLaw::heavy(HeavyFamily::K2Log2, 1000).unwrap()]
        {
            assert_relative_eq!(law.gf(1.0).unwrap(), 1.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn gf_point_mass() {
        assert_relative_eq!(binary().gf(0.5).unwrap(), 0.25);
    }

    #[test]
    fn gf_mixture_hand_value() {
        // 0.5 * 0.25 + 0.5 * 0.125
        assert_relative_eq!(two_three().gf(0.5).unwrap(), 0.1875);
    }

    #[test]
    fn gf_rejects_outside_unit_disc() {
        assert!(matches!(
            binary().gf(1.5),
            Err(Error::GfArgumentOutOfRange(_))
        ));
    }

    #[test]
    fn mean_of_point_mass_and_mixture() {
        assert_relative_eq!(binary().mean(), 2.0);
        assert_relative_eq!(two_three().mean(), 2.5);
    }

    #[test]
    fn heavy_mean_matches_partial_sum_oracle() {
        // brute-force partial sum over the truncated support
        let kmax = 100_000u64;
        let law = OffspringLaw::heavy(HeavyFamily::K2Log2, kmax).unwrap();
        let mut norm = 0.0;
        let mut mean = 0.0;
        for k in (2..=kmax).rev() {
            let w = 1.0 / ((k * k) as f64 * (k as f64).ln().powi(2));
            norm += w;
            mean += k as f64 * w;
        }
        assert_relative_eq!(law.mean(), mean / norm, max_relative = 1e-10);
        // integral bounds: norm tail ~ 1/(K ln^2 K), mean tail ~ 1/ln K
        let (norm_tail, mean_tail) = law.truncation_tail_bounds();
        assert!(norm_tail > 0.0 && norm_tail < 1e-6);
        assert!(mean_tail > 0.0 && mean_tail < 0.2);
    }

    #[test]
    fn divergent_mean_family_rejected() {
        assert!(matches!(
            OffspringLaw::heavy(HeavyFamily::K2Log1, 1_000_000),
            Err(Error::UnboundedMeanOffspring { family: "k2log1" })
        ));
    }

    #[test]
    fn size_biased_point_mass_is_itself() {
        let sb = binary().size_biased();
        assert_relative_eq!(sb.prob(2), 1.0);
        assert_relative_eq!(sb.total(), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn size_biased_mixture_hand_values() {
        let sb = two_three().size_biased();
        assert_relative_eq!(sb.prob(2), 0.4, epsilon = 1e-14);
        assert_relative_eq!(sb.prob(3), 0.6, epsilon = 1e-14);
    }

    #[test]
    fn size_biased_mean_is_moment_ratio() {
        // E[K^2] / E[K] by brute force
        let law = OffspringLaw::finite(vec![0.2, 0.3, 0.1, 0.4]).unwrap();
        let ek: f64 = (2..=5).map(|k| k as f64 * law.prob(k)).sum();
        let ek2: f64 = (2..=5).map(|k| (k * k) as f64 * law.prob(k)).sum();
        assert_relative_eq!(law.size_biased().mean(), ek2 / ek, epsilon = 1e-12);
    }

    #[test]
    fn sampling_matches_pmf() {
        let law = two_three();
        let mut rng = replicate_rng(21, 0);
        let n = 200_000;
        let mut twos = 0u64;
        for _ in 0..n {
            if law.sample(&mut rng) == 2 {
                twos += 1;
            }
        }
        let p_hat = twos as f64 / n as f64;
        let se = (0.25 / n as f64).sqrt();
        assert!((p_hat - 0.5).abs() < 4.0 * se);
    }

    #[test]
    fn l_value_binary_split() {
        let law = BranchingLaw::homogeneous(1, 1.0, binary()).unwrap();
        // 2 log 2
        let lv = law.l_value(0, 1.0);
        assert_relative_eq!(lv.value().unwrap(), 2.0 * 2.0f64.ln(), epsilon = 1e-12);
        // 2 * 0.4 < 1: log+ kills the only term
        assert_relative_eq!(law.l_value(0, 0.4).value().unwrap(), 0.0);
    }

    #[test]
    fn l_divergence_flag_for_k2log2() {
        let law = BranchingLaw::homogeneous(
            1,
            1.0,
            OffspringLaw::heavy(HeavyFamily::K2Log2, 10_000).unwrap(),
        )
        .unwrap();
        let lv = law.l_value(0, 1.0);
        assert!(lv.is_divergent(), "expected divergence, got {lv:?}");
    }

    #[test]
    fn l_converges_for_k3_family() {
        let law = BranchingLaw::homogeneous(
            1,
            1.0,
            OffspringLaw::heavy(HeavyFamily::K3, 1_000_000).unwrap(),
        )
        .unwrap();
        let lv = law.l_value(0, 1.0);
        let LValue::Finite { value, tail_bound } = lv else {
            panic!("k3 family wrongly flagged divergent");
        };
        // comparison-series oracle: sum k ln k / k^3 / normalizer over the support
        let mut oracle = 0.0;
        let mut norm = 0.0;
        for k in (2..=1_000_000u64).rev() {
            let kf = k as f64;
            norm += kf.powi(-3);
            oracle += kf.ln() * kf.powi(-2);
        }
        assert_relative_eq!(value, oracle / norm, max_relative = 1e-6);
        // tail ~ int ln x / x^2 beyond 1e6, a few 1e-5 after normalization
        assert!(tail_bound > 0.0 && tail_bound < 1e-3);
    }

    #[test]
    fn l_report_weighted_integral() {
        let law = BranchingLaw::new(
            vec![1.0, 2.0],
            vec![binary(), two_three()],
        )
        .unwrap();
        let report = law
            .l_report(&[1.0, 1.0], &[0.5, 0.5], &[1.0, 1.0])
            .unwrap();
        let l0 = 2.0 * 2.0f64.ln();
        let l1 = 0.5 * 2.0 * 2.0f64.ln() + 0.5 * 3.0 * 3.0f64.ln();
        let expect = 0.5 * 1.0 * l0 + 0.5 * 2.0 * l1;
        assert_relative_eq!(report.integral.value().unwrap(), expect, epsilon = 1e-12);
        assert!(!report.is_divergent());
    }

    #[test]
    fn l_report_divergent_when_heavy_state_weighted() {
        let law = BranchingLaw::new(
            vec![1.0, 1.0],
            vec![
                binary(),
                OffspringLaw::heavy(HeavyFamily::K2Log2, 10_000).unwrap(),
            ],
        )
        .unwrap();
        let report = law
            .l_report(&[1.0, 1.0], &[0.5, 0.5], &[1.0, 1.0])
            .unwrap();
        assert!(report.is_divergent());
        // zero weight on the heavy state: integral becomes finite
        let report2 = law
            .l_report(&[1.0, 1.0], &[1.0, 0.0], &[1.0, 1.0])
            .unwrap();
        assert!(!report2.is_divergent());
    }

    #[test]
    fn p1_reduction_rescales_rate_and_law() {
        // p_1 = 0.2, p_2 = 0.4, p_3 = 0.4 at rate 2: reduces to rate 1.6, p = (0.5, 0.5)
        let law =
            BranchingLaw::with_p1_reduction(vec![2.0], vec![vec![0.2, 0.4, 0.4]]).unwrap();
        assert_relative_eq!(law.beta(0), 1.6);
        assert_relative_eq!(law.offspring(0).prob(2), 0.5, epsilon = 1e-12);
        assert_relative_eq!(law.offspring(0).prob(3), 0.5, epsilon = 1e-12);
        assert_relative_eq!(law.mean_offspring(0), 2.5, epsilon = 1e-12);
    }

    #[test]
    fn p1_reduction_rejects_pure_unit_mass() {
        assert!(BranchingLaw::with_p1_reduction(vec![1.0], vec![vec![1.0]]).is_err());
    }

    #[test]
    fn law_spec_round_trip() {
        let json = r#"{
            "beta": [1.0, 1.0],
            "offspring": [
                {"type": "finite", "p": {"2": 0.5, "3": 0.5}},
                {"type": "heavy", "exponent_family": "k2log2", "kmax": 1000}
            ]
        }"#;
        let spec: LawSpec = serde_json::from_str(json).unwrap();
        let law = BranchingLaw::from_spec(&spec).unwrap();
        assert_relative_eq!(law.mean_offspring(0), 2.5);
        assert!(law.offspring(1).is_heavy());
    }

    #[test]
    fn finite_map_rejects_sub_binary_counts() {
        let mut map = BTreeMap::new();
        map.insert(1u64, 0.5);
        map.insert(2u64, 0.5);
        assert!(OffspringLaw::finite_map(&map).is_err());
    }

    #[test]
    fn unnormalized_pmf_rejected() {
        assert!(OffspringLaw::finite(vec![0.5, 0.4]).is_err());
    }
}
