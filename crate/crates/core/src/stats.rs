//! Small statistics toolbox for the verification harness: summary
//! statistics, quantiles, and a chi-squared goodness-of-fit test.

use serde::Serialize;
use statrs::distribution::{ChiSquared, ContinuousCDF};

/// Mean, spread, and quartiles of a sample.
#[derive(Debug, Clone, Serialize)]
pub struct Summary {
    pub n: usize,
    pub mean: f64,
    pub se: f64,
    pub median: f64,
    pub q25: f64,
    pub q75: f64,
}

/// Sample mean.
pub fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return f64::NAN;
    }
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Unbiased sample variance.
pub fn variance(xs: &[f64]) -> f64 {
    let n = xs.len();
    if n < 2 {
        return f64::NAN;
    }
    let mu = mean(xs);
    xs.iter().map(|x| (x - mu) * (x - mu)).sum::<f64>() / (n - 1) as f64
}

/// Standard error of the sample mean.
pub fn standard_error(xs: &[f64]) -> f64 {
    if xs.len() < 2 {
        return f64::NAN;
    }
    (variance(xs) / xs.len() as f64).sqrt()
}

/// Quantile with linear interpolation between order statistics (R type 7).
pub fn quantile(xs: &[f64], q: f64) -> f64 {
    assert!((0.0..=1.0).contains(&q), "quantile level out of range");
    if xs.is_empty() {
        return f64::NAN;
    }
    let mut v = xs.to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).expect("NaN in sample"));
    let h = (v.len() - 1) as f64 * q;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    v[lo] + (h - lo as f64) * (v[hi] - v[lo])
}

pub fn median(xs: &[f64]) -> f64 {
    quantile(xs, 0.5)
}

pub fn summarize(xs: &[f64]) -> Summary {
    Summary {
        n: xs.len(),
        mean: mean(xs),
        se: standard_error(xs),
        median: median(xs),
        q25: quantile(xs, 0.25),
        q75: quantile(xs, 0.75),
    }
}

/// z-statistic for `mean(xs) - target`.
pub fn z_against(xs: &[f64], target: f64) -> f64 {
    (mean(xs) - target) / standard_error(xs)
}

/// Result of a chi-squared goodness-of-fit test.
#[derive(Debug, Clone, Serialize)]
pub struct ChiSquaredFit {
    pub statistic: f64,
    pub dof: usize,
    pub p_value: f64,
    /// Number of cells after merging low-expectation cells.
    pub cells: usize,
}

/// Chi-squared goodness of fit of observed counts against expected
/// probabilities. Cells with expected count below 5 are merged from the
/// right into their left neighbour, the usual validity fix for tail bins.
/// Probabilities may sum to less than one; the remainder forms an implicit
/// final cell.
pub fn chi_squared_gof(observed: &[u64], probs: &[f64], n_total: u64) -> ChiSquaredFit {
    assert_eq!(observed.len(), probs.len());
    let n = n_total as f64;
    let rest_p = (1.0 - probs.iter().sum::<f64>()).max(0.0);
    let rest_o = n_total - observed.iter().sum::<u64>().min(n_total);

    let mut cells: Vec<(f64, f64)> = observed
        .iter()
        .zip(probs)
        .map(|(&o, &p)| (o as f64, p * n))
        .collect();
    cells.push((rest_o as f64, rest_p * n));

    // merge right-to-left until every cell expects >= 5
    let mut merged: Vec<(f64, f64)> = Vec::with_capacity(cells.len());
    for (o, e) in cells {
        merged.push((o, e));
        while merged.len() > 1 && merged.last().unwrap().1 < 5.0 {
            let (o1, e1) = merged.pop().unwrap();
            let last = merged.last_mut().unwrap();
            last.0 += o1;
            last.1 += e1;
        }
    }
    while merged.len() > 1 && merged.last().unwrap().1 < 5.0 {
        let (o1, e1) = merged.pop().unwrap();
        let last = merged.last_mut().unwrap();
        last.0 += o1;
        last.1 += e1;
    }

    let statistic: f64 = merged
        .iter()
        .filter(|(_, e)| *e > 0.0)
        .map(|(o, e)| (o - e) * (o - e) / e)
        .sum();
    let dof = merged.len().saturating_sub(1).max(1);
    let dist = ChiSquared::new(dof as f64).expect("dof >= 1");
    let p_value = 1.0 - dist.cdf(statistic);
    ChiSquaredFit {
        statistic,
        dof,
        p_value,
        cells: merged.len(),
    }
}

/// Poisson pmf at k.
pub fn poisson_pmf(lambda: f64, k: u64) -> f64 {
    let k_f = k as f64;
    (k_f * lambda.ln() - lambda - ln_factorial(k)).exp()
}

fn ln_factorial(k: u64) -> f64 {
    (1..=k).map(|i| (i as f64).ln()).sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn summary_of_known_sample() {
        let xs = [1.0, 2.0, 3.0, 4.0];
        let s = summarize(&xs);
        assert_relative_eq!(s.mean, 2.5);
        assert_relative_eq!(s.median, 2.5);
        assert_relative_eq!(s.q25, 1.75);
        assert_relative_eq!(s.q75, 3.25);
        assert_relative_eq!(s.se, (variance(&xs) / 4.0).sqrt());
    }

    #[test]
    fn poisson_pmf_matches_direct_formula() {
        // lambda = 4, k = 3: 4^3 e^-4 / 6
        assert_relative_eq!(
            poisson_pmf(4.0, 3),
            64.0 * (-4.0f64).exp() / 6.0,
            max_relative = 1e-12
        );
    }

    #[test]
    fn chi_squared_accepts_its_own_law() {
        // 10_000 draws laid out exactly proportional to the pmf
        let probs = [0.25, 0.25, 0.25, 0.25];
        let observed = [2500u64, 2500, 2500, 2500];
        let fit = chi_squared_gof(&observed, &probs, 10_000);
        assert!(fit.statistic < 1e-9);
        assert!(fit.p_value > 0.999);
    }

    #[test]
    fn chi_squared_rejects_gross_mismatch() {
        let probs = [0.5, 0.5];
        let observed = [9000u64, 1000];
        let fit = chi_squared_gof(&observed, &probs, 10_000);
        assert!(fit.p_value < 1e-6);
    }
}
