//! Nonparametric test statistics used by the direction checks.

use statrs::distribution::{Binomial, ChiSquared, ContinuousCDF, DiscreteCDF, Normal};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum StatsError {
    #[error("need at least {min} observations, got {got}")]
    TooFewObservations { min: usize, got: usize },
    #[error("degenerate variance: {0}")]
    DegenerateVariance(String),
}

/// Least-squares fit and Pearson correlation of y on x.
#[derive(Debug, Clone, Copy, serde::Serialize, serde::Deserialize)]
pub struct Regression {
    pub r: f64,
    pub slope: f64,
    pub intercept: f64,
}

pub fn pearson_regression(x: &[f64], y: &[f64]) -> Result<Regression, StatsError> {
    if x.len() != y.len() || x.len() < 2 {
        return Err(StatsError::TooFewObservations {
            min: 2,
            got: x.len().min(y.len()),
        });
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxx: f64 = x.iter().map(|v| (v - mx) * (v - mx)).sum();
    let syy: f64 = y.iter().map(|v| (v - my) * (v - my)).sum();
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    if sxx == 0.0 {
        return Err(StatsError::DegenerateVariance("x is constant".into()));
    }
    if syy == 0.0 {
        return Err(StatsError::DegenerateVariance("y is constant".into()));
    }
    let slope = sxy / sxx;
    Ok(Regression {
        r: sxy / (sxx.sqrt() * syy.sqrt()),
        slope,
        intercept: my - slope * mx,
    })
}

/// Mann–Whitney U with tie-corrected normal approximation.
#[derive(Debug, Clone, Copy, serde::Serialize, serde::Deserialize)]
pub struct MannWhitney {
    /// U statistic of the first group.
    pub u: f64,
    /// One-sided p for "first group stochastically greater".
    pub p_greater: f64,
    pub p_two_sided: f64,
}

pub fn mann_whitney(first: &[f64], second: &[f64]) -> Result<MannWhitney, StatsError> {
    let (n, m) = (first.len(), second.len());
    if n == 0 || m == 0 {
        return Err(StatsError::TooFewObservations {
            min: 1,
            got: n.min(m),
        });
    }
    // Rank the pooled values, averaging ranks within tie groups.
    let mut pooled: Vec<(f64, usize)> = first
        .iter()
        .map(|&v| (v, 0usize))
        .chain(second.iter().map(|&v| (v, 1usize)))
        .collect();
    pooled.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
    let total = pooled.len();
    let mut rank_sum_first = 0.0;
    let mut tie_term = 0.0;
    let mut i = 0;
    while i < total {
        let mut j = i;
        while j + 1 < total && pooled[j + 1].0 == pooled[i].0 {
            j += 1;
        }
        let count = (j - i + 1) as f64;
        let avg_rank = (i + j + 2) as f64 / 2.0; // 1-based ranks
        for item in &pooled[i..=j] {
            if item.1 == 0 {
                rank_sum_first += avg_rank;
            }
        }
        tie_term += count * count * count - count;
        i = j + 1;
    }
    let nf = n as f64;
    let mf = m as f64;
    let u = rank_sum_first - nf * (nf + 1.0) / 2.0;
    let mean = nf * mf / 2.0;
    let total_f = total as f64;
    let variance =
        nf * mf / 12.0 * ((total_f + 1.0) - tie_term / (total_f * (total_f - 1.0)));
    if variance <= 0.0 {
        // Every pooled value identical: the groups are indistinguishable.
        return Ok(MannWhitney {
            u,
            p_greater: 1.0,
            p_two_sided: 1.0,
        });
    }
    let sd = variance.sqrt();
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    // Continuity correction of 0.5 toward the mean.
    let z_greater = (u - mean - 0.5) / sd;
    let p_greater = 1.0 - normal.cdf(z_greater);
    let z_abs = ((u - mean).abs() - 0.5).max(0.0) / sd;
    let p_two = 2.0 * (1.0 - normal.cdf(z_abs));
    Ok(MannWhitney {
        u,
        p_greater,
        p_two_sided: p_two.min(1.0),
    })
}

/// One-sided sign test: p-value for "positive differences dominate".
/// Zero differences are discarded.
pub fn sign_test_greater(differences: &[f64]) -> Result<f64, StatsError> {
    let nonzero: Vec<f64> = differences.iter().copied().filter(|&d| d != 0.0).collect();
    if nonzero.is_empty() {
        return Err(StatsError::TooFewObservations { min: 1, got: 0 });
    }
    let n = nonzero.len() as u64;
    let positives = nonzero.iter().filter(|&&d| d > 0.0).count() as u64;
    let binom = Binomial::new(0.5, n).expect("valid binomial");
    // P(X >= positives) under the null.
    let p = if positives == 0 {
        1.0
    } else {
        1.0 - binom.cdf(positives - 1)
    };
    Ok(p)
}

/// Chi-square goodness-of-fit against the uniform distribution over the
/// given counts; returns (statistic, p-value).
pub fn chi_square_uniform(counts: &[u64]) -> Result<(f64, f64), StatsError> {
    if counts.len() < 2 {
        return Err(StatsError::TooFewObservations {
            min: 2,
            got: counts.len(),
        });
    }
    let total: u64 = counts.iter().sum();
    if total == 0 {
        return Err(StatsError::DegenerateVariance("no observations".into()));
    }
    let expected = total as f64 / counts.len() as f64;
    let stat: f64 = counts
        .iter()
        .map(|&c| {
            let d = c as f64 - expected;
            d * d / expected
        })
        .sum();
    let chi = ChiSquared::new((counts.len() - 1) as f64).expect("valid dof");
    Ok((stat, 1.0 - chi.cdf(stat)))
}

pub fn median(values: &[f64]) -> f64 {
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = sorted.len();
    if n == 0 {
        return f64::NAN;
    }
    if n % 2 == 1 {
        sorted[n / 2]
    } else {
        (sorted[n / 2 - 1] + sorted[n / 2]) / 2.0
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pearson_exact_line_is_one() {
        let x: Vec<f64> = (1..=6).map(|v| v as f64).collect();
        let y: Vec<f64> = x.iter().map(|v| 0.01 * v).collect();
        let reg = pearson_regression(&x, &y).unwrap();
        assert!((reg.r - 1.0).abs() < 1e-12);
        assert!((reg.slope - 0.01).abs() < 1e-12);
        assert!(reg.intercept.abs() < 1e-12);
    }

    #[test]
    fn pearson_rejects_constant_series() {
        let x = [1.0, 2.0, 3.0, 4.0];
        let y = [5.0; 4];
        assert!(matches!(
            pearson_regression(&x, &y),
            Err(StatsError::DegenerateVariance(_))
        ));
    }

    #[test]
    fn mann_whitney_disjoint_supports_is_extreme() {
        let high: Vec<f64> = (0..25).map(|i| 100.0 + i as f64).collect();
        let low: Vec<f64> = (0..25).map(|i| i as f64).collect();
        let mw = mann_whitney(&high, &low).unwrap();
        assert!(mw.p_greater < 1e-6, "p = {}", mw.p_greater);
        assert!(mw.p_two_sided < 1e-6);
        let reversed = mann_whitney(&low, &high).unwrap();
        assert!(reversed.p_greater > 0.999);
    }

    #[test]
    fn mann_whitney_identical_groups_is_null() {
        let a = [3.0; 10];
        let b = [3.0; 12];
        let mw = mann_whitney(&a, &b).unwrap();
        assert_eq!(mw.p_two_sided, 1.0);
    }

    #[test]
    fn mann_whitney_handles_ties() {
        let a = [1.0, 2.0, 2.0, 3.0, 5.0, 5.0];
        let b = [2.0, 2.0, 3.0, 3.0, 4.0, 1.0];
        let mw = mann_whitney(&a, &b).unwrap();
        assert!(mw.p_two_sided > 0.05, "similar groups should not separate");
    }

    #[test]
    fn sign_test_tail() {
        // 9 positives of 10: p = (1 + 10)/1024.
        let mut diffs = vec![1.0; 9];
        diffs.push(-1.0);
        let p = sign_test_greater(&diffs).unwrap();
        assert!((p - 11.0 / 1024.0).abs() < 1e-12);
        // All negatives: p ≈ 1.
        let p2 = sign_test_greater(&[-1.0, -2.0, -0.5]).unwrap();
        assert!(p2 > 0.99);
    }

    #[test]
    fn chi_square_uniform_counts() {
        let (stat, p) = chi_square_uniform(&[333, 333, 334]).unwrap();
        assert!(stat < 0.1);
        assert!(p > 0.9);
        let (stat2, p2) = chi_square_uniform(&[900, 50, 50]).unwrap();
        assert!(stat2 > 100.0);
        assert!(p2 < 1e-6);
    }

    #[test]
    fn median_even_and_odd() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
    }
}
