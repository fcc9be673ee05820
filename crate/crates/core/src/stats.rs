//! Small shared statistics helpers: normal tail probabilities, sample
//! moments, and the 95% normal quantile used for every confidence interval.

/// 97.5th percentile point of the standard normal, as used in all 95%
/// confidence intervals.
pub const Z95: f64 = 1.96;

/// Complementary error function.
///
/// Chebyshev-fitted rational approximation; fractional error below 1.2e-7
/// everywhere, which is far tighter than any tolerance in this crate.
pub fn erfc(x: f64) -> f64 {
    let z = x.abs();
    let t = 1.0 / (1.0 + 0.5 * z);
    let ans = t
        * (-z * z - 1.26551223
            + t * (1.00002368
                + t * (0.37409196
                    + t * (0.09678418
                        + t * (-0.18628806
                            + t * (0.27886807
                                + t * (-1.13520398
                                    + t * (1.48851587
                                        + t * (-0.82215223 + t * 0.17087277)))))))))
            .exp();
    if x >= 0.0 {
        ans
    } else {
        2.0 - ans
    }
}

/// Standard normal cumulative distribution function.
pub fn normal_cdf(z: f64) -> f64 {
    0.5 * erfc(-z / std::f64::consts::SQRT_2)
}

/// Two-sided tail probability of |Z| ≥ z for a standard normal Z.
pub fn two_sided_p(z: f64) -> f64 {
    (erfc(z.abs() / std::f64::consts::SQRT_2)).min(1.0)
}

/// Sample mean; `None` for an empty slice.
pub fn mean(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        None
    } else {
        Some(values.iter().sum::<f64>() / values.len() as f64)
    }
}

/// Sample standard deviation (n−1 denominator); `None` for n < 2.
pub fn sample_std(values: &[f64]) -> Option<f64> {
    if values.len() < 2 {
        return None;
    }
    let m = mean(values)?;
    let ss: f64 = values.iter().map(|v| (v - m) * (v - m)).sum();
    Some((ss / (values.len() - 1) as f64).sqrt())
}

/// Mean over the defined entries, plus how many undefined entries were
/// skipped.
pub fn mean_defined(values: &[Option<f64>]) -> (Option<f64>, usize) {
    let defined: Vec<f64> = values.iter().filter_map(|v| *v).collect();
    let skipped = values.len() - defined.len();
    (mean(&defined), skipped)
}
