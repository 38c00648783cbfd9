//! Standard normal tail probabilities.

use libm::erfc;

use crate::error::{Error, Result};

/// Standard normal CDF.
pub fn normal_cdf(x: f64) -> f64 {
    0.5 * erfc(-x / std::f64::consts::SQRT_2)
}

/// `2 (1 - Φ(|z|))`, computed through `erfc` so the upper tail keeps full
/// relative precision. Clamped below at the smallest positive normal `f64`
/// so the result is always a valid p-value in `(0, 1]`.
pub fn two_sided_pvalue(statistic: f64) -> Result<f64> {
    if !statistic.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "test statistic must be finite, got {statistic}"
        )));
    }
    Ok(two_sided_pvalue_unchecked(statistic))
}

#[inline]
pub(crate) fn two_sided_pvalue_unchecked(statistic: f64) -> f64 {
    erfc(statistic.abs() / std::f64::consts::SQRT_2).clamp(f64::MIN_POSITIVE, 1.0)
}

#[cfg(test)]
mod tests {
    use super::*;

    // Composite Simpson on [0, |z|] of the standard normal density.
    fn simpson_tail(z: f64) -> f64 {
        let n = 20_000;
        let h = z.abs() / n as f64;
        let pdf = |x: f64| (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
        let mut acc = pdf(0.0) + pdf(z.abs());
        for i in 1..n {
            let w = if i % 2 == 1 { 4.0 } else { 2.0 };
            acc += w * pdf(i as f64 * h);
        }
        1.0 - 2.0 * acc * h / 3.0
    }

    #[test]
    fn zero_statistic_gives_one() {
        assert_eq!(two_sided_pvalue(0.0).unwrap(), 1.0);
    }

    #[test]
    fn five_percent_quantile() {
        let p = two_sided_pvalue(1.959964).unwrap();
        assert!((p - 0.05).abs() < 1e-4, "{p}");
    }

    #[test]
    fn far_tail_is_tiny_but_positive() {
        let p = two_sided_pvalue(10.0).unwrap();
        assert!(p > 0.0 && p < 1e-15, "{p}");
        assert!(two_sided_pvalue(60.0).unwrap() > 0.0);
    }

    #[test]
    fn matches_quadrature() {
        for &z in &[0.1, 0.5, 1.0, 1.5, 2.0, 2.5, 3.0, 4.0, -2.2] {
            let p = two_sided_pvalue(z).unwrap();
            assert!((p - simpson_tail(z)).abs() < 1e-12, "z={z}: {p} vs {}", simpson_tail(z));
        }
    }

    #[test]
    fn rejects_non_finite() {
        assert!(two_sided_pvalue(f64::NAN).is_err());
        assert!(two_sided_pvalue(f64::INFINITY).is_err());
    }

    #[test]
    fn cdf_symmetry() {
        for &x in &[0.3, 1.7, 4.2] {
            assert!((normal_cdf(x) + normal_cdf(-x) - 1.0).abs() < 1e-15);
        }
    }
}
