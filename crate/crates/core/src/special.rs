//! Log-domain modified Bessel functions for the Rician likelihood.
//!
//! Below [`SERIES_CUTOFF`] the ascending power series is summed directly (all
//! terms positive, no cancellation). Above it the Hankel asymptotic expansion
//! is used, truncated at its smallest term; at the cutoff that term is already
//! below 1e-13 so both branches hold full double precision.

use crate::error::{Error, Result};

pub const SERIES_CUTOFF: f64 = 15.0;

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// `ln I0(x)` for `x >= 0`.
pub fn log_i0(x: f64) -> Result<f64> {
    if !(x >= 0.0) {
        return Err(Error::InvalidInput(format!("log_i0 requires x >= 0, got {x}")));
    }
    Ok(log_i0_unchecked(x))
}

/// `ln I0(x)` without the domain check; `x` must be non-negative.
#[inline]
pub fn log_i0_unchecked(x: f64) -> f64 {
    if x < SERIES_CUTOFF {
        i0_series(x).ln()
    } else {
        x - 0.5 * (LN_2PI + x.ln()) + asymptotic_sum(0.0, x).ln()
    }
}

/// `I1(x) / I0(x)`, the derivative of `ln I0`. Tends to `1 - 1/(2x)` for
/// large `x`.
#[inline]
pub fn bessel_ratio(x: f64) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    if x < SERIES_CUTOFF {
        i1_series(x) / i0_series(x)
    } else {
        asymptotic_sum(1.0, x) / asymptotic_sum(0.0, x)
    }
}

fn i0_series(x: f64) -> f64 {
    let q = 0.25 * x * x;
    let mut term = 1.0;
    let mut sum = 1.0;
    let mut k = 1.0;
    while term > sum * 1e-17 {
        term *= q / (k * k);
        sum += term;
        k += 1.0;
    }
    sum
}

fn i1_series(x: f64) -> f64 {
    let q = 0.25 * x * x;
    let mut term = 0.5 * x;
    let mut sum = term;
    let mut k = 1.0;
    while term > sum * 1e-17 {
        term *= q / (k * (k + 1.0));
        sum += term;
        k += 1.0;
    }
    sum
}

/// Σ_k (-1)^k a_k(ν) / x^k with a_k(ν) = Π_{j=1..k} (4ν² - (2j-1)²) / (k! 8^k),
/// stopped at the smallest term.
fn asymptotic_sum(nu: f64, x: f64) -> f64 {
    let mu = 4.0 * nu * nu;
    let mut term = 1.0_f64;
    let mut sum = 1.0_f64;
    for k in 1..200 {
        let odd = (2 * k - 1) as f64;
        let next = -term * (mu - odd * odd) / (k as f64 * 8.0 * x);
        if next.abs() >= term.abs() || next.abs() < 1e-17 * sum.abs() {
            if next.abs() < term.abs() {
                sum += next;
            }
            break;
        }
        term = next;
        sum += term;
    }
    sum
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Independent oracle: log of the power series accumulated with a running
    /// log-sum-exp so it stays finite at large x.
    fn log_i0_logsum(x: f64) -> f64 {
        if x == 0.0 {
            return 0.0;
        }
        let log_q = 2.0 * (0.5 * x).ln();
        let mut log_term = 0.0_f64;
        let mut terms = vec![0.0];
        let mut k = 1.0_f64;
        loop {
            log_term += log_q - 2.0 * k.ln();
            terms.push(log_term);
            if k > 2.0 * x + 50.0 && log_term < terms.iter().cloned().fold(f64::MIN, f64::max) - 60.0 {
                break;
            }
            k += 1.0;
        }
        let m = terms.iter().cloned().fold(f64::MIN, f64::max);
        m + terms.iter().map(|t| (t - m).exp()).sum::<f64>().ln()
    }

    #[test]
    fn known_values() {
        assert_eq!(log_i0(0.0).unwrap(), 0.0);
        // arbitrary-precision reference values
        assert!((log_i0(1.0).unwrap() - 0.235_914_358_507_178_6).abs() < 1e-12);
        assert!((log_i0(100.0).unwrap() - 96.779_732_689_942_58).abs() < 1e-9);
        assert!((log_i0(700.0).unwrap() - 695.805_699_998_443_4).abs() < 1e-9);
    }

    #[test]
    fn rejects_negative() {
        assert!(log_i0(-1e-3).is_err());
        assert!(log_i0(f64::NAN).is_err());
    }

    #[test]
    fn matches_log_domain_series_across_cutoff() {
        for &x in &[0.01, 0.5, 2.0, 3.75, 8.0, 14.999, 15.0, 15.001, 25.0, 60.0, 250.0] {
            let got = log_i0(x).unwrap();
            let want = log_i0_logsum(x);
            let rel = ((got - want) / want.abs().max(1e-300)).abs();
            assert!(rel < 1e-10 || (got - want).abs() < 1e-14, "x={x}: {got} vs {want}");
        }
    }

    #[test]
    fn no_overflow_at_huge_arguments() {
        let v = log_i0(1e8).unwrap();
        assert!(v.is_finite());
        let approx = 1e8 - 0.5 * (LN_2PI + 1e8_f64.ln());
        assert!((v - approx).abs() < 1e-6);
    }

    #[test]
    fn ratio_matches_finite_difference_of_log_i0() {
        for &x in &[0.3_f64, 2.0, 7.5, 14.9, 15.1, 40.0, 1000.0] {
            let h = 1e-5 * x.max(1.0);
            let fd = (log_i0_unchecked(x + h) - log_i0_unchecked(x - h)) / (2.0 * h);
            assert!((bessel_ratio(x) - fd).abs() < 1e-7, "x={x}");
        }
        assert_eq!(bessel_ratio(0.0), 0.0);
        let x = 1e6;
        assert!((bessel_ratio(x) - (1.0 - 0.5 / x)).abs() < 1e-11);
    }

    #[test]
    fn ratio_is_continuous_at_cutoff() {
        let lo = bessel_ratio(SERIES_CUTOFF - 1e-12);
        let hi = bessel_ratio(SERIES_CUTOFF);
        assert!((lo - hi).abs() < 1e-12);
    }
}
