//! Welch's unequal-variance t-test and the two one-sided equivalence test.

pub mod special;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use special::student_t_cdf;

/// Sample mean and unbiased variance.
pub fn mean_var(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var)
}

/// Mean difference, its standard error and Welch–Satterthwaite degrees of
/// freedom for `a - b`.
#[derive(Clone, Copy, Debug, PartialEq)]
struct Moments {
    diff: f64,
    se: f64,
    df: f64,
}

fn moments(a: &[f64], b: &[f64]) -> Result<Moments> {
    for (name, s) in [("first", a), ("second", b)] {
        if s.len() < 2 {
            return Err(Error::input(format!("{name} sample needs at least two values")));
        }
        if s.iter().any(|v| !v.is_finite()) {
            return Err(Error::input(format!("{name} sample has non-finite values")));
        }
    }
    let (ma, va) = mean_var(a);
    let (mb, vb) = mean_var(b);
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let (qa, qb) = (va / na, vb / nb);
    let se2 = qa + qb;
    let df = if se2 > 0.0 {
        se2 * se2 / (qa * qa / (na - 1.0) + qb * qb / (nb - 1.0))
    } else {
        na + nb - 2.0
    };
    Ok(Moments {
        diff: ma - mb,
        se: se2.sqrt(),
        df,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct WelchResult {
    pub t: f64,
    pub df: f64,
    /// Two-sided p-value.
    pub p: f64,
    /// Both samples have zero variance; `t` and `p` follow the limit
    /// convention (0 and 1 for equal means, ±inf and 0 otherwise).
    pub degenerate: bool,
}

/// Welch's two-sample t-test of equal means.
pub fn welch_t(a: &[f64], b: &[f64]) -> Result<WelchResult> {
    let m = moments(a, b)?;
    if m.se == 0.0 {
        let (t, p) = if m.diff == 0.0 {
            (0.0, 1.0)
        } else {
            (m.diff.signum() * f64::INFINITY, 0.0)
        };
        return Ok(WelchResult {
            t,
            df: m.df,
            p,
            degenerate: true,
        });
    }
    let t = m.diff / m.se;
    let p = (2.0 * student_t_cdf(-t.abs(), m.df)).min(1.0);
    Ok(WelchResult {
        t,
        df: m.df,
        p,
        degenerate: false,
    })
}

/// One-sided Welch p-value for `mean(a) > mean(b)`.
pub fn welch_greater(a: &[f64], b: &[f64]) -> Result<f64> {
    let m = moments(a, b)?;
    if m.se == 0.0 {
        return Ok(if m.diff > 0.0 { 0.0 } else { 1.0 });
    }
    Ok(1.0 - student_t_cdf(m.diff / m.se, m.df))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TostResult {
    /// p-value against `mean(a) - mean(b) <= -bound`.
    pub p_lower: f64,
    /// p-value against `mean(a) - mean(b) >= bound`.
    pub p_upper: f64,
    pub bound: f64,
    pub equivalent: bool,
}

/// Two one-sided Welch tests of `|mean(a) - mean(b)| < bound`. The means
/// are declared equivalent when both one-sided nulls are rejected at
/// `alpha_star`.
pub fn tost_equivalence(a: &[f64], b: &[f64], bound: f64, alpha_star: f64) -> Result<TostResult> {
    if !(bound > 0.0) {
        return Err(Error::input("equivalence bound must be positive"));
    }
    let m = moments(a, b)?;
    let (p_lower, p_upper) = if m.se == 0.0 {
        (
            if m.diff > -bound { 0.0 } else { 1.0 },
            if m.diff < bound { 0.0 } else { 1.0 },
        )
    } else {
        (
            1.0 - student_t_cdf((m.diff + bound) / m.se, m.df),
            student_t_cdf((m.diff - bound) / m.se, m.df),
        )
    };
    Ok(TostResult {
        p_lower,
        p_upper,
        bound,
        equivalent: p_lower.max(p_upper) < alpha_star,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identical_samples() {
        let a = [0.1, 0.2, 0.3];
        let r = welch_t(&a, &a).unwrap();
        assert_eq!((r.t, r.p), (0.0, 1.0));
        assert!(tost_equivalence(&a, &a, 0.5, 0.05).unwrap().equivalent);
    }

    #[test]
    fn zero_variance_conventions() {
        let r = welch_t(&[1.0, 1.0], &[1.0, 1.0, 1.0]).unwrap();
        assert!(r.degenerate && r.p == 1.0);
        let r = welch_t(&[1.0, 1.0], &[2.0, 2.0]).unwrap();
        assert!(r.degenerate && r.p == 0.0 && r.t == f64::NEG_INFINITY);
        let tost = tost_equivalence(&[1.0, 1.0], &[1.05, 1.05], 0.1, 0.05).unwrap();
        assert!(tost.equivalent);
        let tost = tost_equivalence(&[1.0, 1.0], &[1.2, 1.2], 0.1, 0.05).unwrap();
        assert!(!tost.equivalent);
    }

    #[test]
    fn antisymmetry() {
        let a = [1.0, 2.0, 2.5, 3.0];
        let b = [0.5, 0.7, 1.9];
        let (ab, ba) = (welch_t(&a, &b).unwrap(), welch_t(&b, &a).unwrap());
        assert_eq!(ab.t, -ba.t);
        assert!((ab.p - ba.p).abs() < 1e-15);
    }

    #[test]
    fn gap_at_bound_is_not_equivalent() {
        let a = [1.0, 2.0, 3.0];
        let b = [0.0, 1.0, 2.0];
        let r = tost_equivalence(&a, &b, 1.0, 0.05).unwrap();
        assert!((r.p_upper - 0.5).abs() < 1e-12);
        assert!(!r.equivalent);
    }

    #[test]
    fn needs_two_values() {
        assert!(welch_t(&[1.0], &[1.0, 2.0]).is_err());
        assert!(tost_equivalence(&[1.0, 2.0], &[1.0, 2.0], 0.0, 0.05).is_err());
    }
}
