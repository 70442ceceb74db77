//! Chi-squared and normal distribution functions.
//!
//! Survival functions use the upper incomplete gamma function directly so that
//! small p-values keep their relative precision.

use statrs::function::gamma::{gamma_lr, gamma_ur, ln_gamma};

use crate::error::{IvError, Result};

/// Regularized lower incomplete gamma `P(s, x)`; `P(0, x) = 1` for `x >= 0`.
pub fn reg_lower_gamma(s: f64, x: f64) -> f64 {
    if x <= 0.0 {
        return if s == 0.0 { 1.0 } else { 0.0 };
    }
    if s == 0.0 {
        return 1.0;
    }
    if x.is_infinite() {
        return 1.0;
    }
    gamma_lr(s, x)
}

/// Regularized upper incomplete gamma `Q(s, x) = 1 - P(s, x)`.
pub fn reg_upper_gamma(s: f64, x: f64) -> f64 {
    if x <= 0.0 {
        return if s == 0.0 { 0.0 } else { 1.0 };
    }
    if s == 0.0 || x.is_infinite() {
        return 0.0;
    }
    gamma_ur(s, x)
}

/// CDF of the chi-squared law with `df` degrees of freedom. `df = 0` is the
/// point mass at zero.
pub fn chi2_cdf(df: f64, x: f64) -> f64 {
    if x < 0.0 {
        return 0.0;
    }
    reg_lower_gamma(df / 2.0, x / 2.0)
}

/// Survival function `1 - chi2_cdf(df, x)`.
pub fn chi2_sf(df: f64, x: f64) -> f64 {
    if x < 0.0 {
        return 1.0;
    }
    reg_upper_gamma(df / 2.0, x / 2.0)
}

/// Chi-squared density.
pub fn chi2_pdf(df: f64, x: f64) -> f64 {
    if x < 0.0 || df <= 0.0 {
        return 0.0;
    }
    if x == 0.0 {
        return match df {
            d if d < 2.0 => f64::INFINITY,
            2.0 => 0.5,
            _ => 0.0,
        };
    }
    let h = df / 2.0;
    ((h - 1.0) * x.ln() - x / 2.0 - h * std::f64::consts::LN_2 - ln_gamma(h)).exp()
}

fn check_prob(p: f64, what: &str) -> Result<()> {
    if !(p > 0.0 && p < 1.0) {
        return Err(IvError::Domain(format!("{what} must lie in (0, 1), got {p}")));
    }
    Ok(())
}

fn check_df(df: f64) -> Result<()> {
    if !(df > 0.0 && df.is_finite()) {
        return Err(IvError::Domain(format!(
            "degrees of freedom must be positive, got {df}"
        )));
    }
    Ok(())
}

/// Solves `g(x) = 0` for a decreasing-in-error monotone function on `[lo, hi]`
/// by safeguarded Newton steps. `g` returns (value, derivative).
fn monotone_root(mut lo: f64, mut hi: f64, x0: f64, g: impl Fn(f64) -> (f64, f64)) -> f64 {
    let mut x = x0.clamp(lo, hi);
    for _ in 0..200 {
        let (v, dv) = g(x);
        if v == 0.0 {
            return x;
        }
        if v < 0.0 {
            lo = x;
        } else {
            hi = x;
        }
        let newton = x - v / dv;
        let next = if dv.is_finite() && dv != 0.0 && newton > lo && newton < hi {
            newton
        } else {
            0.5 * (lo + hi)
        };
        if (next - x).abs() <= 1e-15 * x.abs().max(1e-300) || hi - lo <= 1e-15 * hi.abs() {
            return next;
        }
        x = next;
    }
    x
}

fn upper_bracket(df: f64, tail: f64) -> f64 {
    // chi2 tails decay like exp(-x/2); this is comfortably beyond the quantile
    let mut hi = df + 10.0 * df.sqrt() + 10.0;
    while chi2_sf(df, hi) > tail {
        hi *= 2.0;
    }
    hi
}

/// Quantile `F^{-1}(p)` of the chi-squared law.
pub fn chi2_quantile(df: f64, p: f64) -> Result<f64> {
    check_prob(p, "probability")?;
    check_df(df)?;
    if p > 0.5 {
        return chi2_isf(df, 1.0 - p);
    }
    let hi = upper_bracket(df, 1.0 - p);
    let x0 = df.max(1e-3) * 0.5;
    Ok(monotone_root(0.0, hi, x0, |x| {
        (chi2_cdf(df, x) - p, chi2_pdf(df, x))
    }))
}

/// Inverse survival function: the `x` with `chi2_sf(df, x) = alpha`.
pub fn chi2_isf(df: f64, alpha: f64) -> Result<f64> {
    check_prob(alpha, "tail probability")?;
    check_df(df)?;
    if alpha > 0.5 {
        return chi2_quantile(df, 1.0 - alpha);
    }
    let hi = upper_bracket(df, alpha);
    Ok(monotone_root(0.0, hi, df, |x| {
        (alpha - chi2_sf(df, x), chi2_pdf(df, x))
    }))
}

/// Standard normal CDF.
pub fn normal_cdf(x: f64) -> f64 {
    0.5 * libm::erfc(-x / std::f64::consts::SQRT_2)
}

/// Standard normal survival function.
pub fn normal_sf(x: f64) -> f64 {
    0.5 * libm::erfc(x / std::f64::consts::SQRT_2)
}
