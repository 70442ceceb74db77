//! The conditional likelihood-ratio limiting law `Gamma(q - p, p, lambda)`.
//!
//! A draw is `(Q_p + Q_{q-p} - lambda + sqrt((Q_p + Q_{q-p} + lambda)^2
//! - 4 Q_{q-p} lambda)) / 2` with independent chi-squared `Q_p`, `Q_{q-p}`.
//! `lambda = 0` gives chi2(q); `lambda -> inf` gives chi2(p).
//!
//! Two CDF engines are provided: Hillier's power series with an explicit
//! truncation bound, and a one-dimensional integral over a Beta mixing
//! variable evaluated with adaptive Gauss-Jacobi quadrature.

use nalgebra::{DMatrix, SymmetricEigen};
use statrs::function::gamma::ln_gamma;

use crate::error::{IvError, Result};
use crate::special::{
    chi2_cdf, chi2_isf, chi2_quantile, chi2_sf, reg_lower_gamma, reg_upper_gamma,
};

/// Parameters of `Gamma(q - p, p, lambda)` evaluated at `z`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GammaClrParams {
    pub q: usize,
    pub p: usize,
    pub lambda: f64,
    pub z: f64,
}

impl GammaClrParams {
    pub fn new(q: usize, p: usize, lambda: f64, z: f64) -> Result<Self> {
        let s = GammaClrParams { q, p, lambda, z };
        s.validate()?;
        Ok(s)
    }

    fn validate(&self) -> Result<()> {
        if self.p == 0 || self.q < self.p {
            return Err(IvError::Domain(format!(
                "need q >= p >= 1, got q = {}, p = {}",
                self.q, self.p
            )));
        }
        if !(self.lambda >= 0.0) || self.z.is_nan() {
            return Err(IvError::Domain(format!(
                "need lambda >= 0 and a numeric z, got lambda = {}, z = {}",
                self.lambda, self.z
            )));
        }
        Ok(())
    }

    /// `a = lambda / (z + lambda)`.
    pub fn a(&self) -> f64 {
        if self.lambda.is_infinite() {
            1.0
        } else {
            self.lambda / (self.z + self.lambda)
        }
    }

    /// Cases with a closed form: returns `Some(cdf)`.
    fn degenerate_cdf(&self) -> Option<f64> {
        let (q, p) = (self.q as f64, self.p as f64);
        if self.z <= 0.0 {
            Some(0.0)
        } else if self.lambda == 0.0 {
            Some(chi2_cdf(q, self.z))
        } else if self.q == self.p || self.lambda.is_infinite() {
            Some(chi2_cdf(p, self.z))
        } else {
            None
        }
    }

    fn degenerate_sf(&self) -> Option<f64> {
        let (q, p) = (self.q as f64, self.p as f64);
        if self.z <= 0.0 {
            Some(1.0)
        } else if self.lambda == 0.0 {
            Some(chi2_sf(q, self.z))
        } else if self.q == self.p || self.lambda.is_infinite() {
            Some(chi2_sf(p, self.z))
        } else {
            None
        }
    }
}

/// Hillier series evaluation with its truncation index.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SeriesValue {
    pub value: f64,
    /// Index of the last term included.
    pub terms: usize,
}

/// Maximal number of series terms before giving up.
pub const SERIES_CAP: usize = 10_000_000;

fn log_coef(p_half: f64, log_a: f64, j: usize) -> f64 {
    let j = j as f64;
    j * log_a + ln_gamma(p_half + j) - ln_gamma(p_half) - ln_gamma(j + 1.0)
}

/// Upper bound on the series remainder after the term with index `j`:
/// `F_{chi2(q+2j+2)}(z+lambda) a^{j+1} (p/2)_{j+1} / (j+1)! (1 + 2/sqrt(-log a))`.
pub fn series_truncation_bound(params: &GammaClrParams, j: usize) -> f64 {
    let a = params.a();
    if a == 0.0 {
        return 0.0;
    }
    let log_a = a.ln();
    let p_half = params.p as f64 / 2.0;
    let x = params.z + params.lambda;
    chi2_cdf((params.q + 2 * j + 2) as f64, x)
        * log_coef(p_half, log_a, j + 1).exp()
        * (1.0 + 2.0 / (-log_a).sqrt())
}

/// Partial sum of the series up to and including index `terms`:
/// `(1-a)^{p/2} sum_j a^j (p/2)_j / j! F_{chi2(q+2j)}(z + lambda)`.
pub fn gamma_clr_cdf_series_partial(params: &GammaClrParams, terms: usize) -> f64 {
    let a = params.a();
    let x = params.z + params.lambda;
    if a == 0.0 {
        return chi2_cdf(params.q as f64, x);
    }
    let p_half = params.p as f64 / 2.0;
    let log_a = a.ln();
    let lead = p_half * (-a).ln_1p();
    let mut sum = 0.0;
    for j in 0..=terms {
        let f = chi2_cdf((params.q + 2 * j) as f64, x);
        if f == 0.0 {
            break;
        }
        sum += (lead + log_coef(p_half, log_a, j)).exp() * f;
    }
    sum
}

/// CDF by the power series, truncated at the first index whose remainder
/// bound falls below `tol`.
pub fn gamma_clr_cdf_series(params: &GammaClrParams, tol: f64) -> Result<SeriesValue> {
    params.validate()?;
    if !(tol > 0.0) {
        return Err(IvError::Domain(format!("tolerance must be positive, got {tol}")));
    }
    if params.z <= 0.0 {
        return Ok(SeriesValue { value: 0.0, terms: 0 });
    }
    let a = params.a();
    let x = params.z + params.lambda;
    if a == 0.0 {
        return Ok(SeriesValue {
            value: chi2_cdf(params.q as f64, x),
            terms: 0,
        });
    }
    if a >= 1.0 {
        return Err(IvError::Domain("series requires a finite lambda".into()));
    }
    let p_half = params.p as f64 / 2.0;
    let log_a = a.ln();
    let lead = p_half * (-a).ln_1p();
    let mut sum = 0.0;
    for j in 0..SERIES_CAP {
        sum += (lead + log_coef(p_half, log_a, j)).exp() * chi2_cdf((params.q + 2 * j) as f64, x);
        if series_truncation_bound(params, j) < tol {
            return Ok(SeriesValue {
                value: sum,
                terms: j,
            });
        }
    }
    Err(IvError::Convergence {
        what: "CLR series".into(),
        detail: format!("remainder bound above {tol} after {SERIES_CAP} terms"),
    })
}

/// Gauss-Jacobi rule for the weight `(1-t)^alpha (1+t)^beta` on `[-1, 1]`
/// (Golub-Welsch). Returns (nodes, weights).
pub fn gauss_jacobi(n: usize, alpha: f64, beta: f64) -> (Vec<f64>, Vec<f64>) {
    assert!(n >= 1 && alpha > -1.0 && beta > -1.0);
    let ab = alpha + beta;
    let mut jm = DMatrix::<f64>::zeros(n, n);
    for i in 0..n {
        let k = i as f64;
        let s = 2.0 * k + ab;
        jm[(i, i)] = if i == 0 {
            (beta - alpha) / (ab + 2.0)
        } else {
            (beta * beta - alpha * alpha) / (s * (s + 2.0))
        };
        if i + 1 < n {
            let k1 = k + 1.0;
            let s1 = 2.0 * k1 + ab;
            let b2 = if i == 0 {
                4.0 * (1.0 + alpha) * (1.0 + beta) / ((2.0 + ab).powi(2) * (3.0 + ab))
            } else {
                4.0 * k1 * (k1 + alpha) * (k1 + beta) * (k1 + ab)
                    / (s1 * s1 * (s1 + 1.0) * (s1 - 1.0))
            };
            jm[(i, i + 1)] = b2.sqrt();
            jm[(i + 1, i)] = b2.sqrt();
        }
    }
    let mu0 = ((ab + 1.0) * std::f64::consts::LN_2 + ln_gamma(alpha + 1.0) + ln_gamma(beta + 1.0)
        - ln_gamma(ab + 2.0))
    .exp();
    let e = SymmetricEigen::new(jm);
    let mut pairs: Vec<(f64, f64)> = (0..n)
        .map(|i| (e.eigenvalues[i], mu0 * e.eigenvectors[(0, i)].powi(2)))
        .collect();
    pairs.sort_by(|x, y| x.0.total_cmp(&y.0));
    pairs.into_iter().unzip()
}

/// Gauss-Legendre rule on `[-1, 1]`.
pub fn gauss_legendre(n: usize) -> (Vec<f64>, Vec<f64>) {
    gauss_jacobi(n, 0.0, 0.0)
}

/// Nodes per quadrature panel.
pub const PANEL_NODES: usize = 25;
const MAX_DEPTH: usize = 40;

/// Quadrature evaluation with the number of integrand calls.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QuadValue {
    pub value: f64,
    pub evaluations: usize,
}

#[derive(Clone, Copy)]
enum Tail {
    Lower,
    Upper,
}

/// Beta-mixture representation: with `U ~ Beta(p/2, (q-p)/2)`,
/// `F(z) = E[P(q/2, z / (2 (1 - a + a U)))]`. Endpoint singularities of the
/// Beta density are absorbed into Jacobi weights on the end panels.
struct Mixture {
    alpha: f64,
    beta: f64,
    s: f64,
    z: f64,
    a: f64,
    tail: Tail,
    evaluations: usize,
    rules: [(Vec<f64>, Vec<f64>); 4],
}

impl Mixture {
    fn new(params: &GammaClrParams, tail: Tail) -> Self {
        // density exponents: u^{beta-1} (1-u)^{alpha-1}
        let alpha = (params.q - params.p) as f64 / 2.0;
        let beta = params.p as f64 / 2.0;
        let n = PANEL_NODES;
        Mixture {
            alpha,
            beta,
            s: params.q as f64 / 2.0,
            z: params.z,
            a: params.a(),
            tail,
            evaluations: 0,
            rules: [
                gauss_jacobi(n, alpha - 1.0, beta - 1.0),
                gauss_jacobi(n, 0.0, beta - 1.0),
                gauss_jacobi(n, alpha - 1.0, 0.0),
                gauss_legendre(n),
            ],
        }
    }

    fn f(&mut self, u: f64) -> f64 {
        self.evaluations += 1;
        let x = self.z / (2.0 * (1.0 - self.a + self.a * u));
        match self.tail {
            Tail::Lower => reg_lower_gamma(self.s, x),
            Tail::Upper => reg_upper_gamma(self.s, x),
        }
    }

    /// Integral of `u^{beta-1} (1-u)^{alpha-1} f(u)` over `[u0, u1]`.
    fn panel(&mut self, u0: f64, u1: f64) -> f64 {
        let h = u1 - u0;
        let (al, be) = (self.alpha, self.beta);
        let (which, scale) = match (u0 == 0.0, u1 == 1.0) {
            (true, true) => (0, 0.5f64.powf(al + be - 1.0)),
            (true, false) => (1, (h / 2.0).powf(be)),
            (false, true) => (2, (h / 2.0).powf(al)),
            (false, false) => (3, h / 2.0),
        };
        let (t, w) = std::mem::take(&mut self.rules[which]);
        let mut sum = 0.0;
        for (ti, wi) in t.iter().zip(&w) {
            let u = u0 + h * (1.0 + ti) / 2.0;
            let g = match which {
                0 => 1.0,
                1 => (1.0 - u).powf(al - 1.0),
                2 => u.powf(be - 1.0),
                _ => u.powf(be - 1.0) * (1.0 - u).powf(al - 1.0),
            };
            sum += wi * g * self.f(u);
        }
        self.rules[which] = (t, w);
        scale * sum
    }

    fn adapt(&mut self, u0: f64, u1: f64, whole: f64, tol: f64, depth: usize) -> Result<f64> {
        let m = 0.5 * (u0 + u1);
        let l = self.panel(u0, m);
        let r = self.panel(m, u1);
        if (l + r - whole).abs() <= tol {
            return Ok(l + r);
        }
        if depth >= MAX_DEPTH {
            return Err(IvError::Convergence {
                what: "CLR quadrature".into(),
                detail: format!("subdivision depth {MAX_DEPTH} reached near [{u0}, {u1}]"),
            });
        }
        Ok(self.adapt(u0, m, l, tol / 2.0, depth + 1)? + self.adapt(m, u1, r, tol / 2.0, depth + 1)?)
    }

    fn integrate(&mut self, tol: f64) -> Result<f64> {
        let norm = (ln_gamma(self.alpha) + ln_gamma(self.beta) - ln_gamma(self.alpha + self.beta)).exp();
        let whole = self.panel(0.0, 1.0);
        let v = self.adapt(0.0, 1.0, whole, tol * norm, 0)? / norm;
        Ok(v.clamp(0.0, 1.0))
    }
}

fn quad(params: &GammaClrParams, tol: f64, tail: Tail) -> Result<QuadValue> {
    params.validate()?;
    if !(tol > 0.0) {
        return Err(IvError::Domain(format!("tolerance must be positive, got {tol}")));
    }
    let closed = match tail {
        Tail::Lower => params.degenerate_cdf(),
        Tail::Upper => params.degenerate_sf(),
    };
    if let Some(value) = closed {
        return Ok(QuadValue {
            value,
            evaluations: 0,
        });
    }
    let mut m = Mixture::new(params, tail);
    let value = m.integrate(tol)?;
    Ok(QuadValue {
        value,
        evaluations: m.evaluations,
    })
}

/// CDF by adaptive quadrature with absolute error target `tol`.
pub fn gamma_clr_cdf_quad(params: &GammaClrParams, tol: f64) -> Result<QuadValue> {
    quad(params, tol, Tail::Lower)
}

/// Survival function `P(Gamma > z)` by quadrature, integrating the upper
/// incomplete gamma so small tail probabilities keep their precision.
pub fn gamma_clr_sf(q: usize, p: usize, lambda: f64, z: f64) -> Result<f64> {
    let params = GammaClrParams::new(q, p, lambda, z)?;
    Ok(quad(&params, 1e-10, Tail::Upper)?.value)
}

/// CDF with the default engine (quadrature, tolerance 1e-10).
pub fn gamma_clr_cdf(q: usize, p: usize, lambda: f64, z: f64) -> Result<f64> {
    let params = GammaClrParams::new(q, p, lambda, z)?;
    Ok(gamma_clr_cdf_quad(&params, 1e-10)?.value)
}

/// Quantile of `Gamma(q - p, p, lambda)`, bracketed by the chi2(p) and chi2(q)
/// quantiles.
pub fn gamma_clr_quantile(q: usize, p: usize, lambda: f64, prob: f64) -> Result<f64> {
    GammaClrParams::new(q, p, lambda, 1.0)?;
    if !(prob > 0.0 && prob < 1.0) {
        return Err(IvError::Domain(format!("probability must lie in (0, 1), got {prob}")));
    }
    if lambda == 0.0 {
        return chi2_quantile(q as f64, prob);
    }
    if q == p || lambda.is_infinite() {
        return chi2_quantile(p as f64, prob);
    }
    let cdf = |x: f64| gamma_clr_cdf(q, p, lambda, x);
    let mut lo = chi2_quantile(p as f64, prob)?;
    let mut hi = chi2_quantile(q as f64, prob)?;
    let mut widen = 0;
    while cdf(lo)? > prob || cdf(hi)? < prob {
        widen += 1;
        if widen > 60 {
            return Err(IvError::Convergence {
                what: "CLR quantile".into(),
                detail: format!("no bracket for probability {prob}"),
            });
        }
        lo *= 0.5;
        hi *= 2.0;
    }
    // Illinois regula falsi on cdf(x) - prob
    let (mut flo, mut fhi) = (cdf(lo)? - prob, cdf(hi)? - prob);
    let mut side = 0i8;
    for _ in 0..200 {
        let x = if fhi != flo {
            (lo * fhi - hi * flo) / (fhi - flo)
        } else {
            0.5 * (lo + hi)
        };
        let fx = cdf(x)? - prob;
        if fx.abs() < 1e-12 || hi - lo < 1e-13 * hi {
            return Ok(x);
        }
        if fx < 0.0 {
            lo = x;
            flo = fx;
            if side == -1 {
                fhi /= 2.0;
            }
            side = -1;
        } else {
            hi = x;
            fhi = fx;
            if side == 1 {
                flo /= 2.0;
            }
            side = 1;
        }
    }
    Err(IvError::Convergence {
        what: "CLR quantile".into(),
        detail: format!("bracket [{lo}, {hi}] after 200 iterations"),
    })
}

/// Gauss-Legendre nodes used for the chi-squared convolution.
pub const CONVOLUTION_NODES: usize = 201;
/// Above this many exogenous regressors of interest the convolution is
/// replaced by the dominating `Gamma(q - p, p + md, lambda)` law.
pub const CONVOLUTION_MAX_MD: usize = 10;

/// `P(Q_md + Gamma(q - p, p, lambda) > z)` with independent `Q_md ~ chi2(md)`.
///
/// Integrates `sf_Gamma(z - F_md^{-1}(u))` over `u in [0, F_md(z)]` with
/// Gauss-Legendre nodes; the remaining mass contributes `sf_md(z)`.
pub fn convolution_sf(md: usize, q: usize, p: usize, lambda: f64, z: f64) -> Result<f64> {
    if md == 0 {
        return gamma_clr_sf(q, p, lambda, z);
    }
    if p == 0 {
        return Ok(chi2_sf(md as f64, z));
    }
    if md > CONVOLUTION_MAX_MD {
        return gamma_clr_sf(q + md, p + md, lambda, z);
    }
    if z <= 0.0 {
        return Ok(1.0);
    }
    let mdf = md as f64;
    let top = chi2_cdf(mdf, z);
    let (t, w) = gauss_legendre(CONVOLUTION_NODES);
    let mut acc = 0.0;
    for (ti, wi) in t.iter().zip(&w) {
        let u = top * (1.0 + ti) / 2.0;
        let x = if u <= 0.0 {
            0.0
        } else if u >= 0.5 {
            chi2_isf(mdf, 1.0 - u)?
        } else {
            chi2_quantile(mdf, u)?
        };
        acc += wi * gamma_clr_sf(q, p, lambda, (z - x).max(0.0))?;
    }
    Ok((acc * top / 2.0 + chi2_sf(mdf, z)).clamp(0.0, 1.0))
}
