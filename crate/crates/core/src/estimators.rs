//! k-class estimators: OLS, TSLS, LIML, Fuller and fixed kappa.

use std::fmt;
use std::str::FromStr;

use crate::data::DataSet;
use crate::error::{IvError, Result};
use crate::linalg::{hstack, lstsq, Matrix, Vector};
use crate::moments::Moments;

/// Which member of the k-class family to fit.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum KClassSpec {
    Ols,
    Tsls,
    Liml,
    Fuller(f64),
    Fixed(f64),
}

impl KClassSpec {
    pub fn validate(&self) -> Result<()> {
        match *self {
            KClassSpec::Fuller(a) if !(a > 0.0 && a.is_finite()) => Err(IvError::Config(
                format!("Fuller parameter must be positive, got {a}"),
            )),
            KClassSpec::Fixed(k) if !(k >= 0.0 && k.is_finite()) => Err(IvError::Config(
                format!("kappa must be non-negative, got {k}"),
            )),
            _ => Ok(()),
        }
    }

    /// The kappa used for data summarised by `m`.
    pub fn kappa(&self, m: &Moments) -> Result<f64> {
        self.validate()?;
        Ok(match *self {
            KClassSpec::Ols => 0.0,
            KClassSpec::Tsls => 1.0,
            KClassSpec::Liml => m.kappa_liml()?,
            KClassSpec::Fuller(a) => m.kappa_liml()? - a / m.dof(),
            KClassSpec::Fixed(k) => k,
        })
    }

    /// Whether the fit needs instruments.
    pub fn needs_instruments(&self) -> bool {
        !matches!(self, KClassSpec::Ols | KClassSpec::Fixed(0.0))
    }
}

impl fmt::Display for KClassSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            KClassSpec::Ols => write!(f, "ols"),
            KClassSpec::Tsls => write!(f, "tsls"),
            KClassSpec::Liml => write!(f, "liml"),
            KClassSpec::Fuller(a) => write!(f, "fuller:{a}"),
            KClassSpec::Fixed(k) => write!(f, "kappa:{k}"),
        }
    }
}

impl FromStr for KClassSpec {
    type Err = IvError;

    /// Parses `ols`, `tsls`, `liml`, `fuller:<a>` or `kappa:<value>`.
    fn from_str(s: &str) -> Result<Self> {
        let lower = s.trim().to_ascii_lowercase();
        let num = |v: &str| {
            v.parse::<f64>()
                .map_err(|_| IvError::Config(format!("cannot parse number in estimator `{s}`")))
        };
        let spec = match lower.split_once(':') {
            None => match lower.as_str() {
                "ols" => KClassSpec::Ols,
                "tsls" | "2sls" => KClassSpec::Tsls,
                "liml" => KClassSpec::Liml,
                "fuller" => KClassSpec::Fuller(1.0),
                _ => return Err(IvError::Config(format!("unknown estimator `{s}`"))),
            },
            Some(("fuller", a)) => KClassSpec::Fuller(num(a)?),
            Some(("kappa", k)) => KClassSpec::Fixed(num(k)?),
            Some(_) => return Err(IvError::Config(format!("unknown estimator `{s}`"))),
        };
        spec.validate()?;
        Ok(spec)
    }
}

/// A fitted k-class estimator.
#[derive(Debug, Clone, PartialEq)]
pub struct KClassFit {
    pub kappa: f64,
    /// Coefficients of `[X, W]`.
    pub coef_endog: Vector,
    /// Coefficients of `[intercept, C, D]` (intercept only when present).
    pub coef_exog: Vector,
    /// `||y - fitted||^2 / (n - number of coefficients)`.
    pub sigma2_wald: f64,
    /// `||M_Z (y - fitted)||^2 / (n - k - m_c - m_d)`.
    pub sigma2_resid: f64,
    pub names_endog: Vec<String>,
    pub names_exog: Vec<String>,
}

impl KClassFit {
    /// All coefficients in role order: intercept, X, W, C, D.
    pub fn named_coefficients(&self) -> Vec<(String, f64)> {
        let has_int = self.names_exog.first().is_some_and(|n| n == "intercept");
        let mut out = Vec::new();
        if has_int {
            out.push(("intercept".to_string(), self.coef_exog[0]));
        }
        out.extend(
            self.names_endog
                .iter()
                .cloned()
                .zip(self.coef_endog.iter().copied()),
        );
        let skip = usize::from(has_int);
        out.extend(
            self.names_exog
                .iter()
                .skip(skip)
                .cloned()
                .zip(self.coef_exog.iter().skip(skip).copied()),
        );
        out
    }

    /// Coefficient by name.
    pub fn coef(&self, name: &str) -> Option<f64> {
        self.named_coefficients()
            .into_iter()
            .find(|(n, _)| n == name)
            .map(|(_, v)| v)
    }
}

/// `1 + lambda_min` of the LIML pencil over `[y, X, W]` after partialling out
/// the exogenous covariates. Equals one exactly when just identified.
pub fn kappa_liml(ds: &DataSet) -> Result<f64> {
    let m = Moments::new(ds)?;
    if m.k == m.mx + m.mw {
        return Ok(1.0);
    }
    m.kappa_liml()
}

/// The `kappa` of `spec`, checked to lie below `kappa_max` when above one.
pub fn resolve_kappa(m: &Moments, spec: KClassSpec) -> Result<f64> {
    spec.validate()?;
    let kappa = if matches!(spec, KClassSpec::Liml) && m.k == m.mx + m.mw {
        1.0
    } else {
        spec.kappa(m)?
    };
    if kappa > 1.0 {
        let kmax = m.kappa_max()?;
        if kappa >= kmax - 1e-12 * kmax.abs().max(1.0) {
            return Err(IvError::Condition(format!(
                "kappa = {kappa} is not below 1 + lambda_min = {kmax}; the k-class objective has no unique minimiser"
            )));
        }
    }
    Ok(kappa)
}

/// Fits the k-class estimator `spec`.
pub fn fit_kclass(ds: &DataSet, spec: KClassSpec) -> Result<KClassFit> {
    spec.validate()?;
    if spec.needs_instruments() {
        ds.check_identified()?;
    }
    let m = Moments::new(ds)?;
    let kappa = resolve_kappa(&m, spec)?;
    // coefficients on [X, D, W]
    let coef = m.kclass_coef(kappa)?;
    let c = m.fitted_residual(&coef);
    let rss = (c.transpose() * &m.g * &c)[(0, 0)];
    let rss_o = (c.transpose() * &m.go * &c)[(0, 0)];
    let (mx, md, mw) = (m.mx, m.md, m.mw);
    let beta_x = coef.rows(0, mx).into_owned();
    let delta = coef.rows(mx, md).into_owned();
    let gamma = coef.rows(mx + md, mw).into_owned();
    let coef_endog = Vector::from_iterator(mx + mw, beta_x.iter().chain(gamma.iter()).copied());

    // exogenous coefficients by back-substitution
    let n = ds.n();
    let resid = &ds.y - &ds.x * &beta_x - &ds.w * &gamma - &ds.d * &delta;
    let mut names_exog = Vec::new();
    let mut coef_exog = Vec::new();
    let e = ds.exog_matrix();
    if e.ncols() > 0 {
        let alpha = lstsq(&e, &Matrix::from_column_slice(n, 1, resid.as_slice()), "exogenous covariates [1, C]")?;
        if ds.intercept {
            names_exog.push("intercept".to_string());
        }
        names_exog.extend(ds.names.c.iter().cloned());
        coef_exog.extend(alpha.column(0).iter().copied());
    } else if let Some(off) = &ds.offsets {
        // intercept of a model whose constant was partialled out beforehand
        let int = off.y - off.x.dot(&beta_x) - off.w.dot(&gamma) - off.d.dot(&delta);
        names_exog.push("intercept".to_string());
        coef_exog.push(int);
    }
    names_exog.extend(ds.names.d.iter().cloned());
    coef_exog.extend(delta.iter().copied());

    let mut names_endog = ds.names.x.clone();
    names_endog.extend(ds.names.w.iter().cloned());
    Ok(KClassFit {
        kappa,
        coef_endog,
        coef_exog: Vector::from_vec(coef_exog),
        sigma2_wald: rss / m.dof_wald(),
        sigma2_resid: rss_o / m.dof(),
        names_endog,
        names_exog,
    })
}

/// `(Z^T Z)^{-1} Z^T X~(beta)` with
/// `X~ = S - r (r^T M_Z S) / (r^T M_Z r)`, `r = y - S beta`, `S = [X, W]`,
/// after partialling out `[1, C, D]`.
pub fn pi_liml(ds: &DataSet, beta: &[f64]) -> Result<Matrix> {
    let m = ds.mx() + ds.mw();
    if beta.len() != m {
        return Err(IvError::Dimension(format!(
            "beta has length {}, expected {m}",
            beta.len()
        )));
    }
    let n = ds.n();
    let e = hstack(n, &[&ds.exog_matrix(), &ds.d]);
    let part = |b: &Matrix| -> Result<Matrix> {
        if e.ncols() == 0 {
            Ok(b.clone())
        } else {
            crate::linalg::oproj(&e, b)
        }
    };
    let s = part(&hstack(n, &[&ds.x, &ds.w]))?;
    let y = part(&Matrix::from_column_slice(n, 1, ds.y.as_slice()))?;
    let z = part(&ds.z)?;
    let bvec = Matrix::from_column_slice(m, 1, beta);
    let r = &y - &s * &bvec;
    if r.norm() <= 1e-12 * y.norm().max(f64::MIN_POSITIVE) {
        // exact fit: no correction, the ordinary first stage
        return lstsq(&z, &s, "instruments Z");
    }
    let mr = crate::linalg::oproj(&z, &r)?;
    let den = (mr.transpose() * &mr)[(0, 0)];
    if !(den > 1e-20 * (r.transpose() * &r)[(0, 0)]) {
        return Err(IvError::RankDeficient {
            what: "residual y - S beta after projecting out the instruments".into(),
        });
    }
    let xt = &s - &r * (mr.transpose() * &s) / den;
    lstsq(&z, &xt, "instruments Z")
}
