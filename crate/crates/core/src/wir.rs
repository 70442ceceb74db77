//! Weak-instrument-robust and Wald tests for the coefficients of interest.
//!
//! The model is `y = X beta + W gamma + C alpha + D delta + eps` with
//! instruments `Z`. Tests concern `(beta, delta)`; `gamma` and `alpha` are
//! nuisance. Exogenous regressors of interest `D` are handled by appending
//! them to both the regressors and the instruments.
//!
//! Every test has a `*_moments` variant working on precomputed [`Moments`],
//! which is what confidence-set inversion evaluates repeatedly.

use std::fmt;

use argmin::core::{CostFunction, Executor, State};
use argmin::solver::neldermead::NelderMead;

use crate::clr::{convolution_sf, gamma_clr_sf};
use crate::data::DataSet;
use crate::error::{IvError, Result};
use crate::estimators::{resolve_kappa, KClassSpec};
use crate::linalg::{
    gen_eig_smallest, hstack, pinv_sym, solve_spd, submatrix, Matrix, Vector,
};
use crate::moments::Moments;
use crate::special::chi2_sf;

/// Outcome of a hypothesis test.
#[derive(Debug, Clone, PartialEq)]
pub struct TestResult {
    pub name: String,
    pub statistic: f64,
    pub p_value: f64,
    /// Degrees of freedom of the reference law (`q` of the CLR law).
    pub df: f64,
    /// Conditioning statistic of the CLR test.
    pub conditioning: Option<f64>,
    /// Hypothesised value, `X` coordinates then `D` coordinates.
    pub beta: Vec<f64>,
    pub note: Option<String>,
}

impl TestResult {
    pub fn new(name: &str, statistic: f64, p_value: f64, df: f64, beta: &[f64]) -> Result<Self> {
        if !statistic.is_finite() {
            return Err(IvError::Condition(format!(
                "{name}: non-finite test statistic {statistic}"
            )));
        }
        if p_value.is_nan() {
            return Err(IvError::Condition(format!("{name}: p-value is NaN")));
        }
        Ok(TestResult {
            name: name.to_string(),
            statistic,
            p_value: p_value.clamp(0.0, 1.0),
            df,
            conditioning: None,
            beta: beta.to_vec(),
            note: None,
        })
    }

    fn with_conditioning(mut self, s: f64) -> Self {
        self.conditioning = Some(s);
        self
    }

    fn with_note(mut self, note: &str) -> Self {
        self.note = Some(note.to_string());
        self
    }
}

impl fmt::Display for TestResult {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{:<11}: statistic={:5.2}, p-value={:.4}",
            self.name, self.statistic, self.p_value
        )
    }
}

/// Tests available for inversion and from the command line.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum TestKind {
    Wald(KClassSpec),
    Ar,
    Lr,
    Clr,
    Lm,
    /// LM with a local nuisance search started at the LIML estimate.
    LmLocal,
}

impl TestKind {
    /// Runs the test at `beta`.
    pub fn run(&self, m: &Moments, beta: &[f64]) -> Result<TestResult> {
        match *self {
            TestKind::Wald(spec) => wald_test_moments(m, beta, spec),
            TestKind::Ar => ar_test_moments(m, beta),
            TestKind::Lr => lr_test_moments(m, beta),
            TestKind::Clr => clr_test_moments(m, beta),
            TestKind::Lm => lm_test_moments(m, beta),
            TestKind::LmLocal => lm_test_moments_with(m, beta, LmSearch::Local),
        }
    }
}

impl fmt::Display for TestKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TestKind::Wald(spec) => write!(f, "wald ({spec})"),
            TestKind::Ar => f.write_str("ar"),
            TestKind::Lr => f.write_str("lr"),
            TestKind::Clr => f.write_str("clr"),
            TestKind::Lm => f.write_str("lm"),
            TestKind::LmLocal => f.write_str("lm-local"),
        }
    }
}

impl std::str::FromStr for TestKind {
    type Err = IvError;

    /// `ar`, `lr`, `clr`, `lm`, `wald` (TSLS) or `wald:<estimator>`.
    fn from_str(s: &str) -> Result<Self> {
        let lower = s.trim().to_ascii_lowercase();
        match lower.as_str() {
            "ar" | "anderson-rubin" => Ok(TestKind::Ar),
            "lr" => Ok(TestKind::Lr),
            "clr" => Ok(TestKind::Clr),
            "lm" => Ok(TestKind::Lm),
            "lm-local" | "lm:local" => Ok(TestKind::LmLocal),
            "wald" => Ok(TestKind::Wald(KClassSpec::Tsls)),
            other => match other.strip_prefix("wald:").or_else(|| other.strip_prefix("wald-")) {
                Some(est) => Ok(TestKind::Wald(est.parse()?)),
                None => Err(IvError::Config(format!("unknown test `{s}`"))),
            },
        }
    }
}

fn check_beta(m: &Moments, beta: &[f64]) -> Result<()> {
    if m.mx + m.md == 0 {
        return Err(IvError::Config(
            "no coefficients of interest: X and D are both empty".into(),
        ));
    }
    if beta.len() != m.mx + m.md {
        return Err(IvError::Dimension(format!(
            "beta has length {}, expected {} (X and D coordinates)",
            beta.len(),
            m.mx + m.md
        )));
    }
    Ok(())
}

fn check_overidentified(m: &Moments) -> Result<()> {
    if m.k < m.mx + m.mw {
        return Err(IvError::Config(format!(
            "{} instruments for {} endogenous regressors",
            m.k,
            m.mx + m.mw
        )));
    }
    Ok(())
}

/// `A_BB - A_BW A_WW^{-1} A_WB` with `B` the first `nb` indices.
pub(crate) fn schur_first(a: &Matrix, nb: usize) -> Result<Matrix> {
    let n = a.nrows();
    let b: Vec<usize> = (0..nb).collect();
    let w: Vec<usize> = (nb..n).collect();
    let abb = submatrix(a, &b, &b);
    if w.is_empty() {
        return Ok(abb);
    }
    let abw = submatrix(a, &b, &w);
    let aww = submatrix(a, &w, &w);
    Ok(abb - &abw * solve_spd(&aww, &abw.transpose(), "nuisance block of the k-class matrix")?)
}

pub fn wald_test(ds: &DataSet, beta: &[f64], estimator: KClassSpec) -> Result<TestResult> {
    if estimator.needs_instruments() {
        ds.check_identified()?;
    }
    wald_test_moments(&Moments::new(ds)?, beta, estimator)
}

/// Wald test based on the k-class estimator `estimator`; chi2(mx + md).
pub fn wald_test_moments(m: &Moments, beta: &[f64], estimator: KClassSpec) -> Result<TestResult> {
    check_beta(m, beta)?;
    let kappa = resolve_kappa(m, estimator)?;
    let coef = m.kclass_coef(kappa)?;
    let (a, _) = m.kclass_system(kappa, &m.idx_s());
    let nb = m.mx + m.md;
    let c = m.fitted_residual(&coef);
    let sigma2 = (c.transpose() * &m.g * &c)[(0, 0)] / m.dof_wald();
    let prec = schur_first(&a, nb)?;
    let diff = Vector::from_iterator(nb, (0..nb).map(|i| beta[i] - coef[i]));
    let stat = (diff.transpose() * &prec * &diff)[(0, 0)] / sigma2;
    let df = nb as f64;
    let label = format!("Wald ({})", estimator.to_string().to_uppercase());
    TestResult::new(&label, stat, chi2_sf(df, stat), df, beta)
}

pub fn ar_test(ds: &DataSet, beta: &[f64]) -> Result<TestResult> {
    ar_test_moments(&Moments::new(ds)?, beta)
}

/// Anderson-Rubin test, minimised over the nuisance `gamma`; the scaled
/// statistic times `k + md - mw` is compared with chi2(k + md - mw).
pub fn ar_test_moments(m: &Moments, beta: &[f64]) -> Result<TestResult> {
    check_beta(m, beta)?;
    let q = m.k_aug() as i64 - m.mw as i64;
    if q < 1 {
        return Err(IvError::Config(format!(
            "{} instruments (including D) for {} nuisance endogenous regressors",
            m.k_aug(),
            m.mw
        )));
    }
    let q = q as f64;
    let stat = m.dof() / q * m.ar_ratio(beta)?;
    TestResult::new("AR", stat, chi2_sf(q, q * stat), q, beta)
}

pub fn lr_test(ds: &DataSet, beta: &[f64]) -> Result<TestResult> {
    lr_test_moments(&Moments::new(ds)?, beta)
}

/// `LR = dof (AR ratio(beta) - min AR ratio)`; chi2(mx + md).
pub fn lr_test_moments(m: &Moments, beta: &[f64]) -> Result<TestResult> {
    check_beta(m, beta)?;
    check_overidentified(m)?;
    let stat = lr_statistic(m, beta)?;
    let df = (m.mx + m.md) as f64;
    TestResult::new("LR", stat, chi2_sf(df, stat), df, beta)
}

fn lr_statistic(m: &Moments, beta: &[f64]) -> Result<f64> {
    Ok((m.dof() * (m.ar_ratio(beta)? - m.ar_ratio_min()?)).max(0.0))
}

/// `X~ = X - r (r^T M_Z X) / (r^T M_Z r)` in coefficient space.
fn decorrelate(m: &Moments, c: &Vector, idx: &[usize]) -> Result<Matrix> {
    let goc = &m.go * c;
    let see = c.dot(&goc);
    if !(see > 0.0) {
        return Err(IvError::RankDeficient {
            what: "residual after projecting out the instruments".into(),
        });
    }
    let mut s = m.basis(idx);
    for (j, &i) in idx.iter().enumerate() {
        let sig = goc[i] / see;
        for r in 0..m.dim() {
            s[(r, j)] -= c[r] * sig;
        }
    }
    Ok(s)
}

/// Tolerance below zero for conditioning statistics before they are treated
/// as a numerical failure.
const NEG_TOL: f64 = 1e-8;

fn clamp_conditioning(s: f64, scale: f64) -> Result<f64> {
    if s < -NEG_TOL * scale.max(1.0) {
        return Err(IvError::Condition(format!(
            "negative conditioning statistic {s}"
        )));
    }
    Ok(s.max(0.0))
}

pub fn clr_test(ds: &DataSet, beta: &[f64]) -> Result<TestResult> {
    clr_test_moments(&Moments::new(ds)?, beta)
}

/// Conditional likelihood-ratio test.
///
/// Without nuisance endogenous regressors the conditioning statistic is
/// `s_min(beta)`, and `D` enters through the convolution `chi2(md) + Gamma`.
/// With `mw > 0` the critical values are those of Kleibergen's conjectured
/// bound with `s~ = lambda_1 + lambda_2 - mu(beta)`.
pub fn clr_test_moments(m: &Moments, beta: &[f64]) -> Result<TestResult> {
    check_beta(m, beta)?;
    check_overidentified(m)?;
    let dof = m.dof();
    if m.mw == 0 {
        let lr = lr_statistic(m, beta)?;
        if m.mx == 0 {
            let df = m.md as f64;
            return Ok(TestResult::new("CLR", lr, chi2_sf(df, lr), df, beta)?.with_conditioning(0.0));
        }
        let (_, gp) = m.partialled()?;
        let c = m.residual_coef(beta)?;
        let xt = decorrelate(m, &c, &m.idx_x())?;
        let s_min = dof
            * gen_eig_smallest(&Moments::quad(&m.go, &xt), &Moments::quad(&gp, &xt), 1)?
                .eigenvalues[0];
        let s_min = clamp_conditioning(s_min, lr)?;
        let p = convolution_sf(m.md, m.k, m.mx, s_min, lr)?;
        return Ok(TestResult::new("CLR", lr, p, m.k as f64, beta)?.with_conditioning(s_min));
    }
    let eig = m.liml_eigenvalues()?;
    let l1 = dof * eig[0].max(0.0);
    let l2 = dof * eig.get(1).copied().unwrap_or(f64::INFINITY);
    let mu = dof * m.ar_ratio(beta)?;
    let lr = (mu - l1).max(0.0);
    let q = m.k + m.md - m.mw;
    let p_df = m.mx + m.md;
    // mu is only bounded by lambda_{p+1}: with several tested coordinates a
    // negative value is genuine and falls back to the chi2(q) bound
    let s = if p_df == 1 {
        clamp_conditioning(l1 + l2 - mu, mu)?
    } else {
        (l1 + l2 - mu).max(0.0)
    };
    let pval = if q == p_df || s.is_infinite() {
        chi2_sf(p_df as f64, lr)
    } else if s <= 0.0 {
        chi2_sf(q as f64, lr)
    } else {
        gamma_clr_sf(q, p_df, s, lr)?
    };
    Ok(TestResult::new("CLR", lr, pval, q as f64, beta)?
        .with_conditioning(s)
        .with_note("conjectured critical values"))
}

/// `dof * r^T P_{P_Z S~} r / r^T M_Z r` for the residual coefficients `c`,
/// with `S = [X, D, W]` decorrelated from `r`.
fn lm_objective(m: &Moments, c: &Vector) -> Result<f64> {
    let idx = m.idx_s();
    let st = rebase_span(m, c, &idx, decorrelate(m, c, &idx)?);
    let see = (c.transpose() * &m.go * c)[(0, 0)];
    let b = st.transpose() * (&m.gp * c);
    let k = Moments::quad(&m.gp, &st);
    Ok((m.dof() * gram_quadratic(&k, &b) / see).max(0.0))
}

/// `b^T K^+ b` for a Gram matrix `K`, after scaling `K` to unit diagonal so that
/// badly scaled regressors do not pass for rank deficiency.
/// Only the span of `S~` matters. Far from the estimate `S~ c_S = y - rho r`
/// is small relative to `c_S`, so `S~` is nearly singular; swap the column
/// with the dominant (scaled) weight in `c_S` for `e_y - rho c`, formed
/// without cancellation.
fn rebase_span(m: &Moments, c: &Vector, idx: &[usize], mut st: Matrix) -> Matrix {
    let goc = &m.go * c;
    let see = c.dot(&goc);
    let pivot = idx
        .iter()
        .enumerate()
        .map(|(j, &i)| (j, c[i].abs() * m.go[(i, i)].max(0.0).sqrt()))
        .max_by(|a, b| a.1.total_cmp(&b.1));
    if let Some((j, w)) = pivot {
        if w > m.go[(0, 0)].max(0.0).sqrt() {
            let rho = goc[0] / see;
            let mut u = -rho * c;
            u[0] += 1.0;
            st.set_column(j, &u);
        }
    }
    st
}

fn gram_quadratic(k: &Matrix, b: &Vector) -> f64 {
    let d = Vector::from_iterator(k.nrows(), (0..k.nrows()).map(|i| {
        let v = k[(i, i)];
        if v > 0.0 { 1.0 / v.sqrt() } else { 0.0 }
    }));
    let ks = Matrix::from_fn(k.nrows(), k.ncols(), |i, j| k[(i, j)] * d[i] * d[j]);
    let bs = b.component_mul(&d);
    match ks.clone().cholesky() {
        Some(ch) => (bs.transpose() * ch.solve(&bs))[(0, 0)],
        None => (bs.transpose() * pinv_sym(&ks) * &bs)[(0, 0)],
    }
}

/// `(c, T)` such that nuisance values are `gamma = gamma_0 + T u`; `c` is the
/// residual coefficient at `gamma_0 = ` the LIML estimate given `beta`.
fn nuisance_chart(m: &Moments, beta: &[f64]) -> Result<(Vector, Matrix)> {
    let mut c = m.residual_coef(beta)?;
    let w = m.idx_w();
    let v = hstack(
        m.dim(),
        &[&Matrix::from_column_slice(m.dim(), 1, c.as_slice()), &m.basis(&w)],
    );
    let r = gen_eig_smallest(&Moments::quad(&m.go, &v), &Moments::quad(&m.gp, &v), 1)?;
    if let Some(vecs) = r.eigenvectors {
        let e = vecs.column(0);
        if e[0].abs() > 1e-12 * e.amax() {
            // coefficient of W in the residual is -gamma
            for (j, &i) in w.iter().enumerate() {
                c[i] = e[1 + j] / e[0];
            }
        }
    }
    // unit steps in u move the projected residual by about one standard error
    let see = (c.transpose() * &m.go * &c)[(0, 0)].max(f64::MIN_POSITIVE);
    let gww = submatrix(&m.gp, &w, &w);
    let t = match gww.clone().cholesky() {
        Some(ch) => {
            let linv = ch.l().try_inverse().unwrap_or_else(|| Matrix::identity(w.len(), w.len()));
            linv.transpose() * (see / m.dof()).sqrt()
        }
        None => Matrix::from_fn(w.len(), w.len(), |i, j| {
            if i == j {
                (see / m.dof() / gww[(i, i)].max(f64::MIN_POSITIVE)).sqrt()
            } else {
                0.0
            }
        }),
    };
    Ok((c, t))
}

struct LmCost<'a> {
    m: &'a Moments,
    c0: &'a Vector,
    t: &'a Matrix,
    w: Vec<usize>,
}

impl LmCost<'_> {
    fn coef(&self, u: &[f64]) -> Vector {
        let du = self.t * Vector::from_column_slice(u);
        let mut c = self.c0.clone();
        for (j, &i) in self.w.iter().enumerate() {
            c[i] -= du[j];
        }
        c
    }
}

impl CostFunction for LmCost<'_> {
    type Param = Vec<f64>;
    type Output = f64;

    fn cost(&self, u: &Self::Param) -> std::result::Result<f64, argmin::core::Error> {
        Ok(lm_objective(self.m, &self.coef(u)).unwrap_or(f64::INFINITY))
    }
}

/// Number of screened starting points refined by Nelder-Mead.
const LM_RESTARTS: usize = 10;
const LOCAL_RESTARTS: usize = 5;
const LOCAL_JITTER: f64 = 0.5;

/// Geometric radii (in standard errors of the nuisance estimate) of the
/// screening points: `0.25 * 2^(i/2)` up to 4096.
fn screening_radii() -> impl Iterator<Item = f64> {
    (0..=28).map(|i| 0.25 * 2f64.powf(i as f64 / 2.0))
}

/// Unit screening directions: both signs in one dimension, 96 angles in two,
/// and a Halton point set on the sphere otherwise.
fn screening_directions(dim: usize) -> Vec<Vec<f64>> {
    match dim {
        0 => vec![],
        1 => vec![vec![1.0], vec![-1.0]],
        2 => (0..96)
            .map(|i| {
                let t = std::f64::consts::PI * i as f64 / 48.0;
                vec![t.cos(), t.sin()]
            })
            .collect(),
        _ => {
            const PRIMES: [u32; 12] = [2, 3, 5, 7, 11, 13, 17, 19, 23, 29, 31, 37];
            let halton = |mut i: u32, b: u32| {
                let (mut f, mut r) = (1.0, 0.0);
                while i > 0 {
                    f /= b as f64;
                    r += f * (i % b) as f64;
                    i /= b;
                }
                r
            };
            (1..=(24 * dim) as u32)
                .filter_map(|i| {
                    let d: Vec<f64> = (0..dim).map(|j| 2.0 * halton(i, PRIMES[j % PRIMES.len()]) - 1.0).collect();
                    let norm = d.iter().map(|x| x * x).sum::<f64>().sqrt();
                    (norm > 1e-3).then(|| d.into_iter().map(|x| x / norm).collect())
                })
                .collect()
        }
    }
}

/// Deterministic screening points `(u, radius)`.
fn screening_points(dim: usize) -> Vec<(Vec<f64>, f64)> {
    let dirs = screening_directions(dim);
    screening_radii()
        .flat_map(|r| dirs.iter().map(move |d| (d.iter().map(|x| x * r).collect(), r)).collect::<Vec<_>>())
        .collect()
}

fn nelder_mead(cost: &LmCost<'_>, start: &[f64], step: f64) -> Result<(Vec<f64>, f64)> {
    let dim = start.len();
    let mut simplex = vec![start.to_vec()];
    for j in 0..dim {
        let mut p = start.to_vec();
        p[j] += step;
        simplex.push(p);
    }
    let solver = NelderMead::new(simplex)
        .with_sd_tolerance(1e-13)
        .map_err(|e| IvError::Convergence { what: "LM nuisance minimisation".into(), detail: e.to_string() })?;
    let res = Executor::new(
        LmCost { m: cost.m, c0: cost.c0, t: cost.t, w: cost.w.clone() },
        solver,
    )
    .configure(|s| s.max_iters(4000))
    .run()
    .map_err(|e| IvError::Convergence { what: "LM nuisance minimisation".into(), detail: e.to_string() })?;
    let state = res.state();
    let best = state
        .get_best_param()
        .cloned()
        .unwrap_or_else(|| start.to_vec());
    Ok((best, state.get_best_cost()))
}

pub fn lm_test(ds: &DataSet, beta: &[f64]) -> Result<TestResult> {
    lm_test_moments(&Moments::new(ds)?, beta)
}

/// Search over the nuisance parameter in the subvector LM statistic.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum LmSearch {
    /// Nelder-Mead from the LIML estimate given `beta`, then from the best
    /// points of a radial screen out to large nuisance values.
    #[default]
    Global,
    /// Nelder-Mead from the LIML estimate given `beta` plus five jittered
    /// restarts nearby; may return a local minimum.
    Local,
}

/// Lagrange multiplier test; for `mw > 0` the statistic is minimised over
/// `gamma` (global search). Compared with chi2(mx + md).
pub fn lm_test_moments(m: &Moments, beta: &[f64]) -> Result<TestResult> {
    lm_test_moments_with(m, beta, LmSearch::Global)
}

pub fn lm_test_moments_with(m: &Moments, beta: &[f64], search: LmSearch) -> Result<TestResult> {
    check_beta(m, beta)?;
    check_overidentified(m)?;
    let df = (m.mx + m.md) as f64;
    if m.mw == 0 {
        let stat = lm_objective(m, &m.residual_coef(beta)?)?;
        return TestResult::new("LM", stat, chi2_sf(df, stat), df, beta);
    }
    let stat = lm_minimum_with(m, beta, search)?.1;
    TestResult::new("LM", stat, chi2_sf(df, stat), df, beta)
}

/// Minimising nuisance value and the minimal subvector LM statistic.
pub fn lm_minimum(m: &Moments, beta: &[f64]) -> Result<(Vector, f64)> {
    lm_minimum_with(m, beta, LmSearch::Global)
}

pub fn lm_minimum_with(m: &Moments, beta: &[f64], search: LmSearch) -> Result<(Vector, f64)> {
    let (c0, t) = nuisance_chart(m, beta)?;
    let cost = LmCost { m, c0: &c0, t: &t, w: m.idx_w() };
    let dim = m.mw;
    let mut best = nelder_mead(&cost, &vec![0.0; dim], 1.0)?;
    let starts: Vec<(Vec<f64>, f64)> = match search {
        LmSearch::Global => {
            // screen far points along fixed directions, keep the best few
            let mut screened: Vec<(Vec<f64>, f64, f64)> = screening_points(dim)
                .into_iter()
                .map(|(u, r)| {
                    let v = cost.cost(&u).unwrap_or(f64::INFINITY);
                    (u, r, v)
                })
                .filter(|p| p.2.is_finite())
                .collect();
            screened.sort_by(|a, b| a.2.total_cmp(&b.2));
            screened.into_iter().take(LM_RESTARTS).map(|(u, r, _)| (u, (0.25 * r).max(1.0))).collect()
        }
        LmSearch::Local => screening_directions(dim)
            .into_iter()
            .cycle()
            .take(if dim == 0 { 0 } else { LOCAL_RESTARTS })
            .enumerate()
            .map(|(i, d)| (d.iter().map(|x| x * LOCAL_JITTER * (1 + i / 2) as f64).collect(), 1.0))
            .collect(),
    };
    for (u, step) in starts {
        let cand = nelder_mead(&cost, &u, step)?;
        if cand.1 < best.1 {
            best = cand;
        }
    }
    // polish from the best point with a small simplex
    let polished = nelder_mead(&cost, &best.0, 0.05)?;
    if polished.1 <= best.1 {
        best = polished;
    }
    if !best.1.is_finite() {
        return Err(IvError::Convergence {
            what: "LM nuisance minimisation".into(),
            detail: "objective not finite at any start".into(),
        });
    }
    let c = cost.coef(&best.0);
    let gamma = Vector::from_iterator(dim, m.idx_w().iter().map(|&i| -c[i]));
    Ok((gamma, best.1))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::DataSet;
    use crate::linalg::{oproj, proj};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Endogenous design with moderately strong instruments.
    fn ds(seed: u64, n: usize, k: usize, mx: usize, mw: usize, md: usize) -> DataSet {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut g = |r: usize, c: usize| Matrix::from_fn(r, c, |_, _| rng.random_range(-1.0..1.0));
        let z = g(n, k);
        let c = g(n, 2);
        let d = g(n, md);
        let u = g(n, 1);
        let pi = g(k, mx + mw);
        let v = g(n, mx + mw) + &u * g(1, mx + mw);
        let s = &z * pi + v;
        let x = s.columns(0, mx).into_owned();
        let w = s.columns(mx, mw).into_owned();
        let coef = g(mx + mw, 1);
        let y = (&s * coef + &d * g(md, 1) + &u + g(n, 1) * 0.5).column(0).into_owned();
        DataSet::new(y, x, w, c, d, z, true).unwrap()
    }

    fn moments(d: &DataSet) -> Moments {
        Moments::new(d).unwrap()
    }

    fn rotate_instruments(d: &DataSet, seed: u64) -> DataSet {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let k = d.k();
        let t = Matrix::from_fn(k, k, |i, j| rng.random_range(-1.0..1.0) + if i == j { 3.0 } else { 0.0 });
        let mut out = d.clone();
        out.z = &d.z * t;
        out
    }

    #[test]
    fn parse_test_names() {
        assert_eq!("AR".parse::<TestKind>().unwrap(), TestKind::Ar);
        assert_eq!("wald:liml".parse::<TestKind>().unwrap(), TestKind::Wald(KClassSpec::Liml));
        assert_eq!("wald".parse::<TestKind>().unwrap(), TestKind::Wald(KClassSpec::Tsls));
        assert!("foo".parse::<TestKind>().is_err());
    }

    #[test]
    fn wald_zero_at_estimate() {
        let d = ds(1, 200, 4, 1, 1, 1);
        let m = moments(&d);
        let coef = m.kclass_coef(1.0).unwrap();
        let r = wald_test_moments(&m, &[coef[0], coef[1]], KClassSpec::Tsls).unwrap();
        assert!(r.statistic.abs() < 1e-16 && (r.p_value - 1.0).abs() < 1e-12);
    }

    #[test]
    fn ar_full_vector_matches_explicit_projection() {
        let d = ds(2, 150, 3, 2, 0, 0);
        let beta = [0.3, -0.2];
        let e = d.exog_matrix();
        let r = &d.y - &d.x * Vector::from_column_slice(&beta);
        let r = oproj(&e, &Matrix::from_column_slice(d.n(), 1, r.as_slice())).unwrap();
        let z = oproj(&e, &d.z).unwrap();
        let pr = proj(&z, &r).unwrap();
        let num = pr.norm_squared();
        let den = r.norm_squared() - num;
        let expect = (150.0 - 3.0 - 3.0) / 3.0 * num / den;
        let got = ar_test(&d, &beta).unwrap();
        assert!((got.statistic - expect).abs() < 1e-10 * expect);
    }

    #[test]
    fn subvector_ar_below_full_vector_ar() {
        let d = ds(3, 200, 4, 1, 2, 0);
        let full = d.merge_w_into_x();
        let mf = moments(&full);
        let m = moments(&d);
        let sub = m.dof() * m.ar_ratio(&[0.4]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..20 {
            let g: Vec<f64> = (0..2).map(|_| rng.random_range(-3.0..3.0)).collect();
            let fullv = mf.dof() * mf.ar_ratio(&[0.4, g[0], g[1]]).unwrap();
            assert!(sub <= fullv + 1e-10);
        }
    }

    #[test]
    fn lr_vanishes_at_liml() {
        let d = ds(4, 200, 4, 1, 1, 0);
        let m = moments(&d);
        let coef = m.kclass_coef(m.kappa_liml().unwrap()).unwrap();
        assert!(lr_test_moments(&m, &[coef[0]]).unwrap().statistic < 1e-8);
    }

    #[test]
    fn lm_vanishes_at_liml_without_nuisance() {
        let d = ds(5, 200, 4, 2, 0, 0);
        let m = moments(&d);
        let coef = m.kclass_coef(m.kappa_liml().unwrap()).unwrap();
        let r = lm_test_moments(&m, &[coef[0], coef[1]]).unwrap();
        assert!(r.statistic < 1e-8, "{}", r.statistic);
    }

    #[test]
    fn lm_full_vector_matches_explicit_projection() {
        let d = ds(6, 150, 3, 2, 0, 0);
        let beta = [0.1, 0.7];
        let n = d.n();
        let e = d.exog_matrix();
        let x = oproj(&e, &d.x).unwrap();
        let y = oproj(&e, &Matrix::from_column_slice(n, 1, d.y.as_slice())).unwrap();
        let z = oproj(&e, &d.z).unwrap();
        let r = &y - &x * Matrix::from_column_slice(2, 1, &beta);
        let mr = oproj(&z, &r).unwrap();
        let see = mr.norm_squared();
        let xt = &x - &r * (mr.transpose() * &x) / see;
        let pxt = proj(&z, &xt).unwrap();
        let fit = proj(&pxt, &r).unwrap();
        let expect = (n as f64 - 3.0 - 3.0) * fit.norm_squared() / see;
        let got = lm_test(&d, &beta).unwrap();
        assert!((got.statistic - expect).abs() < 1e-9 * expect.max(1.0));
    }

    #[test]
    fn subvector_lm_matches_grid_scan() {
        let d = ds(7, 120, 3, 1, 1, 0);
        let m = moments(&d);
        let beta = [0.5];
        let (gamma, stat) = lm_minimum(&m, &beta).unwrap();
        let c0 = m.residual_coef(&beta).unwrap();
        let wi = m.idx_w()[0];
        let eval = |g: f64| {
            let mut c = c0.clone();
            c[wi] = -g;
            lm_objective(&m, &c).unwrap()
        };
        // coarse scan locates the basin, a fine 2001-point scan around it
        let coarse = (0..=2000).map(|i| -20.0 + 0.02 * i as f64);
        let g0 = coarse.min_by(|a, b| eval(*a).total_cmp(&eval(*b))).unwrap();
        let grid_min = (0..=2000)
            .map(|i| eval(g0 - 0.02 + 0.00002 * i as f64))
            .fold(f64::INFINITY, f64::min);
        assert!(stat <= grid_min + 1e-6, "{stat} vs {grid_min}");
        assert!((eval(gamma[0]) - stat).abs() < 1e-12);
    }

    #[test]
    fn clr_strong_identification_limit() {
        // with lambda huge the CLR law collapses to chi2(mx)
        let p = gamma_clr_sf(5, 1, 1e6, 3.0).unwrap();
        assert!((p - chi2_sf(1.0, 3.0)).abs() < 1e-3);
    }

    #[test]
    fn clr_p_between_lr_and_ar_p_values() {
        let d = ds(8, 300, 4, 1, 0, 0);
        let m = moments(&d);
        let lr = lr_test_moments(&m, &[0.0]).unwrap();
        let clr = clr_test_moments(&m, &[0.0]).unwrap();
        assert_eq!(lr.statistic, clr.statistic);
        assert!(clr.p_value >= lr.p_value - 1e-12);
    }

    #[test]
    fn clr_with_nuisance_is_labelled() {
        let d = ds(9, 300, 4, 1, 1, 0);
        let r = clr_test(&d, &[0.0]).unwrap();
        assert_eq!(r.note.as_deref(), Some("conjectured critical values"));
        assert!(r.conditioning.unwrap() >= 0.0);
    }

    #[test]
    fn errors_on_bad_input() {
        let d = ds(10, 100, 3, 1, 0, 0);
        assert!(ar_test(&d, &[0.0, 1.0]).is_err());
        let under = ds(11, 100, 1, 1, 1, 0);
        assert!(lr_test(&under, &[0.0]).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn instrument_basis_invariance(seed in 0u64..1000, mw in 0usize..2, md in 0usize..2, b in -1.0f64..1.0) {
            let d = ds(seed, 120, 4, 1, mw, md);
            let rot = rotate_instruments(&d, seed + 1);
            let (m1, m2) = (moments(&d), moments(&rot));
            let mut beta = vec![b];
            beta.extend(std::iter::repeat_n(0.2, md));
            let kinds = [
                TestKind::Wald(KClassSpec::Tsls),
                TestKind::Wald(KClassSpec::Liml),
                TestKind::Ar,
                TestKind::Lr,
                TestKind::Clr,
                TestKind::Lm,
            ];
            for kind in kinds {
                let a = kind.run(&m1, &beta).unwrap();
                let c = kind.run(&m2, &beta).unwrap();
                let tol = if matches!(kind, TestKind::Lm) && mw > 0 { 1e-6 } else { 1e-8 };
                prop_assert!((a.statistic - c.statistic).abs() <= tol * a.statistic.abs().max(1.0),
                    "{}: {} vs {}", kind, a.statistic, c.statistic);
            }
        }

        #[test]
        fn ar_decomposes_into_lr_and_j(seed in 0u64..1000, mw in 0usize..2, b in -2.0f64..2.0) {
            let d = ds(seed, 150, 4, 1, mw, 0);
            let m = moments(&d);
            let ar = ar_test_moments(&m, &[b]).unwrap();
            let lr = lr_test_moments(&m, &[b]).unwrap();
            let j = m.dof() * m.ar_ratio_min().unwrap();
            let lhs = (m.k - mw) as f64 * ar.statistic;
            prop_assert!((lhs - lr.statistic - j).abs() <= 1e-9 * lhs.max(1.0));
        }

        #[test]
        fn lr_is_rescaled_liml_wald(seed in 0u64..1000, b in -2.0f64..2.0) {
            let d = ds(seed, 150, 4, 1, 0, 0);
            let n = d.n();
            let lr = lr_test(&d, &[b]).unwrap().statistic;
            let wald = wald_test(&d, &[b], KClassSpec::Liml).unwrap().statistic;
            // residual variances from explicit regressions
            let e = d.exog_matrix();
            let fit = crate::estimators::fit_kclass(&d, KClassSpec::Liml).unwrap();
            let liml_resid = &d.y - &d.x * fit.coef_endog.rows(0, 1);
            let liml_resid = oproj(&e, &Matrix::from_column_slice(n, 1, liml_resid.as_slice())).unwrap();
            let s2_liml = liml_resid.norm_squared() / (n - 1 - 2 - 1) as f64;
            let r = &d.y - &d.x * Vector::from_element(1, b);
            let r = oproj(&e, &Matrix::from_column_slice(n, 1, r.as_slice())).unwrap();
            let z = oproj(&e, &d.z).unwrap();
            let s2_beta = oproj(&z, &r).unwrap().norm_squared() / (n - 4 - 3) as f64;
            let expect = s2_liml / s2_beta * wald;
            prop_assert!((lr - expect).abs() <= 1e-8 * lr.max(1.0), "{} vs {}", lr, expect);
        }

        #[test]
        fn statistics_nonnegative_and_p_in_range(seed in 0u64..1000, mw in 0usize..2, b in -3.0f64..3.0) {
            let d = ds(seed, 100, 3, 1, mw, 0);
            let m = moments(&d);
            for kind in [TestKind::Ar, TestKind::Lr, TestKind::Clr, TestKind::Lm] {
                let r = kind.run(&m, &[b]).unwrap();
                prop_assert!(r.statistic >= 0.0);
                prop_assert!((0.0..=1.0).contains(&r.p_value));
            }
        }
    }
}
