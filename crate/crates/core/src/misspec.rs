//! Diagnostics of the model assumptions: overidentification (J), rank of the
//! first stage (Cragg-Donald, Anderson) and the residual-prediction test of
//! well-specification.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::data::DataSet;
use crate::error::{IvError, Result};
use crate::estimators::{resolve_kappa, KClassSpec};
use crate::linalg::{gen_eig, hstack, lstsq, orth_basis, proj_onto_basis, submatrix, Matrix, Vector};
use crate::moments::Moments;
use crate::special::{chi2_sf, normal_sf};
use crate::wir::TestResult;

fn overid_df(m: &Moments) -> Result<usize> {
    let endog = m.mx + m.mw;
    if m.k <= endog {
        return Err(IvError::Config(format!(
            "just-identified: J undefined ({} instruments for {endog} endogenous regressors)",
            m.k
        )));
    }
    Ok(m.k - endog)
}

/// Sargan's J statistic at the TSLS estimate, or its LIML variant.
pub fn j_test(ds: &DataSet, estimator: KClassSpec) -> Result<TestResult> {
    j_test_moments(&Moments::new(ds)?, estimator)
}

pub fn j_test_moments(m: &Moments, estimator: KClassSpec) -> Result<TestResult> {
    let name = match estimator {
        KClassSpec::Tsls => "J (TSLS)",
        KClassSpec::Liml => "J (LIML)",
        other => {
            return Err(IvError::Config(format!(
                "J test needs the tsls or liml estimator, got {other}"
            )))
        }
    };
    let df = overid_df(m)?;
    let kappa = resolve_kappa(m, estimator)?;
    let c = m.fitted_residual(&m.kclass_coef(kappa)?);
    let num = (c.transpose() * &m.gp * &c)[(0, 0)];
    let den = (c.transpose() * &m.go * &c)[(0, 0)];
    if !(den > 0.0) {
        return Err(IvError::RankDeficient {
            what: "residual after projecting out the instruments".into(),
        });
    }
    let stat = m.dof() * num / den;
    TestResult::new(name, stat, chi2_sf(df as f64, stat), df as f64, &[])
}

/// Ascending raw eigenvalues of the first-stage pencil over `[X, W]` with
/// `D` partialled out.
fn first_stage_eigenvalues(m: &Moments) -> Result<Vector> {
    let idx = m.idx_endog();
    if idx.is_empty() {
        return Err(IvError::Config("rank test needs endogenous regressors".into()));
    }
    if m.k < idx.len() {
        return Err(IvError::Config(format!(
            "{} instruments for {} endogenous regressors",
            m.k,
            idx.len()
        )));
    }
    let (_, gp) = m.partialled()?;
    let r = gen_eig(&submatrix(&m.go, &idx, &idx), &submatrix(&gp, &idx, &idx), false)?;
    Ok(r.eigenvalues.map(|v| v.max(0.0)))
}

/// The `r` smallest eigenvalues, which must be finite.
fn smallest_finite(eig: &Vector, r: usize) -> Result<&[f64]> {
    let v = &eig.as_slice()[..r];
    if v.iter().any(|x| !x.is_finite()) {
        return Err(IvError::RankDeficient {
            what: "endogenous regressors after projecting out the instruments".into(),
        });
    }
    Ok(v)
}

/// Cragg-Donald test of `rank(Pi) <= m - 1`; chi2(k - m + 1).
pub fn rank_test(ds: &DataSet) -> Result<TestResult> {
    rank_test_moments(&Moments::new(ds)?)
}

pub fn rank_test_moments(m: &Moments) -> Result<TestResult> {
    let eig = first_stage_eigenvalues(m)?;
    let stat = m.dof() * smallest_finite(&eig, 1)?[0];
    let df = (m.k + 1 - (m.mx + m.mw)) as f64;
    TestResult::new("Cragg-Donald", stat, chi2_sf(df, stat), df, &[])
}

/// First-stage F statistic `CD / k`; defined for a single endogenous regressor.
pub fn first_stage_f(ds: &DataSet) -> Result<f64> {
    let m = Moments::new(ds)?;
    if m.mx + m.mw != 1 {
        return Err(IvError::Config(format!(
            "first-stage F needs one endogenous regressor, got {}",
            m.mx + m.mw
        )));
    }
    Ok(rank_test_moments(&m)?.statistic / m.k as f64)
}

/// Anderson's likelihood-ratio test of `rank(Pi) <= m - r`:
/// `n sum_{i <= r} log(1 + d_i)`, chi2(r (k - m + r)).
pub fn rank_test_general(ds: &DataSet, r: usize) -> Result<TestResult> {
    let m = Moments::new(ds)?;
    let endog = m.mx + m.mw;
    if r == 0 || r > endog {
        return Err(IvError::Domain(format!("need 1 <= r <= {endog}, got {r}")));
    }
    let eig = first_stage_eigenvalues(&m)?;
    let stat = m.n as f64 * smallest_finite(&eig, r)?.iter().map(|d| d.ln_1p()).sum::<f64>();
    let df = (r * (m.k - endog + r)) as f64;
    TestResult::new("Anderson rank", stat, chi2_sf(df, stat), df, &[])
}

/// `min(1, 2 median(ps))`.
pub fn aggregate_p_median(ps: &[f64]) -> Result<f64> {
    if ps.is_empty() {
        return Err(IvError::Domain("no p-values to aggregate".into()));
    }
    if ps.iter().any(|p| !(0.0..=1.0).contains(p)) {
        return Err(IvError::Domain("p-values must lie in [0, 1]".into()));
    }
    let mut v = ps.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    let med = if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    };
    Ok((2.0 * med).min(1.0))
}

/// Nonlinear regression used to predict residuals from the exogenous data.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Learner {
    /// Gaussian-kernel ridge regression, median-distance bandwidth,
    /// ridge `1e-2 n_train`, on standardized features.
    KernelRidge,
    /// 200 rounds of depth-one trees with shrinkage 0.1.
    BoostedStumps,
    /// The training mean; a null learner for checks.
    Mean,
}

impl fmt::Display for Learner {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Learner::KernelRidge => "kernel-ridge",
            Learner::BoostedStumps => "boosted-stumps",
            Learner::Mean => "mean",
        })
    }
}

impl FromStr for Learner {
    type Err = IvError;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "kernel-ridge" | "krr" => Ok(Learner::KernelRidge),
            "boosted-stumps" | "stumps" => Ok(Learner::BoostedStumps),
            "mean" => Ok(Learner::Mean),
            other => Err(IvError::Config(format!("unknown learner `{other}`"))),
        }
    }
}

/// Configuration of the residual-prediction test.
#[derive(Debug, Clone, PartialEq)]
pub struct RpConfig {
    /// Share of observations used for training.
    pub split_fraction: f64,
    /// `K` is the `1 - clip_quantile` quantile of `|w0|` on the train set.
    pub clip_quantile: f64,
    /// Lower bound on the scale estimate.
    pub gamma_floor: f64,
    pub learner: Learner,
    pub seed: u64,
    pub robust_variance: bool,
}

impl Default for RpConfig {
    fn default() -> Self {
        RpConfig {
            split_fraction: 0.5,
            clip_quantile: 0.1,
            gamma_floor: 0.1,
            learner: Learner::KernelRidge,
            seed: 0,
            robust_variance: false,
        }
    }
}

impl RpConfig {
    fn validate(&self) -> Result<()> {
        let open = |v: f64| v > 0.0 && v < 1.0;
        if !open(self.split_fraction) || !open(self.clip_quantile) || !(self.gamma_floor > 0.0) {
            return Err(IvError::Config(format!(
                "residual-prediction settings out of range: split {}, clip {}, gamma {}",
                self.split_fraction, self.clip_quantile, self.gamma_floor
            )));
        }
        Ok(())
    }
}

/// Rows `idx` of `m`.
fn rows(m: &Matrix, idx: &[usize]) -> Matrix {
    Matrix::from_fn(idx.len(), m.ncols(), |i, j| m[(idx[i], j)])
}

/// TSLS of `y` on `s` with instruments `z`, all already orthogonal to the
/// exogenous block; returns the residual.
fn tsls_residual(y: &Matrix, s: &Matrix, z: &Matrix) -> Result<(Matrix, Matrix)> {
    let q = orth_basis(z);
    let ps = proj_onto_basis(&q, s);
    let beta = lstsq(&ps, y, "projected endogenous regressors on the split")?;
    Ok((y - s * &beta, beta))
}

/// Columns of `[y, S, Z]` for a subset with `[1, C, D]` partialled out.
struct Split {
    y: Matrix,
    s: Matrix,
    z: Matrix,
    e_basis: Matrix,
    features: Matrix,
}

impl Split {
    fn new(ds: &DataSet, idx: &[usize], features: &Matrix) -> Result<Self> {
        let n = ds.n();
        let e = hstack(n, &[&ds.exog_matrix(), &ds.d]);
        let e = rows(&e, idx);
        let eq = orth_basis(&e);
        if eq.ncols() < e.ncols() {
            return Err(IvError::RankDeficient {
                what: "exogenous covariates [1, C, D] on a sample split".into(),
            });
        }
        let part = |m: &Matrix| {
            let m = rows(m, idx);
            &m - proj_onto_basis(&eq, &m)
        };
        Ok(Split {
            y: part(&Matrix::from_column_slice(n, 1, ds.y.as_slice())),
            s: part(&hstack(n, &[&ds.x, &ds.w])),
            z: part(&ds.z),
            e_basis: eq,
            features: rows(features, idx),
        })
    }
}

/// Standardizes columns by the statistics of `train`; constant columns are dropped.
fn standardize(train: &Matrix, other: &Matrix) -> (Matrix, Matrix) {
    let n = train.nrows() as f64;
    let mut keep = Vec::new();
    let mut stats = Vec::new();
    for j in 0..train.ncols() {
        let col = train.column(j);
        let mean = col.sum() / n;
        let sd = (col.map(|v| (v - mean).powi(2)).sum() / n).sqrt();
        if sd > 1e-12 * mean.abs().max(1.0) {
            keep.push(j);
            stats.push((mean, sd));
        }
    }
    let apply = |m: &Matrix| {
        Matrix::from_fn(m.nrows(), keep.len(), |i, c| (m[(i, keep[c])] - stats[c].0) / stats[c].1)
    };
    (apply(train), apply(other))
}

/// Squared distances between the rows of `a` and of `b`.
fn sq_dists(a: &Matrix, b: &Matrix) -> Matrix {
    let na: Vec<f64> = a.row_iter().map(|r| r.norm_squared()).collect();
    let nb: Vec<f64> = b.row_iter().map(|r| r.norm_squared()).collect();
    let mut d = a * b.transpose();
    for j in 0..d.ncols() {
        for i in 0..d.nrows() {
            d[(i, j)] = (na[i] + nb[j] - 2.0 * d[(i, j)]).max(0.0);
        }
    }
    d
}

/// Solves `(K + lambda I) x = b` for SPD `K` by conjugate gradients.
fn conjugate_gradient(k: &Matrix, lambda: f64, b: &Vector) -> Vector {
    let mut x = Vector::zeros(b.len());
    let mut r = b.clone();
    let mut p = r.clone();
    let mut rr = r.dot(&r);
    let stop = 1e-24 * rr.max(f64::MIN_POSITIVE);
    for _ in 0..1000 {
        if rr <= stop {
            break;
        }
        let kp = k * &p + &p * lambda;
        let alpha = rr / p.dot(&kp);
        x += &p * alpha;
        r -= &kp * alpha;
        let rr_new = r.dot(&r);
        p = &r + &p * (rr_new / rr);
        rr = rr_new;
    }
    x
}

fn kernel_ridge(train: &Matrix, target: &Vector, test: &Matrix) -> (Vector, Vector) {
    let (xtr, xte) = standardize(train, test);
    let n = xtr.nrows();
    let mean = target.mean();
    if xtr.ncols() == 0 || n < 2 {
        return (Vector::from_element(n, mean), Vector::from_element(xte.nrows(), mean));
    }
    let dtr = sq_dists(&xtr, &xtr);
    let mut d2 = Vec::with_capacity(n * (n - 1) / 2);
    for j in 0..n {
        for i in 0..j {
            d2.push(dtr[(i, j)]);
        }
    }
    let mid = d2.len() / 2;
    let (_, med, _) = d2.select_nth_unstable_by(mid, f64::total_cmp);
    let h2 = if *med > 0.0 { *med } else { 1.0 };
    let k = dtr.map(|v| (-v / (2.0 * h2)).exp());
    let centred = target.map(|v| v - mean);
    let alpha = conjugate_gradient(&k, 1e-2 * n as f64, &centred);
    let fit_train = (&k * &alpha).map(|v| v + mean);
    let kt = sq_dists(&xte, &xtr).map(|v| (-v / (2.0 * h2)).exp());
    let fit_test = (kt * &alpha).map(|v| v + mean);
    (fit_train, fit_test)
}

#[derive(Debug, Clone, Copy)]
struct Stump {
    feature: usize,
    threshold: f64,
    left: f64,
    right: f64,
}

impl Stump {
    fn predict(&self, x: &Matrix, i: usize) -> f64 {
        if x[(i, self.feature)] <= self.threshold {
            self.left
        } else {
            self.right
        }
    }
}

/// Least-squares stump on presorted features.
fn best_stump(x: &Matrix, order: &[Vec<usize>], u: &Vector) -> Option<Stump> {
    let n = u.len();
    let total: f64 = u.sum();
    let mut best: Option<(f64, Stump)> = None;
    for (f, ord) in order.iter().enumerate() {
        let mut left_sum = 0.0;
        for pos in 0..n - 1 {
            left_sum += u[ord[pos]];
            let (a, b) = (x[(ord[pos], f)], x[(ord[pos + 1], f)]);
            if a == b {
                continue;
            }
            let nl = (pos + 1) as f64;
            let nr = (n - pos - 1) as f64;
            let right_sum = total - left_sum;
            // reduction of the residual sum of squares
            let gain = left_sum * left_sum / nl + right_sum * right_sum / nr;
            if best.as_ref().is_none_or(|(g, _)| gain > *g) {
                best = Some((
                    gain,
                    Stump { feature: f, threshold: 0.5 * (a + b), left: left_sum / nl, right: right_sum / nr },
                ));
            }
        }
    }
    best.map(|(_, s)| s)
}

const STUMP_ROUNDS: usize = 200;
const STUMP_SHRINKAGE: f64 = 0.1;

fn boosted_stumps(train: &Matrix, target: &Vector, test: &Matrix) -> (Vector, Vector) {
    let n = train.nrows();
    let mean = target.mean();
    let mut fit_train = Vector::from_element(n, mean);
    let mut fit_test = Vector::from_element(test.nrows(), mean);
    if n < 2 {
        return (fit_train, fit_test);
    }
    let order: Vec<Vec<usize>> = (0..train.ncols())
        .map(|f| {
            let mut o: Vec<usize> = (0..n).collect();
            o.sort_by(|&a, &b| train[(a, f)].total_cmp(&train[(b, f)]));
            o
        })
        .collect();
    for _ in 0..STUMP_ROUNDS {
        let u = target - &fit_train;
        let Some(stump) = best_stump(train, &order, &u) else { break };
        for i in 0..n {
            fit_train[i] += STUMP_SHRINKAGE * stump.predict(train, i);
        }
        for i in 0..test.nrows() {
            fit_test[i] += STUMP_SHRINKAGE * stump.predict(test, i);
        }
    }
    (fit_train, fit_test)
}

fn learn(learner: Learner, train: &Matrix, target: &Vector, test: &Matrix) -> (Vector, Vector) {
    match learner {
        Learner::KernelRidge => kernel_ridge(train, target, test),
        Learner::BoostedStumps => boosted_stumps(train, target, test),
        Learner::Mean => {
            let mean = target.mean();
            (Vector::from_element(train.nrows(), mean), Vector::from_element(test.nrows(), mean))
        }
    }
}

/// Linear-interpolation quantile of `v`.
fn quantile(v: &[f64], p: f64) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let pos = p * (s.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    s[lo] + (pos - lo as f64) * (s[hi] - s[lo])
}

/// Residual-prediction test of `E[y - X beta | Z, C, D] = 0`.
///
/// TSLS residuals on a training split are regressed on `[Z, C, D]` with
/// `cfg.learner`; the clipped prediction `w` is then tested for correlation
/// with the TSLS residual of the test split. One-sided normal p-value.
pub fn residual_prediction_test(ds: &DataSet, cfg: &RpConfig) -> Result<TestResult> {
    cfg.validate()?;
    let n = ds.n();
    if n < 100 {
        return Err(IvError::Config(format!(
            "residual-prediction test needs at least 100 observations, got {n}"
        )));
    }
    ds.check_identified()?;
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(&mut ChaCha8Rng::seed_from_u64(cfg.seed));
    let n_train = ((n as f64) * cfg.split_fraction).round() as usize;
    if n_train == 0 || n_train >= n {
        return Err(IvError::Config("degenerate train/test split".into()));
    }
    let (tr, te) = perm.split_at(n_train);
    let features = hstack(n, &[&ds.z, &ds.c, &ds.d]);
    let train = Split::new(ds, tr, &features)?;
    let test = Split::new(ds, te, &features)?;

    let (r_train, beta_train) = tsls_residual(&train.y, &train.s, &train.z)?;
    let (w_train, w_test) = learn(cfg.learner, &train.features, &r_train.column(0).into_owned(), &test.features);
    let abs: Vec<f64> = w_train.iter().map(|v| v.abs()).collect();
    let k = quantile(&abs, 1.0 - cfg.clip_quantile);
    let w = if k > 0.0 {
        w_test.map(|v| (v / k).clamp(-1.0, 1.0))
    } else {
        Vector::zeros(w_test.len())
    };

    let nt = te.len() as f64;
    let (r_test, _) = tsls_residual(&test.y, &test.s, &test.z)?;
    let r_test = r_test.column(0).into_owned();
    let num = w.dot(&r_test);
    // w with the exogenous block and the TSLS fitted direction removed
    let wm = Matrix::from_column_slice(w.len(), 1, w.as_slice());
    let wm = &wm - proj_onto_basis(&test.e_basis, &wm);
    let qz = orth_basis(&test.z);
    let pzs = proj_onto_basis(&qz, &test.s);
    let a = test.s.transpose() * &pzs;
    let solve = lstsq(&a, &(test.s.transpose() * &wm), "S^T P_Z S on the test split")?;
    let w_orth = (&wm - &pzs * solve).column(0).into_owned();
    let sigma = if cfg.robust_variance {
        let r_tr = (&test.y - &test.s * &beta_train).column(0).into_owned();
        (w_orth.component_mul(&r_tr).norm_squared() / nt).sqrt()
    } else {
        w_orth.norm() * r_test.norm() / nt
    };
    let stat = num / (nt.sqrt() * sigma.max(cfg.gamma_floor));
    let mut res = TestResult::new("residual prediction", stat, normal_sf(stat), f64::NAN, &[])?;
    res.note = Some(format!("learner {}, seed {}", cfg.learner, cfg.seed));
    Ok(res)
}

/// P-values of the residual-prediction test over `seeds`, computed in parallel.
pub fn residual_prediction_pvalues(ds: &DataSet, cfg: &RpConfig, seeds: &[u64]) -> Result<Vec<f64>> {
    seeds
        .par_iter()
        .map(|&seed| {
            let cfg = RpConfig { seed, ..cfg.clone() };
            residual_prediction_test(ds, &cfg).map(|r| r.p_value)
        })
        .collect()
}
