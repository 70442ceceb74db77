//! Confidence sets by test inversion.
//!
//! Wald, AR and LR sets are quadrics in closed form: the AR and LR
//! acceptance regions are `{s : c(s)^T (Gp - t Go) c(s) <= 0}` for a
//! threshold `t`, i.e. the k-class quadric with `kappa = 1 + t`, minimised
//! over the nuisance block. CLR and LM sets are found on a grid refined by
//! bisection.

use std::fmt;

use rayon::prelude::*;

use crate::data::DataSet;
use crate::error::{IvError, Result};
use crate::estimators::{resolve_kappa, KClassSpec};
use crate::linalg::{
    pinv_sym, project_quadric, solve_spd, submatrix, sym_eig, Matrix, Projected, Quadric, Vector,
    ZERO_TOL,
};
use crate::misspec::rank_test_moments;
use crate::moments::Moments;
use crate::special::{chi2_cdf, chi2_isf, chi2_sf};
use crate::wir::{schur_first, TestKind};

/// A closed interval; endpoints may be infinite.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Interval {
    pub lo: f64,
    pub hi: f64,
}

impl Interval {
    pub fn new(lo: f64, hi: f64) -> Self {
        Interval { lo, hi }
    }

    pub fn contains(&self, x: f64) -> bool {
        self.lo <= x && x <= self.hi
    }

    pub fn width(&self) -> f64 {
        self.hi - self.lo
    }
}

/// Shape of a confidence set.
#[derive(Debug, Clone, PartialEq)]
pub enum SetKind {
    /// Sorted, disjoint, nonempty intervals.
    Intervals(Vec<Interval>),
    Quadric(Quadric),
    Empty,
    AllSpace,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConfidenceSet {
    pub kind: SetKind,
    /// Coverage `1 - alpha`.
    pub level: f64,
    pub test: String,
}

impl ConfidenceSet {
    fn new(kind: SetKind, alpha: f64, test: &TestKind) -> Self {
        let kind = match kind {
            SetKind::Intervals(v) if v.is_empty() => SetKind::Empty,
            SetKind::Intervals(v) if v.len() == 1 && v[0].lo == f64::NEG_INFINITY && v[0].hi == f64::INFINITY => {
                SetKind::AllSpace
            }
            k => k,
        };
        ConfidenceSet { kind, level: 1.0 - alpha, test: test.to_string() }
    }

    pub fn contains(&self, beta: &[f64]) -> bool {
        match &self.kind {
            SetKind::Intervals(v) => beta.len() == 1 && v.iter().any(|i| i.contains(beta[0])),
            SetKind::Quadric(q) => q.contains(&Vector::from_column_slice(beta)),
            SetKind::Empty => false,
            SetKind::AllSpace => true,
        }
    }

    pub fn is_empty(&self) -> bool {
        match &self.kind {
            SetKind::Empty => true,
            SetKind::Quadric(q) => q.is_empty(),
            _ => false,
        }
    }

    pub fn is_bounded(&self) -> bool {
        match &self.kind {
            SetKind::Intervals(v) => v.iter().all(|i| i.lo.is_finite() && i.hi.is_finite()),
            SetKind::Quadric(q) => q.is_bounded(),
            SetKind::Empty => true,
            SetKind::AllSpace => false,
        }
    }

    pub fn intervals(&self) -> Option<&[Interval]> {
        match &self.kind {
            SetKind::Intervals(v) => Some(v),
            SetKind::Empty => Some(&[]),
            _ => None,
        }
    }

    /// Projection of a quadric set onto the coordinates `keep`; one kept
    /// coordinate gives intervals.
    pub fn project(&self, keep: &[usize]) -> Result<ConfidenceSet> {
        let kind = match &self.kind {
            SetKind::Quadric(q) => match project_quadric(q, keep)? {
                Projected::AllSpace => SetKind::AllSpace,
                Projected::Quadric(p) if p.dim() == 1 => centred_intervals(&p),
                Projected::Quadric(p) => SetKind::Quadric(p),
            },
            SetKind::Empty => SetKind::Empty,
            SetKind::AllSpace => SetKind::AllSpace,
            SetKind::Intervals(_) => {
                if keep != [0] {
                    return Err(IvError::Domain("intervals are one-dimensional".into()));
                }
                self.kind.clone()
            }
        };
        Ok(ConfidenceSet { kind, level: self.level, test: format!("{} (projected)", self.test) })
    }
}

fn fmt_endpoint(x: f64, prec: usize) -> String {
    if x == f64::INFINITY {
        "inf".into()
    } else if x == f64::NEG_INFINITY {
        "-inf".into()
    } else {
        format!("{x:.prec$}")
    }
}

impl fmt::Display for ConfidenceSet {
    /// Intervals joined by `U`, `∅` for the empty set; precision defaults to 3.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let p = f.precision().unwrap_or(3);
        match &self.kind {
            SetKind::Empty => f.write_str("∅"),
            SetKind::AllSpace => f.write_str("[-inf, inf]"),
            SetKind::Intervals(v) => {
                let parts: Vec<String> = v
                    .iter()
                    .map(|i| format!("[{}, {}]", fmt_endpoint(i.lo, p), fmt_endpoint(i.hi, p)))
                    .collect();
                f.write_str(&parts.join(" U "))
            }
            SetKind::Quadric(q) => {
                let c: Vec<String> = q.center.iter().map(|v| format!("{v:.p$}")).collect();
                write!(f, "{{b : (b - c)^T A (b - c) <= {:.p$}}}, c = [{}]", q.bound, c.join(", "))
            }
        }
    }
}

fn check_alpha(alpha: f64) -> Result<()> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(IvError::Config(format!("alpha must lie in (0, 1), got {alpha}")));
    }
    Ok(())
}

/// `{x : a x^2 + b x + c <= 0}` as sorted intervals.
pub fn intervals_from_coefficients(a: f64, b: f64, c: f64) -> SetKind {
    let scale = a.abs() + b.abs() + c.abs();
    if scale == 0.0 {
        return SetKind::AllSpace;
    }
    if a.abs() <= 1e-12 * scale {
        // linear: b x + c <= 0
        return if b.abs() <= 1e-12 * scale {
            if c <= 0.0 { SetKind::AllSpace } else { SetKind::Empty }
        } else if b > 0.0 {
            SetKind::Intervals(vec![Interval::new(f64::NEG_INFINITY, -c / b)])
        } else {
            SetKind::Intervals(vec![Interval::new(-c / b, f64::INFINITY)])
        };
    }
    let disc = b * b - 4.0 * a * c;
    if disc < 0.0 {
        return if a > 0.0 { SetKind::Empty } else { SetKind::AllSpace };
    }
    // stable roots
    let q = -0.5 * (b + b.signum() * disc.sqrt());
    let (r1, r2) = if q == 0.0 { (0.0, 0.0) } else { (q / a, c / q) };
    let (lo, hi) = if r1 <= r2 { (r1, r2) } else { (r2, r1) };
    if a > 0.0 {
        SetKind::Intervals(vec![Interval::new(lo, hi)])
    } else {
        SetKind::Intervals(vec![
            Interval::new(f64::NEG_INFINITY, lo),
            Interval::new(hi, f64::INFINITY),
        ])
    }
}

/// `{x : a (x - center)^2 <= bound}` for a one-dimensional quadric.
fn centred_intervals(q: &Quadric) -> SetKind {
    let (a, c, bound) = (q.a[(0, 0)], q.center[0], q.bound);
    intervals_from_coefficients(a, -2.0 * a * c, a * c * c - bound)
}

/// Eliminates (minimises over) the coordinates `drop` of the quadratic form
/// `v^T mat v`, returning the form over `keep`; `None` if the infimum over the
/// dropped block is `-inf`.
fn eliminate(mat: &Matrix, keep: &[usize], drop: &[usize]) -> Option<Matrix> {
    let kk = submatrix(mat, keep, keep);
    if drop.is_empty() {
        return Some(kk);
    }
    let dd = submatrix(mat, drop, drop);
    let kd = submatrix(mat, keep, drop);
    let (vals, vecs) = sym_eig(&dd);
    let scale = mat.abs().max().max(1e-300);
    if vals[0] < -ZERO_TOL * scale {
        return None;
    }
    for i in 0..vals.len() {
        if vals[i].abs() <= ZERO_TOL * scale && (&kd * vecs.column(i)).norm() > 1e-8 * scale {
            return None;
        }
    }
    Some(&kk - &kd * pinv_sym(&dd) * kd.transpose())
}

/// `{(beta, delta) : min_gamma c^T (Gp - t Go) c <= 0}`.
fn threshold_set(m: &Moments, t: f64) -> SetKind {
    let mat = &m.gp - &m.go * t;
    let mut keep = vec![0];
    keep.extend(m.idx_interest());
    let Some(r) = eliminate(&mat, &keep, &m.idx_w()) else {
        return SetKind::AllSpace;
    };
    let p = keep.len() - 1;
    let idx: Vec<usize> = (1..=p).collect();
    let a = submatrix(&r, &idx, &idx);
    let b = submatrix(&r, &idx, &[0]).column(0) * -2.0;
    let c = r[(0, 0)];
    if p == 1 {
        return intervals_from_coefficients(a[(0, 0)], b[0], c);
    }
    match Quadric::from_coefficients(a, &b, c) {
        Ok(q) if q.is_empty() => SetKind::Empty,
        Ok(q) => SetKind::Quadric(q),
        Err(_) => SetKind::AllSpace,
    }
}

pub fn invert_closed_form(ds: &DataSet, test: TestKind, alpha: f64) -> Result<ConfidenceSet> {
    invert_closed_form_moments(&Moments::new(ds)?, test, alpha)
}

/// Closed-form inversion of the Wald, AR or LR test.
pub fn invert_closed_form_moments(m: &Moments, test: TestKind, alpha: f64) -> Result<ConfidenceSet> {
    check_alpha(alpha)?;
    let p = m.mx + m.md;
    if p == 0 {
        return Err(IvError::Config("no coefficients of interest".into()));
    }
    let dof = m.dof();
    let kind = match test {
        TestKind::Ar => {
            let q = m.k_aug() as i64 - m.mw as i64;
            if q < 1 {
                return Err(IvError::Config("AR test needs k + md > mw".into()));
            }
            threshold_set(m, chi2_isf(q as f64, alpha)? / dof)
        }
        TestKind::Lr => {
            let t = m.kappa_liml()? - 1.0 + chi2_isf(p as f64, alpha)? / dof;
            threshold_set(m, t)
        }
        TestKind::Wald(spec) => wald_set(m, spec, alpha)?,
        TestKind::Clr | TestKind::Lm | TestKind::LmLocal => {
            return Err(IvError::Config(format!(
                "{test} sets have no closed form; use grid inversion"
            )))
        }
    };
    Ok(ConfidenceSet::new(kind, alpha, &test))
}

fn wald_set(m: &Moments, spec: KClassSpec, alpha: f64) -> Result<SetKind> {
    let kappa = match resolve_kappa(m, spec) {
        Ok(k) => k,
        Err(IvError::Condition(_)) => return Ok(SetKind::AllSpace),
        Err(e) => return Err(e),
    };
    let p = m.mx + m.md;
    let coef = m.kclass_coef(kappa)?;
    let (a, _) = m.kclass_system(kappa, &m.idx_s());
    let c = m.fitted_residual(&coef);
    let sigma2 = (c.transpose() * &m.g * &c)[(0, 0)] / m.dof_wald();
    let prec = schur_first(&a, p)? / sigma2;
    let q = Quadric::new(prec, coef.rows(0, p).into_owned(), chi2_isf(p as f64, alpha)?)?;
    Ok(if p == 1 { centred_intervals(&q) } else { SetKind::Quadric(q) })
}

/// Outcome of a predicate that may sit on its boundary.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Tri {
    True,
    False,
    /// Equality within numerical tolerance: indeterminate.
    Boundary,
}

impl Tri {
    /// `lhs < rhs` (or `<=` when `strict` is false), with ties within 1e-10.
    fn compare(lhs: f64, rhs: f64, strict: bool) -> Tri {
        if (lhs - rhs).abs() <= 1e-10 * rhs.abs().max(1.0) {
            Tri::Boundary
        } else if lhs < rhs || (!strict && lhs == rhs) {
            Tri::True
        } else {
            Tri::False
        }
    }
}

impl fmt::Display for Tri {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Tri::True => "true",
            Tri::False => "false",
            Tri::Boundary => "boundary (indeterminate)",
        })
    }
}

/// Boundedness and emptiness of the AR and LR sets at level `1 - alpha`.
#[derive(Debug, Clone, PartialEq)]
pub struct Predicates {
    pub ar_nonempty: Tri,
    pub ar_bounded: Tri,
    pub lr_bounded: Tri,
    pub j_liml: f64,
    pub cd: f64,
    /// AR sets are empty for `alpha > alpha_max`.
    pub alpha_max: f64,
    /// AR sets are unbounded for `alpha < alpha_min`.
    pub alpha_min: f64,
}

pub fn bounded_empty_predicates(ds: &DataSet, alpha: f64) -> Result<Predicates> {
    bounded_empty_predicates_moments(&Moments::new(ds)?, alpha)
}

pub fn bounded_empty_predicates_moments(m: &Moments, alpha: f64) -> Result<Predicates> {
    check_alpha(alpha)?;
    let q = (m.k_aug() - m.mw) as f64;
    let p = (m.mx + m.md) as f64;
    let j = m.dof() * m.ar_ratio_min()?;
    let cd = rank_test_moments(m)?.statistic;
    let crit_ar = chi2_isf(q, alpha)?;
    let crit_lr = chi2_isf(p, alpha)?;
    Ok(Predicates {
        ar_nonempty: Tri::compare(j, crit_ar, false),
        ar_bounded: Tri::compare(crit_ar, cd, true),
        lr_bounded: Tri::compare(crit_lr, cd - j, true),
        j_liml: j,
        cd,
        alpha_max: chi2_sf(q, j),
        alpha_min: chi2_sf(q, cd),
    })
}

/// Levels at which the LR and Wald sets coincide with the AR set.
#[derive(Debug, Clone, PartialEq)]
pub struct EquivalentLevels {
    pub alpha_wald_given_ar: f64,
    pub alpha_lr_given_ar: f64,
    /// `kappa` of the k-class estimator whose Wald set matches.
    pub kappa_ar: f64,
}

pub fn equivalent_levels(ds: &DataSet, alpha: f64) -> Result<EquivalentLevels> {
    equivalent_levels_moments(&Moments::new(ds)?, alpha)
}

pub fn equivalent_levels_moments(m: &Moments, alpha: f64) -> Result<EquivalentLevels> {
    check_alpha(alpha)?;
    let q = (m.k_aug() - m.mw) as f64;
    let p = m.mx + m.md;
    let dof = m.dof();
    let j = dof * m.ar_ratio_min()?;
    let cd = rank_test_moments(m)?.statistic;
    let crit = chi2_isf(q, alpha)?;
    if j > crit {
        return Err(IvError::Condition(format!(
            "J_LIML = {j} exceeds the AR critical value {crit}: the AR set is empty"
        )));
    }
    if crit >= cd {
        return Err(IvError::Condition(format!(
            "the AR critical value {crit} is not below the Cragg-Donald statistic {cd}: the AR set is unbounded"
        )));
    }
    let alpha_lr = chi2_sf(p as f64, crit - j);
    let t = crit / dof;
    let kappa = 1.0 + t;
    // bound of the AR quadric around the k-class estimate at kappa
    let mat = &m.gp - &m.go * t;
    let mut keep = vec![0];
    keep.extend(m.idx_interest());
    let r = eliminate(&mat, &keep, &m.idx_w()).ok_or_else(|| {
        IvError::Condition("nuisance block of the AR quadric is not positive semi-definite".into())
    })?;
    let idx: Vec<usize> = (1..=p).collect();
    let a = submatrix(&r, &idx, &idx);
    let by = submatrix(&r, &idx, &[0]);
    let bound = -(r[(0, 0)] - (by.transpose() * solve_spd(&a, &by, "AR quadric")?)[(0, 0)]);
    let coef = m.kclass_coef(kappa)?;
    let c = m.fitted_residual(&coef);
    let sigma2 = (c.transpose() * &m.g * &c)[(0, 0)] / m.dof_wald();
    Ok(EquivalentLevels {
        alpha_wald_given_ar: chi2_sf(p as f64, bound / sigma2),
        alpha_lr_given_ar: alpha_lr,
        kappa_ar: kappa,
    })
}

/// Settings of grid inversion.
#[derive(Debug, Clone, PartialEq)]
pub struct GridConfig {
    pub points: usize,
    pub bisections: usize,
    /// The grid spans the AR set padded by this many widths on each side.
    pub inflation: f64,
    /// Tails are probed at `tail_scale (|beta_LIML| + 1)` from the centre.
    pub tail_scale: f64,
    /// Geometrically spaced probes between each grid edge and its tail.
    pub tail_points: usize,
}

impl Default for GridConfig {
    fn default() -> Self {
        GridConfig { points: 512, bisections: 60, inflation: 5.0, tail_scale: 1e6, tail_points: 128 }
    }
}

fn grid_span(m: &Moments, alpha: f64, centre: f64, cfg: &GridConfig) -> (f64, f64) {
    let fallback = (centre - 10.0 * (centre.abs() + 1.0), centre + 10.0 * (centre.abs() + 1.0));
    match invert_closed_form_moments(m, TestKind::Ar, alpha).map(|s| s.kind) {
        Ok(SetKind::Intervals(v)) => {
            let finite: Vec<f64> = v
                .iter()
                .flat_map(|i| [i.lo, i.hi])
                .filter(|x| x.is_finite())
                .collect();
            if finite.is_empty() {
                return fallback;
            }
            let lo = finite.iter().cloned().fold(centre, f64::min);
            let hi = finite.iter().cloned().fold(centre, f64::max);
            let w = (hi - lo).max(1e-3 * (centre.abs() + 1.0));
            (lo - cfg.inflation * w, hi + cfg.inflation * w)
        }
        _ => fallback,
    }
}

pub fn invert_grid(ds: &DataSet, test: TestKind, alpha: f64, cfg: &GridConfig) -> Result<ConfidenceSet> {
    invert_grid_moments(&Moments::new(ds)?, test, alpha, cfg)
}

/// Inverts any test for a single coefficient of interest on a grid around
/// the LIML estimate, refining sign changes of `p - alpha` by bisection and
/// probing far points to detect unbounded tails.
pub fn invert_grid_moments(m: &Moments, test: TestKind, alpha: f64, cfg: &GridConfig) -> Result<ConfidenceSet> {
    check_alpha(alpha)?;
    if m.mx + m.md != 1 {
        return Err(IvError::Config(format!(
            "grid inversion returns intervals for one coefficient of interest, got {}",
            m.mx + m.md
        )));
    }
    if cfg.points < 2 {
        return Err(IvError::Config("grid needs at least two points".into()));
    }
    let kappa = if m.k > m.mx + m.mw { m.kappa_liml()? } else { 1.0 };
    let centre = m.kclass_coef(kappa)?[0];
    let (lo, hi) = grid_span(m, alpha, centre, cfg);
    let tail = cfg.tail_scale * (centre.abs() + 1.0);
    let step = (hi - lo) / (cfg.points - 1) as f64;
    // offsets from the grid edge, geometric from one grid step out to the tail
    let outward = |edge: f64, end: f64| -> Vec<f64> {
        let span = (end - edge).abs();
        if cfg.tail_points == 0 || !(span > step) {
            return vec![];
        }
        let ratio = (span / step).powf(1.0 / cfg.tail_points as f64);
        (1..cfg.tail_points)
            .map(|i| edge + (end - edge).signum() * step * ratio.powi(i as i32))
            .collect()
    };
    let mut xs = vec![centre - tail];
    xs.extend(outward(lo, centre - tail).into_iter().rev());
    xs.extend((0..cfg.points).map(|i| lo + step * i as f64));
    xs.extend(outward(hi, centre + tail));
    xs.push(centre + tail);
    let accept = |x: f64| -> Result<bool> { Ok(test.run(m, &[x])?.p_value >= alpha) };
    let flags: Vec<bool> = xs.par_iter().map(|&x| accept(x)).collect::<Result<_>>()?;

    let refine = |mut a: f64, mut b: f64, fa: bool| -> Result<f64> {
        for _ in 0..cfg.bisections {
            let mid = 0.5 * (a + b);
            if mid == a || mid == b {
                break;
            }
            if accept(mid)? == fa {
                a = mid;
            } else {
                b = mid;
            }
        }
        Ok(0.5 * (a + b))
    };
    let changes: Vec<usize> = (0..xs.len() - 1).filter(|&i| flags[i] != flags[i + 1]).collect();
    let roots: Vec<f64> = changes
        .par_iter()
        .map(|&i| refine(xs[i], xs[i + 1], flags[i]))
        .collect::<Result<_>>()?;

    let mut intervals = Vec::new();
    let mut start = if flags[0] { Some(f64::NEG_INFINITY) } else { None };
    for (&i, &r) in changes.iter().zip(&roots) {
        if flags[i] {
            intervals.push(Interval::new(start.take().unwrap_or(f64::NEG_INFINITY), r));
        } else {
            start = Some(r);
        }
    }
    if let Some(s) = start {
        intervals.push(Interval::new(s, f64::INFINITY));
    }
    Ok(ConfidenceSet::new(SetKind::Intervals(intervals), alpha, &test))
}

/// Closed form for Wald, AR and LR; grid inversion for CLR and LM.
pub fn invert(ds: &DataSet, test: TestKind, alpha: f64) -> Result<ConfidenceSet> {
    let m = Moments::new(ds)?;
    match test {
        TestKind::Clr | TestKind::Lm | TestKind::LmLocal => invert_grid_moments(&m, test, alpha, &GridConfig::default()),
        _ => invert_closed_form_moments(&m, test, alpha),
    }
}

/// `(beta, statistic, p-value)` rows over a grid of values for the first
/// coefficient of interest, for plotting.
pub fn p_value_curve(m: &Moments, test: TestKind, grid: &[f64]) -> Result<Vec<(f64, f64, f64)>> {
    grid.par_iter()
        .map(|&b| {
            let r = test.run(m, &[b])?;
            Ok((b, r.statistic, r.p_value))
        })
        .collect()
}

/// `1 - alpha` at which the AR set becomes empty: `F_{chi2(k + md - mw)}(J_LIML)`.
pub fn ar_emptiness_level(m: &Moments) -> Result<f64> {
    Ok(chi2_cdf((m.k_aug() - m.mw) as f64, m.dof() * m.ar_ratio_min()?))
}
