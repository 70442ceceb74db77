//! Sufficient statistics shared by estimators, tests and confidence sets.
//!
//! After partialling out `[1, C]`, every quantity used downstream is a
//! function of the Gram matrices of the columns `[y, X, D, W]` and of their
//! projections onto the augmented instruments `[Z, D]`. Working with these
//! small matrices makes all statistics invariant to the instrument basis and
//! cheap to evaluate repeatedly (confidence-set grids, nuisance minimisation).

use crate::data::DataSet;
use crate::error::{IvError, Result};
use crate::linalg::{
    gen_eig, gen_eig_smallest, hstack, orth_basis_with_drops, proj_onto_basis, solve_spd,
    submatrix, Matrix, Vector,
};

/// Gram matrices of `[y, X, D, W]` with respect to the augmented instruments.
#[derive(Debug, Clone)]
pub struct Moments {
    pub n: usize,
    /// Excluded instruments.
    pub k: usize,
    pub mx: usize,
    pub mw: usize,
    pub md: usize,
    /// Exogenous nuisance columns partialled out here (intercept included).
    pub n_exog: usize,
    /// Degrees of freedom absorbed by an earlier residualization.
    pub absorbed: usize,
    /// `R^T R` with `R = M_[1,C] [y, X, D, W]`.
    pub g: Matrix,
    /// `R^T P_Z R` with `Z = M_[1,C] [Z, D]`.
    pub gp: Matrix,
    /// `R^T M_Z R`.
    pub go: Matrix,
}

impl Moments {
    pub fn new(ds: &DataSet) -> Result<Self> {
        let n = ds.n();
        let e = ds.exog_matrix();
        let (qe, dropped) = orth_basis_with_drops(&e);
        if !dropped.is_empty() {
            return Err(IvError::RankDeficient {
                what: "exogenous covariates [1, C]".into(),
            });
        }
        let ymat = Matrix::from_column_slice(n, 1, ds.y.as_slice());
        let raw = hstack(n, &[&ymat, &ds.x, &ds.d, &ds.w]);
        let r = &raw - proj_onto_basis(&qe, &raw);
        let zaug = hstack(n, &[&ds.z, &ds.d]);
        let zr = &zaug - proj_onto_basis(&qe, &zaug);
        let (q, zdrop) = orth_basis_with_drops(&zr);
        if !zdrop.is_empty() {
            let names: Vec<String> = zdrop
                .iter()
                .map(|&j| {
                    if j < ds.k() {
                        ds.names.z[j].clone()
                    } else {
                        ds.names.d[j - ds.k()].clone()
                    }
                })
                .collect();
            return Err(IvError::RankDeficient {
                what: format!(
                    "instruments [Z, D] after partialling out [1, C]: {} collinear",
                    names.join(", ")
                ),
            });
        }
        let u = q.transpose() * &r;
        let ro = &r - &q * &u;
        let g = r.transpose() * &r;
        let gp = u.transpose() * &u;
        let go = ro.transpose() * &ro;
        Ok(Moments {
            n,
            k: ds.k(),
            mx: ds.mx(),
            mw: ds.mw(),
            md: ds.md(),
            n_exog: ds.n_exog(),
            absorbed: ds.absorbed,
            g,
            gp,
            go,
        })
    }

    /// Number of columns `1 + mx + md + mw`.
    pub fn dim(&self) -> usize {
        1 + self.mx + self.md + self.mw
    }

    /// Augmented instrument count `k + md`.
    pub fn k_aug(&self) -> usize {
        self.k + self.md
    }

    /// Coordinates of interest: `X` then `D`.
    pub fn idx_interest(&self) -> Vec<usize> {
        (1..1 + self.mx + self.md).collect()
    }
    pub fn idx_x(&self) -> Vec<usize> {
        (1..1 + self.mx).collect()
    }
    pub fn idx_d(&self) -> Vec<usize> {
        (1 + self.mx..1 + self.mx + self.md).collect()
    }
    pub fn idx_w(&self) -> Vec<usize> {
        (1 + self.mx + self.md..self.dim()).collect()
    }
    /// All regressors `[X, D, W]`.
    pub fn idx_s(&self) -> Vec<usize> {
        (1..self.dim()).collect()
    }
    /// Endogenous regressors `[X, W]`.
    pub fn idx_endog(&self) -> Vec<usize> {
        let mut v = self.idx_x();
        v.extend(self.idx_w());
        v
    }

    /// Residual degrees of freedom `n - k - md - n_exog - absorbed`.
    pub fn dof(&self) -> f64 {
        self.n as f64 - (self.k_aug() + self.n_exog + self.absorbed) as f64
    }

    /// Degrees of freedom of the Wald variance, `n - (mx + md + mw) - n_exog - absorbed`.
    pub fn dof_wald(&self) -> f64 {
        self.n as f64 - (self.mx + self.md + self.mw + self.n_exog + self.absorbed) as f64
    }

    /// Grams with `D` partialled out (rows and columns of `D` become zero).
    /// Since `D` lies in the instrument span, only `G` and `Gp` change.
    pub fn partialled(&self) -> Result<(Matrix, Matrix)> {
        let d = self.idx_d();
        if d.is_empty() {
            return Ok((self.g.clone(), self.gp.clone()));
        }
        let all: Vec<usize> = (0..self.dim()).collect();
        let gdd = submatrix(&self.g, &d, &d);
        let gad = submatrix(&self.g, &all, &d);
        let corr = &gad * solve_spd(&gdd, &gad.transpose(), "D^T D")?;
        let mut g = &self.g - &corr;
        let mut gp = &self.gp - &corr;
        for &i in &d {
            g.row_mut(i).fill(0.0);
            g.column_mut(i).fill(0.0);
            gp.row_mut(i).fill(0.0);
            gp.column_mut(i).fill(0.0);
        }
        Ok((g, gp))
    }

    /// Coefficient vector of the residual `y - X beta - D delta`; `beta`
    /// stacks the X and D coordinates.
    pub fn residual_coef(&self, beta: &[f64]) -> Result<Vector> {
        if beta.len() != self.mx + self.md {
            return Err(IvError::Dimension(format!(
                "beta has length {}, expected {} (X and D coordinates)",
                beta.len(),
                self.mx + self.md
            )));
        }
        let mut c = Vector::zeros(self.dim());
        c[0] = 1.0;
        for (i, b) in beta.iter().enumerate() {
            c[1 + i] = -b;
        }
        Ok(c)
    }

    /// `V^T M V` for coefficient vectors in the columns of `v`.
    pub fn quad(m: &Matrix, v: &Matrix) -> Matrix {
        v.transpose() * m * v
    }

    /// Unit coefficient vectors for the indices.
    pub fn basis(&self, idx: &[usize]) -> Matrix {
        Matrix::from_fn(self.dim(), idx.len(), |i, j| f64::from(u8::from(idx[j] == i)))
    }

    /// `min_gamma (r - W gamma)^T P (r - W gamma) / (r - W gamma)^T M (r - W gamma)`
    /// for the residual `r` at `beta` (the raw, unscaled AR ratio).
    pub fn ar_ratio(&self, beta: &[f64]) -> Result<f64> {
        let c = self.residual_coef(beta)?;
        self.ar_ratio_coef(&c)
    }

    pub fn ar_ratio_coef(&self, c: &Vector) -> Result<f64> {
        if self.mw == 0 {
            let den = (c.transpose() * &self.go * c)[(0, 0)];
            if !(den > 0.0) {
                return Err(IvError::RankDeficient {
                    what: "residual after projection on the instruments (zero residual)".into(),
                });
            }
            return Ok(((c.transpose() * &self.gp * c)[(0, 0)] / den).max(0.0));
        }
        let v = hstack(self.dim(), &[&Matrix::from_column_slice(self.dim(), 1, c.as_slice()), &self.basis(&self.idx_w())]);
        let r = gen_eig_smallest(&Self::quad(&self.go, &v), &Self::quad(&self.gp, &v), 1)?;
        Ok(r.eigenvalues[0].max(0.0))
    }

    /// Generalized eigenvalues of the `D`-partialled pencil over `[y, X, W]`,
    /// ascending (raw ratios).
    pub fn liml_eigenvalues(&self) -> Result<Vector> {
        let (_, gp) = self.partialled()?;
        let mut idx = vec![0];
        idx.extend(self.idx_endog());
        let a = submatrix(&self.go, &idx, &idx);
        let b = submatrix(&gp, &idx, &idx);
        let r = gen_eig(&a, &b, false).map_err(tc1)?;
        let scale = r.eigenvalues.iter().filter(|v| v.is_finite()).fold(1.0f64, |m, v| m.max(v.abs()));
        Ok(r.eigenvalues.map(|v| if v.abs() <= 1e-10 * scale { 0.0 } else { v }))
    }

    /// `min_b` of the raw AR ratio over all of `[X, D, W]`.
    pub fn ar_ratio_min(&self) -> Result<f64> {
        Ok(self.liml_eigenvalues()?[0].max(0.0))
    }

    /// `1 + min_b AR ratio`.
    pub fn kappa_liml(&self) -> Result<f64> {
        if self.k < self.mx + self.mw {
            return Err(IvError::Config(format!(
                "{} instruments for {} endogenous regressors",
                self.k,
                self.mx + self.mw
            )));
        }
        Ok(1.0 + self.ar_ratio_min()?)
    }

    /// `1 + lambda_min((S^T M S)^{-1} S^T P S)` over the endogenous regressors
    /// with `D` partialled out; k-class fits are unique below this value.
    pub fn kappa_max(&self) -> Result<f64> {
        let idx = self.idx_endog();
        if idx.is_empty() {
            return Ok(f64::INFINITY);
        }
        let (_, gp) = self.partialled()?;
        let r = gen_eig_smallest(&submatrix(&self.go, &idx, &idx), &submatrix(&gp, &idx, &idx), 1)
            .map_err(tc1)?;
        Ok(1.0 + r.eigenvalues[0])
    }

    /// `kappa Gp + (1 - kappa) G` restricted to `idx` (rows and columns), and
    /// its column against `y`.
    pub fn kclass_system(&self, kappa: f64, idx: &[usize]) -> (Matrix, Vector) {
        let m = &self.gp * kappa + &self.g * (1.0 - kappa);
        let a = submatrix(&m, idx, idx);
        let b = submatrix(&m, idx, &[0]).column(0).into_owned();
        (a, b)
    }

    /// k-class coefficients on `[X, D, W]`.
    pub fn kclass_coef(&self, kappa: f64) -> Result<Vector> {
        let idx = self.idx_s();
        let (a, b) = self.kclass_system(kappa, &idx);
        let bm = Matrix::from_column_slice(b.len(), 1, b.as_slice());
        let sol = solve_spd(&a, &bm, "k-class normal matrix S^T (kappa P_Z + (1 - kappa) Id) S")
            .map_err(|_| IvError::Condition(format!(
                "the k-class normal matrix is not positive definite at kappa = {kappa}"
            )))?;
        Ok(sol.column(0).into_owned())
    }

    /// Residual coefficient vector `e_y - S coef`.
    pub fn fitted_residual(&self, coef: &Vector) -> Vector {
        let mut c = Vector::zeros(self.dim());
        c[0] = 1.0;
        for i in 0..coef.len() {
            c[1 + i] = -coef[i];
        }
        c
    }
}

/// Tags pencil rank failures with the technical condition they violate.
fn tc1(e: IvError) -> IvError {
    match e {
        IvError::RankDeficient { what } => IvError::Condition(format!(
            "[y, X, W] must have full column rank after projecting out the instruments \
             (technical condition 1): {what}"
        )),
        e => e,
    }
}
