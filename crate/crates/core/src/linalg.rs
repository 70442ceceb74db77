//! Dense linear-algebra primitives: projections, symmetric and generalized
//! eigenproblems, and quadrics.

use nalgebra::{Cholesky, DMatrix, DVector, SymmetricEigen};

use crate::error::{IvError, Result};

pub type Matrix = DMatrix<f64>;
pub type Vector = DVector<f64>;

/// Relative tolerance for numerical rank decisions.
pub const RANK_TOL: f64 = 1e-10;

/// Eigenvalues this close to zero are treated as zero before sign decisions.
pub const ZERO_TOL: f64 = 1e-10;

/// Orthonormal basis of the column span of `a`, computed by modified
/// Gram-Schmidt with re-orthogonalisation. Also returns the indices of the
/// columns that were dropped as (numerically) collinear with earlier ones.
pub fn orth_basis_with_drops(a: &Matrix) -> (Matrix, Vec<usize>) {
    let n = a.nrows();
    let max_norm = a.column_iter().map(|c| c.norm()).fold(0.0, f64::max);
    let tol = RANK_TOL * max_norm;
    let mut basis: Vec<Vector> = Vec::with_capacity(a.ncols());
    let mut dropped = Vec::new();
    for (j, col) in a.column_iter().enumerate() {
        let mut v: Vector = col.into_owned();
        for _ in 0..2 {
            for q in &basis {
                let d = q.dot(&v);
                v.axpy(-d, q, 1.0);
            }
        }
        let nv = v.norm();
        if max_norm > 0.0 && nv > tol {
            basis.push(v / nv);
        } else {
            dropped.push(j);
        }
    }
    let q = if basis.is_empty() {
        Matrix::zeros(n, 0)
    } else {
        Matrix::from_columns(&basis)
    };
    (q, dropped)
}

/// Orthonormal basis of the column span of `a`.
pub fn orth_basis(a: &Matrix) -> Matrix {
    orth_basis_with_drops(a).0
}

/// Numerical column rank.
pub fn rank(a: &Matrix) -> usize {
    orth_basis(a).ncols()
}

fn check_rows(a: &Matrix, b: &Matrix) -> Result<()> {
    if a.nrows() != b.nrows() {
        return Err(IvError::Dimension(format!(
            "projector has {} rows, argument has {}",
            a.nrows(),
            b.nrows()
        )));
    }
    Ok(())
}

/// P_A B: projection of the columns of `b` onto the column span of `a`.
pub fn proj(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    check_rows(a, b)?;
    let q = orth_basis(a);
    Ok(proj_onto_basis(&q, b))
}

/// M_A B = B - P_A B.
pub fn oproj(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    Ok(b - proj(a, b)?)
}

/// Projection onto an already orthonormal basis.
pub fn proj_onto_basis(q: &Matrix, b: &Matrix) -> Matrix {
    if q.ncols() == 0 {
        return Matrix::zeros(b.nrows(), b.ncols());
    }
    q * (q.transpose() * b)
}

/// Horizontal concatenation of blocks sharing the row count `n`.
pub fn hstack(n: usize, blocks: &[&Matrix]) -> Matrix {
    let cols: usize = blocks.iter().map(|b| b.ncols()).sum();
    let mut out = Matrix::zeros(n, cols);
    let mut at = 0;
    for b in blocks {
        if b.ncols() > 0 {
            out.columns_mut(at, b.ncols()).copy_from(*b);
            at += b.ncols();
        }
    }
    out
}

/// Columns of `m` selected by `idx`.
pub fn select_columns(m: &Matrix, idx: &[usize]) -> Matrix {
    Matrix::from_fn(m.nrows(), idx.len(), |i, j| m[(i, idx[j])])
}

/// Principal submatrix on rows and columns `rows` x `cols`.
pub fn submatrix(m: &Matrix, rows: &[usize], cols: &[usize]) -> Matrix {
    Matrix::from_fn(rows.len(), cols.len(), |i, j| m[(rows[i], cols[j])])
}

/// Symmetrised copy, (M + M^T) / 2.
pub fn symmetrize(m: &Matrix) -> Matrix {
    (m + m.transpose()) * 0.5
}

/// Eigen-decomposition of a symmetric matrix with eigenvalues sorted in
/// ascending order (eigenvectors permuted accordingly).
pub fn sym_eig(m: &Matrix) -> (Vector, Matrix) {
    let n = m.nrows();
    if n == 0 {
        return (Vector::zeros(0), Matrix::zeros(0, 0));
    }
    let e = SymmetricEigen::new(symmetrize(m));
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| e.eigenvalues[i].total_cmp(&e.eigenvalues[j]));
    let vals = Vector::from_iterator(n, order.iter().map(|&i| e.eigenvalues[i]));
    let vecs = Matrix::from_fn(n, n, |r, c| e.eigenvectors[(r, order[c])]);
    (vals, vecs)
}

/// Smallest eigenvalue of a symmetric matrix (`+inf` for an empty matrix).
pub fn lambda_min(m: &Matrix) -> f64 {
    if m.nrows() == 0 {
        return f64::INFINITY;
    }
    sym_eig(m).0[0]
}

/// Solution of `a x = b` for symmetric positive definite `a`.
pub fn solve_spd(a: &Matrix, b: &Matrix, what: &str) -> Result<Matrix> {
    Cholesky::new(symmetrize(a))
        .map(|c| c.solve(b))
        .ok_or_else(|| IvError::RankDeficient {
            what: what.to_string(),
        })
}

/// Least-squares coefficients of `b` on the columns of `a` (full column rank).
pub fn lstsq(a: &Matrix, b: &Matrix, what: &str) -> Result<Matrix> {
    if a.ncols() == 0 {
        return Ok(Matrix::zeros(0, b.ncols()));
    }
    let (_, dropped) = orth_basis_with_drops(a);
    if !dropped.is_empty() {
        return Err(IvError::RankDeficient {
            what: format!("{what} (columns {dropped:?} are collinear)"),
        });
    }
    let qr = a.clone().qr();
    qr.r()
        .solve_upper_triangular(&(qr.q().transpose() * b))
        .ok_or_else(|| IvError::RankDeficient {
            what: what.to_string(),
        })
}

/// Moore-Penrose pseudo-inverse of a symmetric matrix.
pub fn pinv_sym(m: &Matrix) -> Matrix {
    let n = m.nrows();
    if n == 0 {
        return Matrix::zeros(0, 0);
    }
    let (vals, vecs) = sym_eig(m);
    let scale = vals.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    let mut inv = Matrix::zeros(n, n);
    for i in 0..n {
        if vals[i].abs() > RANK_TOL * scale && scale > 0.0 {
            let v = vecs.column(i);
            inv += (v * v.transpose()) / vals[i];
        }
    }
    inv
}

/// Result of a generalized symmetric eigenproblem.
#[derive(Debug, Clone)]
pub struct GenEigResult {
    /// Ascending eigenvalues; `+inf` marks directions in the null space of the
    /// left-hand Gram matrix.
    pub eigenvalues: Vector,
    /// Eigenvectors as columns, in the same order.
    pub eigenvectors: Option<Matrix>,
}

/// Reciprocal condition estimate below which the Cholesky route is abandoned.
const COND_FLOOR: f64 = 1e-9;

/// Eigenvalues `mu` with `det(bmat - mu * amat) = 0`, ascending.
///
/// When `amat` is well-conditioned it is reduced by its Cholesky factor. When
/// `amat` is singular or nearly so (e.g. exact collinearity in residual space)
/// the pencil is rewritten as `bmat = theta (amat + bmat)` with
/// `mu = theta / (1 - theta)`; directions with `theta = 1` get `mu = +inf`.
/// An error is returned only if `amat + bmat` is singular as well.
pub fn gen_eig(amat: &Matrix, bmat: &Matrix, vectors: bool) -> Result<GenEigResult> {
    let n = amat.nrows();
    if amat.ncols() != n || bmat.nrows() != n || bmat.ncols() != n {
        return Err(IvError::Dimension(format!(
            "pencil blocks {}x{} and {}x{}",
            amat.nrows(),
            amat.ncols(),
            bmat.nrows(),
            bmat.ncols()
        )));
    }
    if n == 0 {
        return Ok(GenEigResult {
            eigenvalues: Vector::zeros(0),
            eigenvectors: vectors.then(|| Matrix::zeros(0, 0)),
        });
    }
    // Diagonal equilibration leaves the eigenvalues unchanged and removes
    // conditioning problems caused by column scaling alone.
    let scale = Vector::from_iterator(
        n,
        (0..n).map(|i| {
            let d = amat[(i, i)].abs() + bmat[(i, i)].abs();
            if d > 0.0 {
                1.0 / d.sqrt()
            } else {
                1.0
            }
        }),
    );
    let sc = |m: &Matrix| Matrix::from_fn(n, n, |i, j| m[(i, j)] * scale[i] * scale[j]);
    let a = symmetrize(&sc(amat));
    let b = symmetrize(&sc(bmat));
    let mut r = gen_eig_equilibrated(&a, &b, vectors)?;
    if let Some(v) = r.eigenvectors.as_mut() {
        for i in 0..n {
            v.row_mut(i).scale_mut(scale[i]);
        }
    }
    Ok(r)
}

fn gen_eig_equilibrated(a: &Matrix, b: &Matrix, vectors: bool) -> Result<GenEigResult> {
    if let Some(l) = well_conditioned_cholesky(a) {
        let (vals, w) = reduced_eig(&l, b);
        let vecs = vectors.then(|| back_transform(&l, &w));
        return Ok(GenEigResult {
            eigenvalues: vals,
            eigenvectors: vecs,
        });
    }

    let c = a + b;
    let l = Cholesky::new(c)
        .map(|ch| ch.l())
        .ok_or_else(|| IvError::RankDeficient {
            what: "both Gram matrices of the eigenproblem (the pencil is singular)".into(),
        })?;
    let (theta, w) = reduced_eig(&l, b);
    let top = 1.0 - 1e-12;
    let mu = theta.map(|t| {
        if t >= top {
            f64::INFINITY
        } else {
            let t = t.max(0.0);
            t / (1.0 - t)
        }
    });
    let vecs = vectors.then(|| back_transform(&l, &w));
    Ok(GenEigResult {
        eigenvalues: mu,
        eigenvectors: vecs,
    })
}

fn well_conditioned_cholesky(a: &Matrix) -> Option<Matrix> {
    let l = Cholesky::new(a.clone())?.l();
    let d = l.diagonal();
    let (lo, hi) = d
        .iter()
        .fold((f64::INFINITY, 0.0f64), |(lo, hi), v| (lo.min(*v), hi.max(*v)));
    if hi <= 0.0 || (lo / hi).powi(2) < COND_FLOOR {
        None
    } else {
        Some(l)
    }
}

fn reduced_eig(l: &Matrix, b: &Matrix) -> (Vector, Matrix) {
    // L^{-1} B L^{-T}
    let linv_b = l.solve_lower_triangular(b).expect("triangular factor");
    let m = l
        .solve_lower_triangular(&linv_b.transpose())
        .expect("triangular factor");
    sym_eig(&m)
}

fn back_transform(l: &Matrix, w: &Matrix) -> Matrix {
    l.transpose()
        .solve_upper_triangular(w)
        .expect("triangular factor")
}

/// The `count` smallest generalized eigenvalues of `det(bmat - mu amat) = 0`.
///
/// Eigenvalues (dimensionless ratios) within `ZERO_TOL` of zero are clamped
/// to zero; a relative threshold would swallow genuine values when the
/// pencil is nearly singular.
pub fn gen_eig_smallest(amat: &Matrix, bmat: &Matrix, count: usize) -> Result<GenEigResult> {
    if count > amat.nrows() {
        return Err(IvError::Dimension(format!(
            "requested {count} eigenvalues of a {}-dimensional pencil",
            amat.nrows()
        )));
    }
    let full = gen_eig(amat, bmat, true)?;
    let vals = Vector::from_iterator(
        count,
        full.eigenvalues.iter().take(count).map(|&v| {
            if v.abs() <= ZERO_TOL {
                0.0
            } else {
                v
            }
        }),
    );
    let vecs = full.eigenvectors.map(|v| v.columns(0, count).into_owned());
    Ok(GenEigResult {
        eigenvalues: vals,
        eigenvectors: vecs,
    })
}

/// Smallest generalized eigenvalue of `det(bmat - mu amat) = 0`.
pub fn gen_lambda_min(amat: &Matrix, bmat: &Matrix) -> Result<f64> {
    if amat.nrows() == 0 {
        return Ok(f64::INFINITY);
    }
    Ok(gen_eig_smallest(amat, bmat, 1)?.eigenvalues[0])
}

/// The set `{x : (x - center)^T a (x - center) <= bound}`.
#[derive(Debug, Clone, PartialEq)]
pub struct Quadric {
    pub a: Matrix,
    pub center: Vector,
    pub bound: f64,
}

/// Outcome of projecting a quadric onto a subset of coordinates.
#[derive(Debug, Clone, PartialEq)]
pub enum Projected {
    Quadric(Quadric),
    AllSpace,
}

impl Quadric {
    pub fn new(a: Matrix, center: Vector, bound: f64) -> Result<Self> {
        let m = a.nrows();
        if a.ncols() != m || center.len() != m {
            return Err(IvError::Dimension(format!(
                "quadric matrix {}x{} with center of length {}",
                a.nrows(),
                a.ncols(),
                center.len()
            )));
        }
        let scale = a.abs().max().max(1.0);
        if (&a - a.transpose()).abs().max() > 1e-10 * scale {
            return Err(IvError::Domain("quadric matrix is not symmetric".into()));
        }
        Ok(Quadric {
            a: symmetrize(&a),
            center,
            bound,
        })
    }

    /// Builds the quadric `{x : x^T a x + b^T x + c <= 0}` in centred form.
    pub fn from_coefficients(a: Matrix, b: &Vector, c: f64) -> Result<Self> {
        let ainv = pinv_sym(&a);
        let center = -(&ainv * b) * 0.5;
        let bound = (&center.transpose() * &a * &center)[(0, 0)] - c;
        Quadric::new(a, center, bound)
    }

    pub fn dim(&self) -> usize {
        self.center.len()
    }

    /// Value of `(x - center)^T a (x - center) - bound`; members are `<= 0`.
    pub fn eval(&self, x: &Vector) -> f64 {
        let d = x - &self.center;
        (d.transpose() * &self.a * &d)[(0, 0)] - self.bound
    }

    pub fn contains(&self, x: &Vector) -> bool {
        self.eval(x) <= 0.0
    }

    /// Bounded iff the matrix is positive definite (or the set is empty).
    pub fn is_bounded(&self) -> bool {
        self.bound < 0.0 || lambda_min(&self.a) > ZERO_TOL * self.a.abs().max().max(1e-300)
    }

    pub fn is_empty(&self) -> bool {
        self.bound < 0.0 && lambda_min(&self.a) >= 0.0
    }
}

/// Projection of a quadric onto the coordinates in `keep`: the set of `x_keep`
/// for which some completion lies in the quadric.
///
/// If the block of dropped coordinates has a negative eigenvalue the
/// projection is the whole space; otherwise it is the Schur-complement
/// quadric with the same bound.
pub fn project_quadric(q: &Quadric, keep: &[usize]) -> Result<Projected> {
    let m = q.dim();
    let mut seen = vec![false; m];
    for &i in keep {
        if i >= m || seen[i] {
            return Err(IvError::Domain(format!(
                "invalid coordinate selection {keep:?} for dimension {m}"
            )));
        }
        seen[i] = true;
    }
    let drop: Vec<usize> = (0..m).filter(|i| !seen[*i]).collect();
    let center = Vector::from_iterator(keep.len(), keep.iter().map(|&i| q.center[i]));
    if drop.is_empty() {
        return Ok(Projected::Quadric(Quadric {
            a: submatrix(&q.a, keep, keep),
            center,
            bound: q.bound,
        }));
    }
    let a22 = submatrix(&q.a, &drop, &drop);
    let a12 = submatrix(&q.a, keep, &drop);
    let (vals, vecs) = sym_eig(&a22);
    let scale = q.a.abs().max().max(1e-300);
    if vals[0] < -ZERO_TOL * scale {
        return Ok(Projected::AllSpace);
    }
    // A null direction of the dropped block that couples to the kept block makes
    // the minimum over dropped coordinates -inf for almost every kept point.
    for i in 0..vals.len() {
        if vals[i].abs() <= ZERO_TOL * scale {
            let coupling = (&a12 * vecs.column(i)).norm();
            if coupling > 1e-8 * scale {
                return Ok(Projected::AllSpace);
            }
        }
    }
    let a11 = submatrix(&q.a, keep, keep);
    let schur = &a11 - &a12 * pinv_sym(&a22) * a12.transpose();
    Ok(Projected::Quadric(Quadric {
        a: symmetrize(&schur),
        center,
        bound: q.bound,
    }))
}

/// Definiteness of `X^T (kappa P_Z + (1 - kappa) Id) X`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Definiteness {
    PosDef,
    SemiDefSingular,
    Indefinite,
}

/// Classifies `X^T (kappa P_Z + (1 - kappa) Id) X` by comparing `kappa` with
/// `lambda_1 = lambda_min((X^T M_Z X)^{-1} X^T X)`.
pub fn kappa_definiteness(x: &Matrix, z: &Matrix, kappa: f64) -> Result<(Definiteness, f64)> {
    check_rows(z, x)?;
    let px = proj(z, x)?;
    let mx = x - &px;
    let gm = mx.transpose() * &mx;
    let gx = x.transpose() * x;
    if Cholesky::new(symmetrize(&gm)).is_none() || rank(&mx) < x.ncols() {
        return Err(IvError::RankDeficient {
            what: "M_Z X (residual Gram matrix of the regressors)".into(),
        });
    }
    let lambda1 = gen_lambda_min(&gm, &gx)?;
    let tol = ZERO_TOL * lambda1.abs().max(1.0);
    let class = if (kappa - lambda1).abs() <= tol {
        Definiteness::SemiDefSingular
    } else if kappa < lambda1 {
        Definiteness::PosDef
    } else {
        Definiteness::Indefinite
    };
    Ok((class, lambda1))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(n: usize, m: usize, seed: u64) -> Matrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Matrix::from_fn(n, m, |_, _| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn identity_projection() {
        let b = random(3, 2, 1);
        let p = proj(&Matrix::identity(3, 3), &b).unwrap();
        assert!((p - b).abs().max() < 1e-12);
    }

    #[test]
    fn zero_projection() {
        let b = random(4, 2, 2);
        assert_eq!(proj(&Matrix::zeros(4, 3), &b).unwrap(), Matrix::zeros(4, 2));
        assert!((oproj(&Matrix::zeros(4, 3), &b).unwrap() - b).abs().max() < 1e-15);
    }

    #[test]
    fn column_space_elements_reproduced() {
        let a = random(10, 3, 3);
        let w = random(3, 4, 4);
        let aw = &a * w;
        assert!((proj(&a, &aw).unwrap() - &aw).abs().max() < 1e-10);
        assert!(oproj(&a, &a).unwrap().abs().max() < 1e-12);
    }

    #[test]
    fn dimension_mismatch_is_reported() {
        assert!(matches!(
            proj(&random(4, 2, 1), &random(5, 1, 1)),
            Err(IvError::Dimension(_))
        ));
    }

    #[test]
    fn gen_eig_small_examples() {
        let b = Matrix::from_diagonal(&Vector::from_vec(vec![3.0, 1.0, 2.0]));
        let r = gen_eig_smallest(&Matrix::identity(3, 3), &b, 2).unwrap();
        assert!((r.eigenvalues[0] - 1.0).abs() < 1e-12);
        assert!((r.eigenvalues[1] - 2.0).abs() < 1e-12);

        let a = Matrix::identity(2, 2) * 2.0;
        let b = Matrix::from_diagonal(&Vector::from_vec(vec![4.0, 8.0]));
        let r = gen_eig_smallest(&a, &b, 1).unwrap();
        assert!((r.eigenvalues[0] - 2.0).abs() < 1e-12);

        // X^T M_Z X = Id, X^T P_Z X = diag(0.25, 1, 1)
        let b = Matrix::from_diagonal(&Vector::from_vec(vec![0.25, 1.0, 1.0]));
        let r = gen_eig_smallest(&Matrix::identity(3, 3), &b, 1).unwrap();
        assert!((r.eigenvalues[0] - 0.25).abs() < 1e-12);
    }

    #[test]
    fn gen_eig_singular_left_matrix_yields_infinite_direction() {
        // A = diag(1, 0): the second direction has infinite eigenvalue.
        let a = Matrix::from_diagonal(&Vector::from_vec(vec![1.0, 0.0]));
        let b = Matrix::from_diagonal(&Vector::from_vec(vec![0.5, 2.0]));
        let r = gen_eig(&a, &b, false).unwrap();
        assert!((r.eigenvalues[0] - 0.5).abs() < 1e-12);
        assert!(r.eigenvalues[1].is_infinite());
        // Both singular: an error names the pencil.
        let z = Matrix::from_diagonal(&Vector::from_vec(vec![1.0, 0.0]));
        assert!(matches!(
            gen_eig(&z, &z, false),
            Err(IvError::RankDeficient { .. })
        ));
    }

    #[test]
    fn gen_eig_vectors_solve_pencil() {
        let x = random(30, 4, 7);
        let a = x.transpose() * &x;
        let y = random(30, 4, 8);
        let b = y.transpose() * &y;
        let r = gen_eig(&a, &b, true).unwrap();
        let v = r.eigenvectors.unwrap();
        for i in 0..4 {
            let res = &b * v.column(i) - (&a * v.column(i)) * r.eigenvalues[i];
            assert!(res.norm() < 1e-9 * b.norm());
        }
    }

    #[test]
    fn project_quadric_cases() {
        let a = Matrix::from_diagonal(&Vector::from_vec(vec![2.0, 3.0]));
        let q = Quadric::new(a.clone(), Vector::from_vec(vec![1.0, -1.0]), 4.0).unwrap();
        assert_eq!(project_quadric(&q, &[0, 1]).unwrap(), Projected::Quadric(q.clone()));

        let ind = Matrix::from_diagonal(&Vector::from_vec(vec![1.0, -1.0]));
        let q = Quadric::new(ind, Vector::zeros(2), 1.0).unwrap();
        assert_eq!(project_quadric(&q, &[0]).unwrap(), Projected::AllSpace);
    }

    #[test]
    fn kappa_definiteness_boundaries() {
        let x = random(40, 2, 11);
        let z = random(40, 4, 12);
        let (c0, lambda1) = kappa_definiteness(&x, &z, 0.0).unwrap();
        assert_eq!(c0, Definiteness::PosDef);
        let (c1, _) = kappa_definiteness(&x, &z, lambda1).unwrap();
        assert_eq!(c1, Definiteness::SemiDefSingular);
        let (c2, _) = kappa_definiteness(&x, &z, lambda1 + 0.1).unwrap();
        assert_eq!(c2, Definiteness::Indefinite);
        // direct eigenvalue oracle
        let px = proj(&z, &x).unwrap();
        let k = lambda1 + 0.1;
        let m = x.transpose() * (&px * k + &x * (1.0 - k));
        assert!(lambda_min(&m) < 0.0);
        let k = lambda1 - 0.1;
        let m = x.transpose() * (&px * k + &x * (1.0 - k));
        assert!(lambda_min(&m) > 0.0);
    }

    /// Minimum of the quadric form over the dropped coordinates on a grid.
    fn grid_min(q: &Quadric, x0: f64, drop_dims: usize) -> f64 {
        let pts: Vec<f64> = (0..201).map(|i| -10.0 + 0.1 * i as f64).collect();
        let mut best = f64::INFINITY;
        let mut idx = vec![0usize; drop_dims];
        loop {
            let mut x = Vector::zeros(q.dim());
            x[0] = x0;
            for (d, &i) in idx.iter().enumerate() {
                x[d + 1] = q.center[d + 1] + pts[i];
            }
            best = best.min(q.eval(&x));
            let mut d = 0;
            loop {
                if d == drop_dims {
                    return best;
                }
                idx[d] += 1;
                if idx[d] < pts.len() {
                    break;
                }
                idx[d] = 0;
                d += 1;
            }
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn projection_is_idempotent_and_complementary(seed in 0u64..1000, n in 5usize..20, m in 1usize..4) {
            let a = random(n, m, seed);
            let b = random(n, 3, seed + 1);
            let p = proj(&a, &b).unwrap();
            let pp = proj(&a, &p).unwrap();
            prop_assert!((&pp - &p).abs().max() < 1e-10);
            let o = oproj(&a, &b).unwrap();
            prop_assert!((&p + &o - &b).abs().max() < 1e-10 * b.abs().max().max(1.0));
            prop_assert!((a.transpose() * &o).abs().max() < 1e-8 * b.abs().max().max(1.0) * n as f64);
        }

        #[test]
        fn gen_eig_with_identity_is_ordinary_eig(seed in 0u64..1000, m in 1usize..6) {
            let x = random(m + 3, m, seed);
            let b = x.transpose() * x;
            let r = gen_eig(&Matrix::identity(m, m), &b, false).unwrap();
            let (vals, _) = sym_eig(&b);
            for i in 0..m {
                prop_assert!((r.eigenvalues[i] - vals[i]).abs() < 1e-10 * vals[m - 1].abs().max(1.0));
            }
        }

        #[test]
        fn gen_eig_invariant_under_instrument_basis_change(seed in 0u64..1000) {
            let n = 25;
            let z = random(n, 3, seed);
            let x = random(n, 2, seed + 7);
            let t = random(3, 3, seed + 9) + Matrix::identity(3, 3) * 2.0;
            let zt = &z * t;
            let eig = |zz: &Matrix| {
                let px = proj(zz, &x).unwrap();
                let mx = &x - &px;
                gen_eig(&(mx.transpose() * &mx), &(px.transpose() * &px), false).unwrap().eigenvalues
            };
            let e1 = eig(&z);
            let e2 = eig(&zt);
            prop_assert!((e1 - e2).abs().max() < 1e-8);
        }

        #[test]
        fn project_quadric_matches_grid_minimisation(seed in 0u64..1000, dims in 2usize..4) {
            let l = random(dims, dims, seed);
            let a = &l * l.transpose() + Matrix::identity(dims, dims) * 0.5;
            let center = random(dims, 1, seed + 3).column(0).into_owned();
            let q = Quadric::new(a, center, 1.0).unwrap();
            let p = match project_quadric(&q, &[0]).unwrap() {
                Projected::Quadric(p) => p,
                Projected::AllSpace => panic!("positive definite input"),
            };
            let half = (p.bound / p.a[(0, 0)]).sqrt();
            for end in [p.center[0] - half, p.center[0] + half] {
                // on the boundary the minimum over dropped coordinates is zero
                let g = grid_min(&q, end, dims - 1);
                prop_assert!(g.abs() < 1e-2, "grid minimum {} at {}", g, end);
                let inside = grid_min(&q, p.center[0] + 0.99 * (end - p.center[0]), dims - 1);
                prop_assert!(inside < 0.0);
                let outside = grid_min(&q, p.center[0] + 1.01 * (end - p.center[0]), dims - 1);
                prop_assert!(outside > -1e-4);
            }
        }
    }
}
