#![allow(dead_code)]

use std::path::PathBuf;

use ivcore::data::{load_card_table, residualize, DataSet, Roles, Table};
use ivcore::linalg::{Matrix, Vector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub fn card_path() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data/card_nls.dat")
}

pub fn card_table() -> Table {
    load_card_table(&card_path()).expect("Card extract")
}

/// Endogenous `[ed76, exp76, exp762]`, family background partialled out.
pub fn card_full(t: &Table) -> DataSet {
    residualize(&DataSet::from_table(t, &Roles::card()).unwrap()).unwrap()
}

/// `ed76` of interest, experience terms as nuisance, residualized.
pub fn card_subvector(t: &Table) -> DataSet {
    let mut roles = Roles::card();
    roles.w = roles.x.split_off(1);
    residualize(&DataSet::from_table(t, &roles).unwrap()).unwrap()
}

/// Explicit covariates with all three endogenous regressors.
pub fn card_explicit(t: &Table) -> DataSet {
    DataSet::from_table(t, &Roles::card()).unwrap()
}

/// Explicit covariates, `black` as included exogenous variable of interest and
/// all endogenous regressors as nuisance.
pub fn card_black(t: &Table) -> DataSet {
    let mut roles = Roles::card();
    roles.w = std::mem::take(&mut roles.x);
    roles.c.retain(|c| c != "black");
    roles.d = vec!["black".into()];
    DataSet::from_table(t, &roles).unwrap()
}

/// Linear IV model `y = S beta + eps`, `S = Z Pi + V`, `Pi = strength * ones / sqrt(n)`
/// scaled per column, with `corr(eps, V_j) = rho`.
pub struct Design {
    pub n: usize,
    pub k: usize,
    pub mx: usize,
    pub mw: usize,
    pub strength: f64,
    pub rho: f64,
}

impl Design {
    pub fn draw(&self, rng: &mut ChaCha8Rng, beta: &[f64]) -> DataSet {
        let (n, k, m) = (self.n, self.k, self.mx + self.mw);
        let mut g = |r: usize, c: usize| Matrix::from_fn(r, c, |_, _| rng.sample::<f64, _>(StandardNormal));
        let z = g(n, k);
        let common = g(n, 1);
        let idio = g(n, m);
        let own = g(n, 1);
        let pi = Matrix::from_fn(k, m, |i, j| if (i + j) % m == 0 || k == 1 { 1.0 } else { 0.5 })
            * (self.strength / (n as f64).sqrt());
        let r = self.rho;
        let eps = &common * r + &own * (1.0 - r * r).sqrt();
        let v = Matrix::from_fn(n, m, |i, j| r * common[(i, 0)] + (1.0 - r * r).sqrt() * idio[(i, j)]);
        let s = &z * pi + v;
        let b = Vector::from_iterator(m, (0..m).map(|j| beta.get(j).copied().unwrap_or(1.0)));
        let y = (&s * b + eps).column(0).into_owned();
        DataSet::new(
            y,
            s.columns(0, self.mx).into_owned(),
            s.columns(self.mx, self.mw).into_owned(),
            Matrix::zeros(n, 0),
            Matrix::zeros(n, 0),
            z,
            false,
        )
        .unwrap()
    }
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Kolmogorov-Smirnov distance of a sample from U(0, 1).
pub fn ks_uniform(ps: &[f64]) -> f64 {
    let mut v = ps.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len() as f64;
    v.iter()
        .enumerate()
        .map(|(i, &p)| (p - i as f64 / n).abs().max(((i + 1) as f64 / n - p).abs()))
        .fold(0.0, f64::max)
}

pub fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol
}
