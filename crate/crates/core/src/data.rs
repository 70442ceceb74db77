//! Data ingestion (fixed-width and CSV), role assignment, the Card NLS
//! derived columns, and partialling out of included exogenous covariates.

use std::collections::HashSet;
use std::fs;
use std::path::Path;

use log::info;

use crate::error::{IvError, Result};
use crate::linalg::{orth_basis_with_drops, proj_onto_basis, Matrix, Vector};

/// A fixed-width field, 1-based with inclusive bounds.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ColSpec {
    pub name: String,
    pub from: usize,
    pub to: usize,
}

impl ColSpec {
    pub fn new(name: &str, from: usize, to: usize) -> Self {
        ColSpec {
            name: name.to_string(),
            from,
            to,
        }
    }
}

/// Column layout of the Card NLS extract (`nls.dat`).
pub fn card_colspec() -> Vec<ColSpec> {
    let mut s = vec![
        ColSpec::new("id", 1, 5),
        ColSpec::new("nearc2", 7, 7),
        ColSpec::new("nearc4", 10, 10),
        ColSpec::new("nearc4a", 12, 13),
        ColSpec::new("nearc4b", 15, 16),
        ColSpec::new("ed76", 18, 19),
        ColSpec::new("ed66", 21, 22),
        ColSpec::new("age76", 24, 25),
        ColSpec::new("daded", 27, 31),
        ColSpec::new("nodaded", 33, 33),
        ColSpec::new("momed", 35, 39),
        ColSpec::new("nomomed", 41, 41),
        ColSpec::new("weight", 43, 54),
        ColSpec::new("momdad14", 56, 56),
        ColSpec::new("sinmom14", 58, 58),
        ColSpec::new("step14", 60, 60),
    ];
    for i in 1..=9 {
        let c = 60 + 2 * i;
        s.push(ColSpec::new(&format!("reg66{i}"), c, c));
    }
    let rest: &[(&str, usize, usize)] = &[
        ("south66", 80, 80),
        ("work76", 82, 82),
        ("work78", 84, 84),
        ("lwage76", 86, 97),
        ("lwage78", 99, 110),
        ("famed", 112, 112),
        ("black", 114, 114),
        ("smsa76r", 116, 116),
        ("smsa78r", 118, 118),
        ("reg76r", 120, 120),
        ("reg78r", 122, 122),
        ("reg80r", 124, 124),
        ("smsa66r", 126, 126),
        ("wage76", 128, 132),
        ("wage78", 134, 138),
        ("wage80", 140, 144),
        ("noint78", 146, 146),
        ("noint80", 148, 148),
        ("enroll76", 150, 150),
        ("enroll78", 152, 152),
        ("enroll80", 154, 154),
        ("kww", 156, 157),
        ("iq", 159, 161),
        ("marsta76", 163, 163),
        ("marsta78", 165, 165),
        ("marsta80", 167, 167),
        ("libcrd14", 169, 169),
    ];
    s.extend(rest.iter().map(|(n, f, t)| ColSpec::new(n, *f, *t)));
    s
}

/// Column-oriented numeric table with missing values.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Table {
    names: Vec<String>,
    columns: Vec<Vec<Option<f64>>>,
}

impl Table {
    pub fn new(names: Vec<String>, columns: Vec<Vec<Option<f64>>>) -> Result<Self> {
        if names.len() != columns.len() {
            return Err(IvError::Dimension(format!(
                "{} column names for {} columns",
                names.len(),
                columns.len()
            )));
        }
        if let Some(len) = columns.first().map(Vec::len) {
            if columns.iter().any(|c| c.len() != len) {
                return Err(IvError::Dimension("ragged table columns".into()));
            }
        }
        let mut seen = HashSet::new();
        for n in &names {
            if !seen.insert(n) {
                return Err(IvError::Config(format!("duplicate column `{n}`")));
            }
        }
        Ok(Table { names, columns })
    }

    pub fn nrows(&self) -> usize {
        self.columns.first().map_or(0, Vec::len)
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn column(&self, name: &str) -> Result<&[Option<f64>]> {
        self.names
            .iter()
            .position(|n| n == name)
            .map(|i| self.columns[i].as_slice())
            .ok_or_else(|| IvError::MissingColumn(name.to_string()))
    }

    /// Adds or replaces a column.
    pub fn set_column(&mut self, name: &str, values: Vec<Option<f64>>) -> Result<()> {
        if !self.columns.is_empty() && values.len() != self.nrows() {
            return Err(IvError::Dimension(format!(
                "column `{name}` has {} rows, table has {}",
                values.len(),
                self.nrows()
            )));
        }
        match self.names.iter().position(|n| n == name) {
            Some(i) => self.columns[i] = values,
            None => {
                self.names.push(name.to_string());
                self.columns.push(values);
            }
        }
        Ok(())
    }

    /// Keeps the rows for which `keep` is true.
    pub fn filter_rows(&self, keep: &[bool]) -> Table {
        let columns = self
            .columns
            .iter()
            .map(|c| {
                c.iter()
                    .zip(keep)
                    .filter(|(_, k)| **k)
                    .map(|(v, _)| *v)
                    .collect()
            })
            .collect();
        Table {
            names: self.names.clone(),
            columns,
        }
    }
}

fn check_colspec(spec: &[ColSpec]) -> Result<()> {
    let mut sorted: Vec<&ColSpec> = spec.iter().collect();
    sorted.sort_by_key(|s| s.from);
    for s in &sorted {
        if s.from == 0 || s.from > s.to {
            return Err(IvError::Config(format!(
                "column `{}` has invalid range {}-{}",
                s.name, s.from, s.to
            )));
        }
    }
    for w in sorted.windows(2) {
        if w[1].from <= w[0].to {
            return Err(IvError::Config(format!(
                "columns `{}` and `{}` overlap",
                w[0].name, w[1].name
            )));
        }
    }
    Ok(())
}

/// Parses fixed-width text. Blank fields and `na_token` are missing values.
pub fn parse_fixed_width(text: &str, spec: &[ColSpec], na_token: &str) -> Result<Table> {
    check_colspec(spec)?;
    let mut columns: Vec<Vec<Option<f64>>> = vec![Vec::new(); spec.len()];
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let bytes = line.as_bytes();
        for (s, col) in spec.iter().zip(columns.iter_mut()) {
            let lo = (s.from - 1).min(bytes.len());
            let hi = s.to.min(bytes.len());
            let field = std::str::from_utf8(&bytes[lo..hi])
                .map_err(|_| IvError::Parse {
                    line: lineno + 1,
                    column: s.name.clone(),
                    value: String::from_utf8_lossy(&bytes[lo..hi]).into_owned(),
                })?
                .trim();
            col.push(parse_field(field, na_token, lineno + 1, &s.name)?);
        }
    }
    Table::new(spec.iter().map(|s| s.name.clone()).collect(), columns)
}

fn parse_field(field: &str, na_token: &str, line: usize, column: &str) -> Result<Option<f64>> {
    if field.is_empty() || field == na_token {
        return Ok(None);
    }
    field
        .parse::<f64>()
        .map(Some)
        .map_err(|_| IvError::Parse {
            line,
            column: column.to_string(),
            value: field.to_string(),
        })
}

pub fn read_fixed_width(path: &Path, spec: &[ColSpec], na_token: &str) -> Result<Table> {
    parse_fixed_width(&fs::read_to_string(path)?, spec, na_token)
}

/// Reads a CSV file with a header row. Empty cells, `.`, `NA` and `nan` are
/// missing values.
pub fn read_csv(path: &Path) -> Result<Table> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_path(path)?;
    let names: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();
    let mut columns: Vec<Vec<Option<f64>>> = vec![Vec::new(); names.len()];
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec?;
        for (j, col) in columns.iter_mut().enumerate() {
            let field = rec.get(j).unwrap_or("");
            let v = match field {
                "" | "." | "NA" | "nan" | "NaN" => None,
                f => Some(f.parse::<f64>().map_err(|_| IvError::Parse {
                    line: i + 2,
                    column: names[j].clone(),
                    value: f.to_string(),
                })?),
            };
            col.push(v);
        }
    }
    Table::new(names, columns)
}

/// Adds the derived Card columns and drops rows with missing `lwage76`.
pub fn card_frame(table: &Table) -> Result<Table> {
    let keep: Vec<bool> = table.column("lwage76")?.iter().map(Option::is_some).collect();
    let mut t = table.filter_rows(&keep);
    let age = t.column("age76")?.to_vec();
    let ed = t.column("ed76")?.to_vec();
    let famed = t.column("famed")?.to_vec();
    let exp: Vec<Option<f64>> = age
        .iter()
        .zip(&ed)
        .map(|(a, e)| Some((*a)? - (*e)? - 6.0))
        .collect();
    let sq = |v: &[Option<f64>]| v.iter().map(|x| x.map(|x| x * x)).collect::<Vec<_>>();
    t.set_column("exp762", sq(&exp))?;
    t.set_column("exp76", exp)?;
    t.set_column("age762", sq(&age))?;
    for i in 1..=8 {
        let f = famed
            .iter()
            .map(|v| Some(if *v == Some(i as f64) { 1.0 } else { 0.0 }))
            .collect();
        t.set_column(&format!("f{i}"), f)?;
    }
    Ok(t)
}

/// Family-background covariates of the Card model.
pub fn card_family() -> Vec<String> {
    let mut v: Vec<String> = [
        "daded", "momed", "nodaded", "nomomed", "famed", "momdad14", "sinmom14",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    // f8 is left out: f1 + ... + f8 = 1
    v.extend((1..=7).map(|i| format!("f{i}")));
    v
}

/// Race, urban and region indicators of the Card model.
pub fn card_indicators() -> Vec<String> {
    let mut v: Vec<String> = ["black", "smsa66r", "smsa76r", "reg76r"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    // reg669 is left out: reg661 + ... + reg669 = 1
    v.extend((1..=8).map(|i| format!("reg66{i}")));
    v
}

/// Variable roles: column names for each block.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Roles {
    pub y: String,
    pub x: Vec<String>,
    pub w: Vec<String>,
    pub c: Vec<String>,
    pub d: Vec<String>,
    pub z: Vec<String>,
    pub intercept: bool,
}

impl Roles {
    /// The Card model: returns to schooling with experience terms.
    pub fn card() -> Self {
        let strs = |v: &[&str]| v.iter().map(|s| s.to_string()).collect::<Vec<_>>();
        let mut c = card_family();
        c.extend(card_indicators());
        Roles {
            y: "lwage76".into(),
            x: strs(&["ed76", "exp76", "exp762"]),
            w: vec![],
            c,
            d: vec![],
            z: strs(&["nearc4a", "nearc4b", "nearc2", "age76", "age762"]),
            intercept: true,
        }
    }

    fn all(&self) -> Vec<&String> {
        std::iter::once(&self.y)
            .chain(&self.x)
            .chain(&self.w)
            .chain(&self.c)
            .chain(&self.d)
            .chain(&self.z)
            .collect()
    }
}

/// Column names of each block of a [`DataSet`].
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Names {
    pub y: String,
    pub x: Vec<String>,
    pub w: Vec<String>,
    pub c: Vec<String>,
    pub d: Vec<String>,
    pub z: Vec<String>,
}

/// Column means removed when the intercept was partialled out. They let fits on
/// residualized data still report the intercept `ybar - sbar' beta`.
#[derive(Debug, Clone, PartialEq)]
pub struct Offsets {
    pub y: f64,
    pub x: Vector,
    pub w: Vector,
    pub d: Vector,
}

/// Observations of the linear IV model
/// `y = X beta + W gamma + C alpha + D delta + eps` with instruments `Z`.
#[derive(Debug, Clone, PartialEq)]
pub struct DataSet {
    pub y: Vector,
    pub x: Matrix,
    pub w: Matrix,
    pub c: Matrix,
    pub d: Matrix,
    pub z: Matrix,
    pub intercept: bool,
    pub names: Names,
    /// Degrees of freedom consumed by an earlier [`residualize`]; one for a
    /// partialled-out intercept.
    pub absorbed: usize,
    pub offsets: Option<Offsets>,
}

fn default_names(prefix: &str, m: usize) -> Vec<String> {
    (0..m).map(|i| format!("{prefix}{i}")).collect()
}

impl DataSet {
    /// Builds and validates a data set with generated column names.
    pub fn new(
        y: Vector,
        x: Matrix,
        w: Matrix,
        c: Matrix,
        d: Matrix,
        z: Matrix,
        intercept: bool,
    ) -> Result<Self> {
        let names = Names {
            y: "y".into(),
            x: default_names("x", x.ncols()),
            w: default_names("w", w.ncols()),
            c: default_names("c", c.ncols()),
            d: default_names("d", d.ncols()),
            z: default_names("z", z.ncols()),
        };
        Self::with_names(y, x, w, c, d, z, intercept, names)
    }

    #[allow(clippy::too_many_arguments)]
    pub fn with_names(
        y: Vector,
        x: Matrix,
        w: Matrix,
        c: Matrix,
        d: Matrix,
        z: Matrix,
        intercept: bool,
        names: Names,
    ) -> Result<Self> {
        let ds = DataSet {
            y,
            x,
            w,
            c,
            d,
            z,
            intercept,
            names,
            absorbed: 0,
            offsets: None,
        };
        ds.validate()?;
        Ok(ds)
    }

    fn validate(&self) -> Result<()> {
        let n = self.n();
        let blocks = [
            ("X", &self.x, &self.names.x),
            ("W", &self.w, &self.names.w),
            ("C", &self.c, &self.names.c),
            ("D", &self.d, &self.names.d),
            ("Z", &self.z, &self.names.z),
        ];
        for (label, m, names) in blocks {
            if m.nrows() != n {
                return Err(IvError::Dimension(format!(
                    "block {label} has {} rows, y has {n}",
                    m.nrows()
                )));
            }
            if names.len() != m.ncols() {
                return Err(IvError::Dimension(format!(
                    "block {label} has {} columns but {} names",
                    m.ncols(),
                    names.len()
                )));
            }
            if m.iter().any(|v| !v.is_finite()) {
                return Err(IvError::Domain(format!("block {label} has non-finite entries")));
            }
        }
        if self.y.iter().any(|v| !v.is_finite()) {
            return Err(IvError::Domain("y has non-finite entries".into()));
        }
        let mut seen = HashSet::new();
        seen.insert(&self.names.y);
        for name in self
            .names
            .x
            .iter()
            .chain(&self.names.w)
            .chain(&self.names.c)
            .chain(&self.names.d)
            .chain(&self.names.z)
        {
            if !seen.insert(name) {
                return Err(IvError::Config(format!(
                    "column `{name}` is assigned to more than one role"
                )));
            }
        }
        Ok(())
    }

    /// Builds a data set from table columns. Rows with a missing value in any
    /// used column are dropped.
    pub fn from_table(table: &Table, roles: &Roles) -> Result<Self> {
        let mut seen = HashSet::new();
        for name in roles.all() {
            if !seen.insert(name) {
                return Err(IvError::Config(format!(
                    "column `{name}` is assigned to more than one role"
                )));
            }
        }
        if roles.y.is_empty() {
            return Err(IvError::Config("no outcome column given".into()));
        }
        let cols: Vec<&[Option<f64>]> = roles
            .all()
            .iter()
            .map(|n| table.column(n))
            .collect::<Result<_>>()?;
        let keep: Vec<bool> = (0..table.nrows())
            .map(|i| cols.iter().all(|c| c[i].is_some()))
            .collect();
        let dropped = keep.iter().filter(|k| !**k).count();
        if dropped > 0 {
            info!("dropped {dropped} rows with missing values in used columns");
        }
        let t = table.filter_rows(&keep);
        let n = t.nrows();
        let block = |names: &[String]| -> Result<Matrix> {
            let mut m = Matrix::zeros(n, names.len());
            for (j, name) in names.iter().enumerate() {
                for (i, v) in t.column(name)?.iter().enumerate() {
                    m[(i, j)] = v.expect("missing rows were filtered");
                }
            }
            Ok(m)
        };
        let y = block(std::slice::from_ref(&roles.y))?.column(0).into_owned();
        let names = Names {
            y: roles.y.clone(),
            x: roles.x.clone(),
            w: roles.w.clone(),
            c: roles.c.clone(),
            d: roles.d.clone(),
            z: roles.z.clone(),
        };
        Self::with_names(
            y,
            block(&roles.x)?,
            block(&roles.w)?,
            block(&roles.c)?,
            block(&roles.d)?,
            block(&roles.z)?,
            roles.intercept,
            names,
        )
    }

    pub fn n(&self) -> usize {
        self.y.len()
    }
    pub fn mx(&self) -> usize {
        self.x.ncols()
    }
    pub fn mw(&self) -> usize {
        self.w.ncols()
    }
    pub fn mc(&self) -> usize {
        self.c.ncols()
    }
    pub fn md(&self) -> usize {
        self.d.ncols()
    }
    pub fn k(&self) -> usize {
        self.z.ncols()
    }

    /// Number of exogenous nuisance columns, counting the intercept.
    pub fn n_exog(&self) -> usize {
        self.mc() + usize::from(self.intercept)
    }

    /// `[1, C]` (the constant only if the intercept is on).
    pub fn exog_matrix(&self) -> Matrix {
        let n = self.n();
        let mut e = Matrix::zeros(n, self.n_exog());
        let off = usize::from(self.intercept);
        if self.intercept {
            e.column_mut(0).fill(1.0);
        }
        if self.mc() > 0 {
            e.columns_mut(off, self.mc()).copy_from(&self.c);
        }
        e
    }

    /// Requires at least as many instruments as endogenous regressors.
    pub fn check_identified(&self) -> Result<()> {
        if self.k() < self.mx() + self.mw() {
            return Err(IvError::Config(format!(
                "{} instruments for {} endogenous regressors (need k >= m)",
                self.k(),
                self.mx() + self.mw()
            )));
        }
        Ok(())
    }

    /// Moves the nuisance endogenous block W into X (after the X columns).
    pub fn merge_w_into_x(&self) -> DataSet {
        let mut out = self.clone();
        out.x = crate::linalg::hstack(self.n(), &[&self.x, &self.w]);
        out.w = Matrix::zeros(self.n(), 0);
        out.names.x.extend(self.names.w.iter().cloned());
        out.names.w.clear();
        if let Some(o) = &mut out.offsets {
            o.x = Vector::from_iterator(
                o.x.len() + o.w.len(),
                o.x.iter().chain(o.w.iter()).copied(),
            );
            o.w = Vector::zeros(0);
        }
        out
    }
}

fn col_means(m: &Matrix) -> Vector {
    Vector::from_iterator(m.ncols(), m.column_iter().map(|c| c.mean()))
}

/// Partials the included exogenous covariates (and the intercept) out of every
/// other block: each block `B` becomes `M_[C, 1] B`, `C` is emptied and the
/// intercept flag cleared. One degree of freedom is recorded as absorbed for
/// the intercept. A data set with nothing to partial out is returned unchanged.
pub fn residualize(ds: &DataSet) -> Result<DataSet> {
    if ds.n_exog() == 0 {
        return Ok(ds.clone());
    }
    let e = ds.exog_matrix();
    let (q, dropped) = orth_basis_with_drops(&e);
    if !dropped.is_empty() {
        let off = usize::from(ds.intercept);
        let names: Vec<String> = dropped
            .iter()
            .map(|&j| {
                if j < off {
                    "intercept".to_string()
                } else {
                    ds.names.c[j - off].clone()
                }
            })
            .collect();
        return Err(IvError::RankDeficient {
            what: format!(
                "exogenous covariates: {} collinear with earlier columns",
                names.join(", ")
            ),
        });
    }
    let m = |b: &Matrix| b - proj_onto_basis(&q, b);
    let ymat = Matrix::from_column_slice(ds.n(), 1, ds.y.as_slice());
    let offsets = if ds.intercept {
        Some(Offsets {
            y: ds.y.mean(),
            x: col_means(&ds.x),
            w: col_means(&ds.w),
            d: col_means(&ds.d),
        })
    } else {
        ds.offsets.clone()
    };
    let mut names = ds.names.clone();
    names.c.clear();
    Ok(DataSet {
        y: m(&ymat).column(0).into_owned(),
        x: m(&ds.x),
        w: m(&ds.w),
        c: Matrix::zeros(ds.n(), 0),
        d: m(&ds.d),
        z: m(&ds.z),
        intercept: false,
        names,
        absorbed: ds.absorbed + usize::from(ds.intercept),
        offsets,
    })
}

/// Loads the Card extract with the standard roles.
pub fn build_card_dataset(table: &Table) -> Result<DataSet> {
    DataSet::from_table(&card_frame(table)?, &Roles::card())
}

/// Reads and prepares the Card fixed-width file.
pub fn load_card_table(path: &Path) -> Result<Table> {
    card_frame(&read_fixed_width(path, &card_colspec(), ".")?)
}
