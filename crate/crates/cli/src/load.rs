use std::collections::HashSet;

use anyhow::{Context, Result};
use ivcore::data::{load_card_table, read_csv, residualize, DataSet, Roles, Table};
use ivcore::IvError;

use crate::args::{split_list, DataArgs, Format};

/// Role assignment from the flags; the Card format starts from the standard
/// Card model and each given flag replaces its block.
pub fn roles(args: &DataArgs) -> Result<Roles> {
    let mut roles = match args.format {
        Format::Card => Roles::card(),
        Format::Csv => Roles::default(),
    };
    if let Some(y) = &args.y {
        let ys = split_list(y);
        if ys.len() != 1 {
            return Err(IvError::Config(format!("--y takes a single column, got `{y}`")).into());
        }
        roles.y = ys[0].clone();
    }
    let set = |flag: &Option<String>, block: &mut Vec<String>| {
        if let Some(v) = flag {
            *block = split_list(v);
        }
    };
    set(&args.x, &mut roles.x);
    set(&args.w, &mut roles.w);
    set(&args.c, &mut roles.c);
    set(&args.d, &mut roles.d);
    set(&args.z, &mut roles.z);
    roles.intercept = !args.no_intercept;
    if roles.y.is_empty() {
        return Err(IvError::Config("no outcome column: pass --y".into()).into());
    }
    let mut seen = HashSet::new();
    for name in std::iter::once(&roles.y).chain(&roles.x).chain(&roles.w).chain(&roles.c).chain(&roles.d).chain(&roles.z) {
        if !seen.insert(name.as_str()) {
            return Err(IvError::Config(format!("column `{name}` is assigned to more than one role")).into());
        }
    }
    Ok(roles)
}

pub fn table(args: &DataArgs) -> Result<Table> {
    let t = match args.format {
        Format::Card => load_card_table(&args.input),
        Format::Csv => read_csv(&args.input),
    };
    t.with_context(|| format!("reading {}", args.input.display()))
}

pub fn dataset(args: &DataArgs) -> Result<DataSet> {
    let roles = roles(args)?;
    let table = table(args)?;
    let ds = DataSet::from_table(&table, &roles).context("assigning variable roles")?;
    log::info!("{} observations, k = {}, mx = {}, mw = {}, md = {}", ds.n(), ds.k(), ds.mx(), ds.mw(), ds.md());
    if args.explicit_c {
        Ok(ds)
    } else {
        Ok(residualize(&ds)?)
    }
}
