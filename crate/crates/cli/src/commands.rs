use std::fmt::Write as _;
use std::path::Path;

use anyhow::{Context, Result};
use ivcore::confsets::{
    bounded_empty_predicates, equivalent_levels, invert, p_value_curve, ConfidenceSet, SetKind,
};
use ivcore::data::DataSet;
use ivcore::estimators::{fit_kclass, KClassSpec};
use ivcore::misspec::{j_test, rank_test, residual_prediction_test, RpConfig};
use ivcore::moments::Moments;
use ivcore::wir::{TestKind, TestResult};
use ivcore::IvError;
use serde_json::{json, Value};

use crate::args::split_list;

/// Human-readable lines plus the same numbers at full precision.
#[derive(Debug, Default)]
pub struct Report {
    pub lines: Vec<String>,
    pub results: Vec<Value>,
}

/// `.4f` for ordinary p-values, three significant digits below `1e-4`.
pub fn fmt_p(p: f64) -> String {
    if p >= 1e-4 || p == 0.0 {
        return format!("{p:.4}");
    }
    let s = format!("{p:.2e}");
    match s.split_once('e') {
        Some((m, e)) => {
            let (sign, digits) = e.strip_prefix('-').map_or(("+", e), |d| ("-", d));
            format!("{m}e{sign}{digits:0>2}")
        }
        None => s,
    }
}

fn test_line(label: &str, r: &TestResult) -> String {
    format!("{label:<11}: statistic={:5.2}, p-value={}", r.statistic, fmt_p(r.p_value))
}

fn test_json(label: &str, r: &TestResult) -> Value {
    json!({
        "test": label,
        "statistic": r.statistic,
        "p_value": r.p_value,
        "df": r.df,
        "beta": r.beta,
        "conditioning": r.conditioning,
        "note": r.note,
    })
}

pub fn label(kind: &TestKind) -> String {
    match kind {
        TestKind::Wald(spec) => format!("Wald ({})", spec.to_string().to_uppercase()),
        TestKind::Ar => "AR".into(),
        TestKind::Lr => "LR".into(),
        TestKind::Clr => "CLR".into(),
        TestKind::Lm => "LM".into(),
        TestKind::LmLocal => "LM (local)".into(),
    }
}

/// Parses a comma list of test names; `all` is the standard battery.
pub fn parse_tests(names: &str) -> Result<Vec<TestKind>> {
    if names.trim().eq_ignore_ascii_case("all") {
        return Ok(vec![
            TestKind::Wald(KClassSpec::Tsls),
            TestKind::Wald(KClassSpec::Liml),
            TestKind::Ar,
            TestKind::Lr,
            TestKind::Clr,
            TestKind::Lm,
        ]);
    }
    let kinds = split_list(names).iter().map(|n| n.parse::<TestKind>()).collect::<ivcore::Result<Vec<_>>>()?;
    if kinds.is_empty() {
        return Err(IvError::Config("no test named".into()).into());
    }
    Ok(kinds)
}

pub fn parse_beta(s: Option<&str>, dim: usize) -> Result<Vec<f64>> {
    let Some(s) = s else { return Ok(vec![0.0; dim]) };
    let beta = split_list(s)
        .iter()
        .map(|v| v.parse::<f64>().map_err(|_| IvError::Config(format!("malformed beta entry `{v}`"))))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    if beta.len() != dim {
        return Err(IvError::Config(format!(
            "--beta has {} entries, expected {dim} (one per X and D column)",
            beta.len()
        ))
        .into());
    }
    Ok(beta)
}

pub fn fit(ds: &DataSet, estimator: &str) -> Result<Report> {
    let spec: KClassSpec = estimator.parse()?;
    let f = fit_kclass(ds, spec)?;
    let coefs = f.named_coefficients();
    let width = coefs.iter().map(|(n, _)| n.len()).max().unwrap_or(0) + 2;
    let mut lines: Vec<String> = coefs.iter().map(|(n, v)| format!("{n:<width$}{v:>10.6}")).collect();
    lines.push(format!("kappa: {:.6}", f.kappa));
    lines.push(format!("sigma2 (Wald): {:.6}", f.sigma2_wald));
    lines.push(format!("sigma2 (residual): {:.6}", f.sigma2_resid));
    let result = json!({
        "estimator": spec.to_string(),
        "coefficients": coefs.iter().map(|(n, v)| json!({"name": n, "value": v})).collect::<Vec<_>>(),
        "kappa": f.kappa,
        "sigma2_wald": f.sigma2_wald,
        "sigma2_resid": f.sigma2_resid,
    });
    Ok(Report { lines, results: vec![result] })
}

pub fn test(ds: &DataSet, names: &str, beta: Option<&str>) -> Result<Report> {
    let kinds = parse_tests(names)?;
    let beta = parse_beta(beta, ds.mx() + ds.md())?;
    let m = Moments::new(ds)?;
    let mut report = Report::default();
    for kind in kinds {
        let r = kind.run(&m, &beta).with_context(|| format!("{} test", label(&kind)))?;
        report.lines.push(test_line(&label(&kind), &r));
        report.results.push(test_json(&label(&kind), &r));
    }
    Ok(report)
}

fn endpoint(v: f64) -> Value {
    if v.is_finite() {
        json!(v)
    } else if v > 0.0 {
        json!("inf")
    } else {
        json!("-inf")
    }
}

fn set_json(label: &str, s: &ConfidenceSet) -> Value {
    let mut v = json!({
        "test": label,
        "level": s.level,
        "set": format!("{s:.3}"),
        "empty": s.is_empty(),
        "bounded": s.is_bounded(),
    });
    let kind = match &s.kind {
        SetKind::Empty => json!({"kind": "empty"}),
        SetKind::AllSpace => json!({"kind": "all"}),
        SetKind::Intervals(iv) => json!({
            "kind": "intervals",
            "intervals": iv.iter().map(|i| json!([endpoint(i.lo), endpoint(i.hi)])).collect::<Vec<_>>(),
        }),
        SetKind::Quadric(q) => json!({
            "kind": "quadric",
            "center": q.center.iter().collect::<Vec<_>>(),
            "matrix": q.a.row_iter().map(|r| r.iter().copied().collect::<Vec<_>>()).collect::<Vec<_>>(),
            "bound": q.bound,
        }),
    };
    if let (Value::Object(a), Value::Object(b)) = (&mut v, kind) {
        a.extend(b);
    }
    v
}

fn parse_grid(s: &str) -> Result<Vec<f64>> {
    let parts: Vec<&str> = s.split(':').collect();
    let bad = || IvError::Config(format!("--grid must be `lo:hi:points`, got `{s}`"));
    if parts.len() != 3 {
        return Err(bad().into());
    }
    let lo: f64 = parts[0].trim().parse().map_err(|_| bad())?;
    let hi: f64 = parts[1].trim().parse().map_err(|_| bad())?;
    let n: usize = parts[2].trim().parse().map_err(|_| bad())?;
    if n < 2 || hi.partial_cmp(&lo) != Some(std::cmp::Ordering::Greater) {
        return Err(bad().into());
    }
    Ok((0..n).map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64).collect())
}

pub fn confset(ds: &DataSet, names: &str, alpha: f64, export: Option<&Path>, grid: &str) -> Result<Report> {
    let kinds = parse_tests(names)?;
    let coords: Vec<String> = ds.names.x.iter().chain(&ds.names.d).cloned().collect();
    let mut report = Report::default();
    for kind in &kinds {
        let l = label(kind);
        let s = invert(ds, *kind, alpha).with_context(|| format!("{l} confidence set"))?;
        report.lines.push(format!("{l:<11}: {s:.3}"));
        let mut v = set_json(&l, &s);
        if matches!(s.kind, SetKind::Quadric(_)) {
            let mut projections = Vec::new();
            for (i, name) in coords.iter().enumerate() {
                let p = s.project(&[i])?;
                report.lines.push(format!("  {name} by projection: {p:.3}"));
                projections.push(set_json(name, &p));
            }
            v["projections"] = Value::Array(projections);
        }
        report.results.push(v);
    }
    if let Some(path) = export {
        let xs = parse_grid(grid)?;
        let m = Moments::new(ds)?;
        let mut out = String::from("test,beta,statistic,p_value\n");
        for kind in &kinds {
            for (b, stat, p) in p_value_curve(&m, *kind, &xs)? {
                writeln!(out, "{},{b},{stat},{p}", label(kind)).expect("write to string");
            }
        }
        std::fs::write(path, out).with_context(|| format!("writing {}", path.display()))?;
        report.lines.push(format!("grid written to {}", path.display()));
    }
    Ok(report)
}

pub fn diagnose(ds: &DataSet, alpha: f64, residual_prediction: bool, seed: u64) -> Result<Report> {
    let mut report = Report::default();
    let mut stat_row = |label: &str, r: &TestResult| {
        report.lines.push(format!("{label:<14}: {:6.3}, p-value: {}", r.statistic, fmt_p(r.p_value)));
        report.results.push(test_json(label, r));
    };
    stat_row("J-statistic", &j_test(ds, KClassSpec::Liml)?);
    stat_row("J (TSLS)", &j_test(ds, KClassSpec::Tsls)?);
    stat_row("Rank statistic", &rank_test(ds)?);
    if residual_prediction {
        let cfg = RpConfig { seed, ..RpConfig::default() };
        stat_row("Residual pred.", &residual_prediction_test(ds, &cfg)?);
    }
    let p = bounded_empty_predicates(ds, alpha)?;
    report.lines.push(format!("AR set nonempty at alpha={alpha}: {}", p.ar_nonempty));
    report.lines.push(format!("AR set bounded at alpha={alpha}: {}", p.ar_bounded));
    report.lines.push(format!("LR set bounded at alpha={alpha}: {}", p.lr_bounded));
    report.lines.push(format!("alpha_max (AR set empty above): {:.7}", p.alpha_max));
    report.lines.push(format!("alpha_min (AR set unbounded below): {:.7}", p.alpha_min));
    report.results.push(json!({
        "alpha": alpha,
        "ar_nonempty": p.ar_nonempty.to_string(),
        "ar_bounded": p.ar_bounded.to_string(),
        "lr_bounded": p.lr_bounded.to_string(),
        "j_liml": p.j_liml,
        "cragg_donald": p.cd,
        "alpha_max": p.alpha_max,
        "alpha_min": p.alpha_min,
    }));
    match equivalent_levels(ds, alpha) {
        Ok(e) => {
            report.lines.push(format!("LR set equals the AR set at alpha={:.6}", e.alpha_lr_given_ar));
            report.lines.push(format!(
                "Wald set (kappa={:.7}) equals the AR set at alpha={:.6}",
                e.kappa_ar, e.alpha_wald_given_ar
            ));
            report.results.push(json!({
                "alpha_lr_given_ar": e.alpha_lr_given_ar,
                "alpha_wald_given_ar": e.alpha_wald_given_ar,
                "kappa_ar": e.kappa_ar,
            }));
        }
        Err(e) => report.lines.push(format!("equivalent levels unavailable: {e}")),
    }
    Ok(report)
}
