mod args;
mod commands;
mod load;

use std::io::Write;
use std::process::ExitCode;

use anyhow::Result;
use clap::Parser;
use ivcore::IvError;
use serde_json::json;

use args::{Cli, Command};
use commands::Report;

fn run(cli: &Cli) -> Result<Report> {
    let data = cli.command.data();
    let ds = load::dataset(data)?;
    match &cli.command {
        Command::Fit { estimator, .. } => commands::fit(&ds, estimator),
        Command::Test { name, beta, .. } => commands::test(&ds, name, beta.as_deref()),
        Command::Confset { name, alpha, export_grid, grid, .. } => {
            commands::confset(&ds, name, *alpha, export_grid.as_deref(), grid)
        }
        Command::Diagnose { alpha, residual_prediction, .. } => {
            commands::diagnose(&ds, *alpha, *residual_prediction, data.seed)
        }
    }
}

fn config_echo(command: &Command) -> serde_json::Value {
    let mut v = serde_json::to_value(command.data()).unwrap_or_default();
    let extra = match command {
        Command::Fit { estimator, .. } => json!({ "estimator": estimator }),
        Command::Test { name, beta, .. } => json!({ "name": name, "beta": beta }),
        Command::Confset { name, alpha, export_grid, grid, .. } => {
            json!({ "name": name, "alpha": alpha, "export_grid": export_grid, "grid": grid })
        }
        Command::Diagnose { alpha, residual_prediction, .. } => {
            json!({ "alpha": alpha, "residual_prediction": residual_prediction })
        }
    };
    if let (Some(a), serde_json::Value::Object(b)) = (v.as_object_mut(), extra) {
        a.extend(b);
    }
    v
}

/// 2 for configuration errors, 3 for numerical failures.
fn exit_code(err: &anyhow::Error) -> u8 {
    match err.chain().find_map(|e| e.downcast_ref::<IvError>()) {
        Some(e) if !e.is_config() => 3,
        _ => 2,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(report) => {
            let text = if cli.command.data().json {
                let out = json!({
                    "command": cli.command.name(),
                    "config": config_echo(&cli.command),
                    "results": report.results,
                    "versions": { "ivtool": env!("CARGO_PKG_VERSION"), "ivcore": env!("CARGO_PKG_VERSION") },
                });
                serde_json::to_string_pretty(&out).expect("serializable output") + "\n"
            } else {
                report.lines.iter().map(|l| format!("{l}\n")).collect()
            };
            // a closed pipe (e.g. `| head`) is not an error
            let _ = std::io::stdout().lock().write_all(text.as_bytes());
            ExitCode::SUCCESS
        }
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code(&err))
        }
    }
}
