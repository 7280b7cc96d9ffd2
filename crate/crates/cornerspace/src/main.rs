//! Command-line front end.
//!
//! ```text
//! cornerspace run <config.json>
//! cornerspace preset <name> [--out DIR] [--seed N] [--m-max N]
//! cornerspace validate <config.json>
//! cornerspace presets
//! ```
//!
//! `CORNERSPACE_THREADS` caps the worker thread count. Exit codes:
//! 0 converged, 2 finished without reaching the convergence target,
//! 1 error.

use std::path::PathBuf;
use std::process::ExitCode;

use cornerspace::cli;

const USAGE: &str = "\
usage:
  cornerspace run <config.json>
  cornerspace preset <name> [--out DIR] [--seed N] [--m-max N]
  cornerspace validate <config.json>
  cornerspace presets

environment:
  CORNERSPACE_THREADS   number of worker threads (default: all cores)
";

fn init_threads() {
    if let Ok(v) = std::env::var("CORNERSPACE_THREADS") {
        match v.parse::<usize>() {
            Ok(n) if n > 0 => {
                rayon::ThreadPoolBuilder::new()
                    .num_threads(n)
                    .build_global()
                    .ok();
            }
            _ => eprintln!("warning: ignoring invalid CORNERSPACE_THREADS = {v}"),
        }
    }
}

fn load_config(path: &str) -> Result<cli::ExperimentConfig, String> {
    let text = std::fs::read_to_string(path).map_err(|e| format!("cannot read {path}: {e}"))?;
    let config = cli::ExperimentConfig::from_json(&text).map_err(|e| e.to_string())?;
    config.validate().map_err(|e| e.to_string())?;
    Ok(config)
}

fn cmd_run(path: &str) -> ExitCode {
    let config = match load_config(path) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(1);
        }
    };
    match cli::run_experiment(&config) {
        Ok(outcome) => {
            println!(
                "wrote {} result rows to {}",
                outcome.rows.len(),
                config.output.dir
            );
            for w in &outcome.manifest.warnings {
                eprintln!("warning: {w}");
            }
            ExitCode::from(outcome.exit_code as u8)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}

fn cmd_preset(args: &[String]) -> ExitCode {
    if args.is_empty() {
        eprintln!("error: preset name required\n{USAGE}");
        return ExitCode::from(1);
    }
    let name = &args[0];
    let mut out: Option<PathBuf> = None;
    let mut seed: Option<u64> = None;
    let mut m_max: Option<usize> = None;
    let mut it = args[1..].iter();
    while let Some(flag) = it.next() {
        let value = match it.next() {
            Some(v) => v,
            None => {
                eprintln!("error: {flag} expects a value\n{USAGE}");
                return ExitCode::from(1);
            }
        };
        match flag.as_str() {
            "--out" => out = Some(PathBuf::from(value)),
            "--seed" => match value.parse() {
                Ok(s) => seed = Some(s),
                Err(_) => {
                    eprintln!("error: --seed expects an integer, got {value}");
                    return ExitCode::from(1);
                }
            },
            "--m-max" => match value.parse() {
                Ok(m) => m_max = Some(m),
                Err(_) => {
                    eprintln!("error: --m-max expects an integer, got {value}");
                    return ExitCode::from(1);
                }
            },
            other => {
                eprintln!("error: unknown flag {other}\n{USAGE}");
                return ExitCode::from(1);
            }
        }
    }
    match cli::run_preset(name, out.as_deref(), seed, m_max) {
        Ok(outcome) => {
            println!("preset {name}: {} result rows", outcome.rows.len());
            for w in &outcome.manifest.warnings {
                eprintln!("warning: {w}");
            }
            ExitCode::from(outcome.exit_code as u8)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}

fn cmd_validate(path: &str) -> ExitCode {
    match load_config(path) {
        Ok(_) => {
            println!("{path}: ok");
            ExitCode::from(0)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}

fn main() -> ExitCode {
    init_threads();
    let args: Vec<String> = std::env::args().skip(1).collect();
    match args.first().map(String::as_str) {
        Some("run") if args.len() == 2 => cmd_run(&args[1]),
        Some("preset") => cmd_preset(&args[1..]),
        Some("validate") if args.len() == 2 => cmd_validate(&args[1]),
        Some("presets") => {
            print!("{}", cli::list_presets());
            ExitCode::from(0)
        }
        _ => {
            eprint!("{USAGE}");
            ExitCode::from(1)
        }
    }
}
