use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use log::info;

use histctl::estimate::write_estimates_csv;
use histctl::pipeline::{self, PipelineConfig, RunOptions};
use histctl::registry::PatientId;

#[derive(Parser, Debug)]
#[command(
    name = "histctl",
    version,
    about = "Historical-control comparative effectiveness on registry data",
    after_help = "Any config value can be overridden with a flag of its dotted name, \
                  e.g. --balance.solver.max_iter 300 or --analyses.placebo=false.\n\
                  The output directory can also be set with HISTCTL_OUT_DIR."
)]
struct Cli {
    /// TOML configuration file; defaults apply when omitted.
    #[arg(short, long, global = true)]
    config: Option<PathBuf>,
    /// Override a config value (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    set: Vec<String>,
    /// Worker threads (default: all cores). Outputs do not depend on it.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Overwrite outputs written under a different config hash.
    #[arg(long, global = true)]
    force: bool,
    /// More log output (-v info, -vv debug).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Simulate a registry with ground truth and placebo covariates.
    Generate,
    /// Full analysis: balance, estimates, bounds, subgroups, placebo, hazard model.
    Run,
    /// Balance every stratum and write the balance tables.
    Balance,
    /// Balance (cached) and write the effect estimates.
    Estimate,
    /// Balance (cached) and run the placebo test.
    Placebo,
    /// Print one patient's registry events.
    Timeline {
        patient_id: String,
    },
    /// Print the report of the last run in the output directory.
    Report {
        /// Print the structured summary instead of text.
        #[arg(long)]
        json: bool,
    },
    /// Print the resolved configuration.
    Config,
}

/// Top-level config keys that are plain values rather than tables.
const TOP_LEVEL_KEYS: [&str; 1] = ["seed"];

/// Splits `--a.b value` and `--a.b=value` flags (and the top-level keys)
/// off the argument list.
fn extract_dotted(args: Vec<String>) -> Result<(Vec<String>, Vec<(String, String)>)> {
    let mut rest = Vec::new();
    let mut dotted = Vec::new();
    let mut it = args.into_iter();
    while let Some(a) = it.next() {
        if a == "--" {
            rest.push(a);
            rest.extend(it.by_ref());
            break;
        }
        let Some(flag) = a.strip_prefix("--") else {
            rest.push(a);
            continue;
        };
        let name = flag.split('=').next().unwrap_or_default();
        if !name.contains('.') && !TOP_LEVEL_KEYS.contains(&name) {
            rest.push(a);
            continue;
        }
        match flag.split_once('=') {
            Some((k, v)) => dotted.push((k.to_string(), v.to_string())),
            None => match it.next() {
                Some(v) => dotted.push((flag.to_string(), v)),
                None => bail!("--{flag} needs a value"),
            },
        }
    }
    Ok((rest, dotted))
}

fn parse_set(s: &str) -> Result<(String, String)> {
    match s.split_once('=') {
        Some((k, v)) if !k.is_empty() => Ok((k.to_string(), v.to_string())),
        _ => bail!("--set expects KEY=VALUE, got {s:?}"),
    }
}

fn run(cli: Cli, dotted: Vec<(String, String)>) -> Result<()> {
    let mut overrides = cli.set.iter().map(|s| parse_set(s)).collect::<Result<Vec<_>>>()?;
    overrides.extend(dotted);
    let cfg = PipelineConfig::load(cli.config.as_deref(), &overrides)?;
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("configuring the worker pool")?;
    }
    let opts = RunOptions { force: cli.force };
    info!("config hash {}", cfg.hash());

    match cli.command {
        Command::Generate => {
            let m = pipeline::cmd_generate(&cfg, opts)?;
            println!("{}", serde_json::to_string_pretty(&m)?);
        }
        Command::Run => {
            let r = pipeline::cmd_run(&cfg, opts)?;
            print!("{}", r.render());
            println!("\noutputs in {}", cfg.paths.out_dir.display());
        }
        Command::Balance => {
            let b = pipeline::cmd_balance(&cfg, opts)?;
            println!("{:>7} {:>5} {:>6} {:>5} {:>9}", "stratum", "n_t", "n_c", "conv", "max_smd");
            for s in b.strata.values() {
                println!(
                    "{:>7} {:>5} {:>6} {:>5} {:>9.4}",
                    s.stratum_w,
                    s.report.n_treated,
                    s.report.n_comparison,
                    if s.solution.converged { "yes" } else { "no" },
                    s.report.max_abs_smd_after
                );
            }
            for s in &b.skipped {
                println!("{:>7} skipped: {}", s.stratum_w, s.reason);
            }
        }
        Command::Estimate => {
            let e = pipeline::cmd_estimate(&cfg, opts)?;
            write_estimates_csv(&e, std::io::stdout().lock())?;
        }
        Command::Placebo => {
            let p = pipeline::cmd_placebo(&cfg, opts)?;
            write_estimates_csv(&p.estimates, std::io::stdout().lock())?;
            println!(
                "threshold {:.7}; hidden bias flagged: {}",
                p.threshold,
                if p.hidden_bias { "yes" } else { "no" }
            );
        }
        Command::Timeline { patient_id } => {
            print!("{}", pipeline::cmd_timeline(&cfg, &PatientId(patient_id))?);
        }
        Command::Report { json } => {
            let r = pipeline::load_report(&cfg.paths.out_dir)?;
            if json {
                println!("{}", serde_json::to_string_pretty(&r)?);
            } else {
                print!("{}", r.render());
            }
        }
        Command::Config => {
            print!("{}", cfg.to_toml()?);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let (args, dotted) = match extract_dotted(std::env::args().collect()) {
        Ok(x) => x,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    };
    let cli = Cli::parse_from(args);
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli, dotted) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn v(a: &[&str]) -> Vec<String> {
        a.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn dotted_flags_split_off() {
        let (rest, d) = extract_dotted(v(&[
            "histctl",
            "--balance.solver.max_iter",
            "300",
            "run",
            "--analyses.placebo=false",
            "--force",
            "--seed=9",
        ]))
        .unwrap();
        assert_eq!(rest, v(&["histctl", "run", "--force"]));
        assert_eq!(
            d,
            vec![
                ("balance.solver.max_iter".to_string(), "300".to_string()),
                ("analyses.placebo".to_string(), "false".to_string()),
                ("seed".to_string(), "9".to_string())
            ]
        );
    }

    #[test]
    fn dotted_flag_without_value() {
        assert!(extract_dotted(v(&["histctl", "run", "--seed.x"])).is_err());
    }
}
