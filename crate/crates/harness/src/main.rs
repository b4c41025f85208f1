use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use swd_harness::checkpoint;
use swd_harness::config::RawConfig;
use swd_harness::error::{HarnessError, Result, EXIT_COLLAPSE};
use swd_harness::pipeline::{self, load_data, Run};
use swd_harness::report::{format_table, read_reports};
use swd_core::train::{evaluate, EVAL_BATCH};

#[derive(Parser)]
#[command(name = "swd", version, about = "Continuous pruning experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one configuration, then remove and report.
    Train {
        /// key = value file; later `--key value` pairs override it.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Continue from the checkpoint in the run's output directory.
        #[arg(long)]
        resume: bool,
        /// Stop after this many epochs in total, leaving a checkpoint.
        #[arg(long)]
        stop_after: Option<usize>,
        #[arg(trailing_var_arg = true, allow_hyphen_values = true)]
        overrides: Vec<String>,
    },
    /// Sweep a_min x a_max with everything else fixed.
    Grid {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Comma-separated list.
        #[arg(long, value_delimiter = ',')]
        a_min: Vec<f64>,
        #[arg(long, value_delimiter = ',')]
        a_max: Vec<f64>,
        #[arg(trailing_var_arg = true, allow_hyphen_values = true)]
        overrides: Vec<String>,
    },
    /// Test accuracy of a checkpoint.
    Eval {
        checkpoint: PathBuf,
        #[arg(trailing_var_arg = true, allow_hyphen_values = true)]
        overrides: Vec<String>,
    },
    /// Print report CSVs as one table.
    Report {
        #[arg(required = true)]
        files: Vec<PathBuf>,
    },
}

fn raw_config(file: Option<&PathBuf>, overrides: &[String]) -> Result<RawConfig> {
    let mut raw = match file {
        Some(p) => RawConfig::load(p)?,
        None => RawConfig::default(),
    };
    raw.apply_overrides(overrides)?;
    Ok(raw)
}

/// Removes `--name value`, `--name=value` or a bare `--name` from the
/// override list, so harness flags may follow config overrides.
fn take_flag(overrides: &mut Vec<String>, name: &str, takes_value: bool) -> Result<Option<String>> {
    let long = format!("--{name}");
    let Some(i) = overrides
        .iter()
        .position(|a| *a == long || a.starts_with(&format!("{long}=")))
    else {
        return Ok(None);
    };
    let arg = overrides.remove(i);
    if let Some((_, v)) = arg.split_once('=') {
        return Ok(Some(v.to_string()));
    }
    if !takes_value {
        return Ok(Some(String::new()));
    }
    if i < overrides.len() {
        Ok(Some(overrides.remove(i)))
    } else {
        Err(HarnessError::Config {
            field: name.replace('-', "_"),
            message: "missing value".into(),
        })
    }
}

fn parse_flag<T: std::str::FromStr>(name: &str, v: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    v.parse().map_err(|e: T::Err| HarnessError::Config {
        field: name.replace('-', "_"),
        message: format!("cannot parse {v:?}: {e}"),
    })
}

fn parse_list(name: &str, v: &str) -> Result<Vec<f64>> {
    v.split(',').map(|x| parse_flag(name, x.trim())).collect()
}

fn execute(cmd: Command) -> Result<i32> {
    match cmd {
        Command::Train {
            config,
            resume,
            stop_after,
            mut overrides,
        } => {
            let config = take_flag(&mut overrides, "config", true)?.map(PathBuf::from).or(config);
            let resume = resume || take_flag(&mut overrides, "resume", false)?.is_some();
            let stop_after = match take_flag(&mut overrides, "stop-after", true)? {
                Some(v) => Some(parse_flag("stop-after", &v)?),
                None => stop_after,
            };
            let cfg = raw_config(config.as_ref(), &overrides)?.validate()?;
            let data = load_data(&cfg)?;
            let run = if resume {
                checkpoint::load(&cfg.out_dir.join("checkpoint"), &cfg)?
            } else {
                Run::new(&cfg)?
            };
            match pipeline::run_to_disk(run, &data, stop_after)? {
                None => {
                    eprintln!("stopped; checkpoint in {}", cfg.out_dir.join("checkpoint").display());
                    Ok(0)
                }
                Some(r) => {
                    print!("{}", format_table(std::slice::from_ref(&r)));
                    Ok(if r.failed() { EXIT_COLLAPSE } else { 0 })
                }
            }
        }
        Command::Grid {
            config,
            a_min,
            a_max,
            mut overrides,
        } => {
            let config = take_flag(&mut overrides, "config", true)?.map(PathBuf::from).or(config);
            let a_min = match take_flag(&mut overrides, "a-min", true)? {
                Some(v) => parse_list("a-min", &v)?,
                None => a_min,
            };
            let a_max = match take_flag(&mut overrides, "a-max", true)? {
                Some(v) => parse_list("a-max", &v)?,
                None => a_max,
            };
            let raw = raw_config(config.as_ref(), &overrides)?;
            for (name, list) in [("a_min", &a_min), ("a_max", &a_max)] {
                if list.is_empty() {
                    return Err(HarnessError::Config {
                        field: name.into(),
                        message: "grid needs a comma-separated list".into(),
                    });
                }
            }
            // every cell is validated before any data is loaded
            let mut cell = raw.clone();
            cell.set("method", "swd")?;
            for &lo in &a_min {
                for &hi in &a_max {
                    cell.set("a_min", &lo.to_string())?;
                    cell.set("a_max", &hi.to_string())?;
                    cell.validate()?;
                }
            }
            let raw = cell;
            let cfg = raw.validate()?;
            let data = load_data(&cfg)?;
            let m = pipeline::grid(&cfg, &a_min, &a_max, &data, Some(&cfg.out_dir))?;
            print!("{}", m.to_csv()?);
            Ok(0)
        }
        Command::Eval { checkpoint: dir, overrides } => {
            let mut raw = checkpoint::stored_config(&dir)?;
            raw.apply_overrides(&overrides)?;
            let cfg = raw.validate()?;
            let data = load_data(&cfg)?;
            let mut run = checkpoint::load(&dir, &cfg)?;
            let acc = evaluate(&mut run.session.graph, &data.test, EVAL_BATCH)?;
            println!(
                "epoch {} params {} test_acc {acc:.2}",
                run.session.epoch,
                run.session.graph.param_count()
            );
            Ok(0)
        }
        Command::Report { files } => {
            let mut rows = Vec::new();
            for f in &files {
                let path = if f.is_dir() { f.join("report.csv") } else { f.clone() };
                rows.extend(read_reports(&path)?);
            }
            print!("{}", format_table(&rows));
            Ok(0)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(cli.command) {
        Ok(code) => ExitCode::from(code as u8),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
