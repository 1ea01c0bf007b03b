mod commands;
mod config;

use std::collections::BTreeMap;
use std::fmt;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Arg, ArgMatches, Command};

use config::{parse_file, RunConfig, SCHEMA};

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Core(swinecat::Error),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        use swinecat::Error::*;
        match self {
            CliError::Usage(_) | CliError::Core(Config(_)) => 2,
            CliError::Core(
                Format(_) | Compatibility(_) | Ingestion { .. } | Data(_) | Io { .. },
            ) => 3,
            CliError::Core(Dimension { .. } | Contract(_)) => 4,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) => f.write_str(m),
            CliError::Core(e) => write!(f, "{e}"),
        }
    }
}

impl From<swinecat::Error> for CliError {
    fn from(e: swinecat::Error) -> Self {
        CliError::Core(e)
    }
}

fn subcommand(name: &'static str, about: &'static str) -> Command {
    let keys = SCHEMA.iter().map(|k| {
        Arg::new(k.name)
            .long(k.name)
            .value_name("VALUE")
            .help(k.help)
            .help_heading("Config keys")
    });
    Command::new(name)
        .about(about)
        .arg(
            Arg::new("config")
                .short('c')
                .long("config")
                .value_name("FILE")
                .help("flat key = value config file"),
        )
        .args(keys)
}

fn cli() -> Command {
    Command::new("swinecat")
        .about("Swin-T with ECA channel attention for fundus image classification")
        .subcommand_required(true)
        .subcommand(subcommand(
            "train",
            "train a model and write run/<name>/ artifacts",
        ))
        .subcommand(subcommand(
            "eval",
            "evaluate a checkpoint on a dataset split",
        ))
        .subcommand(subcommand(
            "inspect",
            "print the parameter audit with and without ECA",
        ))
        .subcommand(subcommand(
            "synth",
            "generate a synthetic nine-class dataset",
        ))
}

fn run_config(m: &ArgMatches) -> Result<RunConfig, CliError> {
    let file = match m.get_one::<String>("config") {
        Some(p) => {
            let path = PathBuf::from(p);
            let text = std::fs::read_to_string(&path).map_err(|e| {
                CliError::Usage(format!("cannot read config {}: {e}", path.display()))
            })?;
            parse_file(&text, &path)?
        }
        None => BTreeMap::new(),
    };
    let overrides: BTreeMap<String, String> = SCHEMA
        .iter()
        .filter_map(|k| {
            m.get_one::<String>(k.name)
                .map(|v| (k.name.to_string(), v.clone()))
        })
        .collect();
    RunConfig::resolve(&file, &overrides)
}

fn init_threads() -> Result<(), CliError> {
    let Ok(raw) = std::env::var("SWINECAT_THREADS") else {
        return Ok(());
    };
    let n: usize = raw.trim().parse().map_err(|_| {
        CliError::Usage(format!(
            "SWINECAT_THREADS must be a non-negative integer, got {raw:?}"
        ))
    })?;
    if n > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Usage(format!("cannot configure {n} threads: {e}")))?;
    }
    Ok(())
}

fn dispatch(name: &str, m: &ArgMatches) -> Result<(), CliError> {
    init_threads()?;
    let cfg = run_config(m)?;
    match name {
        "train" => commands::train(cfg),
        "eval" => commands::eval(&cfg),
        "inspect" => commands::inspect(&cfg),
        "synth" => commands::synth(&cfg),
        _ => unreachable!("clap rejects unknown subcommands"),
    }
}

fn main() -> ExitCode {
    let matches = match cli().try_get_matches() {
        Ok(m) => m,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(e.exit_code() as u8);
        }
    };
    let (name, sub) = matches.subcommand().expect("subcommand required");
    match dispatch(name, sub) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
