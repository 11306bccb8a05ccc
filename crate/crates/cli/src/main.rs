mod args;
mod commands;
mod io;

use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{CommandFactory, Parser};

use args::{Cli, GlobalOptions};

const THREADS_ENV: &str = "PAIRFORGE_THREADS";

fn init_logging(verbose: u8) {
    let level = match verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        _ => log::LevelFilter::Debug,
    };
    let _ = env_logger::Builder::new().filter_level(level).parse_default_env().try_init();
}

fn thread_count(global: &GlobalOptions) -> Result<Option<usize>> {
    if global.deterministic {
        return Ok(Some(1));
    }
    match std::env::var(THREADS_ENV) {
        Ok(v) => Ok(Some(v.trim().parse().with_context(|| format!("{THREADS_ENV} must be an integer, got {v:?}"))?)),
        Err(_) => Ok(global.threads),
    }
}

fn run(cli: &Cli) -> Result<()> {
    if let Some(n) = thread_count(&cli.global)? {
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global().context("cannot configure worker threads")?;
    }
    commands::run(cli.command.as_ref().expect("command resolved before run"))
}

fn main() -> ExitCode {
    if std::env::args_os().len() <= 1 {
        let _ = Cli::command().write_help(&mut std::io::stderr());
        return ExitCode::from(2);
    }
    let mut cli = Cli::try_parse().unwrap_or_else(|e| e.exit());
    if let Some(path) = &cli.config {
        if cli.command.is_some() {
            eprintln!("error: --config replaces the whole invocation and cannot be combined with a subcommand");
            return ExitCode::from(2);
        }
        let loaded = std::fs::read_to_string(path)
            .with_context(|| format!("cannot read {}", path.display()))
            .and_then(|text| serde_json::from_str::<Cli>(&text).with_context(|| format!("invalid config {}", path.display())));
        match loaded {
            Ok(loaded) => {
                cli = Cli {
                    dump_config: cli.dump_config,
                    config: None,
                    ..loaded
                };
            }
            Err(e) => {
                eprintln!("error: {}", single_line(&e));
                return ExitCode::from(2);
            }
        }
    }
    if cli.command.is_none() {
        eprintln!("error: a subcommand is required");
        let _ = Cli::command().write_help(&mut std::io::stderr());
        return ExitCode::from(2);
    }
    if cli.dump_config {
        println!("{}", serde_json::to_string_pretty(&cli).expect("config serializes"));
        return ExitCode::SUCCESS;
    }
    init_logging(cli.global.verbose);
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", single_line(&e));
            ExitCode::from(1)
        }
    }
}

/// The error chain on one line.
fn single_line(e: &anyhow::Error) -> String {
    format!("{e:#}").replace('\n', " ")
}
