mod args;
mod commands;
mod config;
mod exit;
mod manifest;

use std::ffi::OsString;
use std::process::ExitCode;

use clap::Parser;

use args::{Cli, Command};
use commands::Context;
use exit::{Failure, Outcome};

const SUBCOMMANDS: [&str; 6] = [
    "cv",
    "train",
    "sweep-k",
    "coherence",
    "gradcheck",
    "inspect",
];
const GLOBAL_VALUE_FLAGS: [&str; 5] = ["--seed", "--jobs", "--config", "--data-dir", "--out"];

/// Position of the subcommand, skipping values of global flags.
fn command_index(args: &[OsString]) -> Option<usize> {
    let mut i = 1;
    while i < args.len() {
        let s = args[i].to_string_lossy();
        if GLOBAL_VALUE_FLAGS.contains(&s.as_ref()) {
            i += 2;
            continue;
        }
        if SUBCOMMANDS.contains(&s.as_ref()) {
            return Some(i);
        }
        i += 1;
    }
    None
}

/// Applies the config file, if any, underneath the command-line flags.
fn effective_args(args: Vec<OsString>) -> Outcome<Vec<OsString>> {
    let Some(path) = config::find_config_path(&args) else {
        return Ok(args);
    };
    let Some(index) = command_index(&args) else {
        return Ok(args);
    };
    let table = config::load_table(&path)?;
    let command = args[index].to_string_lossy().into_owned();
    let injected = config::flags_from_table(&table, &command).map_err(Failure::Config)?;
    Ok(config::splice(&args, index, injected))
}

fn init_logging(verbose: u8) {
    let level = match verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        _ => log::LevelFilter::Debug,
    };
    env_logger::Builder::new()
        .filter_level(level)
        .parse_default_env()
        .init();
}

#[cfg(feature = "parallel")]
fn init_threads(jobs: usize) -> Outcome {
    rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build_global()
        .map_err(|e| Failure::Config(anyhow::anyhow!("cannot size the thread pool: {e}")))
}

#[cfg(not(feature = "parallel"))]
fn init_threads(jobs: usize) -> Outcome {
    if jobs > 1 {
        log::warn!("built without the parallel feature; --jobs {jobs} ignored");
    }
    Ok(())
}

fn run(cli: &Cli) -> Outcome {
    init_threads(cli.global.jobs)?;
    let resolved = serde_json::to_value(cli).map_err(|e| Failure::Check(e.into()))?;
    let ctx = Context {
        global: &cli.global,
        resolved,
    };
    match &cli.command {
        Command::Cv(a) => commands::cv(&ctx, a),
        Command::Train(a) => commands::train_model(&ctx, a),
        Command::SweepK(a) => commands::sweep(&ctx, a),
        Command::Coherence(a) => commands::coherence(&ctx, a),
        Command::Gradcheck(a) => commands::gradcheck(&ctx, a),
        Command::Inspect(a) => commands::inspect(&ctx, a),
    }
}

fn main() -> ExitCode {
    let args = match effective_args(std::env::args_os().collect()) {
        Ok(a) => a,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(e.code());
        }
    };
    // clap exits with 2 on usage errors and 0 for --help / --version
    let cli = Cli::parse_from(args);
    init_logging(cli.global.verbose);
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error [{}]: {e}", cli.command.name());
            ExitCode::from(e.code())
        }
    }
}
