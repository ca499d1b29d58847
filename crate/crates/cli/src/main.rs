//! `siphi`: split, train, sweep, evaluate, ensemble and report from the
//! command line. Exit status is 0 on success, 2 on a usage error and 1 on
//! any other failure.

mod args;
mod artifact;
mod commands;
mod error;

use std::process::ExitCode;

use clap::Parser;

use args::{Cli, Command};
use commands::Context;
use error::CliResult;

fn run(cli: &Cli, ctx: &Context) -> CliResult<()> {
    match &cli.command {
        Command::Synth(a) => commands::synth(ctx, a),
        Command::Split(a) => commands::split(ctx, a),
        Command::Train(a) => commands::train(ctx, a),
        Command::SweepLayers(a) => commands::sweep_layers(ctx, a),
        Command::SweepDims(a) => commands::sweep_dims(ctx, a),
        Command::Eval(a) => commands::eval(ctx, a),
        Command::Ensemble(a) => commands::ensemble(ctx, a),
        Command::Report(a) => commands::report(ctx, a),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("SIPHI_LOG", "warn")).init();
    let argv: Vec<String> = std::env::args().collect();
    let cli = match Cli::try_parse_from(&argv) {
        Ok(cli) => cli,
        // help and version go to stdout with status 0, usage errors exit 2
        Err(e) => e.exit(),
    };
    // the program path varies between installs; record it by name
    let command = std::iter::once("siphi".to_string()).chain(argv.into_iter().skip(1)).collect();
    match run(&cli, &Context { command }) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
