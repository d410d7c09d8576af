mod args;
mod commands;
mod output;

use std::process::ExitCode;

use clap::Parser;

use args::{Cli, Command};
use output::RunDir;

fn dispatch(cli: &Cli) -> anyhow::Result<()> {
    let dir = RunDir::create(&cli.out_dir)?;
    match &cli.command {
        Command::GenTrace(a) => commands::gen_trace(&dir, a),
        Command::Train(a) => commands::train_cmd(&dir, a).map(|_| ()),
        Command::Run(a) => commands::run(&dir, a),
        Command::Evaluate(a) => commands::evaluate(&dir, a).map(|_| ()),
        Command::Compare(a) => commands::compare(&dir, a).map(|_| ()),
        Command::LatencyTable(a) => commands::latency_table(&dir, a).map(|_| ()),
        Command::Report(a) => commands::report(&dir, a),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            // Bad flag values surface as configuration errors from the core.
            let usage = err
                .chain()
                .any(|e| matches!(e.downcast_ref::<xai_ran_core::Error>(), Some(xai_ran_core::Error::Config { .. })));
            ExitCode::from(if usage { 2 } else { 1 })
        }
    }
}
