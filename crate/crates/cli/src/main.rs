//! Command-line front end: data generation, training, evaluation, robustness
//! sweeps, ablations, sampling studies and convergence diagnostics, all with
//! machine-readable output.

use std::process::ExitCode;

use clap::Parser;

mod opts;
mod run;

use opts::Cli;

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        _ => log::LevelFilter::Debug,
    };
    env_logger::Builder::new().filter_level(level).format_timestamp(None).init();
    eqan_core::harness::init_thread_pool();
    match run::dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            let chain: Vec<String> = err.chain().skip(1).map(ToString::to_string).collect();
            let diag = serde_json::json!({ "error": err.to_string(), "chain": chain });
            eprintln!("{diag}");
            ExitCode::FAILURE
        }
    }
}
