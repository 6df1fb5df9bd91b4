//! `tlora`: train, analyze, compare and plot low-rank adaptation runs.

mod commands;
mod config;
mod svg;

use clap::Parser;

#[derive(Parser)]
#[command(
    name = "tlora",
    version,
    about = "Desk-scale laboratory for tri-matrix low-rank adaptation"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(clap::Subcommand)]
enum Cmd {
    /// Train an adapter (or the frozen control) and write a run directory
    Train(commands::train::TrainArgs),
    /// Print theoretical trainable-parameter counts and improvement ratios
    Params(commands::params::ParamsArgs),
    /// Write analysis reports (histograms, timelines, heatmaps, spectra)
    Analyze(commands::analyze::AnalyzeArgs),
    /// Compare two runs' learned weight updates
    Compare(commands::compare::CompareArgs),
    /// Render an SVG chart from a run's metrics or reports
    Plot(commands::plot::PlotArgs),
}

/// Exit codes: 0 success, 2 usage/config, 3 data, 4 I/O, 5 numerical.
fn exit_code(e: &tlora_core::Error) -> i32 {
    use tlora_core::Error;
    match e {
        Error::Usage(_) | Error::Config(_) => 2,
        Error::Data(_) | Error::Dim { .. } => 3,
        Error::Io { .. } => 4,
        Error::Numerical(_) => 5,
    }
}

fn main() {
    let cli = Cli::parse();
    let result = match cli.cmd {
        Cmd::Train(args) => commands::train::run(args),
        Cmd::Params(args) => commands::params::run(args),
        Cmd::Analyze(args) => commands::analyze::run(args),
        Cmd::Compare(args) => commands::compare::run(args),
        Cmd::Plot(args) => commands::plot::run(args),
    };
    if let Err(e) = result {
        eprintln!("error: {e}");
        let mut source = std::error::Error::source(&e);
        while let Some(s) = source {
            eprintln!("  caused by: {s}");
            source = s.source();
        }
        std::process::exit(exit_code(&e));
    }
}
