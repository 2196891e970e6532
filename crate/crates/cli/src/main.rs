//! depthflow: analyze layered-network activation trajectories as
//! discrete-time dynamical systems.
//!
//! Subcommands cover the full pipeline: generate synthetic block-recurrent
//! teachers, build similarity matrices, discover phases by max-cut, fit
//! recurrent surrogates, and run the dynamics/DMD metric suites. Every
//! command emits a run manifest next to its primary output and is
//! byte-deterministic for a fixed command line.

use clap::{Parser, Subcommand};

mod commands;
mod manifest;
mod svg;

#[derive(Parser)]
#[command(name = "depthflow", version, about = "Depth-trajectory dynamics toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic block-recurrent teacher trajectory (ATRJ file).
    Gen(commands::gen::GenArgs),
    /// Layer-layer cosine similarity matrix (CSV + optional heatmap SVG).
    Simmat(commands::simmat::SimmatArgs),
    /// Max-cut phase discovery with random-partition baselines.
    Segment(commands::segment::SegmentArgs),
    /// Train a recurrent surrogate (stage 1 and optionally stage 2).
    Fit(commands::fit::FitArgs),
    /// Per-layer dynamical metrics, perturbation probes, PCA coordinates.
    Dynamics(commands::dynamics::DynamicsArgs),
    /// Exact DMD of depth trajectories (model JSON + eigenvalue cloud SVG).
    Dmd(commands::dmd_cmd::DmdArgs),
    /// Teacher-student per-layer cosine and alignment R².
    Compare(commands::compare::CompareArgs),
}

fn main() {
    let cli = Cli::parse();
    let argv: Vec<String> = std::env::args().collect();
    let result = match cli.command {
        Command::Gen(args) => commands::gen::run(args, &argv),
        Command::Simmat(args) => commands::simmat::run(args, &argv),
        Command::Segment(args) => commands::segment::run(args, &argv),
        Command::Fit(args) => commands::fit::run(args, &argv),
        Command::Dynamics(args) => commands::dynamics::run(args, &argv),
        Command::Dmd(args) => commands::dmd_cmd::run(args, &argv),
        Command::Compare(args) => commands::compare::run(args, &argv),
    };
    if let Err(e) = result {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cli_parses_all_subcommands() {
        use clap::CommandFactory;
        Cli::command().debug_assert();
    }

    #[test]
    fn usage_error_is_exit_code_2() {
        // clap's own parse failures exit with 2, matching the usage-error
        // contract; this pins the CliError mapping too.
        let e = commands::CliError::Usage("bad".into());
        assert_eq!(e.exit_code(), 2);
    }
}
