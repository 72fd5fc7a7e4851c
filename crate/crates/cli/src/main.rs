//! Scenario runner: loads presets/configs, runs the profiling, simulation,
//! capacity, and functional-check commands, and writes plot-ready CSV/JSON.

mod attn_check;
mod capacity;
mod output;
mod profile;
mod simulate;

use clap::{Parser, Subcommand};

/// Exit codes: 0 success, 2 usage or config error, 3 out-of-memory result,
/// 4 tolerance failure.
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_OOM: i32 = 3;
pub const EXIT_TOLERANCE: i32 = 4;

#[derive(Parser)]
#[command(
    name = "hpusim",
    version,
    about = "Roofline, capacity, and pipeline simulation for GPU + attention-accelerator inference"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Roofline sweep: OI, time, boundedness, MFU/MBU per kernel, and the
    /// memory-to-compute crossover batch.
    Profile(profile::Args),
    /// Pipelined multi-device generation runs with timeline and report
    /// artifacts.
    Simulate(simulate::Args),
    /// Attention engine vs. double-precision reference over randomized
    /// shapes.
    AttnCheck(attn_check::Args),
    /// Max-batch table from weights, KV, and reserve accounting.
    Capacity(capacity::Args),
}

fn main() {
    let cli = Cli::parse();
    let code = match cli.command {
        Command::Profile(args) => profile::run(&args),
        Command::Simulate(args) => simulate::run(&args),
        Command::AttnCheck(args) => attn_check::run(&args),
        Command::Capacity(args) => capacity::run(&args),
    };
    match code {
        Ok(code) => std::process::exit(code),
        Err(err) => {
            eprintln!("error: {err:#}");
            std::process::exit(EXIT_CONFIG);
        }
    }
}
