//! Command-line harness around `lmam-core`: dataset files, checkpoints,
//! parameter-count tables, gradient-check reports, wall-clock benchmarks and
//! the rank-sweep / fusion-comparison experiment drivers.

pub mod checkpoint;
pub mod cli;
pub mod commands;
pub mod dataset;
pub mod error;
pub mod report;
pub mod runner;

pub use error::CliError;

use cli::{Cli, Command};

pub fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::GenData(args) => commands::gen_data::run(args),
        Command::ParamCount(args) => commands::param_count::run(args),
        Command::GradCheck(args) => commands::grad_check::run(args),
        Command::Bench(args) => commands::bench::run(args),
        Command::RankSweep(args) => commands::rank_sweep::run(args),
        Command::Compare(args) => commands::compare::run(args),
        Command::Train(args) => commands::train_eval::run_train(args),
        Command::Eval(args) => commands::train_eval::run_eval(args),
    }
}
