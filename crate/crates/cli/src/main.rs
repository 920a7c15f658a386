//! `headprune` command-line front end.

mod commands;
mod context;
mod svg;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use context::Ctx;

#[derive(Debug, Parser)]
#[command(name = "headprune", version, about = "Attention-head importance, ranking and pruning analysis")]
struct Cli {
    /// Seed for every random choice of the command (each command has its own default).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Directory receiving the command's outputs and manifest.
    #[arg(long, global = true, default_value = ".")]
    out_dir: PathBuf,
    /// Overwrite existing outputs.
    #[arg(long, global = true)]
    force: bool,
    /// Worker threads (defaults to the number of cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic many-to-one corpus.
    GenData(commands::pipeline::GenDataArgs),
    /// Train the toy translation model.
    Train(commands::pipeline::TrainArgs),
    /// Translate a split, optionally with heads masked, and score it.
    Translate(commands::pipeline::TranslateArgs),
    /// Dump attention weights captured while translating a split.
    DumpAttn(commands::pipeline::DumpAttnArgs),
    /// Check an attention dump for structural violations.
    Validate(commands::pipeline::ValidateArgs),
    /// Compute normalized per-head metric tables from an attention dump.
    Metrics(commands::analysis::MetricsArgs),
    /// Draw metric tables as heatmaps sharing one color scale.
    Heatmap(commands::analysis::HeatmapArgs),
    /// Rank heads by a metric table or at random.
    Rank(commands::analysis::RankArgs),
    /// Rank heads by sequential backward selection.
    Sbs(commands::pruning::SbsArgs),
    /// Evaluate pruning curves along head rankings.
    Curve(commands::pruning::CurveArgs),
    /// Compare pruning curves with Mann-Whitney U tests.
    Mwu(commands::pruning::MwuArgs),
    /// Spread of each head's rank across language pairs.
    RankStd(commands::analysis::RankStdArgs),
}

fn run(cli: Cli) -> anyhow::Result<()> {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    let ctx = Ctx {
        out_dir: cli.out_dir,
        force: cli.force,
        seed: cli.seed,
    };
    match cli.command {
        Command::GenData(a) => commands::pipeline::gen_data(&ctx, a),
        Command::Train(a) => commands::pipeline::train(&ctx, a),
        Command::Translate(a) => commands::pipeline::translate(&ctx, a),
        Command::DumpAttn(a) => commands::pipeline::dump_attn(&ctx, a),
        Command::Validate(a) => commands::pipeline::validate(a),
        Command::Metrics(a) => commands::analysis::metrics(&ctx, a),
        Command::Heatmap(a) => commands::analysis::heatmap(&ctx, a),
        Command::Rank(a) => commands::analysis::rank(&ctx, a),
        Command::Sbs(a) => commands::pruning::sbs(&ctx, a),
        Command::Curve(a) => commands::pruning::curve(&ctx, a),
        Command::Mwu(a) => commands::pruning::mwu(&ctx, a),
        Command::RankStd(a) => commands::analysis::rank_std(&ctx, a),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
