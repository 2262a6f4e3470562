use clap::{Parser, Subcommand};
use seqlat::cli;
use std::path::PathBuf;
use std::process::ExitCode;

/// Differentiable finite-state lattices for sequence transduction.
#[derive(Parser)]
#[command(name = "seqlat", version, about)]
struct Args {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Print the worked two-letter example and verify it end to end.
    Demo {
        #[arg(long, default_value_t = 42)]
        seed: u64,
        /// Corrupt one oracle arc weight; the run must then fail.
        #[arg(long)]
        inject_fault: bool,
    },
    /// Run the property suites (oracle equivalence, unit normalizer,
    /// gradients, dedup).
    Check {
        /// all, golden, z1, oracle, grad, or dedup.
        #[arg(long, default_value = "all")]
        scope: String,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        /// Corrupt one gradient entry; the run must then fail.
        #[arg(long)]
        inject_fault: bool,
    },
    /// Train a model on a synthetic task and write the model file.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        /// ce, ctc, rnnt, hat, las_bounded, or gnat.
        #[arg(long)]
        preset: Option<String>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long, default_value = "model.slm")]
        out: PathBuf,
    },
    /// Decode a text feature matrix (one frame per line) with a trained
    /// model.
    Decode {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        features: PathBuf,
    },
    /// Train the streaming-by-normalization grid on the late-evidence task
    /// and report median label error rates.
    Gap {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value_t = 5)]
        seeds: usize,
        /// Write the machine-readable table here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Time loss-plus-gradient and decoding across the configuration grid.
    Bench {
        #[arg(long, default_value_t = 48)]
        frames: usize,
        #[arg(long, default_value_t = 8)]
        vocab: usize,
        #[arg(long, default_value_t = 16)]
        dim: usize,
        #[arg(long, default_value_t = 5)]
        reps: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
    },
}

fn main() -> ExitCode {
    let args = Args::parse();
    let outcome = match args.command {
        Command::Demo { seed, inject_fault } => cli::cmd_demo(seed, inject_fault),
        Command::Check {
            scope,
            seed,
            inject_fault,
        } => cli::cmd_check(&scope, seed, inject_fault),
        Command::Train {
            config,
            preset,
            seed,
            steps,
            out,
        } => cli::cmd_train(cli::TrainArgs {
            config: config.as_deref(),
            preset: preset.as_deref(),
            seed,
            steps,
            out: &out,
        }),
        Command::Decode { model, features } => cli::cmd_decode(&model, &features),
        Command::Gap { config, seeds, out } => cli::cmd_gap(&config, seeds, out.as_deref()),
        Command::Bench {
            frames,
            vocab,
            dim,
            reps,
            seed,
        } => cli::cmd_bench(frames, vocab, dim, reps, seed),
    };
    match outcome {
        Ok(code) => ExitCode::from(code as u8),
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(cli::exit_code_for(&err) as u8)
        }
    }
}
