mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use crate::commands::exit_code;

#[derive(Parser, Debug)]
#[command(name = "mtsedge", version, about = "Edge detection with multi-scale tensorial summation networks")]
struct Cli {
    /// Worker threads (falls back to MTSEDGE_THREADS, then all cores).
    #[arg(long, global = true, env = "MTSEDGE_THREADS")]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a network and write checkpoints plus a metrics log.
    Train {
        #[arg(long, required_unless_present = "preset")]
        config: Option<PathBuf>,
        /// Bundled configuration, e.g. `mts-dr-1`.
        #[arg(long, conflicts_with = "config")]
        preset: Option<String>,
        /// Generated training data instead of a dataset root: `n=64,size=64[,seed=S]`.
        #[arg(long, num_args = 1.., value_delimiter = ',')]
        synthetic: Option<Vec<String>>,
        #[arg(long, default_value = "runs/latest")]
        out: PathBuf,
        /// Continue from a checkpoint written by an earlier run.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Write fused edge probability maps for every image in a directory.
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Also write the three side maps and the channel-averaged gated input
        /// under `intermediate/`.
        #[arg(long)]
        dump_intermediate: bool,
    },
    /// Score predicted maps against ground truth.
    Eval {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        /// Supplies setting, tolerance and eta defaults.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        setting: Option<String>,
        #[arg(long)]
        tolerance: Option<f64>,
        #[arg(long)]
        eta: Option<f64>,
        /// Where to write the JSON report.
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Compare analytic and finite-difference gradients of every op.
    Gradcheck {
        #[arg(long, default_value = "micro")]
        scale: String,
    },
    /// Parameter and FLOP breakdown of a configuration.
    Params {
        #[arg(long, required_unless_present = "preset")]
        config: Option<PathBuf>,
        #[arg(long, conflicts_with = "config")]
        preset: Option<String>,
        #[arg(long, default_value_t = 256)]
        height: usize,
        #[arg(long, default_value_t = 256)]
        width: usize,
        /// Print published reference totals beside the computed ones.
        #[arg(long)]
        compare_paper: bool,
        #[arg(long)]
        json: bool,
    },
    /// Generate a synthetic dataset (`images/` and `edges/`).
    Synth {
        #[arg(long, default_value_t = 64)]
        n: usize,
        #[arg(long, default_value_t = 64)]
        size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: cannot size the thread pool: {e}");
            return ExitCode::from(1);
        }
    }
    let result = match cli.command {
        Command::Train {
            config,
            preset,
            synthetic,
            out,
            resume,
        } => commands::train(config, preset, synthetic, &out, resume),
        Command::Predict {
            checkpoint,
            input,
            out,
            dump_intermediate,
        } => commands::predict(&checkpoint, &input, &out, dump_intermediate),
        Command::Eval {
            pred,
            gt,
            config,
            setting,
            tolerance,
            eta,
            report,
        } => commands::eval(&pred, &gt, config, setting, tolerance, eta, report),
        Command::Gradcheck { scale } => commands::gradcheck(&scale),
        Command::Params {
            config,
            preset,
            height,
            width,
            compare_paper,
            json,
        } => commands::params(config, preset, height, width, compare_paper, json),
        Command::Synth { n, size, seed, out } => commands::synth(n, size, seed, &out),
    };
    match result {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
