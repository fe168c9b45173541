//! `mdvae`: corpus generation, prior and denoiser training, denoising,
//! trajectory fitting and evaluation.

mod commands;
mod run;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

#[derive(Parser, Debug)]
#[command(name = "mdvae", version, about = "Learned motion prior and unsupervised motion denoising")]
struct Cli {
    /// Output directory of this run.
    #[arg(long, global = true, env = "MDVAE_OUT", default_value = "mdvae-out")]
    out: PathBuf,
    /// Seed for every random choice of the command.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic motion corpus, optionally with a noisy twin.
    GenCorpus(commands::GenCorpusArgs),
    /// Train the motion prior on a clean corpus.
    TrainPrior(commands::TrainPriorArgs),
    /// Train the denoising inference networks on noisy sequences.
    TrainDenoiser(commands::TrainDenoiserArgs),
    /// Denoise a noisy split and score it against its clean twins.
    Denoise(commands::DenoiseArgs),
    /// Recover global translation and orientation from 2D detections.
    FitTrajectory(commands::FitTrajectoryArgs),
    /// Score observations or denoised outputs against clean twins.
    Eval(commands::EvalArgs),
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let (out, seed) = (cli.out.as_path(), cli.seed);
    let result = match cli.command {
        Command::GenCorpus(a) => commands::gen_corpus(a, seed, out),
        Command::TrainPrior(a) => commands::train_prior(a, seed, out),
        Command::TrainDenoiser(a) => commands::train_denoiser_cmd(a, seed, out),
        Command::Denoise(a) => commands::denoise(a, seed, out),
        Command::FitTrajectory(a) => commands::fit_trajectory(a, seed, out),
        Command::Eval(a) => commands::eval(a, out),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(run::exit_code(&e) as u8)
        }
    }
}
