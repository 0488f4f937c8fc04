use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use xform_cli::commands::{
    cmd_complement, cmd_estimate, cmd_eval, cmd_policy, cmd_synth, EstimateArgs, EvalArgs,
    PolicyArgs, SynthArgs,
};
use xform_cli::config::Preset;
use xform_cli::{config_err, Result};

/// Estimate the visual-transformation distribution of an image dataset,
/// build its complement, and evaluate non-conflicting pretext tasks.
#[derive(Parser)]
#[command(name = "xform", version, about)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Render a synthetic shape dataset with known ground-truth transforms.
    Synth {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train the adversarial estimator and write checkpoint + histograms.
    Estimate {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Dataset directory (images.idx, labels.idx, optional params.csv).
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        iterations: Option<usize>,
        /// desk (50k iterations) or paper (500k).
        #[arg(long)]
        preset: Option<String>,
    },
    /// Complement each histogram in the CSV.
    Complement { input: PathBuf, output: PathBuf },
    /// Sample a K-way pretext policy from a complement CSV.
    Policy {
        #[arg(long)]
        complement: PathBuf,
        /// rotation | translation | scale
        #[arg(long)]
        kind: String,
        #[arg(long)]
        k: usize,
        /// manual | automated
        #[arg(long)]
        mode: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Pretext-train and linear-probe a policy over a list of seeds.
    Eval {
        #[arg(long)]
        policy: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Comma-separated seed list, e.g. 1,2,3
        #[arg(long)]
        seeds: String,
        #[arg(long)]
        config: Option<PathBuf>,
    },
}

fn parse_seeds(s: &str) -> Result<Vec<u64>> {
    s.split(',')
        .filter(|t| !t.trim().is_empty())
        .map(|t| {
            t.trim()
                .parse::<u64>()
                .map_err(|_| config_err(format!("bad seed `{t}`")))
        })
        .collect()
}

fn run(cli: Cli) -> Result<()> {
    match cli.cmd {
        Cmd::Synth { config, out, seed } => cmd_synth(&SynthArgs { config, out, seed }),
        Cmd::Estimate {
            config,
            data,
            out,
            seed,
            iterations,
            preset,
        } => {
            let preset = preset.as_deref().map(Preset::parse).transpose()?;
            cmd_estimate(&EstimateArgs {
                config,
                data,
                out,
                seed,
                iterations,
                preset,
            })
        }
        Cmd::Complement { input, output } => cmd_complement(&input, &output),
        Cmd::Policy {
            complement,
            kind,
            k,
            mode,
            seed,
            out,
        } => cmd_policy(&PolicyArgs {
            complement,
            kind,
            k,
            mode,
            seed,
            out,
        }),
        Cmd::Eval {
            policy,
            data,
            out,
            seeds,
            config,
        } => {
            let seeds = parse_seeds(&seeds)?;
            cmd_eval(&EvalArgs {
                policy,
                data,
                out,
                seeds,
                config,
            })
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
