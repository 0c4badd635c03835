use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use csamoe::gradcheck::GradcheckConfig;
use csamoe_cli::commands::{self, EvalOptions, TrainOverrides};
use csamoe_cli::config::{parse_expert, parse_preset, parse_variant};
use csamoe_cli::CliResult;

#[derive(Parser)]
#[command(name = "csamoe", version, about = "Train and evaluate CSA-MoE-Net on mask-derived multi-view images")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic benign/malignant dataset.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 200)]
        per_class: usize,
        #[arg(long, default_value_t = 224)]
        size: usize,
        #[arg(long, default_value_t = 42)]
        seed: u64,
    },
    /// Train one or more seeded runs from a config file.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_parser = parse_variant)]
        variant: Option<csamoe::moe::Variant>,
        /// `tumor`, `boundary` or `none`.
        #[arg(long)]
        drop_expert: Option<String>,
        #[arg(long)]
        runs: Option<usize>,
        /// Seed of run 0; run k uses seed-base + k.
        #[arg(long)]
        seed_base: Option<u64>,
    },
    /// Score a checkpoint on one part of a dataset.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "test")]
        part: String,
        /// Output directory; defaults to the checkpoint's directory.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = 42)]
        split_seed: u64,
        /// Fail unless the checkpoint holds this variant.
        #[arg(long, value_parser = parse_variant)]
        variant: Option<csamoe::moe::Variant>,
        /// Fail unless the checkpoint holds this preset.
        #[arg(long, value_parser = parse_preset)]
        preset: Option<csamoe::backbone::Preset>,
        #[arg(long, default_value_t = 32)]
        batch_size: usize,
    },
    /// Print parameter and multiply-accumulate counts.
    Count {
        #[arg(long, value_parser = parse_variant, default_value = "csa_moe")]
        variant: csamoe::moe::Variant,
        #[arg(long, value_parser = parse_preset, default_value = "full")]
        preset: csamoe::backbone::Preset,
    },
    /// Finite-difference check of every op and the tiny model.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 20)]
        trials: usize,
        /// Scale the backward pass of this op (harness self-test).
        #[arg(long, hide = true)]
        corrupt: Option<String>,
    },
}

fn run(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::Synth {
            out,
            per_class,
            size,
            seed,
        } => commands::synth(&out, per_class, size, seed),
        Command::Train {
            config,
            variant,
            drop_expert,
            runs,
            seed_base,
        } => {
            let overrides = TrainOverrides {
                variant,
                dropped: drop_expert.as_deref().map(parse_expert).transpose()?,
                runs,
                seed_base,
            };
            commands::train(&config, overrides).map(|_| ())
        }
        Command::Eval {
            checkpoint,
            data,
            part,
            out,
            split_seed,
            variant,
            preset,
            batch_size,
        } => commands::eval(&EvalOptions {
            checkpoint,
            data,
            part,
            out,
            split_seed,
            variant,
            preset,
            batch_size,
        })
        .map(|_| ()),
        Command::Count { variant, preset } => commands::count(variant, preset),
        Command::Gradcheck { seed, trials, corrupt } => commands::gradcheck(&GradcheckConfig {
            seed,
            trials,
            fault: corrupt,
            ..GradcheckConfig::default()
        }),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
