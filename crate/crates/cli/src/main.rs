//! Command-line surface: gen-data, train, eval, draw-masks, analyze,
//! compare, smoke. Exit codes: 0 ok, 2 config error, 3 numeric failure.

mod commands;
mod config;
mod data;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use nexop_core::sampling::Method;
use nexop_core::CoreError;

#[derive(Parser)]
#[command(
    name = "nexop",
    about = "Joint optimization of multi-repetition k-space sampling masks and unrolled reconstruction on synthetic phantoms"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic multi-NEX phantom dataset (manifest + NXT files)
    GenData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 32)]
        height: usize,
        #[arg(long, default_value_t = 32)]
        width: usize,
        #[arg(long, default_value_t = 3)]
        nex: usize,
        #[arg(long, default_value_t = 0.15)]
        sigma: f64,
        #[arg(long, default_value_t = 64)]
        train: usize,
        #[arg(long, default_value_t = 12)]
        val: usize,
        #[arg(long, default_value_t = 16)]
        test: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long, default_value_t = 4)]
        ellipse_min: usize,
        #[arg(long, default_value_t = 9)]
        ellipse_max: usize,
        /// Disable the high-frequency texture overlay
        #[arg(long, default_value_t = false)]
        no_texture: bool,
    },
    /// Train one method end-to-end from a TOML config
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Override [schedule].epochs
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Evaluate a checkpoint on a dataset split (per-image + aggregate CSV)
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0.1)]
        threshold_frac: f64,
        #[arg(long, default_value_t = 1234)]
        eval_seed: u64,
        #[arg(long, default_value_t = 0.5)]
        tau_test: f64,
        #[arg(long, default_value_t = 1)]
        mask_draws: usize,
    },
    /// Draw mask realizations from a checkpoint (PGM masks + q as NXT)
    DrawMasks {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1)]
        draws: usize,
        #[arg(long, default_value_t = 0.5)]
        tau: f64,
        #[arg(long, default_value_t = 1234)]
        seed: u64,
    },
    /// Probability-map / mask analysis: rates, moments, accumulation maps
    Analyze {
        /// Trained checkpoint directory (mutually exclusive with --input)
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Per-repetition q maps (.nxt) or masks (.pgm), in repetition order
        #[arg(long)]
        input: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 16)]
        draws: usize,
        #[arg(long, default_value_t = 0.5)]
        tau: f64,
        #[arg(long, default_value_t = 1234)]
        seed: u64,
        #[arg(long, default_value = "synthetic")]
        contrast: String,
        /// Labels for --input mode
        #[arg(long, default_value = "external")]
        method_label: String,
        #[arg(long, default_value_t = 0.0)]
        r_label: f64,
        #[arg(long, default_value_t = 4)]
        acs_height: usize,
        #[arg(long, default_value_t = 4)]
        acs_width: usize,
    },
    /// Train/evaluate all methods at equal budget on one test split
    Compare {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Comma-separated subset (default: all six methods)
        #[arg(long)]
        methods: Option<String>,
        /// Load checkpoints from DIR/<method>/ instead of training inline
        #[arg(long)]
        checkpoints: Option<PathBuf>,
        /// Override [schedule].epochs
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// End-to-end pipeline check on a 16×16 instance (all debug checks on)
    Smoke {
        #[arg(long)]
        out: PathBuf,
    },
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::GenData {
            out,
            height,
            width,
            nex,
            sigma,
            train,
            val,
            test,
            seed,
            ellipse_min,
            ellipse_max,
            no_texture,
        } => commands::gen_data(
            &out, height, width, nex, sigma, train, val, test, seed, ellipse_min, ellipse_max,
            !no_texture,
        ),
        Command::Train { config, epochs } => {
            commands::train(&config, epochs)?;
            Ok(())
        }
        Command::Eval {
            checkpoint,
            data,
            split,
            out,
            threshold_frac,
            eval_seed,
            tau_test,
            mask_draws,
        } => commands::eval_cmd(
            &checkpoint,
            &data,
            &split,
            &out,
            threshold_frac,
            eval_seed,
            tau_test,
            mask_draws,
        ),
        Command::DrawMasks {
            checkpoint,
            out,
            draws,
            tau,
            seed,
        } => commands::draw_masks_cmd(&checkpoint, &out, draws, tau, seed),
        Command::Analyze {
            checkpoint,
            input,
            out,
            draws,
            tau,
            seed,
            contrast,
            method_label,
            r_label,
            acs_height,
            acs_width,
        } => match checkpoint {
            Some(ckpt) => commands::analyze_checkpoint(&ckpt, &out, draws, tau, seed, &contrast),
            None => commands::analyze_files(
                &input,
                &out,
                &commands::AnalyzeLabels {
                    method: method_label,
                    r: r_label,
                    contrast,
                },
                acs_height,
                acs_width,
            ),
        },
        Command::Compare {
            config,
            out,
            methods,
            checkpoints,
            epochs,
        } => {
            let methods = match methods {
                None => Method::ALL.to_vec(),
                Some(list) => {
                    let mut parsed = Vec::new();
                    for name in list.split(',') {
                        let name = name.trim();
                        match Method::parse(name) {
                            Some(m) => parsed.push(m),
                            None => anyhow::bail!("config error: unknown method \"{name}\""),
                        }
                    }
                    parsed
                }
            };
            commands::compare(&config, &out, &methods, checkpoints.as_deref(), epochs)
        }
        Command::Smoke { out } => commands::smoke(&out),
    }
}

/// 2 for configuration problems, 3 for numeric failures.
fn classify(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if let Some(core) = cause.downcast_ref::<CoreError>() {
            return match core {
                CoreError::NonFinite(_)
                | CoreError::NonFiniteProbe { .. }
                | CoreError::DegenerateProbabilityField
                | CoreError::EmptyRoi => 3,
                _ => 2,
            };
        }
    }
    let msg = format!("{err}");
    if msg.contains("numeric failure") {
        3
    } else {
        2
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(classify(&err))
        }
    }
}
