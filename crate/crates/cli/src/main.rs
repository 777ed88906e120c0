//! `speckle` command-line front end.
//!
//! Exit codes: 0 success, 2 configuration or usage error, 3 numerical
//! failure, 4 I/O or file-format error.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use speckle_core::contrast::ContrastConfig;
use speckle_core::harness::config::EvaluationSection;
use speckle_core::harness::{self, PipelineConfig};
use speckle_core::register::RegistrationConfig;
use speckle_core::{Error, Result};

#[derive(Parser, Debug)]
#[command(name = "speckle", version, about = "Laser speckle stabilization, contrast and few-frame diffusion reconstruction")]
struct Cli {
    /// Run configuration (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory for `simulate` and `pipeline`.
    #[arg(long, global = true, default_value = "out")]
    out_dir: PathBuf,
    /// Replace every seed in the configuration.
    #[arg(long, global = true)]
    seed_override: Option<u64>,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate phantom sequences and ground truth.
    Simulate,
    /// Stabilize a sequence by phase correlation.
    Register {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
        #[arg(long)]
        shifts: PathBuf,
    },
    /// Temporal contrast and flow prior of a sequence.
    Contrast {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        k_out: PathBuf,
        #[arg(long)]
        flow_out: PathBuf,
    },
    /// Train the denoiser on simulated sequences.
    Train {
        #[arg(long)]
        data_dir: PathBuf,
        #[arg(long)]
        model_out: PathBuf,
    },
    /// Reconstruct a flow map from the first frames of an aligned sequence.
    Sample {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        frames: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Sampler steps (default: config value, else 20).
        #[arg(long)]
        steps: Option<usize>,
        /// Sampling seed (default: --seed-override, else config `seeds.sample`, else 0).
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Score a predicted flow map against a reference.
    Eval {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        reference: PathBuf,
        #[arg(long)]
        out_csv: PathBuf,
    },
    /// Simulate, stabilize, train, sample and evaluate in one run.
    Pipeline,
}

fn load_config(path: Option<&Path>, seed: Option<u64>) -> Result<Option<PipelineConfig>> {
    path.map(|p| PipelineConfig::load(p).map(|c| c.with_seed_override(seed)))
        .transpose()
}

fn require(cfg: Option<PipelineConfig>, verb: &str) -> Result<PipelineConfig> {
    cfg.ok_or_else(|| Error::Config(format!("`{verb}` needs --config")))
}

fn run(cli: Cli) -> Result<()> {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    }
    let cfg = load_config(cli.config.as_deref(), cli.seed_override)?;
    match cli.command {
        Command::Simulate => {
            let cfg = require(cfg, "simulate")?;
            let files = harness::cmd_simulate(&cfg, &cli.out_dir)?;
            println!("wrote {} sequences to {}", files.len(), cli.out_dir.display());
        }
        Command::Register { input, output, shifts } => {
            let reg = cfg.map(|c| c.registration).unwrap_or_else(RegistrationConfig::default);
            let low = harness::cmd_register(&input, &output, &shifts, &reg)?;
            println!("registered {}; {low} low-confidence frames", input.display());
        }
        Command::Contrast { input, k_out, flow_out } => {
            let c = cfg.map(|c| c.contrast).unwrap_or_else(ContrastConfig::default);
            harness::cmd_contrast(&input, &k_out, &flow_out, &c)?;
        }
        Command::Train { data_dir, model_out } => {
            let cfg = require(cfg, "train")?;
            let (_, losses) = harness::cmd_train(&cfg, &data_dir, &model_out)?;
            println!(
                "trained {} steps; final loss {:.6}",
                losses.len(),
                losses.last().copied().unwrap_or(f64::NAN)
            );
        }
        Command::Sample {
            model,
            frames,
            out,
            steps,
            seed,
        } => {
            let steps = steps
                .or(cfg.as_ref().map(|c| c.diffusion.sampler.steps))
                .unwrap_or(20);
            let seed = seed
                .or(cli.seed_override)
                .or(cfg.as_ref().map(|c| c.seeds.sample))
                .unwrap_or(0);
            let c = cfg.map(|c| c.contrast).unwrap_or_else(ContrastConfig::default);
            harness::cmd_sample(&model, &frames, &out, steps, seed, &c)?;
        }
        Command::Eval {
            pred,
            reference,
            out_csv,
        } => {
            let e = cfg.map(|c| c.evaluation).unwrap_or_else(EvaluationSection::default);
            let m = harness::cmd_eval(&pred, &reference, &out_csv, &e)?;
            println!("ssim {:.4}  psnr {}  mae {:.4}", m.ssim, m.psnr, m.mae);
        }
        Command::Pipeline => {
            let cfg = require(cfg, "pipeline")?;
            let report = harness::cmd_pipeline(&cfg, &cli.out_dir)?;
            println!("config {}", report.config_hash);
            println!("train {} / test {} phantoms", report.n_train, report.n_test);
            for a in &report.aggregates {
                println!(
                    "{:<10} ssim {:.4} ± {:.4}  psnr {:.2} ± {:.2} dB  mae {:.4}",
                    a.method, a.ssim.0, a.ssim.1, a.psnr_db.0, a.psnr_db.1, a.mae.0
                );
            }
        }
    }
    Ok(())
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
