use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use stochsr::collab::Ablation;
use stochsr::config::{self, ExperimentConfig, Overrides, Preset};
use stochsr::{pipeline, Error, Result};

#[derive(Parser, Debug)]
#[command(name = "stochsr", version, about = "Probabilistic degradation generators and collaborative SR training")]
struct Cli {
    /// TOML config file layered over the preset.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// `paper` or `desk`.
    #[arg(long, global = true)]
    preset: Option<String>,
    /// Root directory for run outputs.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Render or index the corpus and write the split manifest.
    Prepare,
    /// Train the degradation generator ensemble.
    TrainDegraders,
    /// Train SR models on pseudo-pairs from the frozen generators.
    TrainSr {
        /// single, naive, cl_no_ada or full.
        #[arg(long)]
        ablation: Option<String>,
    },
    /// Score trained SR models on the test split.
    Evaluate {
        #[arg(long)]
        ablation: Option<String>,
    },
    /// Sweep test-time input noise and plot PSNR against it.
    Robustness {
        #[arg(long)]
        ablation: Option<String>,
    },
    /// Train and evaluate every ablation arm.
    Ablate,
    /// Print the resolved config.
    ShowConfig,
}

fn resolve(cli: &Cli) -> Result<ExperimentConfig> {
    let ablation = match &cli.command {
        Command::TrainSr { ablation } | Command::Evaluate { ablation } | Command::Robustness { ablation } => {
            ablation.as_deref().map(str::parse::<Ablation>).transpose()?
        }
        _ => None,
    };
    let overrides = Overrides {
        preset: cli.preset.as_deref().map(str::parse::<Preset>).transpose()?,
        seed: cli.seed,
        out: cli.out.clone(),
        ablation,
    };
    config::load(cli.config.as_deref(), std::env::vars(), &overrides)
}

fn run(cli: &Cli) -> Result<()> {
    let cfg = resolve(cli)?;
    let run = cfg.run_dir();
    match &cli.command {
        Command::Prepare => {
            let m = pipeline::prepare(&cfg)?;
            println!("prepared {} files in {}", m.outputs.len(), run.display());
        }
        Command::TrainDegraders => {
            pipeline::train_degraders(&cfg)?;
            println!("generators written to {}", run.join("generators").display());
        }
        Command::TrainSr { .. } => {
            pipeline::train_sr(&cfg)?;
            println!("SR models written to {}", run.join(format!("sr-{}", cfg.ablation)).display());
        }
        Command::Evaluate { .. } => {
            let s = pipeline::evaluate(&cfg)?;
            for r in &s.models {
                println!(
                    "{:<8} psnr {:>8} ssim {:.4}",
                    r.meta.model,
                    db(r.aggregate.psnr),
                    r.aggregate.ssim
                );
            }
            println!("best: {}", s.models[s.best].meta.model);
            println!(
                "{:<8} psnr {:>8} ssim {:.4}",
                "bicubic",
                db(s.bicubic.aggregate.psnr),
                s.bicubic.aggregate.ssim
            );
        }
        Command::Robustness { .. } => {
            for c in pipeline::robustness(&cfg)? {
                let cells: Vec<String> = c.psnr_at_sigma.iter().map(|v| format!("{v:.2}")).collect();
                println!("{:<14} {}", c.label, cells.join(" "));
            }
        }
        Command::Ablate => {
            for r in pipeline::ablate(&cfg)? {
                println!("{:<10} {:<4} psnr {:.3} ssim {:.4}", r.ablation, r.best_model, r.psnr, r.ssim);
            }
        }
        Command::ShowConfig => {
            print!("{}", cfg.to_toml()?);
            println!("# run directory: {}", run.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn db(v: f64) -> String {
    if v.is_finite() {
        format!("{v:.3}")
    } else {
        stochsr::metrics::fmt_db(v)
    }
}

fn exit_code(e: &Error) -> u8 {
    e.exit_code() as u8
}
