use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Result};
use clap::{Args, Parser, Subcommand};
use mopoe_cli::commands::{self, CHECKPOINT_FILE};
use mopoe_cli::config::{ConfigError, Overrides, RunConfig};
use mopoe_core::oracle::verify::VerifyConfig;

/// Multimodal VAEs with mixture-of-products-of-experts posteriors.
#[derive(Parser)]
#[command(name = "mopoe", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic dataset and its manifest.
    GenData(Common),
    /// Train one model; writes config, metrics and checkpoints to --out.
    Train(Common),
    /// Evaluate a checkpoint: probe accuracy, coherence, IWAE.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Defaults to `<out>/checkpoint.bin`.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Train and evaluate every (beta, seed) cell.
    Sweep {
        #[command(flatten)]
        common: Common,
        /// Comma-separated beta list; overrides `sweep.betas`.
        #[arg(long, value_delimiter = ',')]
        betas: Option<Vec<f64>>,
    },
    /// Check the bound identities against the linear-Gaussian oracle.
    Verify {
        #[arg(long, default_value_t = 50)]
        instances: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Flip the KL sign in the bound check; it must then fail.
        #[arg(long)]
        mutate_kl_sign: bool,
    },
}

#[derive(Args)]
struct Common {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    objective: Option<String>,
    #[arg(long)]
    subset_policy: Option<String>,
    #[arg(long)]
    beta: Option<f64>,
    #[arg(long)]
    kl_estimator: Option<String>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
}

impl Common {
    fn resolve(&self) -> Result<RunConfig> {
        RunConfig::load(self.config.as_deref())?.apply(&Overrides {
            seed: self.seed,
            objective: self.objective.clone(),
            subset_policy: self.subset_policy.clone(),
            beta: self.beta,
            kl_estimator: self.kl_estimator.clone(),
            epochs: self.epochs,
            out: self.out.clone(),
        })
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData(common) => {
            let mut cfg = common.resolve()?;
            if let Some(out) = common.out {
                cfg.data.dir = out;
            }
            let m = commands::gen_data(&cfg)?;
            println!("wrote {} files to {} (hash {})", m.files.len(), cfg.data.dir.display(), m.hash);
        }
        Command::Train(common) => {
            let cfg = common.resolve()?;
            let t = commands::train(&cfg, &cfg.out)?;
            println!(
                "{}: test elbo {:.4} after {} epochs, run in {}",
                cfg.run_id(),
                t.final_test.elbo,
                cfg.train.epochs,
                t.run_dir.display()
            );
        }
        Command::Eval { common, checkpoint } => {
            let cfg = common.resolve()?;
            let ckpt = checkpoint.unwrap_or_else(|| cfg.out.join(CHECKPOINT_FILE));
            let r = commands::eval(&cfg, &ckpt, &cfg.out)?;
            for p in &r.probe {
                println!("probe {:<12} {:.4}", p.subset, p.value);
            }
            println!("joint coherence {:.4}", r.joint_coherence);
            for i in &r.iwae {
                println!("iwae {:<12} {:.4}", i.subset, i.value);
            }
        }
        Command::Sweep { common, betas } => {
            let mut cfg = common.resolve()?;
            if let Some(b) = betas {
                cfg.sweep.betas = b;
            }
            if let Some(seed) = common.seed {
                cfg.sweep.seeds = vec![seed];
            }
            cfg.validate()?;
            let rows = commands::sweep(&cfg, commands::sweep_threads())?;
            println!("{} rows written to {}", rows.len(), cfg.out.join("sweep.csv").display());
        }
        Command::Verify {
            instances,
            seed,
            mutate_kl_sign,
        } => {
            if instances == 0 {
                bail!(ConfigError("--instances must be at least 1".into()));
            }
            let config = VerifyConfig {
                instances,
                identity_instances: instances.min(20),
                seed,
                mutate_kl_sign,
                ..Default::default()
            };
            let report = commands::verify(&config)?;
            for line in commands::format_report(&report) {
                println!("{line}");
            }
            if !report.all_passed() {
                bail!(VerificationFailed);
            }
        }
    }
    Ok(())
}

#[derive(Debug)]
struct VerificationFailed;

impl std::fmt::Display for VerificationFailed {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str("verification failed")
    }
}

impl std::error::Error for VerificationFailed {}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            let usage = e.downcast_ref::<ConfigError>().is_some()
                || matches!(
                    e.downcast_ref::<mopoe_core::Error>(),
                    Some(mopoe_core::Error::ConfigInvalid(_))
                );
            ExitCode::from(if usage { 2 } else { 1 })
        }
    }
}
