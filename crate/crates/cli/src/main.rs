use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{anyhow, Result};
use clap::{Args, Parser, Subcommand};
use medmix::corruption::{Phase, Protocol};
use medmix::fusion::FusionMode;
use medmix_cli::commands;
use medmix_cli::config::{ExperimentConfig, Overrides};
use medmix_cli::jobs;

#[derive(Parser)]
#[command(name = "medmix", version, about = "Mixture-of-experts fusion over cached medical embeddings")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the configured synthetic dataset.
    Synth(Common),
    /// Train one model per seed.
    Train(Common),
    /// Evaluate checkpoints under the corruption grid.
    Eval {
        #[command(flatten)]
        common: Common,
        /// A checkpoint file or a `train` output directory.
        #[arg(long)]
        checkpoint: PathBuf,
        /// Evaluate on `external_dataset` instead.
        #[arg(long)]
        external: bool,
    },
    /// Train and evaluate every method under the corruption grid.
    Sweep(Common),
    /// Train and score the variant grid.
    Ablate(Common),
}

#[derive(Args)]
struct Common {
    #[arg(long)]
    config: PathBuf,
    /// Single seed; repeat for several.
    #[arg(long)]
    seed: Vec<u64>,
    /// Comma-separated seed list.
    #[arg(long, value_delimiter = ',')]
    seeds: Vec<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Named variant such as `no-distill` or `single-modality:image`.
    #[arg(long)]
    variant: Option<String>,
    /// medmix, mean_avg, concat, max, attention.
    #[arg(long)]
    fusion: Option<String>,
    /// Comma-separated corruption rates.
    #[arg(long, value_delimiter = ',')]
    rate: Vec<f64>,
    /// one_modality or multi_random.
    #[arg(long)]
    protocol: Option<String>,
    /// train or test.
    #[arg(long)]
    phase: Option<String>,
    /// Modality name or index for one_modality.
    #[arg(long)]
    modality: Option<String>,
}

impl Common {
    fn overrides(&self) -> Result<Overrides> {
        let seeds: Vec<u64> = self.seed.iter().chain(&self.seeds).copied().collect();
        Ok(Overrides {
            seeds: (!seeds.is_empty()).then_some(seeds),
            out: self.out.clone(),
            variant: self.variant.clone(),
            fusion: self
                .fusion
                .as_deref()
                .map(|s| FusionMode::parse(s).ok_or_else(|| anyhow!("unknown fusion rule {s:?}")))
                .transpose()?,
            rates: (!self.rate.is_empty()).then(|| self.rate.clone()),
            protocol: self
                .protocol
                .as_deref()
                .map(|s| Protocol::parse(s).ok_or_else(|| anyhow!("unknown protocol {s:?}")))
                .transpose()?,
            phase: self
                .phase
                .as_deref()
                .map(|s| Phase::parse(s).ok_or_else(|| anyhow!("unknown phase {s:?}")))
                .transpose()?,
            modality: self.modality.clone(),
        })
    }

    fn load(&self) -> Result<(ExperimentConfig, Overrides)> {
        let o = self.overrides()?;
        let mut cfg = ExperimentConfig::load(&self.config)?;
        cfg.apply(&o);
        cfg.validate()?;
        Ok((cfg, o))
    }
}

fn run(cli: Cli) -> Result<()> {
    let threads = jobs::thread_limit()?;
    match cli.command {
        Command::Synth(c) => {
            let (cfg, _) = c.load()?;
            let s = commands::cmd_synth(&cfg)?;
            println!(
                "{} samples, {} classes, modalities {:?}, splits {:?}, null {}",
                s.num_samples, s.num_classes, s.modalities, s.split_sizes, s.null_dataset
            );
            println!("content hash {}", s.content_hash);
        }
        Command::Train(c) => {
            let (cfg, o) = c.load()?;
            let r = commands::cmd_train(&cfg, &o, threads)?;
            println!("best epochs {:?}", r.best_epochs);
            println!(
                "val auroc {:.4} ± {:.4}, val loss {:.4} ± {:.4}",
                r.val_auroc.mean, r.val_auroc.std, r.val_loss.mean, r.val_loss.std
            );
        }
        Command::Eval { common, checkpoint, external } => {
            let (cfg, o) = common.load()?;
            let r = commands::cmd_eval(&cfg, &o, &checkpoint, external)?;
            for cell in &r.cells {
                println!(
                    "{} {} {} {} rate {:.2}: auroc {:.4} ± {:.4}",
                    r.cohort, cell.protocol, cell.phase, cell.modality, cell.rate, cell.mean.auroc, cell.std.auroc
                );
            }
        }
        Command::Sweep(c) => {
            let (cfg, o) = c.load()?;
            let r = commands::cmd_sweep(&cfg, &o, threads)?;
            for (method, rows) in &r.methods {
                println!("{method}: {} rows", rows.len());
            }
        }
        Command::Ablate(c) => {
            let (cfg, o) = c.load()?;
            let rows = commands::cmd_ablate(&cfg, &o, threads)?;
            for r in &rows {
                println!("{} seed {}: auroc {:.4}", r.variant, r.seed, r.auroc);
            }
        }
    }
    Ok(())
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
