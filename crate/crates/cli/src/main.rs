//! `unitlab` command-line frontend.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use unitlab::adaptation::DigitTask;
use unitlab::evaluation::SweepAxis;
use unitlab::translator::Direction;

const DEFAULTS: &str = "\
Defaults (published values unless marked):
  Adam learning rate 0.0001, beta1 0.5, beta2 0.999
  lambda0 (GAN) 10, lambda1 = lambda3 (KL) 0.1, lambda2 = lambda4 (L1) 100
  batch size 1 image per domain, one D step per G step
  pixel accuracy threshold 16 of 255
  initialization N(0, 0.02^2), zero biases (implementation choice)
  generator GAN loss non-saturating (implementation choice)
  accuracy norm max over channels, averaged per image (implementation choice)
  adaptation classifier and feature-L1 weights 1.0 (implementation choice)

Every run directory holds config.json (the resolved config) plus the
command's artifacts; `unitlab defaults` prints the full default config.
The output directory defaults to $UNITLAB_OUTPUT/<command>, else runs/<command>.";

#[derive(Parser)]
#[command(name = "unitlab", version, about = "Unsupervised image-to-image translation with coupled VAE-GANs", after_long_help = DEFAULTS)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Debug)]
pub struct Common {
    /// JSON run configuration (defaults apply when omitted).
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Run directory; must be empty or absent unless --overwrite.
    #[arg(long)]
    pub output: Option<PathBuf>,
    /// Overrides trainer.seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Overrides trainer.iterations.
    #[arg(long)]
    pub iterations: Option<u64>,
    /// Compute device; only `cpu` is available.
    #[arg(long, default_value = "cpu")]
    pub device: String,
    /// Allow writing into a non-empty run directory.
    #[arg(long)]
    pub overwrite: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Train a translation model.
    Train {
        #[command(flatten)]
        common: Common,
        /// Continue from this checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Resume even if the config digest differs.
        #[arg(long)]
        force: bool,
    },
    /// Translate every image of a folder with a trained checkpoint.
    Translate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        input: PathBuf,
        /// 1to2, 2to1, reconstruct-1, reconstruct-2, cycle-1 or cycle-2.
        #[arg(long, default_value = "1to2")]
        direction: Direction,
        /// Sample latent codes with this seed instead of using the mean.
        #[arg(long)]
        sample_seed: Option<u64>,
    },
    /// Pixel accuracy of predicted images against ground truth.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Folder of predictions, matched to --gt by file stem.
        #[arg(long, requires = "gt")]
        pred: Option<PathBuf>,
        #[arg(long, requires = "pred")]
        gt: Option<PathBuf>,
        /// Channels to decode --pred/--gt images with.
        #[arg(long, default_value_t = 3)]
        channels: usize,
        /// Translate the configured aligned set with this checkpoint instead.
        #[arg(long, conflicts_with = "pred")]
        checkpoint: Option<PathBuf>,
        /// Overrides eval.threshold.
        #[arg(long)]
        threshold: Option<u8>,
    },
    /// Train and score each constraint variant under several seeds.
    Ablate {
        #[command(flatten)]
        common: Common,
        /// Comma-separated subset of full, ws, cc.
        #[arg(long, value_delimiter = ',')]
        variants: Option<Vec<String>>,
        /// Use seeds 0..N instead of ablation.seeds.
        #[arg(long)]
        seeds: Option<u64>,
    },
    /// Train and score one model per value of a hyperparameter.
    Sweep {
        #[command(flatten)]
        common: Common,
        /// gan-weight, kl-weight, recon-weight, sharing-depth or discriminator-depth.
        #[arg(long, requires = "values")]
        axis: Option<String>,
        #[arg(long, value_delimiter = ',')]
        values: Option<Vec<f64>>,
    },
    /// Domain adaptation on a digit task.
    Adapt {
        #[command(flatten)]
        common: Common,
        /// mnist2usps, usps2mnist or svhn2mnist.
        #[arg(long)]
        task: DigitTask,
        /// Keep only this fraction of the source training set.
        #[arg(long)]
        source_fraction: Option<f64>,
    },
    /// Print the default run configuration.
    Defaults,
}

fn parse_axis(s: &str) -> anyhow::Result<SweepAxis> {
    Ok(serde_json::from_value(serde_json::Value::String(s.to_string()))
        .map_err(|_| anyhow::anyhow!("unknown sweep axis '{s}'"))?)
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Train { common, resume, force } => commands::train(&common, resume.as_deref(), force),
        Command::Translate { common, checkpoint, input, direction, sample_seed } => {
            commands::translate(&common, &checkpoint, &input, direction, sample_seed)
        }
        Command::Eval { common, pred, gt, channels, checkpoint, threshold } => {
            commands::eval(&common, pred.zip(gt), channels, checkpoint.as_deref(), threshold)
        }
        Command::Ablate { common, variants, seeds } => commands::ablate(&common, variants, seeds),
        Command::Sweep { common, axis, values } => {
            let axis = axis.as_deref().map(parse_axis).transpose()?;
            commands::sweep(&common, axis.zip(values))
        }
        Command::Adapt { common, task, source_fraction } => commands::adapt(&common, task, source_fraction),
        Command::Defaults => {
            println!("{}", serde_json::to_string_pretty(&config::RunConfig::default())?);
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
