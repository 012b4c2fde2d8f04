use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::{error, info};
use serde::Serialize;

use cgane::pipeline::{
    stage_crossval, stage_embed, stage_grow, stage_phantom, stage_report, stage_sample,
    stage_train_gan, stage_validate, PipelineError, RunConfig, Scale,
};

#[derive(Parser)]
#[command(
    name = "cgane",
    version,
    about = "Constrained GAN ensembles for synthetic 3D volumes"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the phantom dataset and the held-out split.
    Phantom(Common),
    /// Train one GAN and trace its FD over checkpoints.
    TrainGan(Common),
    /// Grow the ensemble by the configured number of components.
    Grow(Common),
    /// Write screened samples from the ensemble.
    Sample(Common),
    /// Compare ensemble-trained and real-trained classifiers on held-out subjects.
    Validate(Common),
    /// k-fold comparison of baseline and synthetic-source classifiers.
    Crossval(Common),
    /// PCA and t-SNE of real and synthetic samples.
    Embed(Common),
    /// Summarise a run directory.
    Report {
        #[arg(long)]
        out: PathBuf,
    },
    /// Every stage in order, then the report.
    Run(Common),
}

#[derive(Args)]
struct Common {
    /// JSON overlay on the selected preset.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Run directory.
    #[arg(long)]
    out: PathBuf,
    /// Root seed; every stage seed derives from it.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads for fold-parallel work (default: all cores).
    #[arg(long)]
    threads: Option<usize>,
    #[arg(long, value_name = "test|desk|paper", default_value = "test")]
    stage_scale: Scale,
}

impl Common {
    fn setup(&self) -> Result<RunConfig, PipelineError> {
        if let Some(n) = self.threads {
            rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build_global()
                .map_err(|e| PipelineError::Config(format!("--threads: {e}")))?;
        }
        RunConfig::load(self.config.as_deref(), self.stage_scale, self.seed)
    }
}

fn show<T: Serialize>(stage: &str, summary: &T) {
    info!("{stage} done");
    println!(
        "{}",
        serde_json::to_string_pretty(summary).expect("summary serializes")
    );
}

fn run_all(cfg: &RunConfig, out: &Path) -> Result<(), PipelineError> {
    show("phantom", &stage_phantom(cfg, out)?);
    show("train-gan", &stage_train_gan(cfg, out)?);
    show("grow", &stage_grow(cfg, out)?);
    show("sample", &stage_sample(cfg, out)?);
    let validated = stage_validate(cfg, out);
    if let Ok(s) = &validated {
        show("validate", s);
    }
    show("crossval", &stage_crossval(cfg, out)?);
    show("embed", &stage_embed(cfg, out)?);
    print!("{}", stage_report(out)?);
    validated.map(|_| ())
}

fn dispatch(cli: Cli) -> Result<(), PipelineError> {
    match cli.command {
        Command::Report { out } => {
            print!("{}", stage_report(&out)?);
            Ok(())
        }
        Command::Phantom(c) => Ok(show("phantom", &stage_phantom(&c.setup()?, &c.out)?)),
        Command::TrainGan(c) => Ok(show("train-gan", &stage_train_gan(&c.setup()?, &c.out)?)),
        Command::Grow(c) => Ok(show("grow", &stage_grow(&c.setup()?, &c.out)?)),
        Command::Sample(c) => Ok(show("sample", &stage_sample(&c.setup()?, &c.out)?)),
        Command::Validate(c) => Ok(show("validate", &stage_validate(&c.setup()?, &c.out)?)),
        Command::Crossval(c) => Ok(show("crossval", &stage_crossval(&c.setup()?, &c.out)?)),
        Command::Embed(c) => Ok(show("embed", &stage_embed(&c.setup()?, &c.out)?)),
        Command::Run(c) => run_all(&c.setup()?, &c.out),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match dispatch(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            error!("{e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
