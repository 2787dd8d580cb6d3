//! Command-line front end.

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use super::{run_experiment, Command, DatasetSource, ExperimentSpec};
use crate::attack::AttackTarget;
use crate::defense::NoiseSite;
use crate::error::Result;

#[derive(Debug, Parser)]
#[command(
    name = "maml-privacy",
    version,
    about = "Membership inference and noise defenses for federated MAML"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Sub,
}

#[derive(Debug, Subcommand)]
pub enum Sub {
    /// Meta-train and record meta-test accuracy per epoch.
    Train(Common),
    /// Attack accuracy, recall and precision over the ways x shots grid.
    AttackEval(Common),
    /// Attack accuracy as the number of ways varies.
    SweepWays(Common),
    /// Attack accuracy as the number of shots varies.
    SweepShots(Common),
    /// Attack accuracy at checkpoints along meta-training.
    SweepEpochs(Common),
    /// Reconstruction wall time over iterations x set sizes.
    Bench(Common),
    /// Attack and meta-test accuracy across noise sites and magnitudes.
    NoiseSweep(Common),
    /// Build gradient collisions for the single-neuron network.
    VerifyTheory(Common),
}

#[derive(Debug, Args)]
pub struct Common {
    /// TOML experiment spec; flags below override its fields.
    #[arg(long)]
    pub spec: Option<PathBuf>,
    /// IDX image file (gzip or raw).
    #[arg(long, requires = "labels")]
    pub images: Option<PathBuf>,
    /// IDX label file (gzip or raw).
    #[arg(long, requires = "images")]
    pub labels: Option<PathBuf>,
    /// Use a procedural corpus of this many examples per class instead of files.
    #[arg(long, conflicts_with = "images")]
    pub synthetic: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, short)]
    pub output_dir: Option<PathBuf>,
    /// Trials per cell (even).
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long, value_delimiter = ',')]
    pub ways: Option<Vec<usize>>,
    #[arg(long, value_delimiter = ',')]
    pub shots: Option<Vec<usize>>,
    /// `query`, `support` or both.
    #[arg(long, value_delimiter = ',')]
    pub targets: Option<Vec<AttackTarget>>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long, value_delimiter = ',')]
    pub sites: Option<Vec<NoiseSite>>,
    #[arg(long, value_delimiter = ',')]
    pub sigmas: Option<Vec<f64>>,
    #[arg(long)]
    pub replicates: Option<usize>,
}

impl Common {
    /// The effective spec for `command`.
    pub fn resolve(&self, command: Command) -> Result<ExperimentSpec> {
        let mut spec = match &self.spec {
            Some(path) => ExperimentSpec::load(path)?,
            None => ExperimentSpec::default(),
        };
        spec.command = command;
        if let (Some(images), Some(labels)) = (&self.images, &self.labels) {
            spec.dataset = DatasetSource::Idx {
                name: images
                    .file_name()
                    .map(|f| f.to_string_lossy().into_owned())
                    .unwrap_or_else(|| "idx".into()),
                images: images.clone(),
                labels: labels.clone(),
            };
        }
        if let Some(per_class) = self.synthetic {
            spec.dataset = DatasetSource::Synthetic { classes: 10, per_class };
        }
        macro_rules! set {
            ($field:ident => $($dst:tt)+) => {
                if let Some(v) = &self.$field {
                    spec.$($dst)+ = v.clone();
                }
            };
        }
        set!(seed => seed);
        set!(output_dir => output_dir);
        set!(n => n);
        set!(ways => ways);
        set!(shots => shots);
        set!(targets => targets);
        set!(epochs => train.epochs);
        set!(sites => noise.sites);
        set!(sigmas => noise.sigmas);
        set!(replicates => replicates);
        if self.n.is_some() && self.spec.is_none() {
            spec.calibration_trials = spec.n;
        }
        Ok(spec)
    }
}

impl Sub {
    pub fn split(&self) -> (Command, &Common) {
        match self {
            Sub::Train(c) => (Command::Train, c),
            Sub::AttackEval(c) => (Command::AttackEval, c),
            Sub::SweepWays(c) => (Command::SweepWays, c),
            Sub::SweepShots(c) => (Command::SweepShots, c),
            Sub::SweepEpochs(c) => (Command::SweepEpochs, c),
            Sub::Bench(c) => (Command::Bench, c),
            Sub::NoiseSweep(c) => (Command::NoiseSweep, c),
            Sub::VerifyTheory(c) => (Command::VerifyTheory, c),
        }
    }
}

/// Parses `args`, runs the experiment and prints where its outputs went.
pub fn run<I, T>(args: I) -> Result<()>
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = Cli::parse_from(args);
    let (command, common) = cli.command.split();
    let spec = common.resolve(command)?;
    let outcome = run_experiment(&spec)?;
    if let Some(report) = &outcome.report {
        print!("{report}");
    }
    for row in &outcome.rows {
        println!(
            "{} w={} s={} epoch={} target={} site={} sigma={} acc={:.3} mt={:.3} t={:.3}s",
            row.experiment_id,
            row.w,
            row.s,
            row.epoch,
            row.target,
            row.site,
            row.sigma,
            row.accuracy,
            row.meta_test_accuracy,
            row.wall_seconds
        );
    }
    for path in &outcome.artifacts {
        eprintln!("wrote {}", path.display());
    }
    Ok(())
}
