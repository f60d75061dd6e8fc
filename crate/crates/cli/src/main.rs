use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use sgnet_cli::commands::{
    cmd_compare, cmd_evaluate, cmd_paradox, cmd_params, cmd_phantom, cmd_train, params_table, ParadoxSource,
    PhantomArgs,
};
use sgnet_cli::config::RunConfig;
use sgnet_cli::report::{comparison_table, evaluation_table, paradox_table};
use sgnet_cli::{exit, exit_code};
use sgnet_core::data::manifest::Split;
use sgnet_core::models::ArchKind;
use sgnet_core::{parallel, Error, Result};

#[derive(Parser)]
#[command(name = "sgnet", version, about = "Volumetric lesion segmentation with spatial gating")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Pipeline options shared by commands that load volumes.
#[derive(Args)]
struct ConfigArgs {
    /// `key = value` configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a configuration key, e.g. `--set lr=0.001`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl ConfigArgs {
    fn resolve(&self, arch: Option<&str>) -> Result<RunConfig> {
        let mut c = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        if let Some(a) = arch {
            c.set("arch", a)?;
        }
        for kv in &self.overrides {
            c.apply_override(kv)?;
        }
        c.validate()?;
        Ok(c)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate a seeded synthetic cohort with a manifest.
    Phantom {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 14)]
        n_train: usize,
        #[arg(long, default_value_t = 2)]
        n_val: usize,
        #[arg(long, default_value_t = 4)]
        n_test: usize,
        #[arg(long, default_value_t = 64)]
        dim: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train a model and write checkpoint, log and effective config.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        arch: Option<String>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        quiet: bool,
    },
    /// Segment a split and report per-subject metrics.
    Evaluate {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
        #[arg(long)]
        report: PathBuf,
    },
    /// Paired t-tests of evaluation reports against a reference model.
    Compare {
        #[arg(long, num_args = 2.., required = true)]
        reports: Vec<PathBuf>,
        #[arg(long, default_value = "sgnet")]
        reference: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Parameter counts of the default architectures.
    Params {
        #[arg(long, conflicts_with = "all")]
        arch: Option<String>,
        #[arg(long)]
        all: bool,
        /// Also time one forward pass over a cube of this size.
        #[arg(long)]
        time_dim: Option<usize>,
    },
    /// Compare predictions with their dilations (recall/precision trade-off).
    Paradox {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, conflicts_with = "oracle_gt", required_unless_present = "oracle_gt")]
        ckpt: Option<PathBuf>,
        /// Use the ground truth itself as the prediction.
        #[arg(long)]
        oracle_gt: bool,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
        #[arg(long, default_value_t = 3)]
        dilate: usize,
        #[arg(long)]
        report: PathBuf,
    },
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Phantom { out, n_train, n_val, n_test, dim, seed } => {
            let m = cmd_phantom(&PhantomArgs { out, n_train, n_val, n_test, dim, seed })?;
            println!("wrote {}", m.display());
        }
        Command::Train { cfg, arch, data, out, quiet } => {
            let c = cfg.resolve(arch.as_deref())?;
            let o = cmd_train(&c, &data, &out, !quiet)?;
            println!(
                "best val dice {:.4} at epoch {} ({:?}); checkpoint {}",
                o.log.best_val_dice,
                o.log.best_epoch,
                o.log.stop_reason,
                o.checkpoint.display()
            );
        }
        Command::Evaluate { cfg, ckpt, data, split, report } => {
            let c = cfg.resolve(None)?;
            let split: Split = split.parse().map_err(|e: Error| Error::Config(e.to_string()))?;
            let r = cmd_evaluate(&ckpt, &data, split, &report, &c)?;
            print!("{}", evaluation_table(&r));
        }
        Command::Compare { reports, reference, out } => {
            let c = cmd_compare(&reports, &reference, &out)?;
            print!("{}", comparison_table(&c));
        }
        Command::Params { arch, all, time_dim } => {
            let archs = match (arch, all) {
                (Some(a), false) => vec![a.parse::<ArchKind>()?],
                _ => ArchKind::ALL.to_vec(),
            };
            print!("{}", params_table(&cmd_params(&archs, time_dim)?));
        }
        Command::Paradox { cfg, ckpt, oracle_gt, data, split, dilate, report } => {
            let c = cfg.resolve(None)?;
            let split: Split = split.parse().map_err(|e: Error| Error::Config(e.to_string()))?;
            let source = match (ckpt, oracle_gt) {
                (_, true) => ParadoxSource::OracleGroundTruth,
                (Some(p), false) => ParadoxSource::Checkpoint(p),
                (None, false) => return Err(Error::Config("pass --ckpt or --oracle-gt".into())),
            };
            let r = cmd_paradox(&source, &data, split, dilate, &report, &c)?;
            print!("{}", paradox_table(&r));
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if !parallel::deterministic() {
        eprintln!("running with {} threads", parallel::threads());
    }
    match run(cli) {
        Ok(()) => ExitCode::from(exit::OK as u8),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}
