//! Command-line harness: configuration ingestion, experiment orchestration
//! and report emission.

pub mod artifacts;
pub mod commands;
pub mod error;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use untwin_core::untwin::RollbackRule;

use commands::{CompareOptions, Overrides};
pub use error::{CliError, CliResult};

#[derive(Debug, Parser)]
#[command(
    name = "untwin",
    version,
    about = "Twinning and untwinning of network digital twins"
)]
pub struct Cli {
    /// JSON run config; defaults apply to absent keys.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory (else UNTWIN_OUT, the config's `output`, or ./untwin-out).
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run forward twinning and store history and checkpoints.
    Twin,
    /// Remove NDTs from a twinned model.
    Untwin {
        #[command(subcommand)]
        mode: UntwinMode,
    },
    /// Probe untwinning against retraining from scratch over many seeds.
    Compare {
        /// Seeds per pipeline (at least 30).
        #[arg(long, default_value_t = 30)]
        seeds: usize,
        #[arg(long, default_value_t = 0)]
        target: usize,
        /// Compare the untwinning pipeline with itself on disjoint seeds.
        #[arg(long)]
        self_comparison: bool,
        #[arg(long, default_value_t = 1000)]
        permutations: usize,
        #[command(flatten)]
        plan: PlanFlags,
    },
    /// Summarize the artifacts in the output directory.
    Report,
}

#[derive(Debug, Subcommand)]
pub enum UntwinMode {
    /// Single-request untwinning.
    Sru {
        #[arg(long)]
        target: usize,
        #[command(flatten)]
        flags: UntwinFlags,
    },
    /// Parallel untwinning of several requests through NDT clusters.
    Pru {
        #[arg(long, value_delimiter = ',', required = true)]
        requests: Vec<usize>,
        #[command(flatten)]
        flags: UntwinFlags,
    },
}

#[derive(Debug, Args)]
pub struct UntwinFlags {
    /// Also retrain from scratch and report PED and distance to it.
    #[arg(long)]
    pub with_oracle: bool,
    #[command(flatten)]
    pub plan: PlanFlags,
}

#[derive(Debug, Args)]
pub struct PlanFlags {
    /// Noise scale σ, replacing the calibrated one.
    #[arg(long)]
    pub noise: Option<f64>,
    /// Roll back to this round exactly.
    #[arg(long)]
    pub force_t_star: Option<u64>,
    #[arg(long, value_enum)]
    pub rollback_rule: Option<RuleArg>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum RuleArg {
    Theorem,
    Literal,
}

impl PlanFlags {
    fn overrides(&self) -> Overrides {
        Overrides {
            noise: self.noise,
            force_t_star: self.force_t_star,
            rollback_rule: self.rollback_rule.map(|r| match r {
                RuleArg::Theorem => RollbackRule::Theorem,
                RuleArg::Literal => RollbackRule::Literal,
            }),
        }
    }
}

/// Runs one parsed command line; returns what it prints for `report`.
pub fn run(cli: Cli) -> CliResult<()> {
    let allow_saved = !matches!(cli.command, Command::Twin);
    let (mut cfg, out) =
        commands::resolve_config(cli.config.as_deref(), cli.out.as_deref(), allow_saved)?;
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    cfg.output = None;
    cfg.validate()?;
    match cli.command {
        Command::Twin => commands::twin(&cfg, &out),
        Command::Untwin { mode } => match mode {
            UntwinMode::Sru { target, flags } => commands::untwin_sru(
                &cfg,
                &out,
                target,
                &flags.plan.overrides(),
                flags.with_oracle,
            ),
            UntwinMode::Pru { requests, flags } => commands::untwin_pru(
                &cfg,
                &out,
                &requests,
                &flags.plan.overrides(),
                flags.with_oracle,
            ),
        },
        Command::Compare {
            seeds,
            target,
            self_comparison,
            permutations,
            plan,
        } => commands::compare(
            &cfg,
            &out,
            &CompareOptions {
                seeds,
                target,
                self_comparison,
                permutations,
            },
            &plan.overrides(),
        ),
        Command::Report => {
            println!("{}", commands::report(&out)?);
            Ok(())
        }
    }
}
