//! Command-line driver for the bit-flip attack pipeline.

mod commands;
mod config;
mod report;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Args, Parser, Subcommand};

use commands::Outcome;
use config::{EpsilonMode, RunConfig, ThresholdMode};

/// Exit codes: 0 success, 1 attack below threshold under --strict,
/// 2 I/O or config error, 3 combinatorial guard exceeded.
const EXIT_BELOW_THRESHOLD: u8 = 1;
const EXIT_ERROR: u8 = 2;
const EXIT_GUARD: u8 = 3;

#[derive(Parser)]
#[command(
    name = "bitbreaker",
    version,
    about = "Bit-flip attack pipeline on quantized toy networks: rank layers, select a critical subset, and evolve a minimal flip set"
)]
struct Cli {
    /// Worker threads for parallel evaluation (0 = available parallelism).
    /// Results are independent of this cap.
    #[arg(long, global = true, default_value_t = 0)]
    threads: usize,

    #[command(subcommand)]
    command: Command,
}

/// Flags mirroring `RunConfig`; unset flags fall back to --config values,
/// which fall back to defaults. BITBREAKER_SEED overrides the seed.
#[derive(Args, Debug, Default)]
struct ConfigArgs {
    /// JSON RunConfig file; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Model checkpoint (JSON).
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Dataset file (JSON).
    #[arg(long)]
    dataset: Option<PathBuf>,
    /// Gradient share of the sensitivity score, in [0, 1].
    #[arg(long)]
    alpha: Option<f64>,
    /// Percent of each layer's weights flipped during ranking.
    #[arg(long)]
    rank_rate: Option<f64>,
    /// Bit position to flip (default: each format's MSB).
    #[arg(long)]
    flip_pos: Option<u8>,
    /// Comma-separated sampling rates for subset selection.
    #[arg(long, value_delimiter = ',')]
    rates: Option<Vec<f64>>,
    /// Loss threshold as a multiple of the clean loss.
    #[arg(long, conflicts_with = "threshold_absolute")]
    threshold_relative: Option<f64>,
    /// Loss threshold as an absolute value.
    #[arg(long)]
    threshold_absolute: Option<f64>,
    /// How many top-ranked layers the sweep covers.
    #[arg(long)]
    top_n: Option<usize>,
    /// GA population size.
    #[arg(long)]
    population: Option<usize>,
    /// GA generation limit.
    #[arg(long)]
    generations: Option<usize>,
    /// GA maximum per-solution removal rate.
    #[arg(long)]
    mutation_rate: Option<f64>,
    /// GA crossover probability.
    #[arg(long)]
    crossover_prob: Option<f64>,
    /// GA no-improvement generation limit.
    #[arg(long)]
    no_improve: Option<usize>,
    /// RNG seed for the stochastic stages.
    #[arg(long)]
    seed: Option<u64>,
    /// Enable the pruning stage after optimization.
    #[arg(long, conflicts_with = "no_prune")]
    prune: bool,
    /// Disable the pruning stage.
    #[arg(long)]
    no_prune: bool,
    /// Pruning epsilon as a fraction of the optimized loss.
    #[arg(long, conflicts_with = "prune_epsilon_absolute")]
    prune_epsilon_relative: Option<f64>,
    /// Pruning epsilon as an absolute loss change.
    #[arg(long)]
    prune_epsilon_absolute: Option<f64>,
    /// Pruning iteration limit.
    #[arg(long)]
    prune_max_iters: Option<usize>,
    /// Pruning no-improvement limit.
    #[arg(long)]
    prune_no_improve: Option<usize>,
    /// Directory for artifacts.
    #[arg(long)]
    out: Option<PathBuf>,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(path) => RunConfig::load(path)?,
            None => RunConfig::default(),
        };
        if let Some(v) = &self.checkpoint {
            cfg.checkpoint = v.clone();
        }
        if let Some(v) = &self.dataset {
            cfg.dataset = v.clone();
        }
        if let Some(v) = self.alpha {
            cfg.sensitivity.alpha = v;
        }
        if let Some(v) = self.rank_rate {
            cfg.sensitivity.sampling_rate = v;
        }
        if let Some(v) = self.flip_pos {
            cfg.sensitivity.flip_pos = Some(v);
        }
        if let Some(v) = &self.rates {
            cfg.subset.rates = v.clone();
        }
        if let Some(v) = self.threshold_relative {
            cfg.subset.threshold = ThresholdMode::Relative(v);
        }
        if let Some(v) = self.threshold_absolute {
            cfg.subset.threshold = ThresholdMode::Absolute(v);
        }
        if let Some(v) = self.top_n {
            cfg.subset.top_n = v;
        }
        if let Some(v) = self.population {
            cfg.ga.population = v;
        }
        if let Some(v) = self.generations {
            cfg.ga.max_generations = v;
        }
        if let Some(v) = self.mutation_rate {
            cfg.ga.mutation_rate = v;
        }
        if let Some(v) = self.crossover_prob {
            cfg.ga.crossover_prob = v;
        }
        if let Some(v) = self.no_improve {
            cfg.ga.no_improve = v;
        }
        if let Some(v) = self.seed {
            cfg.ga.seed = v;
        }
        if self.prune {
            cfg.prune.enabled = true;
        }
        if self.no_prune {
            cfg.prune.enabled = false;
        }
        if let Some(v) = self.prune_epsilon_relative {
            cfg.prune.epsilon = EpsilonMode::Relative(v);
        }
        if let Some(v) = self.prune_epsilon_absolute {
            cfg.prune.epsilon = EpsilonMode::Absolute(v);
        }
        if let Some(v) = self.prune_max_iters {
            cfg.prune.max_iters = v;
        }
        if let Some(v) = self.prune_no_improve {
            cfg.prune.no_improve = v;
        }
        if let Some(v) = &self.out {
            cfg.output_dir = v.clone();
        }
        cfg.apply_env()?;
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Rank layers by perturbation loss and emit the profile CSV.
    Rank {
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Find the smallest weight subset whose flip crosses the threshold.
    Select {
        #[command(flatten)]
        config: ConfigArgs,
        /// Exit nonzero when the threshold is not reached.
        #[arg(long)]
        strict: bool,
    },
    /// Evolve a minimal flip set inside a selected subset.
    Optimize {
        #[command(flatten)]
        config: ConfigArgs,
        /// Subset flip-set file (output of `select`).
        #[arg(long)]
        flipset: PathBuf,
        /// Exit nonzero when the best solution misses the threshold.
        #[arg(long)]
        strict: bool,
    },
    /// Strip inert indices from a flip set.
    Prune {
        #[command(flatten)]
        config: ConfigArgs,
        /// Flip-set file (output of `optimize`).
        #[arg(long)]
        flipset: PathBuf,
    },
    /// Full pipeline: rank, select, optimize, prune, re-evaluate.
    Attack {
        #[command(flatten)]
        config: ConfigArgs,
        /// Exit nonzero when the final loss misses the threshold.
        #[arg(long)]
        strict: bool,
        /// Zero out timing fields so reports compare byte-for-byte.
        #[arg(long)]
        normalize_timings: bool,
    },
    /// Compute loss, perplexity, and accuracy, optionally under a flip set.
    Eval {
        /// Model checkpoint (JSON).
        #[arg(long)]
        checkpoint: PathBuf,
        /// Dataset file (JSON).
        #[arg(long)]
        dataset: PathBuf,
        /// Flip-set file to overlay.
        #[arg(long)]
        flipset: Option<PathBuf>,
        /// Zero the flip set's weights instead of flipping them.
        #[arg(long, requires = "flipset")]
        mask: bool,
        /// Also write the metrics JSON to this path.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Exhaustive minimal-subset search over the selected subset.
    Oracle {
        #[command(flatten)]
        config: ConfigArgs,
        /// Largest subset size to enumerate.
        #[arg(long, default_value_t = 3)]
        max_size: usize,
        /// Search this flip-set file instead of running selection.
        #[arg(long)]
        flipset: Option<PathBuf>,
    },
    /// Regenerate the reference checkpoints and dataset.
    GenFixtures {
        /// Output directory.
        #[arg(long, default_value = "fixtures")]
        out: PathBuf,
    },
}

fn run(cli: &Cli) -> Result<(Outcome, bool)> {
    Ok(match &cli.command {
        Command::Rank { config } => (commands::cmd_rank(&config.resolve()?)?, false),
        Command::Select { config, strict } => (commands::cmd_select(&config.resolve()?)?, *strict),
        Command::Optimize {
            config,
            flipset,
            strict,
        } => (
            commands::cmd_optimize(&config.resolve()?, flipset)?,
            *strict,
        ),
        Command::Prune { config, flipset } => {
            (commands::cmd_prune(&config.resolve()?, flipset)?, false)
        }
        Command::Attack {
            config,
            strict,
            normalize_timings,
        } => (
            commands::cmd_attack(&config.resolve()?, *normalize_timings)?,
            *strict,
        ),
        Command::Eval {
            checkpoint,
            dataset,
            flipset,
            mask,
            out,
        } => (
            commands::cmd_eval(checkpoint, dataset, flipset.as_deref(), *mask, out.as_deref())?,
            false,
        ),
        Command::Oracle {
            config,
            max_size,
            flipset,
        } => (
            commands::cmd_oracle(&config.resolve()?, *max_size, flipset.as_deref())?,
            false,
        ),
        Command::GenFixtures { out } => (commands::cmd_gen_fixtures(out)?, false),
    })
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if cli.threads > 0 {
        // A deliberate cap; results do not depend on it.
        if let Err(e) = rayon::ThreadPoolBuilder::new()
            .num_threads(cli.threads)
            .build_global()
        {
            eprintln!("bitbreaker: cannot configure {} threads: {e}", cli.threads);
            return ExitCode::from(EXIT_ERROR);
        }
    }

    match run(&cli) {
        Ok((Outcome::Ok, _)) => ExitCode::SUCCESS,
        Ok((Outcome::BelowThreshold, strict)) => {
            if strict {
                ExitCode::from(EXIT_BELOW_THRESHOLD)
            } else {
                ExitCode::SUCCESS
            }
        }
        Err(err) => {
            let guard = err
                .downcast_ref::<bitbreaker_core::Error>()
                .map(|e| matches!(e, bitbreaker_core::Error::GuardExceeded { .. }))
                .unwrap_or(false);
            eprintln!("bitbreaker: error: {err:#}");
            if guard {
                ExitCode::from(EXIT_GUARD)
            } else {
                ExitCode::from(EXIT_ERROR)
            }
        }
    }
}
