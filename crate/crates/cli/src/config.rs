//! Run configuration: file values, flag overrides, env seed override.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

/// Loss threshold for subset selection: either a multiple of the clean
/// loss or an absolute value.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
#[serde(rename_all = "snake_case")]
pub enum ThresholdMode {
    Relative(f64),
    Absolute(f64),
}

impl ThresholdMode {
    pub fn resolve(self, clean_loss: f64) -> f64 {
        match self {
            ThresholdMode::Relative(m) => m * clean_loss,
            ThresholdMode::Absolute(v) => v,
        }
    }
}

/// Pruning epsilon: a fraction of the optimized set's loss or absolute.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
#[serde(rename_all = "snake_case")]
pub enum EpsilonMode {
    Relative(f64),
    Absolute(f64),
}

impl EpsilonMode {
    pub fn resolve(self, reference_loss: f64) -> f64 {
        match self {
            EpsilonMode::Relative(f) => f * reference_loss.abs().max(f64::MIN_POSITIVE),
            EpsilonMode::Absolute(v) => v,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct SensitivitySection {
    pub alpha: f64,
    pub sampling_rate: f64,
    pub flip_pos: Option<u8>,
}

impl Default for SensitivitySection {
    fn default() -> Self {
        Self {
            alpha: 0.5,
            sampling_rate: 0.1,
            flip_pos: None,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct SubsetSection {
    pub rates: Vec<f64>,
    pub threshold: ThresholdMode,
    pub top_n: usize,
}

impl Default for SubsetSection {
    fn default() -> Self {
        Self {
            rates: bitbreaker_core::default_rates(),
            threshold: ThresholdMode::Relative(4.0),
            top_n: 1,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct GaSection {
    pub population: usize,
    pub max_generations: usize,
    pub mutation_rate: f64,
    pub crossover_prob: f64,
    pub no_improve: usize,
    pub seed: u64,
}

impl Default for GaSection {
    fn default() -> Self {
        Self {
            population: 100,
            max_generations: 150,
            mutation_rate: 0.1,
            crossover_prob: 0.9,
            no_improve: 20,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct PruneSection {
    pub enabled: bool,
    pub epsilon: EpsilonMode,
    pub max_iters: usize,
    pub no_improve: usize,
}

impl Default for PruneSection {
    fn default() -> Self {
        Self {
            enabled: true,
            epsilon: EpsilonMode::Relative(0.01),
            max_iters: 500,
            no_improve: 50,
        }
    }
}

/// Full pipeline configuration. Serialized verbatim into attack reports.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct RunConfig {
    pub checkpoint: PathBuf,
    pub dataset: PathBuf,
    pub sensitivity: SensitivitySection,
    pub subset: SubsetSection,
    pub ga: GaSection,
    pub prune: PruneSection,
    pub output_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            checkpoint: PathBuf::new(),
            dataset: PathBuf::new(),
            sensitivity: SensitivitySection::default(),
            subset: SubsetSection::default(),
            ga: GaSection::default(),
            prune: PruneSection::default(),
            output_dir: PathBuf::from("out"),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("cannot read config file {}", path.display()))?;
        serde_json::from_str(&text)
            .with_context(|| format!("malformed config file {}", path.display()))
    }

    /// Env var `BITBREAKER_SEED` overrides the seed from any other source.
    pub fn apply_env(&mut self) -> Result<()> {
        if let Ok(raw) = std::env::var("BITBREAKER_SEED") {
            self.ga.seed = raw
                .parse()
                .with_context(|| format!("BITBREAKER_SEED {raw:?} is not an unsigned integer"))?;
        }
        Ok(())
    }

    pub fn validate_paths(&self) -> Result<()> {
        if self.checkpoint.as_os_str().is_empty() {
            bail!("no checkpoint given (flag --checkpoint or config field \"checkpoint\")");
        }
        if self.dataset.as_os_str().is_empty() {
            bail!("no dataset given (flag --dataset or config field \"dataset\")");
        }
        if !self.checkpoint.exists() {
            bail!("checkpoint file {} does not exist", self.checkpoint.display());
        }
        if !self.dataset.exists() {
            bail!("dataset file {} does not exist", self.dataset.display());
        }
        Ok(())
    }

    pub fn sensitivity_config(&self) -> bitbreaker_core::SensitivityConfig {
        bitbreaker_core::SensitivityConfig {
            alpha: self.sensitivity.alpha,
            sampling_rate: self.sensitivity.sampling_rate,
            flip_pos: self.sensitivity.flip_pos,
        }
    }

    pub fn subset_config(&self, clean_loss: f64) -> bitbreaker_core::SubsetConfig {
        bitbreaker_core::SubsetConfig {
            rates: self.subset.rates.clone(),
            loss_threshold: self.subset.threshold.resolve(clean_loss),
            top_n_layers: self.subset.top_n,
            alpha: self.sensitivity.alpha,
            flip_pos: self.sensitivity.flip_pos,
        }
    }

    pub fn ga_config(&self, loss_threshold: f64) -> bitbreaker_core::GaConfig {
        bitbreaker_core::GaConfig {
            population: self.ga.population,
            max_generations: self.ga.max_generations,
            mutation_rate: self.ga.mutation_rate,
            crossover_prob: self.ga.crossover_prob,
            no_improve_limit: self.ga.no_improve,
            loss_threshold,
            seed: self.ga.seed,
        }
    }

    pub fn prune_config(&self, reference_loss: f64) -> bitbreaker_core::PruneConfig {
        bitbreaker_core::PruneConfig {
            epsilon: self.prune.epsilon.resolve(reference_loss),
            max_iters: self.prune.max_iters,
            no_improve_limit: self.prune.no_improve,
            seed: self.ga.seed,
        }
    }
}
