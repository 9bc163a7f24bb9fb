//! Machine-readable artifacts: metrics and the attack report.

use serde::{Deserialize, Serialize};

use bitbreaker_core::{accuracy, forward_loss, perplexity, Dataset, FlipSet, ToyModel};

use crate::config::RunConfig;

/// Loss, perplexity, accuracy of one evaluation.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct Metrics {
    pub loss: f64,
    pub perplexity: f64,
    pub accuracy: f64,
}

impl Metrics {
    pub fn compute(
        model: &ToyModel,
        data: &Dataset,
        overlay: Option<&FlipSet>,
    ) -> bitbreaker_core::Result<Self> {
        Ok(Self {
            loss: forward_loss(model, data, overlay)?,
            perplexity: perplexity(model, data, overlay)?,
            accuracy: accuracy(model, data, overlay)?,
        })
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ProfileRow {
    pub layer: String,
    pub k: usize,
    pub loss: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SelectStage {
    pub layer: String,
    pub rate: f64,
    pub k: usize,
    pub loss: f64,
    pub resolved_threshold: f64,
    pub subset_size: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OptimizeStage {
    pub best_fitness: f64,
    pub best_loss: f64,
    pub cardinality: usize,
    pub generations_run: usize,
    pub meets_threshold: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PruneStage {
    pub cardinality: usize,
    pub loss: f64,
    pub epsilon: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Stages {
    pub rank: Vec<ProfileRow>,
    pub select: SelectStage,
    pub optimize: OptimizeStage,
    pub prune: Option<PruneStage>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FinalFlipSet {
    pub layer: String,
    pub pos: u8,
    pub indices: Vec<usize>,
}

impl From<&FlipSet> for FinalFlipSet {
    fn from(fs: &FlipSet) -> Self {
        Self {
            layer: fs.layer.clone(),
            pos: fs.pos,
            indices: fs.indices.clone(),
        }
    }
}

/// Wall-clock seconds per stage; zeroed under `--normalize-timings`.
#[derive(Debug, Clone, Copy, Default, Serialize, Deserialize)]
pub struct Timings {
    pub rank_s: f64,
    pub select_s: f64,
    pub optimize_s: f64,
    pub prune_s: f64,
    pub total_s: f64,
}

impl Timings {
    pub fn normalized() -> Self {
        Self::default()
    }
}

/// Self-contained record of one attack run: re-running with the echoed
/// config and seed reproduces the same final flip set.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AttackReport {
    pub version: u32,
    pub config: RunConfig,
    pub clean: Metrics,
    pub stages: Stages,
    pub final_flipset: FinalFlipSet,
    pub post_attack: Metrics,
    /// Flipped bits over total weight bits in the model.
    pub flip_rate: f64,
    /// True when the final flip set's loss still meets the threshold.
    pub success: bool,
    pub timings: Timings,
}

pub const REPORT_VERSION: u32 = 1;
