//! Weight subset selection: sweep sampling rates over the top-ranked
//! layers and keep the smallest top-k subset whose flip drives the loss
//! past the threshold.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::flipset::FlipSet;
use crate::model::{gradients, Dataset, ToyModel};
use crate::sensitivity::{bflip_loss, layer_flip_candidates, SensitivityProfile};

/// Sweep configuration.
#[derive(Debug, Clone)]
pub struct SubsetConfig {
    /// Sampling rates in percent, strictly ascending.
    pub rates: Vec<f64>,
    /// Absolute loss threshold a qualifying flip must reach.
    pub loss_threshold: f64,
    /// How many of the top-ranked layers to sweep.
    pub top_n_layers: usize,
    /// Gradient share of the sensitivity score.
    pub alpha: f64,
    /// Bit position override; `None` means each format's MSB.
    pub flip_pos: Option<u8>,
}

impl SubsetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.rates.is_empty() {
            return Err(Error::EmptyRates);
        }
        if self.rates.iter().any(|&r| !(r > 0.0)) {
            return Err(Error::InvalidRates {
                context: "rates must be positive".into(),
            });
        }
        if self.rates.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::InvalidRates {
                context: "rates must be strictly ascending".into(),
            });
        }
        if !(self.loss_threshold > 0.0) {
            return Err(Error::InvalidConfig {
                context: format!("loss threshold {} must be > 0", self.loss_threshold),
            });
        }
        if self.top_n_layers == 0 {
            return Err(Error::InvalidConfig {
                context: "top_n_layers must be >= 1".into(),
            });
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::InvalidConfig {
                context: format!("alpha {} outside [0, 1]", self.alpha),
            });
        }
        Ok(())
    }
}

/// Default log sweep of sampling rates, matching the studied range.
pub fn default_rates() -> Vec<f64> {
    vec![0.0001, 0.001, 0.01, 0.1, 1.0, 10.0]
}

/// One qualifying sweep hit: the first rate at which a layer crossed the
/// threshold.
#[derive(Debug, Clone, PartialEq)]
pub struct SubsetRecord {
    pub layer: String,
    pub loss: f64,
    pub k: usize,
    pub rate: f64,
    /// Rank of the layer in the sensitivity profile (0 = most sensitive).
    pub profile_rank: usize,
}

/// Every sweep point evaluated, for diagnostics and CSV dumps.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepPoint {
    pub layer: String,
    pub rate: f64,
    pub k: usize,
    pub loss: f64,
    pub qualified: bool,
}

/// Result of a successful selection.
#[derive(Debug, Clone)]
pub struct SubsetSelection {
    /// The winning subset, recomputable as the layer's top-k indices.
    pub flipset: FlipSet,
    /// The qualifying record behind the winner.
    pub record: SubsetRecord,
    /// All evaluated sweep points in visit order.
    pub sweep_log: Vec<SweepPoint>,
}

/// Render the sweep log as CSV (`layer,r,k,loss,qualified`).
pub fn sweep_log_csv(log: &[SweepPoint]) -> String {
    let mut out = String::from("layer,r,k,loss,qualified\n");
    for p in log {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            crate::sensitivity::csv_field(&p.layer),
            p.rate,
            p.k,
            p.loss,
            p.qualified
        ));
    }
    out
}

/// Sweep the top-n layers and return the smallest qualifying subset.
///
/// Per layer, rates are visited ascending and the sweep stops at the first
/// qualifying rate. Qualifying records sort by ascending `k`, ties by
/// higher loss, then by better profile rank. When no layer qualifies, the
/// error carries the maximum loss observed per layer.
pub fn select_subset(
    model: &ToyModel,
    data: &Dataset,
    profile: &SensitivityProfile,
    cfg: &SubsetConfig,
) -> Result<SubsetSelection> {
    cfg.validate()?;
    if profile.is_empty() {
        return Err(Error::InvalidConfig {
            context: "sensitivity profile is empty".into(),
        });
    }
    let grads = gradients(model, data)?;
    let top: Vec<(usize, &str)> = profile
        .entries()
        .iter()
        .take(cfg.top_n_layers)
        .enumerate()
        .map(|(rank, e)| (rank, e.layer.as_str()))
        .collect();

    // Layers sweep independently; rates within a layer stay sequential so
    // the first-hit break is respected.
    let per_layer: Vec<Result<(Vec<SweepPoint>, Option<SubsetRecord>)>> = top
        .par_iter()
        .map(|&(rank, name)| {
            let layer = model.layer(name)?;
            let pos = cfg
                .flip_pos
                .unwrap_or_else(|| layer.weights.format().default_flip_position());
            let mut log = Vec::new();
            let mut hit = None;
            for &rate in &cfg.rates {
                let (indices, k) = layer_flip_candidates(model, &grads, name, rate, cfg.alpha)?;
                let fs = FlipSet::new(name, pos, indices)?;
                let loss = bflip_loss(model, &fs, data)?;
                let qualified = loss >= cfg.loss_threshold;
                log.push(SweepPoint {
                    layer: name.to_string(),
                    rate,
                    k,
                    loss,
                    qualified,
                });
                if qualified {
                    hit = Some(SubsetRecord {
                        layer: name.to_string(),
                        loss,
                        k,
                        rate,
                        profile_rank: rank,
                    });
                    break;
                }
            }
            Ok((log, hit))
        })
        .collect();

    let mut sweep_log = Vec::new();
    let mut records = Vec::new();
    for r in per_layer {
        let (log, hit) = r?;
        sweep_log.extend(log);
        records.extend(hit);
    }

    if records.is_empty() {
        let per_layer_max = top
            .iter()
            .map(|&(_, name)| {
                let max = sweep_log
                    .iter()
                    .filter(|p| p.layer == name)
                    .map(|p| p.loss)
                    .fold(f64::NEG_INFINITY, f64::max);
                (name.to_string(), max)
            })
            .collect();
        return Err(Error::ThresholdNotReached {
            threshold: cfg.loss_threshold,
            per_layer_max,
        });
    }

    records.sort_by(|a, b| {
        a.k.cmp(&b.k)
            .then_with(|| b.loss.total_cmp(&a.loss))
            .then_with(|| a.profile_rank.cmp(&b.profile_rank))
    });
    let winner = records.remove(0);

    // Recompute the winning indices from scratch; the output is exactly the
    // layer's top-k, bit for bit.
    let (indices, _) =
        layer_flip_candidates(model, &grads, &winner.layer, winner.rate, cfg.alpha)?;
    let layer = model.layer(&winner.layer)?;
    let pos = cfg
        .flip_pos
        .unwrap_or_else(|| layer.weights.format().default_flip_position());
    let flipset = FlipSet::new(winner.layer.clone(), pos, indices)?;

    Ok(SubsetSelection {
        flipset,
        record: winner,
        sweep_log,
    })
}
