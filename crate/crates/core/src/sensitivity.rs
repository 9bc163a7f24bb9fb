//! Hybrid sensitivity scoring and layer ranking.
//!
//! Weights are scored by a convex combination of min-max-normalized
//! gradient magnitude and weight magnitude. Each layer's top-scored
//! weights get their MSB flipped (virtually) and the resulting loss ranks
//! the layers.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::flipset::FlipSet;
use crate::model::{forward_loss, gradients, Dataset, ToyModel};

/// Parameters of the scoring pass.
#[derive(Debug, Clone)]
pub struct SensitivityConfig {
    /// Gradient share of the score, in `[0, 1]`. `0` is magnitude-only
    /// (gradient-free mode), `1` is gradient-only.
    pub alpha: f64,
    /// Percent of each layer's weights flipped during ranking.
    pub sampling_rate: f64,
    /// Bit position to flip; `None` means each format's MSB.
    pub flip_pos: Option<u8>,
}

impl Default for SensitivityConfig {
    fn default() -> Self {
        Self {
            alpha: 0.5,
            sampling_rate: 0.1,
            flip_pos: None,
        }
    }
}

impl SensitivityConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::InvalidConfig {
                context: format!("alpha {} outside [0, 1]", self.alpha),
            });
        }
        if !(self.sampling_rate > 0.0) {
            return Err(Error::InvalidConfig {
                context: format!("sampling rate {} must be > 0", self.sampling_rate),
            });
        }
        Ok(())
    }
}

/// One ranked layer: its perturbation loss and how many weights were
/// flipped to measure it.
#[derive(Debug, Clone, PartialEq)]
pub struct ProfileEntry {
    pub layer: String,
    pub loss: f64,
    pub k_used: usize,
}

/// Per-layer perturbation losses, sorted descending by loss.
#[derive(Debug, Clone, PartialEq)]
pub struct SensitivityProfile {
    entries: Vec<ProfileEntry>,
}

impl SensitivityProfile {
    pub fn entries(&self) -> &[ProfileEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// CSV rendering: `layer_name,k,loss`, one row per layer, sorted.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("layer_name,k,loss\n");
        for e in &self.entries {
            out.push_str(&format!("{},{},{}\n", csv_field(&e.layer), e.k_used, e.loss));
        }
        out
    }
}

/// Quote a CSV field only when it needs quoting.
pub(crate) fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

/// Min-max normalize into `[0, 1]`. A constant vector maps to all zeros.
pub fn normalize(values: &[f64]) -> Result<Vec<f64>> {
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite {
            context: "normalize input".into(),
        });
    }
    if values.is_empty() {
        return Ok(Vec::new());
    }
    let min = values.iter().cloned().fold(f64::INFINITY, f64::min);
    let max = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if max == min {
        return Ok(vec![0.0; values.len()]);
    }
    let span = max - min;
    Ok(values.iter().map(|&v| (v - min) / span).collect())
}

/// Hybrid score: `alpha * normalize(|grad|) + (1 - alpha) * normalize(|w|)`.
pub fn sscore(w_abs: &[f64], g_abs: &[f64], alpha: f64) -> Result<Vec<f64>> {
    if w_abs.len() != g_abs.len() {
        return Err(Error::ShapeMismatch {
            context: format!("sscore: {} weights vs {} gradients", w_abs.len(), g_abs.len()),
        });
    }
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::InvalidConfig {
            context: format!("alpha {alpha} outside [0, 1]"),
        });
    }
    let wn = normalize(w_abs)?;
    let gn = normalize(g_abs)?;
    Ok(wn
        .iter()
        .zip(&gn)
        .map(|(&w, &g)| alpha * g + (1.0 - alpha) * w)
        .collect())
}

/// Weights-to-flip count for a layer of `n_params` weights at sampling
/// rate `r` percent: `max(1, floor(n * r / 100))`, capped at `n`.
pub fn top_k_count(n_params: usize, r_percent: f64) -> usize {
    let k = (n_params as f64 * r_percent / 100.0).floor() as usize;
    k.max(1).min(n_params)
}

/// Indices of the `k` largest scores, descending; ties break toward the
/// lower flat index.
pub fn top_k_indices(scores: &[f64], k: usize) -> Result<Vec<usize>> {
    if k == 0 || k > scores.len() {
        return Err(Error::KOutOfRange {
            k,
            len: scores.len(),
        });
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| {
        scores[b]
            .total_cmp(&scores[a])
            .then_with(|| a.cmp(&b))
    });
    order.truncate(k);
    Ok(order)
}

/// Loss after virtually flipping every index in `fs`; the model's stored
/// codes are untouched.
pub fn bflip_loss(model: &ToyModel, fs: &FlipSet, data: &Dataset) -> Result<f64> {
    forward_loss(model, data, Some(fs))
}

/// Score one layer and return the indices its ranking flip would target.
pub fn layer_flip_candidates(
    model: &ToyModel,
    grads: &crate::model::GradientMap,
    layer_name: &str,
    r_percent: f64,
    alpha: f64,
) -> Result<(Vec<usize>, usize)> {
    let layer = model.layer(layer_name)?;
    let w_abs: Vec<f64> = layer.weights.dequantize_all().iter().map(|v| v.abs()).collect();
    let g_abs: Vec<f64> = grads
        .get(layer_name)
        .ok_or_else(|| Error::UnknownLayer {
            name: layer_name.into(),
        })?
        .iter()
        .map(|v| v.abs())
        .collect();
    let scores = sscore(&w_abs, &g_abs, alpha)?;
    let k = top_k_count(layer.param_count(), r_percent);
    let indices = top_k_indices(&scores, k)?;
    Ok((indices, k))
}

/// Rank every attackable layer by its perturbation loss.
///
/// For each layer: `k` from the sampling rate, hybrid scores, top-k
/// indices, then the loss with those MSBs flipped. Entries are sorted
/// descending by loss; ties keep model layer order. Per-layer evaluations
/// run in parallel; the result does not depend on scheduling.
pub fn rank_layers(
    model: &ToyModel,
    data: &Dataset,
    cfg: &SensitivityConfig,
) -> Result<SensitivityProfile> {
    cfg.validate()?;
    let grads = gradients(model, data)?;

    let names: Vec<&str> = model.attackable_layers().map(|l| l.name.as_str()).collect();
    let mut entries: Vec<(usize, ProfileEntry)> = names
        .par_iter()
        .enumerate()
        .map(|(order, &name)| -> Result<(usize, ProfileEntry)> {
            let (indices, k) =
                layer_flip_candidates(model, &grads, name, cfg.sampling_rate, cfg.alpha)?;
            let format = model.layer(name)?.weights.format();
            let pos = cfg.flip_pos.unwrap_or_else(|| format.default_flip_position());
            let fs = FlipSet::new(name, pos, indices)?;
            let loss = bflip_loss(model, &fs, data)?;
            Ok((
                order,
                ProfileEntry {
                    layer: name.to_string(),
                    loss,
                    k_used: k,
                },
            ))
        })
        .collect::<Result<Vec<_>>>()?;

    entries.sort_by(|(oa, a), (ob, b)| b.loss.total_cmp(&a.loss).then_with(|| oa.cmp(ob)));
    Ok(SensitivityProfile {
        entries: entries.into_iter().map(|(_, e)| e).collect(),
    })
}
