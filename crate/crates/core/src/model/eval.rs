//! Forward evaluation, metrics, backprop gradients, and weight masking.
//!
//! Flip overlays are applied virtually while dequantizing, so the stored
//! codes never change and evaluations are pure: callers may evaluate the
//! same model concurrently from many threads.

use ndarray::{Array1, Array2};

use crate::error::{Error, Result};
use crate::flipset::FlipSet;
use crate::qtensor::QuantizedTensor;

use super::{Arch, Dataset, LayerSpec, ToyModel};

/// Sentinel returned when logits blow up to non-finite values. Keeps loss
/// ordering total so sorting and fitness never see NaN.
pub const LOSS_SENTINEL: f64 = 1e9;

/// Per-layer gradients of the mean cross-entropy with respect to the
/// dequantized weights (straight-through across quantization).
#[derive(Debug, Clone)]
pub struct GradientMap {
    entries: Vec<(String, Vec<f64>)>,
}

impl GradientMap {
    /// Flat row-major gradient buffer for `layer`, if present.
    pub fn get(&self, layer: &str) -> Option<&[f64]> {
        self.entries
            .iter()
            .find(|(n, _)| n == layer)
            .map(|(_, g)| g.as_slice())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &[f64])> {
        self.entries.iter().map(|(n, g)| (n.as_str(), g.as_slice()))
    }
}

fn check_overlay(model: &ToyModel, overlay: Option<&FlipSet>) -> Result<()> {
    let Some(fs) = overlay else { return Ok(()) };
    let layer = model.layer(&fs.layer)?;
    let width = layer.weights.format().code_width();
    if fs.pos >= width {
        return Err(Error::InvalidBitPosition {
            pos: fs.pos,
            format: layer.weights.format().name(),
            width,
        });
    }
    for &i in &fs.indices {
        if i >= layer.weights.len() {
            return Err(Error::IndexOutOfRange {
                index: i,
                len: layer.weights.len(),
            });
        }
    }
    Ok(())
}

/// Dequantize a layer's weights into a rows x cols matrix, applying the
/// overlay's flips virtually when it targets this layer.
fn dequant_matrix(layer: &LayerSpec, overlay: Option<&FlipSet>) -> Array2<f64> {
    let w = &layer.weights;
    let mut values = w.dequantize_all();
    if let Some(fs) = overlay {
        if fs.layer == layer.name {
            for &i in &fs.indices {
                let flipped = QuantizedTensor::flipped_code(w.format(), w.codes()[i], fs.pos);
                values[i] = w.scale() * w.format().decode(flipped);
            }
        }
    }
    Array2::from_shape_vec((w.rows(), w.cols()), values).expect("shape validated on construction")
}

fn add_bias(mut z: Array2<f64>, bias: Option<&Vec<f64>>) -> Array2<f64> {
    if let Some(b) = bias {
        let b = Array1::from_vec(b.clone());
        z += &b;
    }
    z
}

struct ChainCache {
    /// Activations entering each layer; `inputs[0]` is the data matrix.
    inputs: Vec<Array2<f64>>,
    /// Pre-activation values of each hidden layer.
    pre_acts: Vec<Array2<f64>>,
    logits: Array2<f64>,
}

fn chain_forward(model: &ToyModel, x: &Array2<f64>, overlay: Option<&FlipSet>) -> ChainCache {
    let act = model.activation();
    let n_layers = model.layers().len();
    let mut inputs = Vec::with_capacity(n_layers);
    let mut pre_acts = Vec::with_capacity(n_layers - 1);
    let mut h = x.clone();
    for (li, layer) in model.layers().iter().enumerate() {
        let w = dequant_matrix(layer, overlay);
        let z = add_bias(h.dot(&w), layer.bias.as_ref());
        inputs.push(h);
        if li + 1 == n_layers {
            return ChainCache {
                inputs,
                pre_acts,
                logits: z,
            };
        }
        h = z.mapv(|v| act.apply(v));
        pre_acts.push(z);
    }
    unreachable!("models have at least one layer")
}

struct AttnCache {
    /// Per-sample token matrices and attention intermediates.
    xs: Vec<Array2<f64>>,
    qs: Vec<Array2<f64>>,
    ks: Vec<Array2<f64>>,
    vs: Vec<Array2<f64>>,
    attn: Vec<Array2<f64>>,
    ctx: Vec<Array2<f64>>,
    chain: ChainCache,
}

/// Forward pass of the attention block followed by its MLP chain.
fn attn_forward(model: &ToyModel, x: &Array2<f64>, overlay: Option<&FlipSet>) -> AttnCache {
    let layers = model.layers();
    let d = layers[0].weights.rows();
    let tokens = x.ncols() / d;
    let n = x.nrows();

    let wq = dequant_matrix(&layers[0], overlay);
    let wk = dequant_matrix(&layers[1], overlay);
    let wv = dequant_matrix(&layers[2], overlay);
    let wo = dequant_matrix(&layers[3], overlay);
    let scale = 1.0 / (d as f64).sqrt();

    let mut xs = Vec::with_capacity(n);
    let mut qs = Vec::with_capacity(n);
    let mut ks = Vec::with_capacity(n);
    let mut vs = Vec::with_capacity(n);
    let mut attn = Vec::with_capacity(n);
    let mut ctx = Vec::with_capacity(n);
    let mut hidden = Array2::zeros((n, tokens * d));

    for s in 0..n {
        let xt = x
            .row(s)
            .to_owned()
            .into_shape_with_order((tokens, d))
            .expect("features divide into tokens");
        let q = add_bias(xt.dot(&wq), layers[0].bias.as_ref());
        let k = add_bias(xt.dot(&wk), layers[1].bias.as_ref());
        let v = add_bias(xt.dot(&wv), layers[2].bias.as_ref());
        let scores = q.dot(&k.t()) * scale;
        let a = softmax_rows(&scores);
        let c = a.dot(&v);
        let z = add_bias(c.dot(&wo), layers[3].bias.as_ref());
        let flat = z.into_shape_with_order(tokens * d).expect("flatten");
        hidden.row_mut(s).assign(&flat);
        xs.push(xt);
        qs.push(q);
        ks.push(k);
        vs.push(v);
        attn.push(a);
        ctx.push(c);
    }

    // The MLP part reuses chain mechanics over the flattened hidden state.
    let mlp = mlp_tail(model);
    let chain = chain_forward_layers(&mlp, model, &hidden, overlay);

    AttnCache {
        xs,
        qs,
        ks,
        vs,
        attn,
        ctx,
        chain,
    }
}

fn mlp_tail(model: &ToyModel) -> Vec<usize> {
    (4..model.layers().len()).collect()
}

/// Chain forward over a subset of layer indices (the attention MLP tail).
fn chain_forward_layers(
    layer_idx: &[usize],
    model: &ToyModel,
    x: &Array2<f64>,
    overlay: Option<&FlipSet>,
) -> ChainCache {
    let act = model.activation();
    let mut inputs = Vec::with_capacity(layer_idx.len());
    let mut pre_acts = Vec::with_capacity(layer_idx.len() - 1);
    let mut h = x.clone();
    for (pos, &li) in layer_idx.iter().enumerate() {
        let layer = &model.layers()[li];
        let w = dequant_matrix(layer, overlay);
        let z = add_bias(h.dot(&w), layer.bias.as_ref());
        inputs.push(h);
        if pos + 1 == layer_idx.len() {
            return ChainCache {
                inputs,
                pre_acts,
                logits: z,
            };
        }
        h = z.mapv(|v| act.apply(v));
        pre_acts.push(z);
    }
    unreachable!("tail has at least the output head")
}

fn softmax_rows(scores: &Array2<f64>) -> Array2<f64> {
    let mut out = scores.clone();
    for mut row in out.rows_mut() {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        row.mapv_inplace(|v| (v - max).exp());
        let sum: f64 = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
    out
}

/// Raw logits for every sample, with optional overlay flips.
pub fn forward_logits(
    model: &ToyModel,
    data: &Dataset,
    overlay: Option<&FlipSet>,
) -> Result<Array2<f64>> {
    model.expects_features(data.n_features())?;
    check_overlay(model, overlay)?;
    for (i, &y) in data.labels.iter().enumerate() {
        if y >= model.num_classes() {
            return Err(Error::InvalidConfig {
                context: format!("label {y} at sample {i} >= num_classes {}", model.num_classes()),
            });
        }
    }
    let logits = match model.arch() {
        Arch::Chain => chain_forward(model, &data.inputs, overlay).logits,
        Arch::Attention => attn_forward(model, &data.inputs, overlay).chain.logits,
    };
    Ok(logits)
}

fn cross_entropy(logits: &Array2<f64>, labels: &[usize]) -> f64 {
    if logits.iter().any(|v| !v.is_finite()) {
        return LOSS_SENTINEL;
    }
    let n = logits.nrows() as f64;
    let mut total = 0.0;
    for (row, &y) in logits.rows().into_iter().zip(labels) {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<f64>().ln();
        total += lse - row[y];
    }
    let loss = total / n;
    if loss.is_finite() {
        loss
    } else {
        LOSS_SENTINEL
    }
}

/// Mean cross-entropy over the dataset with overlay flips applied
/// virtually. The model is observably unchanged afterwards.
///
/// Non-finite logits map to [`LOSS_SENTINEL`] so that orderings stay total.
pub fn forward_loss(model: &ToyModel, data: &Dataset, overlay: Option<&FlipSet>) -> Result<f64> {
    let logits = forward_logits(model, data, overlay)?;
    Ok(cross_entropy(&logits, &data.labels))
}

/// `exp` of the mean negative log-likelihood; exactly `exp(forward_loss)`.
pub fn perplexity(model: &ToyModel, data: &Dataset, overlay: Option<&FlipSet>) -> Result<f64> {
    Ok(forward_loss(model, data, overlay)?.exp())
}

/// Fraction of samples whose argmax logit matches the label. Ties break
/// toward the lowest class index.
pub fn accuracy(model: &ToyModel, data: &Dataset, overlay: Option<&FlipSet>) -> Result<f64> {
    let logits = forward_logits(model, data, overlay)?;
    let mut correct = 0usize;
    for (row, &y) in logits.rows().into_iter().zip(&data.labels) {
        let mut best = 0usize;
        let mut best_v = row[0];
        for (k, &v) in row.iter().enumerate().skip(1) {
            if v > best_v {
                best_v = v;
                best = k;
            }
        }
        if best == y {
            correct += 1;
        }
    }
    Ok(correct as f64 / data.n_samples() as f64)
}

/// Softmax probabilities minus one-hot labels, divided by sample count:
/// the gradient of mean cross-entropy w.r.t. the logits.
fn dlogits(logits: &Array2<f64>, labels: &[usize]) -> Array2<f64> {
    let n = logits.nrows() as f64;
    let mut g = softmax_rows(logits);
    for (mut row, &y) in g.rows_mut().into_iter().zip(labels) {
        row[y] -= 1.0;
    }
    g.mapv_inplace(|v| v / n);
    g
}

/// Backprop through a chain cache; returns per-layer weight gradients in
/// layer order plus the gradient flowing into the chain's input.
fn chain_backward(
    model: &ToyModel,
    layer_idx: &[usize],
    cache: &ChainCache,
    labels: &[usize],
    overlay: Option<&FlipSet>,
) -> (Vec<Array2<f64>>, Array2<f64>) {
    let act = model.activation();
    let mut grads: Vec<Array2<f64>> = vec![Array2::zeros((0, 0)); layer_idx.len()];
    let mut upstream = dlogits(&cache.logits, labels);

    for pos in (0..layer_idx.len()).rev() {
        let layer = &model.layers()[layer_idx[pos]];
        let w = dequant_matrix(layer, overlay);
        let dz = if pos == layer_idx.len() - 1 {
            upstream.clone()
        } else {
            let deriv = cache.pre_acts[pos].mapv(|v| act.derivative(v));
            &upstream * &deriv
        };
        grads[pos] = cache.inputs[pos].t().dot(&dz);
        upstream = dz.dot(&w.t());
    }
    (grads, upstream)
}

/// Gradient of the mean cross-entropy w.r.t. every attackable weight's
/// dequantized value, via backprop.
pub fn gradients(model: &ToyModel, data: &Dataset) -> Result<GradientMap> {
    model.expects_features(data.n_features())?;
    for (i, &y) in data.labels.iter().enumerate() {
        if y >= model.num_classes() {
            return Err(Error::InvalidConfig {
                context: format!("label {y} at sample {i} >= num_classes {}", model.num_classes()),
            });
        }
    }

    let entries = match model.arch() {
        Arch::Chain => {
            let idx: Vec<usize> = (0..model.layers().len()).collect();
            let cache = chain_forward(model, &data.inputs, None);
            let (grads, _) = chain_backward(model, &idx, &cache, &data.labels, None);
            model
                .layers()
                .iter()
                .zip(grads)
                .map(|(l, g)| (l.name.clone(), g.into_raw_vec_and_offset().0))
                .collect()
        }
        Arch::Attention => attn_gradients(model, data),
    };
    Ok(GradientMap { entries })
}

fn attn_gradients(model: &ToyModel, data: &Dataset) -> Vec<(String, Vec<f64>)> {
    let layers = model.layers();
    let d = layers[0].weights.rows();
    let n = data.n_samples();
    let tokens = data.n_features() / d;
    let scale = 1.0 / (d as f64).sqrt();

    let cache = attn_forward(model, &data.inputs, None);
    let tail = mlp_tail(model);
    let (mlp_grads, dhidden) = chain_backward(model, &tail, &cache.chain, &data.labels, None);

    let wo = dequant_matrix(&layers[3], None);

    let mut dwq = Array2::<f64>::zeros((d, d));
    let mut dwk = Array2::<f64>::zeros((d, d));
    let mut dwv = Array2::<f64>::zeros((d, d));
    let mut dwo = Array2::<f64>::zeros((d, d));

    for s in 0..n {
        let dz = dhidden
            .row(s)
            .to_owned()
            .into_shape_with_order((tokens, d))
            .expect("hidden reshapes to tokens x dim");
        let x = &cache.xs[s];
        let q = &cache.qs[s];
        let k = &cache.ks[s];
        let v = &cache.vs[s];
        let a = &cache.attn[s];
        let c = &cache.ctx[s];

        dwo += &c.t().dot(&dz);
        let dc = dz.dot(&wo.t());
        let da = dc.dot(&v.t());
        let dv = a.t().dot(&dc);

        // Softmax backward per attention row.
        let mut ds = Array2::<f64>::zeros((tokens, tokens));
        for i in 0..tokens {
            let dot: f64 = (0..tokens).map(|j| da[[i, j]] * a[[i, j]]).sum();
            for j in 0..tokens {
                ds[[i, j]] = a[[i, j]] * (da[[i, j]] - dot);
            }
        }
        ds.mapv_inplace(|val| val * scale);

        let dq = ds.dot(k);
        let dk = ds.t().dot(q);
        dwq += &x.t().dot(&dq);
        dwk += &x.t().dot(&dk);
        dwv += &x.t().dot(&dv);
    }

    let mut entries: Vec<(String, Vec<f64>)> = vec![
        (layers[0].name.clone(), dwq.into_raw_vec_and_offset().0),
        (layers[1].name.clone(), dwk.into_raw_vec_and_offset().0),
        (layers[2].name.clone(), dwv.into_raw_vec_and_offset().0),
        (layers[3].name.clone(), dwo.into_raw_vec_and_offset().0),
    ];
    for (&li, g) in tail.iter().zip(mlp_grads) {
        entries.push((layers[li].name.clone(), g.into_raw_vec_and_offset().0));
    }
    entries
}

/// Return a copy of the model with every weight targeted by `fs` set to the
/// format's exact-zero code. Idempotent; mask wins over any prior flip.
pub fn mask_weights(model: &ToyModel, fs: &FlipSet) -> Result<ToyModel> {
    let mut out = model.clone();
    {
        let layer = out.layer_mut(&fs.layer)?;
        for &i in &fs.indices {
            layer.weights.zero_code_at(i)?;
        }
    }
    Ok(out)
}
