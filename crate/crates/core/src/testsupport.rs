//! Independent oracles shared by unit and acceptance tests.
//!
//! The float-space forward pass here mirrors the architecture semantics in
//! plain loops, sharing no code with the production evaluation path. It
//! exists so gradient checks difference an implementation that could fail
//! independently.

use crate::model::{Activation, Dataset, LayerKind, ToyModel};

/// Plain-loop float forward: weights are explicit matrices, no quantized
/// storage involved.
pub fn oracle_loss(
    kinds: &[LayerKind],
    weights: &[Vec<Vec<f64>>],
    biases: &[Option<Vec<f64>>],
    activation: Activation,
    inputs: &[Vec<f64>],
    labels: &[usize],
) -> f64 {
    let is_attention = kinds.contains(&LayerKind::AttentionQ);
    let mut total = 0.0;
    for (x, &y) in inputs.iter().zip(labels) {
        let hidden = if is_attention {
            let d = weights[0].len();
            let tokens = x.len() / d;
            let proj = |w: &Vec<Vec<f64>>, b: &Option<Vec<f64>>| -> Vec<Vec<f64>> {
                (0..tokens)
                    .map(|t| {
                        (0..d)
                            .map(|j| {
                                let mut acc = b.as_ref().map_or(0.0, |b| b[j]);
                                for i in 0..d {
                                    acc += x[t * d + i] * w[i][j];
                                }
                                acc
                            })
                            .collect()
                    })
                    .collect()
            };
            let q = proj(&weights[0], &biases[0]);
            let k = proj(&weights[1], &biases[1]);
            let v = proj(&weights[2], &biases[2]);
            let sqrt_d = (d as f64).sqrt();
            let mut ctx = vec![vec![0.0; d]; tokens];
            for ti in 0..tokens {
                let scores: Vec<f64> = (0..tokens)
                    .map(|tj| (0..d).map(|m| q[ti][m] * k[tj][m]).sum::<f64>() / sqrt_d)
                    .collect();
                let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let exps: Vec<f64> = scores.iter().map(|&s| (s - max).exp()).collect();
                let sum: f64 = exps.iter().sum();
                for tj in 0..tokens {
                    let a = exps[tj] / sum;
                    for m in 0..d {
                        ctx[ti][m] += a * v[tj][m];
                    }
                }
            }
            // Output projection per token, flattened row-major.
            let mut z = Vec::with_capacity(tokens * d);
            for t in 0..tokens {
                for j in 0..d {
                    let mut acc = biases[3].as_ref().map_or(0.0, |b| b[j]);
                    for i in 0..d {
                        acc += ctx[t][i] * weights[3][i][j];
                    }
                    z.push(acc);
                }
            }
            z
        } else {
            x.clone()
        };

        let start = if is_attention { 4 } else { 0 };
        let mut h = hidden;
        for li in start..kinds.len() {
            let w = &weights[li];
            let cols = w[0].len();
            let mut z = vec![0.0; cols];
            for (j, zj) in z.iter_mut().enumerate() {
                let mut acc = biases[li].as_ref().map_or(0.0, |b| b[j]);
                for (i, hi) in h.iter().enumerate() {
                    acc += hi * w[i][j];
                }
                *zj = acc;
            }
            if li + 1 < kinds.len() {
                h = z.iter().map(|&v| activation.apply(v)).collect();
            } else {
                h = z;
            }
        }

        let max = h.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + h.iter().map(|&v| (v - max).exp()).sum::<f64>().ln();
        total += lse - h[y];
    }
    total / inputs.len() as f64
}

/// Extract a model's dequantized weights, kinds, and biases for the oracle.
pub fn model_as_float(
    model: &ToyModel,
) -> (Vec<LayerKind>, Vec<Vec<Vec<f64>>>, Vec<Option<Vec<f64>>>) {
    let mut kinds = Vec::new();
    let mut weights = Vec::new();
    let mut biases = Vec::new();
    for l in model.layers() {
        kinds.push(l.kind);
        let flat = l.weights.dequantize_all();
        let cols = l.weights.cols();
        weights.push(flat.chunks(cols).map(|row| row.to_vec()).collect());
        biases.push(l.bias.clone());
    }
    (kinds, weights, biases)
}

/// Worst relative disagreement between backprop and central finite
/// differences (step `h`) over every weight of the model. The relative
/// denominator is floored at 1e-3 so near-zero gradients compare on an
/// absolute scale.
pub fn gradcheck_worst_rel(model: &ToyModel, data: &Dataset, h: f64) -> f64 {
    let (kinds, weights, biases) = model_as_float(model);
    let inputs: Vec<Vec<f64>> = data.inputs.rows().into_iter().map(|r| r.to_vec()).collect();

    let oracle_clean = oracle_loss(&kinds, &weights, &biases, model.activation(), &inputs, &data.labels);
    let prod_clean = crate::model::forward_loss(model, data, None).expect("clean loss");
    assert!(
        (oracle_clean - prod_clean).abs() < 1e-10,
        "oracle forward disagrees with production forward: {oracle_clean} vs {prod_clean}"
    );

    let grads = crate::model::gradients(model, data).expect("gradients");
    let mut worst = 0.0f64;
    for (li, layer) in model.layers().iter().enumerate() {
        let g = grads.get(&layer.name).unwrap();
        let cols = layer.weights.cols();
        for (flat, &gi) in g.iter().enumerate() {
            let (r, c) = (flat / cols, flat % cols);
            let mut plus = weights.clone();
            plus[li][r][c] += h;
            let mut minus = weights.clone();
            minus[li][r][c] -= h;
            let lp = oracle_loss(&kinds, &plus, &biases, model.activation(), &inputs, &data.labels);
            let lm = oracle_loss(&kinds, &minus, &biases, model.activation(), &inputs, &data.labels);
            let fd = (lp - lm) / (2.0 * h);
            let rel = (gi - fd).abs() / gi.abs().max(fd.abs()).max(1e-3);
            worst = worst.max(rel);
        }
    }
    worst
}
