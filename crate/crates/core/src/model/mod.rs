//! Desk-scale quantized networks: a feed-forward MLP and a single-head
//! attention block. These stand in for the full-size models as evaluation
//! substrates; every weight matrix is quantized and therefore a flip target.

mod eval;
mod io;
mod synth;


pub use eval::{
    accuracy, forward_logits, forward_loss, gradients, mask_weights, perplexity, GradientMap,
    LOSS_SENTINEL,
};
pub use io::{load_checkpoint, load_dataset, save_checkpoint, save_dataset, CHECKPOINT_VERSION};
pub use synth::synth_dataset;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::qtensor::QuantizedTensor;

/// Hidden-layer nonlinearity.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Gelu,
}

impl Activation {
    pub(crate) fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            // tanh-form GELU; smooth everywhere, which keeps finite-difference
            // gradient checks clean.
            Activation::Gelu => {
                let u = (2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x.powi(3));
                0.5 * x * (1.0 + u.tanh())
            }
        }
    }

    pub(crate) fn derivative(self, x: f64) -> f64 {
        match self {
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Gelu => {
                let c = (2.0 / std::f64::consts::PI).sqrt();
                let u = c * (x + 0.044715 * x.powi(3));
                let t = u.tanh();
                let sech2 = 1.0 - t * t;
                0.5 * (1.0 + t) + 0.5 * x * sech2 * c * (1.0 + 3.0 * 0.044715 * x * x)
            }
        }
    }
}

/// Structural role of a layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerKind {
    Linear,
    AttentionQ,
    AttentionK,
    AttentionV,
    AttentionO,
    MlpIn,
    MlpOut,
    OutputHead,
}

impl LayerKind {
    fn is_attention(self) -> bool {
        matches!(
            self,
            LayerKind::AttentionQ | LayerKind::AttentionK | LayerKind::AttentionV | LayerKind::AttentionO
        )
    }
}

/// One layer: a quantized weight matrix plus an optional float bias.
/// The bias is never quantized and never an attack target.
#[derive(Debug, Clone)]
pub struct LayerSpec {
    pub name: String,
    pub kind: LayerKind,
    pub weights: QuantizedTensor,
    pub bias: Option<Vec<f64>>,
}

impl LayerSpec {
    pub fn new(
        name: impl Into<String>,
        kind: LayerKind,
        weights: QuantizedTensor,
        bias: Option<Vec<f64>>,
    ) -> Result<Self> {
        let name = name.into();
        if let Some(b) = &bias {
            if b.len() != weights.cols() {
                return Err(Error::ShapeMismatch {
                    context: format!(
                        "layer {name:?}: bias length {} != cols {}",
                        b.len(),
                        weights.cols()
                    ),
                });
            }
            if b.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite {
                    context: format!("layer {name:?}: bias"),
                });
            }
        }
        Ok(Self {
            name,
            kind,
            weights,
            bias,
        })
    }

    /// Number of weight parameters.
    pub fn param_count(&self) -> usize {
        self.weights.len()
    }
}

/// Which architectures a layer list encodes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum Arch {
    /// Sequential linear chain ending in the output head.
    Chain,
    /// Q/K/V/O self-attention block, two MLP layers, then the head.
    Attention,
}

/// A layered toy network. Layers run in order; every hidden layer of a
/// chain gets the activation, the output head does not.
#[derive(Debug, Clone)]
pub struct ToyModel {
    layers: Vec<LayerSpec>,
    activation: Activation,
    num_classes: usize,
    arch: Arch,
}

impl ToyModel {
    /// Validate layer shapes and assemble a model.
    pub fn new(layers: Vec<LayerSpec>, activation: Activation, num_classes: usize) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::InvalidConfig {
                context: "model needs at least one layer".into(),
            });
        }
        if num_classes < 2 {
            return Err(Error::InvalidConfig {
                context: format!("num_classes {num_classes} must be >= 2"),
            });
        }
        let mut names = std::collections::HashSet::new();
        for l in &layers {
            if !names.insert(l.name.clone()) {
                return Err(Error::InvalidConfig {
                    context: format!("duplicate layer name {:?}", l.name),
                });
            }
        }
        let last = layers.last().unwrap();
        if last.kind != LayerKind::OutputHead {
            return Err(Error::InvalidConfig {
                context: "last layer must be the output head".into(),
            });
        }
        if last.weights.cols() != num_classes {
            return Err(Error::ShapeMismatch {
                context: format!(
                    "output head cols {} != num_classes {num_classes}",
                    last.weights.cols()
                ),
            });
        }

        let arch = if layers.iter().any(|l| l.kind.is_attention()) {
            let kinds: Vec<LayerKind> = layers.iter().map(|l| l.kind).collect();
            let expected = [
                LayerKind::AttentionQ,
                LayerKind::AttentionK,
                LayerKind::AttentionV,
                LayerKind::AttentionO,
                LayerKind::MlpIn,
                LayerKind::MlpOut,
                LayerKind::OutputHead,
            ];
            if kinds != expected {
                return Err(Error::InvalidConfig {
                    context: format!("attention model must have layer kinds {expected:?}, got {kinds:?}"),
                });
            }
            let d = layers[0].weights.rows();
            for l in &layers[..4] {
                if l.weights.rows() != d || l.weights.cols() != d {
                    return Err(Error::ShapeMismatch {
                        context: format!(
                            "attention projection {:?} must be {d}x{d}, got {}x{}",
                            l.name,
                            l.weights.rows(),
                            l.weights.cols()
                        ),
                    });
                }
            }
            // MLP chain after the attention block.
            for w in layers[4..].windows(2) {
                if w[0].weights.cols() != w[1].weights.rows() {
                    return Err(Error::ShapeMismatch {
                        context: format!(
                            "layer {:?} cols {} != layer {:?} rows {}",
                            w[0].name,
                            w[0].weights.cols(),
                            w[1].name,
                            w[1].weights.rows()
                        ),
                    });
                }
            }
            Arch::Attention
        } else {
            for w in layers.windows(2) {
                if w[0].weights.cols() != w[1].weights.rows() {
                    return Err(Error::ShapeMismatch {
                        context: format!(
                            "layer {:?} cols {} != layer {:?} rows {}",
                            w[0].name,
                            w[0].weights.cols(),
                            w[1].name,
                            w[1].weights.rows()
                        ),
                    });
                }
            }
            Arch::Chain
        };

        Ok(Self {
            layers,
            activation,
            num_classes,
            arch,
        })
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub(crate) fn arch(&self) -> Arch {
        self.arch
    }

    /// Layers whose weights can be attacked. Biases are float and excluded,
    /// so this is every layer.
    pub fn attackable_layers(&self) -> impl Iterator<Item = &LayerSpec> {
        self.layers.iter()
    }

    pub fn layer(&self, name: &str) -> Result<&LayerSpec> {
        self.layers
            .iter()
            .find(|l| l.name == name)
            .ok_or_else(|| Error::UnknownLayer { name: name.into() })
    }

    pub(crate) fn layer_mut(&mut self, name: &str) -> Result<&mut LayerSpec> {
        self.layers
            .iter_mut()
            .find(|l| l.name == name)
            .ok_or_else(|| Error::UnknownLayer { name: name.into() })
    }

    /// Input width the model expects. For attention models this is
    /// `tokens * head_dim` and any multiple of the head dim is accepted,
    /// so the check happens against a concrete dataset.
    pub fn expects_features(&self, n_features: usize) -> Result<()> {
        match self.arch {
            Arch::Chain => {
                let want = self.layers[0].weights.rows();
                if n_features != want {
                    return Err(Error::ShapeMismatch {
                        context: format!("dataset has {n_features} features, model expects {want}"),
                    });
                }
            }
            Arch::Attention => {
                let d = self.layers[0].weights.rows();
                let mlp_in = self.layers[4].weights.rows();
                if n_features != mlp_in || n_features % d != 0 || n_features == 0 {
                    return Err(Error::ShapeMismatch {
                        context: format!(
                            "dataset has {n_features} features, attention model expects {} (a multiple of head dim {d})",
                            mlp_in
                        ),
                    });
                }
            }
        }
        Ok(())
    }

    /// Total weight bits over all attackable layers (params x code width).
    pub fn total_weight_bits(&self) -> u64 {
        self.layers
            .iter()
            .map(|l| l.param_count() as u64 * u64::from(l.weights.format().code_width()))
            .sum()
    }

    /// Concatenated hash input of every layer's codes; used by tests to
    /// assert that evaluation never mutates the model.
    pub fn code_fingerprint(&self) -> u64 {
        use std::hash::{Hash, Hasher};
        let mut h = std::collections::hash_map::DefaultHasher::new();
        for l in &self.layers {
            l.name.hash(&mut h);
            l.weights.codes().hash(&mut h);
        }
        h.finish()
    }
}

/// A supervised batch: inputs are samples x features, labels are class ids.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub inputs: Array2<f64>,
    pub labels: Vec<usize>,
}

impl Dataset {
    pub fn new(inputs: Array2<f64>, labels: Vec<usize>) -> Result<Self> {
        if inputs.nrows() == 0 {
            return Err(Error::InvalidConfig {
                context: "dataset is empty".into(),
            });
        }
        if inputs.nrows() != labels.len() {
            return Err(Error::ShapeMismatch {
                context: format!(
                    "{} input rows vs {} labels",
                    inputs.nrows(),
                    labels.len()
                ),
            });
        }
        if inputs.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                context: "dataset inputs".into(),
            });
        }
        Ok(Self { inputs, labels })
    }

    pub fn n_samples(&self) -> usize {
        self.inputs.nrows()
    }

    pub fn n_features(&self) -> usize {
        self.inputs.ncols()
    }
}
