//! Checkpoint and dataset files.
//!
//! Both formats are versioned UTF-8 JSON with codes stored as the raw
//! unsigned values defined by the quantization formats, so round-trips are
//! bit-exact.

use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::qtensor::{QuantFormat, QuantizedTensor};

use super::{Activation, Dataset, LayerKind, LayerSpec, ToyModel};

/// Current checkpoint file version.
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct CheckpointFile {
    version: u32,
    activation: Activation,
    num_classes: usize,
    layers: Vec<LayerFile>,
}

#[derive(Serialize, Deserialize)]
struct LayerFile {
    name: String,
    kind: LayerKind,
    rows: usize,
    cols: usize,
    format: QuantFormat,
    scale: f64,
    codes: Vec<u8>,
    bias: Option<Vec<f64>>,
}

fn read_file(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|source| Error::Io {
        path: path.display().to_string(),
        source,
    })
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|source| Error::Io {
        path: path.display().to_string(),
        source,
    })
}

/// Load and validate a model checkpoint. Parse errors report the offending
/// field and line/column; code validation errors name the layer and index.
pub fn load_checkpoint(path: &Path) -> Result<ToyModel> {
    let text = read_file(path)?;
    let file: CheckpointFile = serde_json::from_str(&text).map_err(|e| Error::Malformed {
        kind: "checkpoint",
        path: path.display().to_string(),
        detail: e.to_string(),
    })?;
    if file.version != CHECKPOINT_VERSION {
        return Err(Error::VersionMismatch {
            kind: "checkpoint",
            found: file.version,
            expected: CHECKPOINT_VERSION,
        });
    }
    let mut layers = Vec::with_capacity(file.layers.len());
    for lf in file.layers {
        let tensor = QuantizedTensor::new(lf.format, lf.rows, lf.cols, lf.codes, lf.scale)
            .map_err(|e| Error::Malformed {
                kind: "checkpoint",
                path: path.display().to_string(),
                detail: format!("layer {:?}: {e}", lf.name),
            })?;
        layers.push(LayerSpec::new(lf.name, lf.kind, tensor, lf.bias)?);
    }
    ToyModel::new(layers, file.activation, file.num_classes)
}

/// Serialize a model checkpoint. `save -> load -> save` is byte-identical.
pub fn save_checkpoint(model: &ToyModel, path: &Path) -> Result<()> {
    let file = CheckpointFile {
        version: CHECKPOINT_VERSION,
        activation: model.activation(),
        num_classes: model.num_classes(),
        layers: model
            .layers()
            .iter()
            .map(|l| LayerFile {
                name: l.name.clone(),
                kind: l.kind,
                rows: l.weights.rows(),
                cols: l.weights.cols(),
                format: l.weights.format(),
                scale: l.weights.scale(),
                codes: l.weights.codes().to_vec(),
                bias: l.bias.clone(),
            })
            .collect(),
    };
    let text = serde_json::to_string_pretty(&file).expect("checkpoint serializes");
    write_file(path, &text)
}

#[derive(Serialize, Deserialize)]
struct DatasetFile {
    inputs: Vec<Vec<f64>>,
    labels: Vec<usize>,
}

/// Load a dataset file (`{ "inputs": [[...]], "labels": [...] }`).
pub fn load_dataset(path: &Path) -> Result<Dataset> {
    let text = read_file(path)?;
    let file: DatasetFile = serde_json::from_str(&text).map_err(|e| Error::Malformed {
        kind: "dataset",
        path: path.display().to_string(),
        detail: e.to_string(),
    })?;
    if file.inputs.is_empty() {
        return Err(Error::Malformed {
            kind: "dataset",
            path: path.display().to_string(),
            detail: "no samples".into(),
        });
    }
    let cols = file.inputs[0].len();
    if file.inputs.iter().any(|r| r.len() != cols) {
        return Err(Error::Malformed {
            kind: "dataset",
            path: path.display().to_string(),
            detail: "ragged input rows".into(),
        });
    }
    let flat: Vec<f64> = file.inputs.iter().flatten().copied().collect();
    let inputs =
        Array2::from_shape_vec((file.inputs.len(), cols), flat).map_err(|e| Error::Malformed {
            kind: "dataset",
            path: path.display().to_string(),
            detail: e.to_string(),
        })?;
    Dataset::new(inputs, file.labels)
}

/// Write a dataset file.
pub fn save_dataset(data: &Dataset, path: &Path) -> Result<()> {
    let file = DatasetFile {
        inputs: data
            .inputs
            .rows()
            .into_iter()
            .map(|r| r.to_vec())
            .collect(),
        labels: data.labels.clone(),
    };
    let text = serde_json::to_string_pretty(&file).expect("dataset serializes");
    write_file(path, &text)
}
