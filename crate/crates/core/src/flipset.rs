//! Attack vectors: which layer, which weight indices, which bit.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Current flip-set file version.
pub const FLIPSET_VERSION: u32 = 1;

/// One attack vector: a set of flat weight indices in a single layer, all
/// flipped at the same bit position.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlipSet {
    /// Name of the targeted layer.
    pub layer: String,
    /// Bit position flipped in every targeted code.
    pub pos: u8,
    /// Ordered list of unique flat weight indices.
    pub indices: Vec<usize>,
}

impl FlipSet {
    /// Build a flip set, rejecting duplicate indices.
    pub fn new(layer: impl Into<String>, pos: u8, indices: Vec<usize>) -> Result<Self> {
        let mut seen = std::collections::HashSet::with_capacity(indices.len());
        for &i in &indices {
            if !seen.insert(i) {
                return Err(Error::InvalidConfig {
                    context: format!("duplicate index {i} in flip set"),
                });
            }
        }
        Ok(Self {
            layer: layer.into(),
            pos,
            indices,
        })
    }

    /// An empty flip set on `layer` (identity overlay).
    pub fn empty(layer: impl Into<String>, pos: u8) -> Self {
        Self {
            layer: layer.into(),
            pos,
            indices: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    /// Same layer and pos, different index set.
    pub fn with_indices(&self, indices: Vec<usize>) -> Self {
        Self {
            layer: self.layer.clone(),
            pos: self.pos,
            indices,
        }
    }
}

#[derive(Serialize, Deserialize)]
struct FlipSetFile {
    version: u32,
    layer: String,
    pos: u8,
    indices: Vec<usize>,
}

/// Load a flip set from the versioned JSON file format.
pub fn load_flipset(path: &Path) -> Result<FlipSet> {
    let text = std::fs::read_to_string(path).map_err(|source| Error::Io {
        path: path.display().to_string(),
        source,
    })?;
    let file: FlipSetFile = serde_json::from_str(&text).map_err(|e| Error::Malformed {
        kind: "flip set",
        path: path.display().to_string(),
        detail: e.to_string(),
    })?;
    if file.version != FLIPSET_VERSION {
        return Err(Error::VersionMismatch {
            kind: "flip set",
            found: file.version,
            expected: FLIPSET_VERSION,
        });
    }
    FlipSet::new(file.layer, file.pos, file.indices)
}

/// Write a flip set in the versioned JSON file format.
pub fn save_flipset(fs: &FlipSet, path: &Path) -> Result<()> {
    let file = FlipSetFile {
        version: FLIPSET_VERSION,
        layer: fs.layer.clone(),
        pos: fs.pos,
        indices: fs.indices.clone(),
    };
    let text = serde_json::to_string_pretty(&file).expect("flip set serializes");
    std::fs::write(path, text).map_err(|source| Error::Io {
        path: path.display().to_string(),
        source,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_duplicates() {
        assert!(FlipSet::new("head", 7, vec![1, 2, 1]).is_err());
    }

    #[test]
    fn file_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("fs.json");
        let fs = FlipSet::new("head", 7, vec![3, 1, 4]).unwrap();
        save_flipset(&fs, &path).unwrap();
        assert_eq!(load_flipset(&path).unwrap(), fs);
    }

    #[test]
    fn version_mismatch_detected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("fs.json");
        std::fs::write(&path, r#"{"version":9,"layer":"h","pos":7,"indices":[]}"#).unwrap();
        assert!(matches!(
            load_flipset(&path),
            Err(Error::VersionMismatch { found: 9, .. })
        ));
    }
}
