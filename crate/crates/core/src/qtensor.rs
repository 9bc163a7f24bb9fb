//! Quantized weight tensors and bit-flip mechanics.
//!
//! Three storage formats are supported: 8-bit two's-complement integers
//! (INT8), 4-bit normal-float codes (NF4), and 2-bit ternary codes. Codes
//! are stored row-major as raw unsigned values; dequantization multiplies
//! the decoded level by a per-tensor scale.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// The 16 NF4 quantile levels, ascending. Code 7 is exact zero.
pub const NF4_LEVELS: [f64; 16] = [
    -1.0, -0.6962, -0.5251, -0.3949, -0.2844, -0.1848, -0.0911, 0.0, 0.0796, 0.1609, 0.2461,
    0.3379, 0.4407, 0.5626, 0.7230, 1.0,
];

/// Ternary code values: `0b00` = 0, `0b01` = +1, `0b11` = -1.
/// `0b10` is invalid in storage and clamps to `0b11` after a flip.
pub const TERNARY_ZERO: u8 = 0b00;
pub const TERNARY_PLUS: u8 = 0b01;
pub const TERNARY_MINUS: u8 = 0b11;
const TERNARY_INVALID: u8 = 0b10;

/// Weight storage format.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum QuantFormat {
    /// 8-bit two's-complement integer codes.
    Int8,
    /// 4-bit codes indexing [`NF4_LEVELS`].
    Nf4,
    /// 2-bit ternary codes in {-1, 0, +1}.
    Ternary,
}

impl QuantFormat {
    /// Width of one code in bits.
    pub fn code_width(self) -> u8 {
        match self {
            QuantFormat::Int8 => 8,
            QuantFormat::Nf4 => 4,
            QuantFormat::Ternary => 2,
        }
    }

    /// Most significant bit position of the code, the default flip target.
    pub fn default_flip_position(self) -> u8 {
        self.code_width() - 1
    }

    /// Code that dequantizes to exactly zero.
    pub fn zero_code(self) -> u8 {
        match self {
            QuantFormat::Int8 => 0x00,
            QuantFormat::Nf4 => 7,
            QuantFormat::Ternary => TERNARY_ZERO,
        }
    }

    /// Check that `code` is storable in this format.
    pub fn validate_code(self, code: u8, index: usize) -> Result<()> {
        let ok = match self {
            QuantFormat::Int8 => true,
            QuantFormat::Nf4 => code < 16,
            QuantFormat::Ternary => matches!(code, TERNARY_ZERO | TERNARY_PLUS | TERNARY_MINUS),
        };
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidCode {
                format: self.name(),
                code,
                index,
            })
        }
    }

    /// Decode a raw code to its unscaled level.
    pub fn decode(self, code: u8) -> f64 {
        match self {
            QuantFormat::Int8 => code as i8 as f64,
            QuantFormat::Nf4 => NF4_LEVELS[(code & 0x0f) as usize],
            QuantFormat::Ternary => match code {
                TERNARY_ZERO => 0.0,
                TERNARY_PLUS => 1.0,
                _ => -1.0,
            },
        }
    }

    /// Lowercase format name for messages and file headers.
    pub fn name(self) -> &'static str {
        match self {
            QuantFormat::Int8 => "int8",
            QuantFormat::Nf4 => "nf4",
            QuantFormat::Ternary => "ternary",
        }
    }
}

/// A quantized weight matrix: raw codes plus one symmetric scale.
///
/// Codes are row-major; flat index `i = row * cols + col`.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedTensor {
    format: QuantFormat,
    rows: usize,
    cols: usize,
    codes: Vec<u8>,
    scale: f64,
}

impl QuantizedTensor {
    /// Build a tensor from raw codes, validating every code and the scale.
    pub fn new(
        format: QuantFormat,
        rows: usize,
        cols: usize,
        codes: Vec<u8>,
        scale: f64,
    ) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::ShapeMismatch {
                context: format!("tensor shape {rows}x{cols} must be positive"),
            });
        }
        if codes.len() != rows * cols {
            return Err(Error::ShapeMismatch {
                context: format!(
                    "{} codes for shape {rows}x{cols} (expected {})",
                    codes.len(),
                    rows * cols
                ),
            });
        }
        if !(scale > 0.0) || !scale.is_finite() {
            return Err(Error::NonFinite {
                context: format!("scale {scale} must be finite and > 0"),
            });
        }
        for (i, &c) in codes.iter().enumerate() {
            format.validate_code(c, i)?;
        }
        Ok(Self {
            format,
            rows,
            cols,
            codes,
            scale,
        })
    }

    /// Quantize float weights with symmetric absmax calibration.
    pub fn quantize(format: QuantFormat, rows: usize, cols: usize, weights: &[f64]) -> Result<Self> {
        if weights.len() != rows * cols {
            return Err(Error::ShapeMismatch {
                context: format!("{} weights for shape {rows}x{cols}", weights.len()),
            });
        }
        let absmax = weights.iter().fold(0.0f64, |m, w| m.max(w.abs()));
        let (scale, codes): (f64, Vec<u8>) = match format {
            QuantFormat::Int8 => {
                let scale = if absmax == 0.0 { 1.0 } else { absmax / 127.0 };
                let codes = weights
                    .iter()
                    .map(|&w| ((w / scale).round().clamp(-128.0, 127.0) as i8) as u8)
                    .collect();
                (scale, codes)
            }
            QuantFormat::Nf4 => {
                let scale = if absmax == 0.0 { 1.0 } else { absmax };
                let codes = weights
                    .iter()
                    .map(|&w| {
                        let t = w / scale;
                        let mut best = 0usize;
                        let mut best_d = f64::INFINITY;
                        for (j, &level) in NF4_LEVELS.iter().enumerate() {
                            let d = (t - level).abs();
                            if d < best_d {
                                best_d = d;
                                best = j;
                            }
                        }
                        best as u8
                    })
                    .collect();
                (scale, codes)
            }
            QuantFormat::Ternary => {
                let scale = if absmax == 0.0 { 1.0 } else { absmax };
                let codes = weights
                    .iter()
                    .map(|&w| match (w / scale).round().clamp(-1.0, 1.0) as i8 {
                        1 => TERNARY_PLUS,
                        -1 => TERNARY_MINUS,
                        _ => TERNARY_ZERO,
                    })
                    .collect();
                (scale, codes)
            }
        };
        Self::new(format, rows, cols, codes, scale)
    }

    pub fn format(&self) -> QuantFormat {
        self.format
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    /// Number of codes (`rows * cols`).
    pub fn len(&self) -> usize {
        self.codes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.codes.is_empty()
    }

    pub fn scale(&self) -> f64 {
        self.scale
    }

    pub fn codes(&self) -> &[u8] {
        &self.codes
    }

    fn check_index(&self, index: usize) -> Result<()> {
        if index < self.codes.len() {
            Ok(())
        } else {
            Err(Error::IndexOutOfRange {
                index,
                len: self.codes.len(),
            })
        }
    }

    fn check_pos(&self, pos: u8) -> Result<()> {
        if pos < self.format.code_width() {
            Ok(())
        } else {
            Err(Error::InvalidBitPosition {
                pos,
                format: self.format.name(),
                width: self.format.code_width(),
            })
        }
    }

    /// Dequantize the code at flat index `i`.
    pub fn dequantize(&self, index: usize) -> Result<f64> {
        self.check_index(index)?;
        Ok(self.scale * self.format.decode(self.codes[index]))
    }

    /// The code `raw` would become after flipping bit `pos`, including the
    /// ternary clamp. Used by both in-place flips and overlay evaluation.
    pub fn flipped_code(format: QuantFormat, raw: u8, pos: u8) -> u8 {
        let flipped = raw ^ (1u8 << pos);
        if format == QuantFormat::Ternary && flipped == TERNARY_INVALID {
            TERNARY_MINUS
        } else {
            flipped
        }
    }

    /// Flip bit `pos` of the code at flat index `i`, in place.
    ///
    /// Returns the previous code so callers can undo. For ternary tensors a
    /// flip producing `0b10` clamps to `0b11`; INT8/NF4 keep the raw XOR.
    pub fn flip_bit(&mut self, index: usize, pos: u8) -> Result<u8> {
        self.check_index(index)?;
        self.check_pos(pos)?;
        let old = self.codes[index];
        self.codes[index] = Self::flipped_code(self.format, old, pos);
        Ok(old)
    }

    /// Restore a code saved by [`flip_bit`](Self::flip_bit).
    pub fn restore_code(&mut self, index: usize, code: u8) -> Result<()> {
        self.check_index(index)?;
        self.format.validate_code(code, index)?;
        self.codes[index] = code;
        Ok(())
    }

    /// Set the code at `index` to the format's exact-zero code.
    pub fn zero_code_at(&mut self, index: usize) -> Result<()> {
        self.check_index(index)?;
        self.codes[index] = self.format.zero_code();
        Ok(())
    }

    /// Dequantize the whole tensor into a row-major buffer.
    pub fn dequantize_all(&self) -> Vec<f64> {
        self.codes
            .iter()
            .map(|&c| self.scale * self.format.decode(c))
            .collect()
    }
}

/// Default MSB flip position for a format (INT8 -> 7, NF4 -> 3, ternary -> 1).
pub fn default_flip_position(format: QuantFormat) -> u8 {
    format.default_flip_position()
}
