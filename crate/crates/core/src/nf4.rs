//! Blockwise 4-bit NormalFloat quantization.
//!
//! The 16 levels are standard-normal quantiles at evenly spaced probabilities:
//! 8 on the positive side, 7 on the negative side and an exact zero, scaled so
//! the extremes are exactly -1 and 1. Each block of weights stores one 4-bit
//! code per value plus the block's absolute maximum.

use std::sync::OnceLock;

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};
use thiserror::Error;

use crate::lm::{Entry, EntryMut, ModelParams};
use crate::lora::Weight;
use crate::real::Real;

pub const LEVELS: usize = 16;
pub const DEFAULT_BLOCK_SIZE: usize = 64;

#[derive(Debug, Error, PartialEq)]
pub enum QuantError {
    #[error("cannot quantize an empty block")]
    EmptyBlock,
    #[error("non-finite value {value} at index {index}")]
    NonFinite { index: usize, value: f64 },
    #[error("code {0} is not a valid 4-bit level")]
    BadCode(u8),
    #[error("block size must be >= 1")]
    BadBlockSize,
    #[error("packed tensor is inconsistent: {0}")]
    Inconsistent(String),
}

/// The 16 sorted NormalFloat levels.
#[derive(Debug, Clone, PartialEq)]
pub struct Nf4Grid {
    levels: [f64; LEVELS],
}

impl Nf4Grid {
    pub fn levels(&self) -> &[f64; LEVELS] {
        &self.levels
    }

    pub fn zero_code(&self) -> u8 {
        self.levels.iter().position(|l| *l == 0.0).expect("grid holds an exact zero") as u8
    }

    pub fn widest_gap(&self) -> f64 {
        self.levels.windows(2).map(|w| w[1] - w[0]).fold(0.0, f64::max)
    }

    /// Nearest level to `x` (clamped to [-1, 1]); ties go to the lower index.
    pub fn nearest(&self, x: f64) -> u8 {
        let x = x.clamp(-1.0, 1.0);
        // first level >= x
        let hi = self.levels.partition_point(|l| *l < x);
        if hi == 0 {
            return 0;
        }
        if hi == LEVELS {
            return (LEVELS - 1) as u8;
        }
        let lo = hi - 1;
        if x - self.levels[lo] <= self.levels[hi] - x {
            lo as u8
        } else {
            hi as u8
        }
    }
}

/// Probability offset for the outermost quantile, midway between the
/// `1 - 1/(2*15)` and `1 - 1/(2*16)` conventions.
pub const OFFSET: f64 = 0.5 * ((1.0 - 1.0 / 30.0) + (1.0 - 1.0 / 32.0));

fn linspace(start: f64, end: f64, n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| start + (end - start) * i as f64 / (n - 1) as f64)
        .collect()
}

/// Construct the grid from inverse-normal quantiles.
pub fn build_nf4_grid() -> Nf4Grid {
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let positive: Vec<f64> = linspace(OFFSET, 0.5, 9)[..8]
        .iter()
        .map(|p| normal.inverse_cdf(*p))
        .collect();
    let negative: Vec<f64> = linspace(OFFSET, 0.5, 8)[..7]
        .iter()
        .map(|p| -normal.inverse_cdf(*p))
        .collect();
    let mut values: Vec<f64> = positive.into_iter().chain(negative).chain([0.0]).collect();
    values.sort_by(f64::total_cmp);
    let max = values.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let mut levels = [0.0; LEVELS];
    for (l, v) in levels.iter_mut().zip(&values) {
        *l = v / max;
    }
    levels[0] = -1.0;
    levels[LEVELS - 1] = 1.0;
    Nf4Grid { levels }
}

pub fn grid() -> &'static Nf4Grid {
    static GRID: OnceLock<Nf4Grid> = OnceLock::new();
    GRID.get_or_init(build_nf4_grid)
}

/// One quantized block.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantizedBlock {
    /// One level index per value (< 16).
    pub codes: Vec<u8>,
    pub absmax: f64,
}

impl QuantizedBlock {
    pub fn block_size(&self) -> usize {
        self.codes.len()
    }
}

pub fn quantize_block(values: &[f64]) -> Result<QuantizedBlock, QuantError> {
    if values.is_empty() {
        return Err(QuantError::EmptyBlock);
    }
    if let Some((index, value)) = values.iter().enumerate().find(|(_, v)| !v.is_finite()) {
        return Err(QuantError::NonFinite { index, value: *value });
    }
    let g = grid();
    let absmax = values.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let codes = if absmax == 0.0 {
        vec![g.zero_code(); values.len()]
    } else {
        values.iter().map(|v| g.nearest(v / absmax)).collect()
    };
    Ok(QuantizedBlock { codes, absmax })
}

pub fn dequantize_block(qb: &QuantizedBlock) -> Result<Vec<f64>, QuantError> {
    let g = grid();
    qb.codes
        .iter()
        .map(|&c| {
            g.levels
                .get(c as usize)
                .map(|l| l * qb.absmax)
                .ok_or(QuantError::BadCode(c))
        })
        .collect()
}

/// Storage cost of nf4 with one 32-bit scale per block.
pub fn bits_per_weight(block_size: usize) -> f64 {
    4.0 + 32.0 / block_size as f64
}

/// A row-major matrix stored as packed nf4 codes (two per byte, low nibble first)
/// with one scale per block of the flattened values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantizedTensor {
    pub shape: (usize, usize),
    pub block_size: usize,
    pub packed: Vec<u8>,
    pub scales: Vec<f32>,
}

impl QuantizedTensor {
    pub fn quantize<F: Real>(m: &Array2<F>, block_size: usize) -> Result<Self, QuantError> {
        if block_size == 0 {
            return Err(QuantError::BadBlockSize);
        }
        let flat: Vec<f64> = m.iter().map(|v| v.f64()).collect();
        let mut codes = Vec::with_capacity(flat.len());
        let mut scales = Vec::with_capacity(flat.len().div_ceil(block_size));
        for chunk in flat.chunks(block_size) {
            // scales are kept in f32; quantize against the stored value
            let absmax = chunk.iter().fold(0.0f64, |a, v| a.max(v.abs())) as f32;
            let qb = quantize_block(chunk)?;
            let g = grid();
            if absmax == 0.0 {
                codes.extend(qb.codes);
            } else {
                codes.extend(chunk.iter().map(|v| g.nearest(v / absmax as f64)));
            }
            scales.push(absmax);
        }
        Ok(QuantizedTensor {
            shape: m.dim(),
            block_size,
            packed: pack(&codes),
            scales,
        })
    }

    pub fn len(&self) -> usize {
        self.shape.0 * self.shape.1
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn codes(&self) -> Vec<u8> {
        unpack(&self.packed, self.len())
    }

    pub fn validate(&self) -> Result<(), QuantError> {
        if self.block_size == 0 {
            return Err(QuantError::BadBlockSize);
        }
        if self.packed.len() != self.len().div_ceil(2) {
            return Err(QuantError::Inconsistent(format!(
                "{} packed bytes for {} values",
                self.packed.len(),
                self.len()
            )));
        }
        if self.scales.len() != self.len().div_ceil(self.block_size) {
            return Err(QuantError::Inconsistent(format!(
                "{} scales for {} blocks",
                self.scales.len(),
                self.len().div_ceil(self.block_size)
            )));
        }
        Ok(())
    }

    pub fn dequantize<F: Real>(&self) -> Array2<F> {
        let levels = grid().levels();
        let codes = self.codes();
        let data: Vec<F> = codes
            .iter()
            .enumerate()
            .map(|(i, &c)| F::of(levels[c as usize] * self.scales[i / self.block_size] as f64))
            .collect();
        Array2::from_shape_vec(self.shape, data).expect("shape matches code count")
    }

    /// Bytes of packed codes plus scales.
    pub fn storage_bytes(&self) -> usize {
        self.packed.len() + 4 * self.scales.len()
    }
}

/// Replace every frozen matrix (embeddings, projections, head) with its nf4
/// form. Adapter factors and norm/bias rows stay in full precision.
pub fn quantize_frozen<F: Real>(mut model: ModelParams<F>, block_size: usize) -> Result<ModelParams<F>, QuantError> {
    for (_, entry) in model.entries_mut() {
        if let EntryMut::Weight(w, _) = entry {
            if let Weight::Dense(m) = w {
                *w = Weight::Nf4(QuantizedTensor::quantize(m, block_size)?);
            }
        }
    }
    model.frozen_base = true;
    Ok(model)
}

/// Bytes of the frozen tensors as stored: nf4 payloads at their packed size,
/// dense tensors at 4 bytes per value.
pub fn frozen_storage_bytes<F: Real>(model: &ModelParams<F>) -> usize {
    model
        .entries()
        .iter()
        .filter(|(_, e)| !e.role().is_adapter())
        .map(|(_, e)| match e {
            Entry::Weight(Weight::Nf4(q), _) => q.storage_bytes(),
            e => {
                let (r, c) = e.shape();
                4 * r * c
            }
        })
        .sum()
}

pub fn pack(codes: &[u8]) -> Vec<u8> {
    codes
        .chunks(2)
        .map(|pair| (pair[0] & 0x0F) | (pair.get(1).copied().unwrap_or(0) & 0x0F) << 4)
        .collect()
}

pub fn unpack(packed: &[u8], n: usize) -> Vec<u8> {
    let mut out = Vec::with_capacity(n);
    for byte in packed {
        out.push(byte & 0x0F);
        out.push(byte >> 4);
    }
    out.truncate(n);
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_shape() {
        let g = grid().levels();
        assert_eq!(g.len(), 16);
        assert_eq!(g.iter().filter(|v| **v == 0.0).count(), 1);
        assert_eq!(g[0], -1.0);
        assert_eq!(g[15], 1.0);
        assert!(g.windows(2).all(|w| w[0] < w[1]));
        // 7 negative, zero, 8 positive
        assert_eq!(grid().zero_code(), 7);
    }

    #[test]
    fn all_zero_block() {
        let qb = quantize_block(&[0.0; 8]).unwrap();
        assert_eq!(qb.absmax, 0.0);
        assert!(qb.codes.iter().all(|c| *c == grid().zero_code()));
        assert_eq!(dequantize_block(&qb).unwrap(), vec![0.0; 8]);
    }

    #[test]
    fn on_grid_values_round_trip() {
        let values: Vec<f64> = grid().levels().iter().map(|l| l * 3.7).collect();
        let qb = quantize_block(&values).unwrap();
        let back = dequantize_block(&qb).unwrap();
        for (a, b) in values.iter().zip(&back) {
            assert!((a - b).abs() < 1e-12);
        }
        assert_eq!(qb.codes, (0..16).collect::<Vec<u8>>());
    }

    #[test]
    fn ties_go_to_lower_index() {
        let g = grid().levels();
        let mid = 0.5 * (g[3] + g[4]);
        assert_eq!(grid().nearest(mid), 3);
    }

    #[test]
    fn errors() {
        assert_eq!(quantize_block(&[]), Err(QuantError::EmptyBlock));
        assert!(matches!(quantize_block(&[1.0, f64::NAN]), Err(QuantError::NonFinite { index: 1, .. })));
        let qb = QuantizedBlock { codes: vec![16], absmax: 1.0 };
        assert_eq!(dequantize_block(&qb), Err(QuantError::BadCode(16)));
    }

    #[test]
    fn storage_ratio_vs_f32() {
        assert!((bits_per_weight(64) - 4.5).abs() < 1e-12);
        let ratio = 32.0 / bits_per_weight(64);
        assert!((ratio - 7.111).abs() < 1e-3);
    }

    #[test]
    fn pack_low_nibble_first() {
        assert_eq!(pack(&[1, 2, 3]), vec![0x21, 0x03]);
        assert_eq!(unpack(&[0x21, 0x03], 3), vec![1, 2, 3]);
    }

    #[test]
    fn tensor_round_trip_shape_and_bound() {
        let m = Array2::from_shape_fn((5, 13), |(i, j)| ((i * 13 + j) as f32 * 0.37).sin());
        let q = QuantizedTensor::quantize(&m, 16).unwrap();
        q.validate().unwrap();
        let back: Array2<f32> = q.dequantize();
        assert_eq!(back.dim(), (5, 13));
        let half_gap = grid().widest_gap() / 2.0;
        for (i, (a, b)) in m.iter().zip(back.iter()).enumerate() {
            let scale = q.scales[i / 16] as f64;
            assert!(((a - b).abs() as f64) <= scale * half_gap + 1e-6);
        }
    }
}
