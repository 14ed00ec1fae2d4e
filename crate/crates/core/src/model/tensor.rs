//! Named parameter blocks and the ordered collections exchanged between nodes.

use std::collections::HashSet;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum DType {
    F32,
    #[default]
    F64,
}

impl DType {
    pub fn size_of(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }
}

impl fmt::Display for DType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DType::F32 => f.write_str("f32"),
            DType::F64 => f.write_str("f64"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum TensorValues {
    F32(Vec<f32>),
    F64(Vec<f64>),
}

impl TensorValues {
    pub fn len(&self) -> usize {
        match self {
            TensorValues::F32(v) => v.len(),
            TensorValues::F64(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dtype(&self) -> DType {
        match self {
            TensorValues::F32(_) => DType::F32,
            TensorValues::F64(_) => DType::F64,
        }
    }
}

/// One named tensor, stored flat in row-major order.
#[derive(Debug, Clone, PartialEq)]
pub struct TensorBlock {
    name: String,
    shape: Vec<usize>,
    values: TensorValues,
}

impl TensorBlock {
    pub fn new(name: impl Into<String>, shape: Vec<usize>, values: TensorValues) -> Result<Self> {
        let name = name.into();
        if shape.contains(&0) {
            return Err(Error::Shape(format!(
                "block {name}: dimensions must be positive, got {shape:?}"
            )));
        }
        let expected: usize = shape.iter().product();
        if values.len() != expected {
            return Err(Error::Shape(format!(
                "block {name}: {} values for shape {shape:?} (expected {expected})",
                values.len()
            )));
        }
        Ok(Self {
            name,
            shape,
            values,
        })
    }

    pub fn from_f64(name: impl Into<String>, shape: Vec<usize>, values: Vec<f64>) -> Result<Self> {
        Self::new(name, shape, TensorValues::F64(values))
    }

    pub fn zeros(name: impl Into<String>, shape: Vec<usize>) -> Result<Self> {
        let n = shape.iter().product();
        Self::from_f64(name, shape, vec![0.0; n])
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn dtype(&self) -> DType {
        self.values.dtype()
    }

    pub fn values(&self) -> &TensorValues {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Borrow the values if the block is stored as `f64`.
    pub fn as_f64(&self) -> Option<&[f64]> {
        match &self.values {
            TensorValues::F64(v) => Some(v),
            TensorValues::F32(_) => None,
        }
    }

    pub fn as_f64_mut(&mut self) -> Option<&mut [f64]> {
        match &mut self.values {
            TensorValues::F64(v) => Some(v),
            TensorValues::F32(_) => None,
        }
    }

    /// Values widened to `f64` (exact for `f32` sources).
    pub fn to_f64_vec(&self) -> Vec<f64> {
        match &self.values {
            TensorValues::F64(v) => v.clone(),
            TensorValues::F32(v) => v.iter().map(|&x| f64::from(x)).collect(),
        }
    }

    fn cast(&self, dtype: DType) -> TensorBlock {
        let values = match (&self.values, dtype) {
            (TensorValues::F32(v), DType::F32) => TensorValues::F32(v.clone()),
            (TensorValues::F64(v), DType::F64) => TensorValues::F64(v.clone()),
            (TensorValues::F32(v), DType::F64) => {
                TensorValues::F64(v.iter().map(|&x| f64::from(x)).collect())
            }
            (TensorValues::F64(v), DType::F32) => {
                TensorValues::F32(v.iter().map(|&x| x as f32).collect())
            }
        };
        TensorBlock {
            name: self.name.clone(),
            shape: self.shape.clone(),
            values,
        }
    }

    fn bits_eq(&self, other: &TensorBlock) -> bool {
        if self.name != other.name || self.shape != other.shape {
            return false;
        }
        match (&self.values, &other.values) {
            (TensorValues::F32(a), TensorValues::F32(b)) => a
                .iter()
                .zip(b)
                .all(|(x, y)| x.to_bits() == y.to_bits()),
            (TensorValues::F64(a), TensorValues::F64(b)) => a
                .iter()
                .zip(b)
                .all(|(x, y)| x.to_bits() == y.to_bits()),
            _ => false,
        }
    }
}

/// Ordered parameter blocks of one model.
///
/// Block order is canonical (layer order, kernel before bias) and two collections
/// are only combinable when names, shapes and dtypes match block by block.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ModelWeights {
    blocks: Vec<TensorBlock>,
}

impl ModelWeights {
    pub fn new(blocks: Vec<TensorBlock>) -> Result<Self> {
        let mut seen = HashSet::new();
        for b in &blocks {
            if !seen.insert(b.name.as_str()) {
                return Err(Error::Structure(format!("duplicate block name {}", b.name)));
            }
        }
        if let Some(first) = blocks.first() {
            let dtype = first.dtype();
            if let Some(b) = blocks.iter().find(|b| b.dtype() != dtype) {
                return Err(Error::Structure(format!(
                    "mixed dtypes: {} is {} but {} is {}",
                    first.name,
                    dtype,
                    b.name,
                    b.dtype()
                )));
            }
        }
        Ok(Self { blocks })
    }

    pub fn empty() -> Self {
        Self::default()
    }

    pub fn blocks(&self) -> &[TensorBlock] {
        &self.blocks
    }

    pub fn blocks_mut(&mut self) -> &mut [TensorBlock] {
        &mut self.blocks
    }

    pub fn block(&self, name: &str) -> Option<&TensorBlock> {
        self.blocks.iter().find(|b| b.name == name)
    }

    pub fn is_empty(&self) -> bool {
        self.blocks.is_empty()
    }

    /// dtype shared by every block; `None` for an empty model.
    pub fn dtype(&self) -> Option<DType> {
        self.blocks.first().map(TensorBlock::dtype)
    }

    pub fn num_params(&self) -> usize {
        self.blocks.iter().map(TensorBlock::len).sum()
    }

    pub fn to_dtype(&self, dtype: DType) -> ModelWeights {
        ModelWeights {
            blocks: self.blocks.iter().map(|b| b.cast(dtype)).collect(),
        }
    }

    /// Same structure, every value zero, stored as `f64`.
    pub fn zeros_like(&self) -> ModelWeights {
        ModelWeights {
            blocks: self
                .blocks
                .iter()
                .map(|b| TensorBlock {
                    name: b.name.clone(),
                    shape: b.shape.clone(),
                    values: TensorValues::F64(vec![0.0; b.len()]),
                })
                .collect(),
        }
    }

    /// Errors unless `other` has identical block names, shapes and dtypes.
    pub fn check_compatible(&self, other: &ModelWeights) -> Result<()> {
        if self.blocks.len() != other.blocks.len() {
            return Err(Error::Structure(format!(
                "{} blocks vs {} blocks",
                self.blocks.len(),
                other.blocks.len()
            )));
        }
        for (a, b) in self.blocks.iter().zip(&other.blocks) {
            if a.name != b.name || a.shape != b.shape || a.dtype() != b.dtype() {
                return Err(Error::Structure(format!(
                    "block {} {:?} {} vs block {} {:?} {}",
                    a.name,
                    a.shape,
                    a.dtype(),
                    b.name,
                    b.shape,
                    b.dtype()
                )));
            }
        }
        Ok(())
    }

    /// Bit-for-bit equality, so NaN payloads and signed zeros count.
    pub fn bitwise_eq(&self, other: &ModelWeights) -> bool {
        self.blocks.len() == other.blocks.len()
            && self
                .blocks
                .iter()
                .zip(&other.blocks)
                .all(|(a, b)| a.bits_eq(b))
    }

    /// All values widened to `f64`, concatenated in block order.
    pub fn flatten_f64(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        for b in &self.blocks {
            out.extend(b.to_f64_vec());
        }
        out
    }

    /// Inverse of [`flatten_f64`](Self::flatten_f64) against this model's structure.
    /// The result is `f64`.
    pub fn with_flat_f64(&self, flat: &[f64]) -> Result<ModelWeights> {
        if flat.len() != self.num_params() {
            return Err(Error::Shape(format!(
                "{} values for a model with {} parameters",
                flat.len(),
                self.num_params()
            )));
        }
        let mut offset = 0;
        let blocks = self
            .blocks
            .iter()
            .map(|b| {
                let n = b.len();
                let block = TensorBlock {
                    name: b.name.clone(),
                    shape: b.shape.clone(),
                    values: TensorValues::F64(flat[offset..offset + n].to_vec()),
                };
                offset += n;
                block
            })
            .collect();
        Ok(ModelWeights { blocks })
    }

    /// Elementwise combination of two compatible `f64` models.
    pub fn zip_map(
        &self,
        other: &ModelWeights,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<ModelWeights> {
        self.check_compatible(other)?;
        let blocks = self
            .blocks
            .iter()
            .zip(&other.blocks)
            .map(|(a, b)| {
                let av = a.to_f64_vec();
                let bv = b.to_f64_vec();
                TensorBlock {
                    name: a.name.clone(),
                    shape: a.shape.clone(),
                    values: TensorValues::F64(av.iter().zip(&bv).map(|(&x, &y)| f(x, y)).collect()),
                }
            })
            .collect();
        Ok(ModelWeights { blocks })
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> ModelWeights {
        ModelWeights {
            blocks: self
                .blocks
                .iter()
                .map(|b| TensorBlock {
                    name: b.name.clone(),
                    shape: b.shape.clone(),
                    values: TensorValues::F64(b.to_f64_vec().into_iter().map(&f).collect()),
                })
                .collect(),
        }
    }

    pub fn sub(&self, other: &ModelWeights) -> Result<ModelWeights> {
        self.zip_map(other, |a, b| a - b)
    }

    pub fn add(&self, other: &ModelWeights) -> Result<ModelWeights> {
        self.zip_map(other, |a, b| a + b)
    }

    pub fn scale(&self, k: f64) -> ModelWeights {
        self.map(|x| x * k)
    }

    /// `self += alpha * x`, in place. Both models must be `f64`.
    pub fn axpy(&mut self, alpha: f64, x: &ModelWeights) -> Result<()> {
        self.check_compatible(x)?;
        for (dst, src) in self.blocks.iter_mut().zip(&x.blocks) {
            let name = dst.name.clone();
            let d = dst
                .as_f64_mut()
                .ok_or_else(|| Error::Structure(format!("block {name} is not f64")))?;
            let s = src
                .as_f64()
                .ok_or_else(|| Error::Structure(format!("block {name} is not f64")))?;
            for (a, &b) in d.iter_mut().zip(s) {
                *a += alpha * b;
            }
        }
        Ok(())
    }

    pub fn max_abs_diff(&self, other: &ModelWeights) -> Result<f64> {
        self.check_compatible(other)?;
        Ok(self
            .flatten_f64()
            .iter()
            .zip(other.flatten_f64())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn two_blocks() -> ModelWeights {
        ModelWeights::new(vec![
            TensorBlock::from_f64("w", vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap(),
            TensorBlock::from_f64("b", vec![2], vec![0.5, -0.5]).unwrap(),
        ])
        .unwrap()
    }

    #[test]
    fn rejects_length_mismatch() {
        assert!(TensorBlock::from_f64("w", vec![2, 3], vec![0.0; 5]).is_err());
        assert!(TensorBlock::from_f64("w", vec![0, 3], vec![]).is_err());
    }

    #[test]
    fn rejects_duplicate_names_and_mixed_dtypes() {
        let a = TensorBlock::from_f64("w", vec![1], vec![1.0]).unwrap();
        assert!(ModelWeights::new(vec![a.clone(), a.clone()]).is_err());
        let b = TensorBlock::new("b", vec![1], TensorValues::F32(vec![1.0])).unwrap();
        assert!(ModelWeights::new(vec![a, b]).is_err());
    }

    #[test]
    fn compatibility_requires_matching_dtype() {
        let w = two_blocks();
        assert!(w.check_compatible(&w.zeros_like()).is_ok());
        assert!(w.check_compatible(&w.to_dtype(DType::F32)).is_err());
    }

    #[test]
    fn flat_round_trip() {
        let w = two_blocks();
        let flat = w.flatten_f64();
        assert_eq!(flat, vec![1.0, 2.0, 3.0, 4.0, 0.5, -0.5]);
        assert!(w.with_flat_f64(&flat).unwrap().bitwise_eq(&w));
    }

    #[test]
    fn bitwise_eq_sees_signed_zero() {
        let a = ModelWeights::new(vec![TensorBlock::from_f64("z", vec![1], vec![0.0]).unwrap()]).unwrap();
        let b = ModelWeights::new(vec![TensorBlock::from_f64("z", vec![1], vec![-0.0]).unwrap()]).unwrap();
        assert_eq!(a, b);
        assert!(!a.bitwise_eq(&b));
    }

    #[test]
    fn axpy_accumulates() {
        let mut w = two_blocks();
        w.axpy(2.0, &two_blocks()).unwrap();
        assert_eq!(w.flatten_f64(), vec![3.0, 6.0, 9.0, 12.0, 1.5, -1.5]);
    }
}
