//! Minimal dense tensor arithmetic.
//!
//! Everything computes in f32 with a fixed accumulation order (sequential
//! over the inner dimension), so a matmul against quantized weights is
//! bit-identical to one against the fully dequantized matrix.

use crate::quant::{self, QuantBlock, QuantError, QuantScheme};
use half::f16;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("tensor supports at most 3 axes, got {0}")]
    TooManyAxes(usize),
    #[error(transparent)]
    Quant(#[from] QuantError),
}

/// Dense row-major f32 tensor with up to three axes.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    dims: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    pub fn new(dims: Vec<usize>, data: Vec<f32>) -> Result<Tensor, TensorError> {
        if dims.len() > 3 {
            return Err(TensorError::TooManyAxes(dims.len()));
        }
        let expect: usize = dims.iter().product();
        if expect != data.len() {
            return Err(TensorError::Shape(format!(
                "dims {:?} imply {} elements, buffer has {}",
                dims,
                expect,
                data.len()
            )));
        }
        Ok(Tensor { dims, data })
    }

    pub fn zeros(dims: Vec<usize>) -> Result<Tensor, TensorError> {
        let n = dims.iter().product();
        Tensor::new(dims, vec![0.0; n])
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    /// Row `i` of a 2-D tensor.
    pub fn row(&self, i: usize) -> &[f32] {
        let cols = self.dims[self.dims.len() - 1];
        &self.data[i * cols..(i + 1) * cols]
    }
}

/// Weight storage for a `rows x cols` matrix: raw f32, raw f16, or quantized
/// blocks laid out row by row (blocks never straddle a row boundary).
#[derive(Debug, Clone)]
pub enum WeightStorage {
    Fp32(Vec<f32>),
    Fp16(Vec<f16>),
    Quantized(Vec<QuantBlock>),
}

#[derive(Debug, Clone)]
pub struct WeightMatrix {
    pub rows: usize,
    pub cols: usize,
    pub storage: WeightStorage,
}

impl WeightMatrix {
    pub fn from_f32(rows: usize, cols: usize, data: Vec<f32>) -> Result<WeightMatrix, TensorError> {
        if rows * cols != data.len() {
            return Err(TensorError::Shape(format!(
                "{rows}x{cols} matrix needs {} values, got {}",
                rows * cols,
                data.len()
            )));
        }
        Ok(WeightMatrix {
            rows,
            cols,
            storage: WeightStorage::Fp32(data),
        })
    }

    pub fn from_f16(rows: usize, cols: usize, data: Vec<f16>) -> Result<WeightMatrix, TensorError> {
        if rows * cols != data.len() {
            return Err(TensorError::Shape(format!(
                "{rows}x{cols} matrix needs {} values, got {}",
                rows * cols,
                data.len()
            )));
        }
        Ok(WeightMatrix {
            rows,
            cols,
            storage: WeightStorage::Fp16(data),
        })
    }

    /// Quantize a dense matrix row by row. Rows whose length is not a
    /// multiple of the block size end with one short block.
    pub fn quantize(
        rows: usize,
        cols: usize,
        data: &[f32],
        scheme: QuantScheme,
    ) -> Result<WeightMatrix, TensorError> {
        if rows * cols != data.len() {
            return Err(TensorError::Shape(format!(
                "{rows}x{cols} matrix needs {} values, got {}",
                rows * cols,
                data.len()
            )));
        }
        let mut blocks = Vec::new();
        for r in 0..rows {
            let row = &data[r * cols..(r + 1) * cols];
            for chunk in row.chunks(scheme.block_size) {
                blocks.push(quant::quantize_slice(chunk, scheme)?);
            }
        }
        Ok(WeightMatrix {
            rows,
            cols,
            storage: WeightStorage::Quantized(blocks),
        })
    }

    /// Materialize the full matrix as f32.
    pub fn dequantize(&self) -> Result<Vec<f32>, TensorError> {
        match &self.storage {
            WeightStorage::Fp32(d) => Ok(d.clone()),
            WeightStorage::Fp16(d) => Ok(d.iter().map(|h| h.to_f32()).collect()),
            WeightStorage::Quantized(blocks) => {
                let mut out = Vec::with_capacity(self.rows * self.cols);
                for block in blocks {
                    out.extend(quant::dequantize_block(block)?);
                }
                if out.len() != self.rows * self.cols {
                    return Err(TensorError::Shape(format!(
                        "quantized blocks cover {} weights, matrix is {}x{}",
                        out.len(),
                        self.rows,
                        self.cols
                    )));
                }
                Ok(out)
            }
        }
    }

    /// Copy of the column range `[lo, hi)` as its own dense matrix.
    pub fn slice_cols(&self, lo: usize, hi: usize) -> Result<WeightMatrix, TensorError> {
        if hi > self.cols || lo > hi {
            return Err(TensorError::Shape(format!(
                "column slice {lo}..{hi} outside 0..{}",
                self.cols
            )));
        }
        let full = self.dequantize()?;
        let mut data = Vec::with_capacity(self.rows * (hi - lo));
        for r in 0..self.rows {
            data.extend_from_slice(&full[r * self.cols + lo..r * self.cols + hi]);
        }
        WeightMatrix::from_f32(self.rows, hi - lo, data)
    }

    /// Copy of the row range `[lo, hi)` as its own dense matrix.
    pub fn slice_rows(&self, lo: usize, hi: usize) -> Result<WeightMatrix, TensorError> {
        if hi > self.rows || lo > hi {
            return Err(TensorError::Shape(format!(
                "row slice {lo}..{hi} outside 0..{}",
                self.rows
            )));
        }
        let full = self.dequantize()?;
        WeightMatrix::from_f32(
            hi - lo,
            self.cols,
            full[lo * self.cols..hi * self.cols].to_vec(),
        )
    }

    /// Write row `r` into `out` (length `cols`).
    fn fill_row(&self, r: usize, out: &mut [f32]) -> Result<(), TensorError> {
        match &self.storage {
            WeightStorage::Fp32(d) => {
                out.copy_from_slice(&d[r * self.cols..(r + 1) * self.cols]);
            }
            WeightStorage::Fp16(d) => {
                for (o, h) in out.iter_mut().zip(&d[r * self.cols..(r + 1) * self.cols]) {
                    *o = h.to_f32();
                }
            }
            WeightStorage::Quantized(blocks) => {
                let per_row = blocks.len() / self.rows;
                let mut col = 0;
                for block in &blocks[r * per_row..(r + 1) * per_row] {
                    let vals = quant::dequantize_block(block)?;
                    out[col..col + vals.len()].copy_from_slice(&vals);
                    col += vals.len();
                }
            }
        }
        Ok(())
    }
}

/// `y = x . w` with f32 accumulation, `x` is `m x k`, `w` is `k x n`.
///
/// The loop runs i-k-j so each output element accumulates over k in index
/// order regardless of how `w` is stored.
pub fn matmul(x: &Tensor, w: &WeightMatrix) -> Result<Tensor, TensorError> {
    if x.dims.len() != 2 {
        return Err(TensorError::Shape(format!(
            "matmul input must be 2-D, got {:?}",
            x.dims
        )));
    }
    let (m, k) = (x.dims[0], x.dims[1]);
    if k != w.rows {
        return Err(TensorError::Shape(format!(
            "inner dims disagree: x is {m}x{k}, w is {}x{}",
            w.rows, w.cols
        )));
    }
    let n = w.cols;
    let mut y = vec![0.0f32; m * n];
    let mut row = vec![0.0f32; n];
    for kk in 0..k {
        w.fill_row(kk, &mut row)?;
        for i in 0..m {
            let a = x.data[i * k + kk];
            let out = &mut y[i * n..(i + 1) * n];
            for (o, &b) in out.iter_mut().zip(&row) {
                *o += a * b;
            }
        }
    }
    Tensor::new(vec![m, n], y)
}

/// Vector-matrix product for a single row, the decode-step hot path.
pub fn matvec(x: &[f32], w: &WeightMatrix) -> Result<Vec<f32>, TensorError> {
    if x.len() != w.rows {
        return Err(TensorError::Shape(format!(
            "inner dims disagree: x has {}, w is {}x{}",
            x.len(),
            w.rows,
            w.cols
        )));
    }
    let mut y = vec![0.0f32; w.cols];
    let mut row = vec![0.0f32; w.cols];
    for (kk, &a) in x.iter().enumerate() {
        w.fill_row(kk, &mut row)?;
        for (o, &b) in y.iter_mut().zip(&row) {
            *o += a * b;
        }
    }
    Ok(y)
}

/// Numerically stable softmax; `-inf` logits map to probability zero.
pub fn softmax(v: &[f32]) -> Vec<f32> {
    let mut out = v.to_vec();
    softmax_in_place(&mut out);
    out
}

pub fn softmax_in_place(v: &mut [f32]) {
    if v.is_empty() {
        return;
    }
    let max = v.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    if max == f32::NEG_INFINITY {
        // All mass gone; fall back to uniform.
        let u = 1.0 / v.len() as f32;
        v.iter_mut().for_each(|p| *p = u);
        return;
    }
    let mut sum = 0.0f32;
    for p in v.iter_mut() {
        *p = (*p - max).exp();
        sum += *p;
    }
    for p in v.iter_mut() {
        *p /= sum;
    }
}


#[cfg(test)]
mod properties {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        // Quarter-step logits keep the shifted sums exactly representable,
        // so invariance holds bitwise rather than approximately.
        #[test]
        fn softmax_shift_invariant(
            q in proptest::collection::vec(-80i32..80, 1..32),
            cq in -40i32..40,
        ) {
            let v: Vec<f32> = q.iter().map(|&x| x as f32 / 4.0).collect();
            let c = cq as f32 / 4.0;
            let shifted: Vec<f32> = v.iter().map(|x| x + c).collect();
            prop_assert_eq!(softmax(&v), softmax(&shifted));
        }

        // The normalizing sum accumulates in a different order after the
        // permutation, so equivariance holds to rounding, not bitwise.
        #[test]
        fn softmax_permutation_equivariant(
            v in proptest::collection::vec(-20.0f32..20.0, 2..16),
        ) {
            let mut rev = v.clone();
            rev.reverse();
            let mut s_rev = softmax(&rev);
            s_rev.reverse();
            for (a, b) in softmax(&v).iter().zip(&s_rev) {
                prop_assert!((a - b).abs() <= 1e-6);
            }
        }
    }
}
