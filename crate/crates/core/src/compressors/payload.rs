//! Wire formats of every compressor.

use serde::{Deserialize, Serialize};

use crate::commsim::{WireSize, FLOAT_BITS};
use crate::linalg::{matmul_nt, Matrix};

/// Bits per transmitted Top-K index.
pub const INDEX_BITS: u64 = 32;

/// Packed sign bits, one per scalar. A set bit means negative; zero encodes
/// as positive.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SignBits {
    len: usize,
    words: Vec<u64>,
}

impl SignBits {
    pub fn from_values(values: &[f64]) -> Self {
        let mut words = vec![0u64; values.len().div_ceil(64)];
        for (i, &v) in values.iter().enumerate() {
            if v < 0.0 {
                words[i / 64] |= 1 << (i % 64);
            }
        }
        Self {
            len: values.len(),
            words,
        }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    #[inline]
    pub fn is_negative(&self, i: usize) -> bool {
        self.words[i / 64] >> (i % 64) & 1 == 1
    }

    /// `+1.0` or `-1.0`.
    #[inline]
    pub fn sign(&self, i: usize) -> f64 {
        if self.is_negative(i) {
            -1.0
        } else {
            1.0
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = f64> + '_ {
        (0..self.len).map(|i| self.sign(i))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum CompressedPayload {
    /// PowerSGD and best-approximation: `P̂ · Qᵀ` with orthonormal `P̂`.
    LowRank { p_hat: Matrix, q: Matrix },
    /// Unbiased rank-r sketch `(M·U, U)`. `basis` comes from the shared seed
    /// and is not transmitted.
    Sketch { projected: Matrix, basis: Matrix },
    SignNorm {
        l1_norm: f64,
        signs: SignBits,
        rows: usize,
        cols: usize,
    },
    /// Signum: signs only.
    SignsOnly {
        signs: SignBits,
        rows: usize,
        cols: usize,
    },
    /// Top-K: ascending flat indices with their values.
    SparseTopK {
        indices: Vec<u32>,
        values: Vec<f64>,
        rows: usize,
        cols: usize,
    },
    /// Random-K: values only. `indices` are re-derived from the shared seed
    /// on every worker and cost nothing on the wire.
    SparseShared {
        indices: Vec<usize>,
        values: Vec<f64>,
        rows: usize,
        cols: usize,
    },
    /// Random Block: a contiguous (wrapping) slice starting at a shared-seed
    /// offset.
    Block {
        start: usize,
        values: Vec<f64>,
        rows: usize,
        cols: usize,
    },
    /// Spectral Atomo: `U′·V′ᵀ` where `U′` already carries `σ_i / π_i`.
    AtomoFactors { u_scaled: Matrix, v: Matrix },
    /// No compression.
    Dense { m: Matrix },
}

impl CompressedPayload {
    pub fn shape(&self) -> (usize, usize) {
        use CompressedPayload::*;
        match self {
            LowRank { p_hat, q } => (p_hat.rows(), q.rows()),
            Sketch { projected, basis } => (projected.rows(), basis.rows()),
            AtomoFactors { u_scaled, v } => (u_scaled.rows(), v.rows()),
            Dense { m } => m.shape(),
            SignNorm { rows, cols, .. }
            | SignsOnly { rows, cols, .. }
            | SparseTopK { rows, cols, .. }
            | SparseShared { rows, cols, .. }
            | Block { rows, cols, .. } => (*rows, *cols),
        }
    }

    /// Dense reconstruction of this single payload.
    pub fn decompress(&self) -> Matrix {
        use CompressedPayload::*;
        let (rows, cols) = self.shape();
        match self {
            LowRank { p_hat, q } => matmul_nt(p_hat, q).expect("factor ranks agree"),
            Sketch { projected, basis } => matmul_nt(projected, basis).expect("ranks agree"),
            AtomoFactors { u_scaled, v } => matmul_nt(u_scaled, v).expect("ranks agree"),
            Dense { m } => m.clone(),
            SignNorm { l1_norm, signs, .. } => {
                let scale = l1_norm / (rows * cols) as f64;
                Matrix::new(rows, cols, signs.iter().map(|s| scale * s).collect())
                    .expect("sign count matches shape")
            }
            SignsOnly { signs, .. } => {
                Matrix::new(rows, cols, signs.iter().collect()).expect("sign count matches shape")
            }
            SparseTopK {
                indices, values, ..
            } => {
                let mut out = Matrix::zeros(rows, cols);
                for (&i, &v) in indices.iter().zip(values) {
                    out.data_mut()[i as usize] = v;
                }
                out
            }
            SparseShared {
                indices, values, ..
            } => {
                let mut out = Matrix::zeros(rows, cols);
                for (&i, &v) in indices.iter().zip(values) {
                    out.data_mut()[i] = v;
                }
                out
            }
            Block { start, values, .. } => {
                let mut out = Matrix::zeros(rows, cols);
                let len = rows * cols;
                for (k, &v) in values.iter().enumerate() {
                    out.data_mut()[(start + k) % len] = v;
                }
                out
            }
        }
    }

    /// Scalar operations needed to turn this payload into a dense update.
    pub fn decode_ops(&self) -> u64 {
        use CompressedPayload::*;
        let (n, m) = self.shape();
        let nm = (n * m) as u64;
        match self {
            LowRank { q, .. } => nm * q.cols() as u64,
            Sketch { basis, .. } => nm * basis.cols() as u64,
            AtomoFactors { v, .. } => nm * v.cols() as u64,
            Dense { .. } => 0,
            SignNorm { .. } | SignsOnly { .. } => nm,
            SparseTopK { values, .. } | SparseShared { values, .. } | Block { values, .. } => {
                values.len() as u64
            }
        }
    }
}

impl WireSize for CompressedPayload {
    fn bit_size(&self) -> u64 {
        use CompressedPayload::*;
        match self {
            LowRank { p_hat, q } => FLOAT_BITS * (p_hat.len() + q.len()) as u64,
            Sketch { projected, .. } => FLOAT_BITS * projected.len() as u64,
            AtomoFactors { u_scaled, v } => FLOAT_BITS * (u_scaled.len() + v.len()) as u64,
            Dense { m } => FLOAT_BITS * m.len() as u64,
            SignNorm { signs, .. } => FLOAT_BITS + signs.len() as u64,
            SignsOnly { signs, .. } => signs.len() as u64,
            SparseTopK { indices, .. } => (FLOAT_BITS + INDEX_BITS) * indices.len() as u64,
            SparseShared { values, .. } | Block { values, .. } => {
                FLOAT_BITS * values.len() as u64
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sign_bits_round_trip_and_zero_is_positive() {
        let v = [1.0, -2.0, 0.0, -0.0, -1e-300];
        let s = SignBits::from_values(&v);
        assert_eq!(s.iter().collect::<Vec<_>>(), vec![1.0, -1.0, 1.0, 1.0, -1.0]);
        let long: Vec<f64> = (0..130).map(|i| if i % 3 == 0 { -1.0 } else { 1.0 }).collect();
        let s = SignBits::from_values(&long);
        assert_eq!(s.iter().collect::<Vec<_>>(), long);
    }

    #[test]
    fn block_wraps_around() {
        let p = CompressedPayload::Block {
            start: 3,
            values: vec![1.0, 2.0, 3.0],
            rows: 2,
            cols: 2,
        };
        assert_eq!(p.decompress().data(), &[2.0, 3.0, 0.0, 1.0]);
        assert_eq!(p.bit_size(), 96);
    }
}
