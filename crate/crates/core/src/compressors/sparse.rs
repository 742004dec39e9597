//! Sparsifying compressors: Top-K, Random-K and Random Block.
//!
//! All three treat the matrix as a flat vector of length `n·m`. Random-K and
//! Random Block pick their coordinates from the shared seed, so every worker
//! selects the same set and the values can be averaged with all-reduce. Top-K
//! picks per worker and needs all-gather.

use rand::Rng;

use crate::linalg::Matrix;
use crate::rng::{self, label};

use super::payload::CompressedPayload;

/// Flat indices of the `budget` largest magnitudes, ties to the lower index,
/// returned in ascending order.
pub fn top_k_indices(values: &[f64], budget: usize) -> Vec<usize> {
    let budget = budget.min(values.len());
    let mut order: Vec<usize> = (0..values.len()).collect();
    let by_magnitude = |&a: &usize, &b: &usize| {
        values[b]
            .abs()
            .total_cmp(&values[a].abs())
            .then(a.cmp(&b))
    };
    if budget < order.len() {
        order.select_nth_unstable_by(budget, by_magnitude);
        order.truncate(budget);
    }
    order.sort_unstable();
    order
}

pub fn topk_compress(m: &Matrix, budget: usize) -> CompressedPayload {
    let indices = top_k_indices(m.data(), budget);
    CompressedPayload::SparseTopK {
        values: indices.iter().map(|&i| m.data()[i]).collect(),
        indices: indices.into_iter().map(|i| i as u32).collect(),
        rows: m.rows(),
        cols: m.cols(),
    }
}

/// Shared Random-K index set: `budget` distinct indices out of `len`,
/// ascending.
pub fn random_k_indices(seed: u64, param: usize, step: u64, len: usize, budget: usize) -> Vec<usize> {
    let budget = budget.min(len);
    let mut s = rng::stream(seed, &[label::RANDOM_K, param as u64, step]);
    let mut idx = rand::seq::index::sample(&mut s, len, budget).into_vec();
    idx.sort_unstable();
    idx
}

pub fn random_k_compress(m: &Matrix, indices: &[usize]) -> CompressedPayload {
    CompressedPayload::SparseShared {
        indices: indices.to_vec(),
        values: indices.iter().map(|&i| m.data()[i]).collect(),
        rows: m.rows(),
        cols: m.cols(),
    }
}

/// Shared block start, uniform over `0..len`.
pub fn random_block_start(seed: u64, param: usize, step: u64, len: usize) -> usize {
    let mut s = rng::stream(seed, &[label::RANDOM_BLOCK, param as u64, step]);
    s.random_range(0..len)
}

/// Block of `budget` consecutive entries from `start`, wrapping at the end of
/// the flattened matrix.
pub fn random_block_compress(m: &Matrix, start: usize, budget: usize) -> CompressedPayload {
    let len = m.len();
    let budget = budget.min(len);
    CompressedPayload::Block {
        start,
        values: (0..budget).map(|k| m.data()[(start + k) % len]).collect(),
        rows: m.rows(),
        cols: m.cols(),
    }
}

/// Gather-side Top-K aggregation: scatter-add `(1/W)·values` of every worker
/// in worker order.
pub fn topk_aggregate(payloads: &[CompressedPayload]) -> Matrix {
    let (rows, cols) = payloads[0].shape();
    let w = payloads.len() as f64;
    let mut out = Matrix::zeros(rows, cols);
    for p in payloads {
        let CompressedPayload::SparseTopK {
            indices, values, ..
        } = p
        else {
            panic!("topk_aggregate expects SparseTopK payloads");
        };
        for (&i, &v) in indices.iter().zip(values) {
            out.data_mut()[i as usize] += v / w;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::commsim::WireSize;

    #[test]
    fn topk_forced_ordering() {
        let m = Matrix::from_rows(&[&[5.0, -7.0], &[1.0, 0.0]]);
        let CompressedPayload::SparseTopK {
            indices, values, ..
        } = topk_compress(&m, 2)
        else {
            panic!()
        };
        assert_eq!(indices, vec![0, 1]);
        assert_eq!(values, vec![5.0, -7.0]);
    }

    #[test]
    fn topk_ties_prefer_lower_index() {
        assert_eq!(top_k_indices(&[1.0, -3.0, 3.0, 3.0, 0.0], 2), vec![1, 2]);
        assert_eq!(top_k_indices(&[2.0, 2.0, 2.0], 1), vec![0]);
    }

    #[test]
    fn topk_budget_clamps() {
        let m = Matrix::from_rows(&[&[1.0, 2.0]]);
        let p = topk_compress(&m, 10);
        assert_eq!(p.decompress(), m);
        assert_eq!(p.bit_size(), 2 * 64);
    }

    #[test]
    fn random_k_is_shared_and_distinct() {
        let a = random_k_indices(5, 2, 7, 100, 30);
        assert_eq!(a, random_k_indices(5, 2, 7, 100, 30));
        assert_ne!(a, random_k_indices(5, 2, 8, 100, 30));
        assert_eq!(a.len(), 30);
        assert!(a.windows(2).all(|w| w[0] < w[1]));
        assert_eq!(random_k_indices(5, 2, 7, 10, 99).len(), 10);
    }

    #[test]
    fn full_block_is_identity() {
        let m = Matrix::from_fn(3, 4, |i, j| (i * 4 + j) as f64 - 5.0);
        for start in [0, 5, 11] {
            assert_eq!(random_block_compress(&m, start, 12).decompress(), m);
        }
        let s = random_block_start(1, 0, 0, 12);
        assert!(s < 12);
        assert_eq!(random_block_compress(&m, s, 100).decompress(), m);
    }
}
