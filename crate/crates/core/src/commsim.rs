//! In-process simulation of `W` data-parallel workers.
//!
//! Workers deposit their tensors; a single reducer folds them along a binary
//! tree that depends only on `W`. The communicator also keeps the books:
//! bits moved through all-reduce and all-gather, scalar operations spent
//! decoding, and compression flops.
//!
//! Accounting follows the per-worker logical send volume. An all-reduce of a
//! tensor counts its float payload once (32 bits per scalar), independent of
//! `W`. An all-gather counts the sum of every worker's payload, which is what
//! each worker receives. A single worker never talks to anyone, so `W = 1`
//! adds zero bits for both collectives.

use std::ops::AddAssign;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::par;

/// Wire size of a float as counted on the network.
pub const FLOAT_BITS: u64 = 32;

/// Anything that travels through a collective and has an exact wire size.
pub trait WireSize {
    fn bit_size(&self) -> u64;
}

impl WireSize for Matrix {
    fn bit_size(&self) -> u64 {
        FLOAT_BITS * self.len() as u64
    }
}

/// How a compressor's payloads are combined across workers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Route {
    AllReduce,
    AllGather,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CommStats {
    pub bits_allreduced: u64,
    pub bits_gathered: u64,
    pub decode_ops: u64,
    pub compress_flops: u64,
}

impl CommStats {
    pub fn bits_total(&self) -> u64 {
        self.bits_allreduced + self.bits_gathered
    }
}

impl AddAssign for CommStats {
    fn add_assign(&mut self, rhs: Self) {
        self.bits_allreduced += rhs.bits_allreduced;
        self.bits_gathered += rhs.bits_gathered;
        self.decode_ops += rhs.decode_ops;
        self.compress_flops += rhs.compress_flops;
    }
}

/// Pairings of the reduction tree, level by level. At the level with stride
/// `s`, slot `i` (a multiple of `2s`) absorbs slot `i + s`.
pub fn reduction_tree(world_size: usize) -> Vec<Vec<(usize, usize)>> {
    let mut levels = Vec::new();
    let mut stride = 1;
    while stride < world_size {
        let level = (0..world_size)
            .step_by(2 * stride)
            .filter(|i| i + stride < world_size)
            .map(|i| (i, i + stride))
            .collect();
        levels.push(level);
        stride *= 2;
    }
    levels
}

#[derive(Debug, Clone)]
pub struct Communicator {
    world_size: usize,
    tree: Vec<Vec<(usize, usize)>>,
    step: CommStats,
    total: CommStats,
}

impl Communicator {
    pub fn new(world_size: usize) -> Result<Self> {
        if world_size == 0 {
            return Err(Error::contract("Communicator::new", "world size must be positive"));
        }
        Ok(Self {
            world_size,
            tree: reduction_tree(world_size),
            step: CommStats::default(),
            total: CommStats::default(),
        })
    }

    pub fn world_size(&self) -> usize {
        self.world_size
    }

    fn check_arity(&self, op: &'static str, n: usize) -> Result<()> {
        if n != self.world_size {
            return Err(Error::contract(
                op,
                format!("expected {} worker contributions, got {n}", self.world_size),
            ));
        }
        Ok(())
    }

    /// Tree-ordered sum followed by division by `W`. The result does not
    /// depend on how many threads did the work.
    pub fn all_reduce_mean(&mut self, tensors: &[Matrix]) -> Result<Matrix> {
        self.check_arity("all_reduce_mean", tensors.len())?;
        let shape = tensors[0].shape();
        if let Some(bad) = tensors.iter().find(|t| t.shape() != shape) {
            return Err(Error::contract(
                "all_reduce_mean",
                format!("shape {:?} vs {:?}", bad.shape(), shape),
            ));
        }
        if self.world_size > 1 {
            self.step.bits_allreduced += tensors[0].bit_size();
        }
        Ok(tree_mean(&self.tree, tensors))
    }

    /// Delivers every payload to every worker.
    pub fn all_gather<P: WireSize + Clone>(&mut self, payloads: Vec<P>) -> Result<Vec<P>> {
        self.check_arity("all_gather", payloads.len())?;
        if self.world_size > 1 {
            self.step.bits_gathered += payloads.iter().map(WireSize::bit_size).sum::<u64>();
        }
        Ok(payloads)
    }

    pub fn charge_decode(&mut self, ops: u64) {
        self.step.decode_ops += ops;
    }

    pub fn charge_compress(&mut self, flops: u64) {
        self.step.compress_flops += flops;
    }

    /// Counters accumulated since the last [`Communicator::finish_step`].
    pub fn step_stats(&self) -> CommStats {
        self.step
    }

    /// Closes the current step and returns its counters.
    pub fn finish_step(&mut self) -> CommStats {
        let s = std::mem::take(&mut self.step);
        self.total += s;
        s
    }

    /// Everything accounted so far, including the open step.
    pub fn cumulative(&self) -> CommStats {
        let mut t = self.total;
        t += self.step;
        t
    }
}

fn tree_mean(tree: &[Vec<(usize, usize)>], tensors: &[Matrix]) -> Matrix {
    let w = tensors.len();
    let mut slots: Vec<Option<Matrix>> = tensors.iter().cloned().map(Some).collect();
    for level in tree {
        let sums = par::map_slice(level, |&(dst, src)| {
            let a = slots[dst].as_ref().expect("live slot");
            let b = slots[src].as_ref().expect("live slot");
            a.add(b).expect("shapes checked")
        });
        for (&(dst, src), sum) in level.iter().zip(sums) {
            slots[dst] = Some(sum);
            slots[src] = None;
        }
    }
    let sum = slots[0].take().expect("root slot");
    let div = w as f64;
    sum.map(|v| v / div)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    fn filled(v: f64) -> Matrix {
        Matrix::from_fn(2, 3, |_, _| v)
    }

    #[test]
    fn tree_shapes() {
        assert!(reduction_tree(1).is_empty());
        assert_eq!(reduction_tree(4), vec![vec![(0, 1), (2, 3)], vec![(0, 2)]]);
        assert_eq!(
            reduction_tree(5),
            vec![vec![(0, 1), (2, 3)], vec![(0, 2)], vec![(0, 4)]]
        );
    }

    #[test]
    fn mean_of_one_to_four() {
        let mut c = Communicator::new(4).unwrap();
        let t: Vec<_> = (1..=4).map(|v| filled(v as f64)).collect();
        let m = c.all_reduce_mean(&t).unwrap();
        assert!(m.data().iter().all(|&v| v == 2.5));
        assert_eq!(c.step_stats().bits_allreduced, 32 * 6);
    }

    #[test]
    fn single_worker_is_identity_and_free() {
        let mut c = Communicator::new(1).unwrap();
        let t = vec![filled(1.25)];
        assert_eq!(c.all_reduce_mean(&t).unwrap(), t[0]);
        assert_eq!(c.all_gather(t.clone()).unwrap().len(), 1);
        assert_eq!(c.step_stats(), CommStats::default());
    }

    #[test]
    fn eight_workers_match_fixed_order_oracle() {
        let mut s = rng::stream(3, &[rng::label::FIXTURE]);
        let t: Vec<_> = (0..8).map(|_| Matrix::random_normal(3, 3, 1.0, &mut s)).collect();
        let mut c = Communicator::new(8).unwrap();
        let got = c.all_reduce_mean(&t).unwrap();
        // ((0+1)+(2+3)) + ((4+5)+(6+7)), element by element
        let want = Matrix::from_fn(3, 3, |i, j| {
            let v = |k: usize| t[k].get(i, j);
            (((v(0) + v(1)) + (v(2) + v(3))) + ((v(4) + v(5)) + (v(6) + v(7)))) / 8.0
        });
        assert_eq!(got, want);
    }

    #[test]
    fn arity_and_shape_errors() {
        let mut c = Communicator::new(2).unwrap();
        assert!(c.all_reduce_mean(&[filled(1.0)]).is_err());
        assert!(c
            .all_reduce_mean(&[filled(1.0), Matrix::zeros(3, 2)])
            .is_err());
        assert!(Communicator::new(0).is_err());
    }

    #[test]
    fn gather_counts_every_payload() {
        let mut c = Communicator::new(3).unwrap();
        c.all_gather(vec![filled(0.0), filled(1.0), filled(2.0)]).unwrap();
        assert_eq!(c.step_stats().bits_gathered, 3 * 32 * 6);
        let s = c.finish_step();
        assert_eq!(s.bits_gathered, 576);
        assert_eq!(c.step_stats(), CommStats::default());
        assert_eq!(c.cumulative().bits_gathered, 576);
    }
}
