//! Rank-based compressors that aggregate with all-reduce: PowerSGD, its
//! multi-step best-approximation variant, and the unbiased random sketch.

use std::collections::BTreeMap;

use crate::commsim::Communicator;
use crate::error::{Error, Result};
use crate::linalg::{flops, matmul, matmul_nt, matmul_tn, orthogonalize, Matrix};
use crate::par;
use crate::rng::{self, label};

use super::payload::CompressedPayload;

/// Subspace-iteration steps used by the best-approximation variant.
pub const BEST_APPROX_STEPS: usize = 4;

/// Warm-start memory: one `Q` (m×r) per compressed parameter.
#[derive(Debug, Clone)]
pub struct PowerSgdState {
    rank: usize,
    seed: u64,
    q_memory: BTreeMap<usize, Matrix>,
}

impl PowerSgdState {
    pub fn new(rank: usize, seed: u64) -> Self {
        Self {
            rank,
            seed,
            q_memory: BTreeMap::new(),
        }
    }

    pub fn rank(&self) -> usize {
        self.rank
    }

    /// The rank actually used for an `n×m` matrix.
    pub fn effective_rank(&self, n: usize, m: usize) -> usize {
        self.rank.min(n).min(m)
    }

    /// Initial `Q` for a parameter: i.i.d. standard normal drawn from the
    /// shared seed, so every worker starts from the same matrix.
    pub fn initial_q(&self, param: usize, m: usize, r: usize) -> Matrix {
        let mut s = rng::stream(self.seed, &[label::Q_INIT, param as u64]);
        Matrix::random_normal(m, r, 1.0, &mut s)
    }

    pub fn q(&self, param: usize) -> Option<&Matrix> {
        self.q_memory.get(&param)
    }

    pub fn set_q(&mut self, param: usize, q: Matrix) {
        self.q_memory.insert(param, q);
    }

    fn take_q(&mut self, param: usize, n: usize, m: usize) -> Matrix {
        let r = self.effective_rank(n, m);
        match self.q_memory.remove(&param) {
            Some(q) if q.shape() == (m, r) => q,
            _ => self.initial_q(param, m, r),
        }
    }
}

/// Result of one fused compress+aggregate round.
#[derive(Debug, Clone)]
pub struct LowRankRound {
    /// The shared `(P̂, Q)` every worker ends up with.
    pub payload: CompressedPayload,
    /// Each worker's own `M_wᵀ·P̂` before averaging.
    pub local_q: Vec<Matrix>,
}

impl LowRankRound {
    /// `P̂ · Q_wᵀ`, worker `w`'s contribution to the aggregate.
    pub fn local_decompress(&self, w: usize) -> Matrix {
        match &self.payload {
            CompressedPayload::LowRank { p_hat, .. } => {
                matmul_nt(p_hat, &self.local_q[w]).expect("ranks agree")
            }
            _ => unreachable!("low-rank rounds carry LowRank payloads"),
        }
    }
}

fn check_same_shape(op: &'static str, locals: &[Matrix]) -> Result<(usize, usize)> {
    let first = locals
        .first()
        .ok_or_else(|| Error::contract(op, "no worker matrices"))?;
    let shape = first.shape();
    if let Some(bad) = locals.iter().find(|m| m.shape() != shape) {
        return Err(Error::contract(
            op,
            format!("worker shapes differ: {:?} vs {:?}", bad.shape(), shape),
        ));
    }
    Ok(shape)
}

/// One subspace-iteration step over the workers, starting from `q`:
/// `P = mean(M_w Q)`, `P̂ = orth(P)`, `Q_w = M_wᵀ P̂`, `Q = mean(Q_w)`.
fn subspace_step(
    locals: &[Matrix],
    q: &Matrix,
    comm: &mut Communicator,
) -> Result<(Matrix, Vec<Matrix>, Matrix)> {
    let p_local = par::map_slice(locals, |m| matmul(m, q));
    let p_local = p_local.into_iter().collect::<Result<Vec<_>>>()?;
    let p = comm.all_reduce_mean(&p_local)?;
    let p_hat = orthogonalize(&p)?;
    let q_local = par::map_slice(locals, |m| matmul_tn(m, &p_hat));
    let q_local = q_local.into_iter().collect::<Result<Vec<_>>>()?;
    let q_mean = comm.all_reduce_mean(&q_local)?;
    Ok((p_hat, q_local, q_mean))
}

fn step_flops(n: usize, m: usize, r: usize) -> u64 {
    2 * flops::matmul(n, m, r) + flops::orthogonalize(n, r)
}

/// Rank-r PowerSGD with warm start. Reads and updates `state`'s `Q` for
/// `param`.
pub fn powersgd_compress_aggregate(
    locals: &[Matrix],
    param: usize,
    state: &mut PowerSgdState,
    comm: &mut Communicator,
) -> Result<LowRankRound> {
    let (n, m) = check_same_shape("powersgd_compress_aggregate", locals)?;
    let q = state.take_q(param, n, m);
    let (p_hat, local_q, q_mean) = subspace_step(locals, &q, comm)?;
    comm.charge_compress(step_flops(n, m, q.cols()));
    state.set_q(param, q_mean.clone());
    Ok(LowRankRound {
        payload: CompressedPayload::LowRank { p_hat, q: q_mean },
        local_q,
    })
}

/// PowerSGD without warm start, running [`BEST_APPROX_STEPS`] subspace
/// iterations from a fresh shared-seed `Q` each call.
pub fn best_approx_compress_aggregate(
    locals: &[Matrix],
    rank: usize,
    seed: u64,
    param: usize,
    step: u64,
    comm: &mut Communicator,
) -> Result<LowRankRound> {
    let (n, m) = check_same_shape("best_approx_compress_aggregate", locals)?;
    let r = rank.min(n).min(m);
    let mut s = rng::stream(seed, &[label::BEST_APPROX, param as u64, step]);
    let mut q = Matrix::random_normal(m, r, 1.0, &mut s);
    let mut round = None;
    for _ in 0..BEST_APPROX_STEPS {
        let (p_hat, local_q, q_mean) = subspace_step(locals, &q, comm)?;
        comm.charge_compress(step_flops(n, m, r));
        q = q_mean.clone();
        round = Some(LowRankRound {
            payload: CompressedPayload::LowRank { p_hat, q: q_mean },
            local_q,
        });
    }
    Ok(round.expect("at least one step"))
}

/// Best-approximation compression of a single matrix.
pub fn best_approx_compress(m: &Matrix, rank: usize, seed: u64) -> Result<CompressedPayload> {
    let mut comm = Communicator::new(1)?;
    Ok(best_approx_compress_aggregate(std::slice::from_ref(m), rank, seed, 0, 0, &mut comm)?.payload)
}

/// Shared sketch matrix `U` (m×r) with i.i.d. `N(0, 1/r)` entries, so that
/// `E[UUᵀ] = I`.
pub fn sketch_basis(seed: u64, param: usize, step: u64, m: usize, r: usize) -> Matrix {
    let mut s = rng::stream(seed, &[label::SKETCH, param as u64, step]);
    Matrix::random_normal(m, r, (1.0 / r as f64).sqrt(), &mut s)
}

/// Unbiased rank-r compression `(M·U, U)` with a given shared basis.
pub fn unbiased_rank_r_compress(m: &Matrix, basis: &Matrix) -> Result<CompressedPayload> {
    Ok(CompressedPayload::Sketch {
        projected: matmul(m, basis)?,
        basis: basis.clone(),
    })
}

/// All-reduce route for the unbiased sketch. Returns the aggregate payload
/// and each worker's local payload.
pub fn unbiased_compress_aggregate(
    locals: &[Matrix],
    basis: &Matrix,
    comm: &mut Communicator,
) -> Result<(CompressedPayload, Vec<CompressedPayload>)> {
    let (n, m) = check_same_shape("unbiased_compress_aggregate", locals)?;
    if basis.rows() != m {
        return Err(Error::contract(
            "unbiased_compress_aggregate",
            format!("basis has {} rows, matrices have {m} columns", basis.rows()),
        ));
    }
    let local = par::map_slice(locals, |x| unbiased_rank_r_compress(x, basis));
    let local = local.into_iter().collect::<Result<Vec<_>>>()?;
    let projected: Vec<Matrix> = local
        .iter()
        .map(|p| match p {
            CompressedPayload::Sketch { projected, .. } => projected.clone(),
            _ => unreachable!(),
        })
        .collect();
    let mean = comm.all_reduce_mean(&projected)?;
    comm.charge_compress(flops::matmul(n, m, basis.cols()));
    Ok((
        CompressedPayload::Sketch {
            projected: mean,
            basis: basis.clone(),
        },
        local,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::best_rank_r_error;

    fn fixture(rows: usize, cols: usize, seed: u64) -> Matrix {
        Matrix::random_normal(rows, cols, 1.0, &mut rng::stream(seed, &[label::FIXTURE]))
    }

    fn rel(a: f64, b: f64) -> f64 {
        (a - b).abs() / b.abs().max(f64::MIN_POSITIVE)
    }

    #[test]
    fn rank_one_input_recovered_in_one_step() {
        let u = [1.0, 2.0, -1.0, 0.5, 3.0];
        let v = [0.3, -1.0, 2.0, 1.5];
        let m = Matrix::from_fn(5, 4, |i, j| u[i] * v[j]);
        let mut state = PowerSgdState::new(1, 9);
        let mut comm = Communicator::new(1).unwrap();
        let round = powersgd_compress_aggregate(std::slice::from_ref(&m), 0, &mut state, &mut comm).unwrap();
        let out = round.payload.decompress();
        assert!(out.distance_sq(&m).sqrt() <= 1e-10 * m.frobenius_norm());
    }

    #[test]
    fn opposite_workers_cancel() {
        let m = fixture(6, 5, 1);
        let neg = m.scale(-1.0);
        let mut state = PowerSgdState::new(2, 3);
        let mut comm = Communicator::new(2).unwrap();
        let round = powersgd_compress_aggregate(&[m, neg], 0, &mut state, &mut comm).unwrap();
        let CompressedPayload::LowRank { p_hat, q } = &round.payload else {
            panic!()
        };
        let gram = matmul_tn(p_hat, p_hat).unwrap();
        assert!(gram.max_abs_diff(&Matrix::identity(2)) <= 1e-10);
        assert_eq!(q.max_abs(), 0.0);
        assert_eq!(round.payload.decompress().max_abs(), 0.0);
    }

    #[test]
    fn warm_start_converges_to_best_rank_r() {
        // Spectrum with σ2/σ3 = 2.
        let mut s = rng::stream(21, &[label::FIXTURE]);
        let u = orthogonalize(&Matrix::random_normal(64, 48, 1.0, &mut s)).unwrap();
        let v = orthogonalize(&Matrix::random_normal(48, 48, 1.0, &mut s)).unwrap();
        let sig: Vec<f64> = (0..48)
            .map(|i| match i {
                0 => 10.0,
                1 => 6.0,
                _ => 3.0 * 0.97f64.powi(i),
            })
            .collect();
        let us = Matrix::from_fn(64, 48, |i, j| u.get(i, j) * sig[j]);
        let m = matmul_nt(&us, &v).unwrap();
        let oracle = best_rank_r_error(&m, 2).unwrap();
        let mut state = PowerSgdState::new(2, 4);
        let mut comm = Communicator::new(1).unwrap();
        let mut hit = None;
        for it in 1..=50 {
            let round =
                powersgd_compress_aggregate(std::slice::from_ref(&m), 0, &mut state, &mut comm).unwrap();
            let err = m.distance_sq(&round.payload.decompress());
            if rel(err, oracle) <= 1e-6 {
                hit = Some(it);
                break;
            }
        }
        assert!(hit.is_some(), "did not converge in 50 warm-started steps");
    }

    #[test]
    fn q_memory_tracks_shape() {
        let mut state = PowerSgdState::new(3, 1);
        let mut comm = Communicator::new(1).unwrap();
        powersgd_compress_aggregate(&[fixture(5, 4, 1)], 0, &mut state, &mut comm).unwrap();
        assert_eq!(state.q(0).unwrap().shape(), (4, 3));
        // rank clamps to the smaller side
        powersgd_compress_aggregate(&[fixture(2, 7, 1)], 1, &mut state, &mut comm).unwrap();
        assert_eq!(state.q(1).unwrap().shape(), (7, 2));
        // a reshaped parameter re-initialises its memory
        powersgd_compress_aggregate(&[fixture(5, 6, 1)], 0, &mut state, &mut comm).unwrap();
        assert_eq!(state.q(0).unwrap().shape(), (6, 3));
    }

    #[test]
    fn mismatched_workers_rejected() {
        let mut state = PowerSgdState::new(1, 1);
        let mut comm = Communicator::new(2).unwrap();
        let r = powersgd_compress_aggregate(
            &[fixture(3, 3, 1), fixture(3, 4, 1)],
            0,
            &mut state,
            &mut comm,
        );
        assert!(matches!(r, Err(Error::Contract { .. })));
    }

    #[test]
    fn best_approx_exact_on_low_rank_and_zero() {
        let a = fixture(10, 2, 5);
        let b = fixture(8, 2, 6);
        let m = matmul_nt(&a, &b).unwrap();
        let out = best_approx_compress(&m, 2, 1).unwrap().decompress();
        assert!(out.distance_sq(&m).sqrt() <= 1e-8 * m.frobenius_norm());
        let z = Matrix::zeros(6, 4);
        assert_eq!(best_approx_compress(&z, 2, 1).unwrap().decompress().max_abs(), 0.0);
    }

    /// Random orthogonal factors around singular values `0.4^i`.
    fn decaying(rows: usize, cols: usize, seed: u64) -> Matrix {
        let u = orthogonalize(&fixture(rows, cols, seed)).unwrap();
        let v = orthogonalize(&fixture(cols, cols, seed + 1)).unwrap();
        let us = Matrix::from_fn(rows, cols, |i, j| u.get(i, j) * 0.4f64.powi(j as i32));
        matmul_nt(&us, &v).unwrap()
    }

    #[test]
    fn best_approx_near_oracle() {
        // Four sweeps from a random start: an unlucky start converges more
        // slowly, so the median over starts is checked.
        let mut rels: Vec<f64> = (0..5)
            .map(|seed| {
                let m = decaying(64, 48, 10 * seed);
                let oracle = best_rank_r_error(&m, 2).unwrap();
                let err = m.distance_sq(&best_approx_compress(&m, 2, seed).unwrap().decompress());
                assert!(err >= oracle * (1.0 - 1e-12));
                rel(err, oracle)
            })
            .collect();
        rels.sort_by(f64::total_cmp);
        assert!(rels[2] <= 1e-4, "{rels:?}");
        assert!(rels[4] <= 1e-2, "{rels:?}");
    }

    #[test]
    fn best_approx_on_flat_spectrum_is_only_close() {
        // i.i.d. Gaussian 64x48: σ2/σ3 is close to one, four sweeps do not
        // converge, yet the result stays within a few percent.
        let m = fixture(64, 48, 7);
        let oracle = best_rank_r_error(&m, 2).unwrap();
        let err = m.distance_sq(&best_approx_compress(&m, 2, 3).unwrap().decompress());
        assert!(err >= oracle * (1.0 - 1e-12));
        assert!(rel(err, oracle) <= 0.05, "err {err} oracle {oracle}");
    }

    #[test]
    fn unbiased_of_zero_is_zero() {
        let basis = sketch_basis(1, 0, 0, 6, 2);
        let p = unbiased_rank_r_compress(&Matrix::zeros(8, 6), &basis).unwrap();
        assert_eq!(p.decompress().max_abs(), 0.0);
    }
}
