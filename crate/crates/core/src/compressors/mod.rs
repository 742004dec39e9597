//! Gradient compressors behind one interface.
//!
//! A [`Compressor`] handles one matrix-shaped parameter at a time. Given every
//! worker's local update it produces
//!
//! * each worker's own decompressed contribution, which error feedback
//!   subtracts from the local update, and
//! * the aggregated update every worker applies.
//!
//! Linear schemes (PowerSGD, best-approximation, unbiased sketch, Random-K,
//! Random Block, no compression) go through all-reduce. Top-K, Sign+Norm,
//! Signum and Atomo go through all-gather and decode every worker's payload.

mod atomo;
mod lowrank;
mod payload;
mod sign;
mod sparse;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::commsim::{Communicator, Route, FLOAT_BITS};
use crate::error::{Error, Result};
use crate::linalg::{flops, Matrix};
use crate::par;
use crate::rng::{self, label};

pub use atomo::{
    atomo_aggregate, atomo_compress, atomo_probabilities, conditional_inclusion, AtomoScaling,
};
pub use lowrank::{
    best_approx_compress, best_approx_compress_aggregate, powersgd_compress_aggregate,
    sketch_basis, unbiased_compress_aggregate, unbiased_rank_r_compress, LowRankRound,
    PowerSgdState, BEST_APPROX_STEPS,
};
pub use payload::{CompressedPayload, SignBits, INDEX_BITS};
pub use sign::{sign_norm_aggregate, sign_norm_compress, signum_compress, signum_vote};
pub use sparse::{
    random_block_compress, random_block_start, random_k_compress, random_k_indices,
    top_k_indices, topk_aggregate, topk_compress,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CompressorKind {
    None,
    #[serde(rename = "powersgd")]
    PowerSgd,
    BestApprox,
    UnbiasedRank,
    TopK,
    RandomK,
    RandomBlock,
    #[serde(rename = "signnorm")]
    SignNorm,
    Signum,
    Atomo,
}

impl CompressorKind {
    pub const ALL: [CompressorKind; 10] = [
        CompressorKind::None,
        CompressorKind::PowerSgd,
        CompressorKind::BestApprox,
        CompressorKind::UnbiasedRank,
        CompressorKind::TopK,
        CompressorKind::RandomK,
        CompressorKind::RandomBlock,
        CompressorKind::SignNorm,
        CompressorKind::Signum,
        CompressorKind::Atomo,
    ];

    pub fn id(self) -> &'static str {
        match self {
            CompressorKind::None => "none",
            CompressorKind::PowerSgd => "powersgd",
            CompressorKind::BestApprox => "best-approx",
            CompressorKind::UnbiasedRank => "unbiased-rank",
            CompressorKind::TopK => "top-k",
            CompressorKind::RandomK => "random-k",
            CompressorKind::RandomBlock => "random-block",
            CompressorKind::SignNorm => "signnorm",
            CompressorKind::Signum => "signum",
            CompressorKind::Atomo => "atomo",
        }
    }

    /// Compress-then-average equals average-then-compress.
    pub fn is_linear(self) -> bool {
        matches!(
            self,
            CompressorKind::None
                | CompressorKind::PowerSgd
                | CompressorKind::BestApprox
                | CompressorKind::UnbiasedRank
                | CompressorKind::RandomK
                | CompressorKind::RandomBlock
        )
    }

    pub fn route(self) -> Route {
        if self.is_linear() {
            Route::AllReduce
        } else {
            Route::AllGather
        }
    }

    /// Signum and Atomo run in their original form: plain momentum, no error
    /// feedback.
    pub fn uses_error_feedback(self) -> bool {
        !matches!(self, CompressorKind::Signum | CompressorKind::Atomo)
    }

    pub fn uses_rank(self) -> bool {
        !matches!(
            self,
            CompressorKind::None | CompressorKind::SignNorm | CompressorKind::Signum
        )
    }
}

impl fmt::Display for CompressorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.id())
    }
}

impl FromStr for CompressorKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let norm = s.to_ascii_lowercase().replace('_', "-");
        let kind = match norm.as_str() {
            "none" | "identity" | "sgd" => CompressorKind::None,
            "powersgd" | "rank" => CompressorKind::PowerSgd,
            "best-approx" | "best" => CompressorKind::BestApprox,
            "unbiased-rank" | "unbiased" => CompressorKind::UnbiasedRank,
            "top-k" | "topk" => CompressorKind::TopK,
            "random-k" | "randomk" => CompressorKind::RandomK,
            "random-block" | "block" => CompressorKind::RandomBlock,
            "signnorm" | "sign-norm" | "sign+norm" => CompressorKind::SignNorm,
            "signum" => CompressorKind::Signum,
            "atomo" => CompressorKind::Atomo,
            _ => {
                return Err(Error::Unknown {
                    kind: "compressor",
                    name: s.to_string(),
                })
            }
        };
        Ok(kind)
    }
}

/// Coordinate budget matching rank-r PowerSGD, `(n + m)·r`, clamped to `n·m`.
pub fn sparse_budget(n: usize, m: usize, rank: usize) -> usize {
    ((n + m) * rank).min(n * m)
}

/// Closed-form payload size in bits for one `n×m` matrix.
pub fn payload_bits(kind: CompressorKind, n: usize, m: usize, rank: usize) -> u64 {
    let (n64, m64) = (n as u64, m as u64);
    let r = rank.min(n).min(m) as u64;
    match kind {
        CompressorKind::None => FLOAT_BITS * n64 * m64,
        CompressorKind::PowerSgd | CompressorKind::BestApprox | CompressorKind::Atomo => {
            FLOAT_BITS * r * (n64 + m64)
        }
        CompressorKind::UnbiasedRank => FLOAT_BITS * n64 * r,
        CompressorKind::TopK => (FLOAT_BITS + INDEX_BITS) * sparse_budget(n, m, rank) as u64,
        CompressorKind::RandomK | CompressorKind::RandomBlock => {
            FLOAT_BITS * sparse_budget(n, m, rank) as u64
        }
        CompressorKind::SignNorm => FLOAT_BITS + n64 * m64,
        CompressorKind::Signum => n64 * m64,
    }
}

/// Compression-side flop estimate per worker for one `n×m` matrix.
pub fn compress_flops(kind: CompressorKind, n: usize, m: usize, rank: usize) -> u64 {
    let r = rank.min(n).min(m);
    let nm = (n * m) as u64;
    let step = 2 * flops::matmul(n, m, r) + flops::orthogonalize(n, r);
    match kind {
        CompressorKind::None => 0,
        CompressorKind::PowerSgd => step,
        CompressorKind::BestApprox => BEST_APPROX_STEPS as u64 * step,
        CompressorKind::UnbiasedRank => flops::matmul(n, m, r),
        CompressorKind::TopK => nm,
        CompressorKind::RandomK | CompressorKind::RandomBlock => {
            sparse_budget(n, m, rank) as u64
        }
        CompressorKind::SignNorm => 2 * nm,
        CompressorKind::Signum => nm,
        CompressorKind::Atomo => flops::dense_svd(n, m) + (n * r) as u64,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CompressorConfig {
    pub kind: CompressorKind,
    pub rank: usize,
    pub seed: u64,
    #[serde(default)]
    pub atomo_scaling: AtomoScaling,
}

impl CompressorConfig {
    pub fn new(kind: CompressorKind, rank: usize, seed: u64) -> Self {
        Self {
            kind,
            rank,
            seed,
            atomo_scaling: AtomoScaling::default(),
        }
    }
}

/// Outcome of exchanging one parameter across the workers.
#[derive(Debug, Clone)]
pub struct Exchange {
    /// `decompress(C(Δ_w))` for every worker `w`.
    pub local: Vec<Matrix>,
    /// `Δ′`, the aggregated update.
    pub aggregate: Matrix,
}

/// Addresses the shared random streams: one parameter at one step.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamKey {
    pub index: usize,
    pub step: u64,
}

/// A configured compressor plus whatever state it carries between steps
/// (only PowerSGD keeps any).
#[derive(Debug, Clone)]
pub struct Compressor {
    config: CompressorConfig,
    powersgd: PowerSgdState,
}

impl Compressor {
    pub fn new(config: CompressorConfig) -> Result<Self> {
        if config.kind.uses_rank() && config.rank == 0 {
            return Err(Error::contract(
                "Compressor::new",
                format!("{} needs rank >= 1", config.kind),
            ));
        }
        Ok(Self {
            config,
            powersgd: PowerSgdState::new(config.rank, config.seed),
        })
    }

    pub fn config(&self) -> &CompressorConfig {
        &self.config
    }

    pub fn kind(&self) -> CompressorKind {
        self.config.kind
    }

    pub fn powersgd_state(&self) -> &PowerSgdState {
        &self.powersgd
    }

    pub fn powersgd_state_mut(&mut self) -> &mut PowerSgdState {
        &mut self.powersgd
    }

    /// Compresses every worker's matrix, aggregates through the matching
    /// collective and decodes. Decode and compression costs are charged to
    /// `comm`.
    pub fn exchange(
        &mut self,
        key: ParamKey,
        locals: &[Matrix],
        comm: &mut Communicator,
    ) -> Result<Exchange> {
        let (n, m) = locals
            .first()
            .map(Matrix::shape)
            .ok_or_else(|| Error::contract("exchange", "no worker matrices"))?;
        if let Some(bad) = locals.iter().find(|x| x.shape() != (n, m)) {
            return Err(Error::contract(
                "exchange",
                format!("worker shapes differ: {:?} vs {:?}", bad.shape(), (n, m)),
            ));
        }
        let CompressorConfig {
            kind, rank, seed, ..
        } = self.config;
        let budget = sparse_budget(n, m, rank);
        match kind {
            CompressorKind::None => {
                let aggregate = comm.all_reduce_mean(locals)?;
                Ok(Exchange {
                    local: locals.to_vec(),
                    aggregate,
                })
            }
            CompressorKind::PowerSgd => {
                let round = powersgd_compress_aggregate(locals, key.index, &mut self.powersgd, comm)?;
                Ok(low_rank_exchange(round, comm))
            }
            CompressorKind::BestApprox => {
                let round =
                    best_approx_compress_aggregate(locals, rank, seed, key.index, key.step, comm)?;
                Ok(low_rank_exchange(round, comm))
            }
            CompressorKind::UnbiasedRank => {
                let basis = sketch_basis(seed, key.index, key.step, m, rank.min(n).min(m));
                let (agg, local) = unbiased_compress_aggregate(locals, &basis, comm)?;
                comm.charge_decode(agg.decode_ops());
                Ok(Exchange {
                    local: par::map_slice(&local, CompressedPayload::decompress),
                    aggregate: agg.decompress(),
                })
            }
            CompressorKind::RandomK => {
                let idx = random_k_indices(seed, key.index, key.step, n * m, budget);
                let payloads: Vec<_> = locals.iter().map(|x| random_k_compress(x, &idx)).collect();
                comm.charge_compress(compress_flops(kind, n, m, rank));
                shared_sparse_exchange(payloads, comm)
            }
            CompressorKind::RandomBlock => {
                let start = random_block_start(seed, key.index, key.step, n * m);
                let payloads: Vec<_> = locals
                    .iter()
                    .map(|x| random_block_compress(x, start, budget))
                    .collect();
                comm.charge_compress(compress_flops(kind, n, m, rank));
                shared_sparse_exchange(payloads, comm)
            }
            CompressorKind::TopK => {
                let payloads = par::map_slice(locals, |x| topk_compress(x, budget));
                comm.charge_compress(compress_flops(kind, n, m, rank));
                Ok(gather_exchange(payloads, comm, topk_aggregate)?)
            }
            CompressorKind::SignNorm => {
                let payloads = par::map_slice(locals, sign_norm_compress);
                comm.charge_compress(compress_flops(kind, n, m, rank));
                Ok(gather_exchange(payloads, comm, sign_norm_aggregate)?)
            }
            CompressorKind::Signum => {
                let payloads = par::map_slice(locals, signum_compress);
                comm.charge_compress(compress_flops(kind, n, m, rank));
                Ok(gather_exchange(payloads, comm, signum_vote)?)
            }
            CompressorKind::Atomo => {
                let r = rank.min(n).min(m);
                let scaling = self.config.atomo_scaling;
                let payloads = par::map_slice(locals, |x| {
                    let mut s = rng::stream(seed, &[label::ATOMO, key.index as u64, key.step]);
                    atomo_compress(x, r, &mut s, scaling)
                });
                let payloads = payloads.into_iter().collect::<Result<Vec<_>>>()?;
                comm.charge_compress(compress_flops(kind, n, m, rank));
                Ok(gather_exchange(payloads, comm, atomo_aggregate)?)
            }
        }
    }
}

fn low_rank_exchange(round: LowRankRound, comm: &mut Communicator) -> Exchange {
    comm.charge_decode(round.payload.decode_ops());
    let local = par::map_indexed(round.local_q.len(), |w| round.local_decompress(w));
    Exchange {
        local,
        aggregate: round.payload.decompress(),
    }
}

/// Random-K / Random Block: identical coordinates on every worker, so the
/// value vectors are averaged with all-reduce and scattered once.
fn shared_sparse_exchange(
    payloads: Vec<CompressedPayload>,
    comm: &mut Communicator,
) -> Result<Exchange> {
    let values: Vec<Matrix> = payloads
        .iter()
        .map(|p| match p {
            CompressedPayload::SparseShared { values, .. } | CompressedPayload::Block { values, .. } => {
                Matrix::column(values.clone())
            }
            _ => unreachable!("shared sparse payloads only"),
        })
        .collect();
    let mean = comm.all_reduce_mean(&values)?.into_data();
    let mut agg = payloads[0].clone();
    match &mut agg {
        CompressedPayload::SparseShared { values, .. } | CompressedPayload::Block { values, .. } => {
            *values = mean
        }
        _ => unreachable!(),
    }
    comm.charge_decode(agg.decode_ops());
    Ok(Exchange {
        local: payloads.iter().map(CompressedPayload::decompress).collect(),
        aggregate: agg.decompress(),
    })
}

fn gather_exchange(
    payloads: Vec<CompressedPayload>,
    comm: &mut Communicator,
    aggregate: fn(&[CompressedPayload]) -> Matrix,
) -> Result<Exchange> {
    let local = par::map_slice(&payloads, CompressedPayload::decompress);
    let gathered = comm.all_gather(payloads)?;
    comm.charge_decode(gathered.iter().map(CompressedPayload::decode_ops).sum());
    Ok(Exchange {
        local,
        aggregate: aggregate(&gathered),
    })
}
