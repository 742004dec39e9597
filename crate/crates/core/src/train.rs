//! Simulated data-parallel training runs.
//!
//! The dataset is cut into a fixed number of contiguous shards. Every step
//! each shard draws its own mini-batch, and worker `w` owns a contiguous
//! group of shards. Changing the number of workers only regroups the same
//! samples, so a one-worker run sees exactly the union batch of a W-worker
//! run.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::commsim::Communicator;
use crate::compressors::{Compressor, CompressorConfig, CompressorKind};
use crate::efsgd::{self, OptimizerState, WorkerState};
use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::models::{
    least_squares_problem, sample_batch, shard_range, tiny_mlp_problem, Problem,
};
use crate::par;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TaskKind {
    LeastSquares,
    Mlp,
    CatalogOnly,
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TaskKind::LeastSquares => "least-squares",
            TaskKind::Mlp => "mlp",
            TaskKind::CatalogOnly => "catalog-only",
        })
    }
}

impl FromStr for TaskKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "least-squares" | "leastsquares" | "ls" => Ok(TaskKind::LeastSquares),
            "mlp" => Ok(TaskKind::Mlp),
            "catalog-only" | "catalog" => Ok(TaskKind::CatalogOnly),
            _ => Err(Error::Unknown {
                kind: "task",
                name: s.to_string(),
            }),
        }
    }
}

/// Everything that determines a run. Identical configs give bit-identical
/// records.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub task: TaskKind,
    pub compressor: CompressorKind,
    /// Rank for low-rank schemes; sparse schemes send `(n+m)·rank` entries.
    pub rank: usize,
    pub workers: usize,
    pub steps: u64,
    pub learning_rate: f64,
    pub momentum: f64,
    pub seed: u64,
    /// `None` follows the scheme: on for everything except Signum and Atomo.
    pub error_feedback: Option<bool>,
    /// Number of data shards; must be a multiple of `workers`.
    pub shards: usize,
    /// Samples per shard per step; `None` uses the whole shard.
    pub batch_per_shard: Option<usize>,
    pub samples: usize,
    /// Least squares: `[outputs, inputs]`. MLP: `[inputs, hidden, outputs]`.
    pub dims: Vec<usize>,
    pub noise: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            task: TaskKind::LeastSquares,
            compressor: CompressorKind::PowerSgd,
            rank: 2,
            workers: 4,
            steps: 500,
            learning_rate: 0.05,
            momentum: 0.9,
            seed: 1,
            error_feedback: None,
            shards: 16,
            batch_per_shard: Some(8),
            samples: 1024,
            dims: vec![40, 40],
            noise: 0.1,
        }
    }
}

impl RunConfig {
    pub fn uses_error_feedback(&self) -> bool {
        self.error_feedback
            .unwrap_or_else(|| self.compressor.uses_error_feedback())
    }

    pub fn build_problem(&self) -> Result<Box<dyn Problem>> {
        match (self.task, &self.dims[..]) {
            (TaskKind::LeastSquares, &[o, i]) => Ok(Box::new(least_squares_problem(
                o,
                i,
                self.samples,
                self.noise,
                self.seed,
            )?)),
            (TaskKind::Mlp, &[i, h, o]) => {
                Ok(Box::new(tiny_mlp_problem([i, h, o], self.samples, self.seed)?))
            }
            (TaskKind::CatalogOnly, _) => Err(Error::contract(
                "RunConfig::build_problem",
                "catalog-only has nothing to train",
            )),
            (task, dims) => Err(Error::contract(
                "RunConfig::build_problem",
                format!("{task} does not take dims {dims:?}"),
            )),
        }
    }

    fn validate(&self) -> Result<()> {
        if self.workers == 0 || self.shards == 0 || !self.shards.is_multiple_of(self.workers) {
            return Err(Error::contract(
                "RunConfig",
                format!(
                    "shards ({}) must be a positive multiple of workers ({})",
                    self.shards, self.workers
                ),
            ));
        }
        if self.samples < self.shards {
            return Err(Error::contract(
                "RunConfig",
                format!("{} samples cannot fill {} shards", self.samples, self.shards),
            ));
        }
        if self.batch_per_shard == Some(0) {
            return Err(Error::contract("RunConfig", "batch per shard must be positive"));
        }
        Ok(())
    }
}

/// One row of a training curve. Counters are cumulative.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Record {
    pub step: u64,
    pub loss: f64,
    pub bits_sent_cumulative: u64,
    pub decode_ops: u64,
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    /// Step 0 is the initial point; step `t` is the loss after `t` updates.
    pub records: Vec<Record>,
    pub params: Vec<Matrix>,
    /// Set when the run stopped early (non-finite loss or gradient).
    pub failure: Option<Error>,
    pub optimal_loss: Option<f64>,
}

impl RunOutcome {
    pub fn final_loss(&self) -> f64 {
        self.records.last().map_or(f64::NAN, |r| r.loss)
    }
}

/// Sample indices each worker trains on at `step`.
pub fn worker_batches(config: &RunConfig, num_samples: usize, step: u64) -> Vec<Vec<usize>> {
    let per_worker = config.shards / config.workers;
    (0..config.workers)
        .map(|w| {
            (w * per_worker..(w + 1) * per_worker)
                .flat_map(|s| {
                    sample_batch(
                        config.seed,
                        shard_range(num_samples, s, config.shards),
                        s,
                        step,
                        config.batch_per_shard,
                    )
                })
                .collect()
        })
        .collect()
}

/// Per-worker gradients weighted so that their plain mean is the gradient
/// over the union batch, whatever the split.
fn worker_gradients(
    problem: &dyn Problem,
    params: &[Matrix],
    batches: &[Vec<usize>],
) -> Vec<Vec<Matrix>> {
    let total: usize = batches.iter().map(Vec::len).sum();
    let w = batches.len();
    par::map_slice(batches, |batch| {
        let g = problem.gradient(params, batch);
        if batch.len() * w == total {
            g
        } else {
            let weight = (batch.len() * w) as f64 / total as f64;
            g.into_iter().map(|m| m.scale(weight)).collect()
        }
    })
}

/// Runs training to completion or to the first failure.
pub fn run(config: &RunConfig) -> Result<RunOutcome> {
    config.validate()?;
    let problem = config.build_problem()?;
    run_problem(config, problem.as_ref())
}

/// Like [`run`] on a caller-supplied problem.
pub fn run_problem(config: &RunConfig, problem: &dyn Problem) -> Result<RunOutcome> {
    config.validate()?;
    let specs = problem.params().to_vec();
    let x0 = problem.initial_params(config.seed);
    let mut opt = OptimizerState::new(x0.clone(), config.learning_rate, config.momentum)?;
    let mut workers = vec![WorkerState::new(&x0); config.workers];
    let mut compressor = Compressor::new(CompressorConfig::new(
        config.compressor,
        config.rank,
        config.seed,
    ))?;
    let mut comm = Communicator::new(config.workers)?;
    let ef = config.uses_error_feedback();
    let plain = !config.compressor.uses_error_feedback() && config.error_feedback.is_none();

    let mut records = vec![Record {
        step: 0,
        loss: problem.full_loss(&opt.params),
        bits_sent_cumulative: 0,
        decode_ops: 0,
    }];
    let mut failure = None;
    for t in 0..config.steps {
        let batches = worker_batches(config, problem.num_samples(), t);
        let grads = worker_gradients(problem, &opt.params, &batches);
        let result = if plain {
            efsgd::step_plain_momentum(
                &specs,
                &grads,
                &mut opt,
                &mut workers,
                &mut compressor,
                &mut comm,
                t,
            )
        } else {
            efsgd::step(
                &specs,
                &grads,
                &mut opt,
                &mut workers,
                &mut compressor,
                &mut comm,
                t,
                ef,
            )
        };
        match result {
            Ok(_) => {}
            Err(e @ Error::NonFiniteGradient { .. }) => {
                failure = Some(e);
                break;
            }
            Err(e) => return Err(e),
        }
        let loss = problem.full_loss(&opt.params);
        let stats = comm.cumulative();
        records.push(Record {
            step: t + 1,
            loss,
            bits_sent_cumulative: stats.bits_total(),
            decode_ops: stats.decode_ops,
        });
        if !loss.is_finite() {
            failure = Some(Error::Diverged { step: t + 1, loss });
            break;
        }
    }
    Ok(RunOutcome {
        records,
        params: opt.params,
        failure,
        optimal_loss: problem.optimal_loss(),
    })
}

/// Runs `f` on a dedicated pool of `threads` workers. Results do not depend
/// on the thread count.
pub fn with_threads<T: Send>(threads: Option<usize>, f: impl FnOnce() -> T + Send) -> Result<T> {
    match threads {
        #[cfg(feature = "parallel")]
        Some(n) if n > 0 => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build()
                .map_err(|e| Error::contract("with_threads", e.to_string()))?;
            Ok(pool.install(f))
        }
        Some(0) => Err(Error::contract("with_threads", "thread count must be positive")),
        _ => Ok(f()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> RunConfig {
        RunConfig {
            steps: 20,
            samples: 128,
            dims: vec![6, 8],
            shards: 4,
            ..RunConfig::default()
        }
    }

    #[test]
    fn union_batch_is_independent_of_worker_count() {
        let c4 = small();
        let c1 = RunConfig { workers: 1, ..small() };
        let mut a: Vec<usize> = worker_batches(&c4, 128, 3).concat();
        let b = worker_batches(&c1, 128, 3).concat();
        a.sort_unstable();
        let mut bs = b.clone();
        bs.sort_unstable();
        assert_eq!(a, bs);
    }

    #[test]
    fn identical_configs_give_identical_records() {
        let a = run(&small()).unwrap();
        let b = run(&small()).unwrap();
        assert_eq!(a.records, b.records);
        assert_eq!(a.records.len(), 21);
    }

    #[test]
    fn thread_count_does_not_change_results() {
        let a = with_threads(Some(1), || run(&small())).unwrap().unwrap();
        let b = with_threads(Some(3), || run(&small())).unwrap().unwrap();
        assert_eq!(a.records, b.records);
    }

    #[test]
    fn huge_learning_rate_diverges_with_partial_records() {
        let c = RunConfig {
            learning_rate: 1e6,
            compressor: CompressorKind::None,
            steps: 200,
            ..small()
        };
        let out = run(&c).unwrap();
        assert!(out.failure.is_some());
        assert!((out.records.len() as u64) < 201);
    }

    #[test]
    fn invalid_configs_rejected() {
        assert!(run(&RunConfig { workers: 3, ..small() }).is_err());
        assert!(run(&RunConfig { task: TaskKind::CatalogOnly, ..small() }).is_err());
        assert!(run(&RunConfig { dims: vec![3], ..small() }).is_err());
        assert!("bogus".parse::<TaskKind>().is_err());
    }
}
