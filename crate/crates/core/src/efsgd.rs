//! Error-feedback SGD with momentum over a simulated worker group.
//!
//! Per matrix parameter, in catalog order:
//!
//! ```text
//! Δ_w = g_w + e_w
//! e_w = Δ_w − decompress(C(Δ_w))
//! Δ′  = aggregate(C(Δ_1), …, C(Δ_W))
//! m   = λ·m + Δ′
//! x   = x − γ·(Δ′ + m)
//! ```
//!
//! Bias vectors skip compression: `Δ′` is the all-reduce mean of the raw
//! gradients and the same momentum rule applies.
//!
//! Schemes that run without error feedback (Signum, Atomo) use
//! [`step_plain_momentum`] instead: each worker keeps its own momentum, the
//! momentum is compressed, and the aggregate is applied directly.

use serde::{Deserialize, Serialize};

use crate::commsim::{CommStats, Communicator};
use crate::compressors::{Compressor, ParamKey};
use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::models::ParamSpec;
use crate::par;

/// Replicated optimizer state: parameters and global momentum.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerState {
    pub params: Vec<Matrix>,
    pub momentum: Vec<Matrix>,
    pub learning_rate: f64,
    pub momentum_coef: f64,
}

impl OptimizerState {
    pub fn new(params: Vec<Matrix>, learning_rate: f64, momentum_coef: f64) -> Result<Self> {
        if !(learning_rate > 0.0 && learning_rate.is_finite()) {
            return Err(Error::contract(
                "OptimizerState::new",
                format!("learning rate must be positive, got {learning_rate}"),
            ));
        }
        if !(0.0..1.0).contains(&momentum_coef) {
            return Err(Error::contract(
                "OptimizerState::new",
                format!("momentum must lie in [0, 1), got {momentum_coef}"),
            ));
        }
        let momentum = zeros_like(&params);
        Ok(Self {
            params,
            momentum,
            learning_rate,
            momentum_coef,
        })
    }
}

/// Per-worker memory. `error` is used by error feedback, `momentum` by the
/// plain-momentum mode; the other stays zero.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorkerState {
    pub error: Vec<Matrix>,
    pub momentum: Vec<Matrix>,
}

impl WorkerState {
    pub fn new(params: &[Matrix]) -> Self {
        Self {
            error: zeros_like(params),
            momentum: zeros_like(params),
        }
    }
}

fn zeros_like(params: &[Matrix]) -> Vec<Matrix> {
    params
        .iter()
        .map(|p| Matrix::zeros(p.rows(), p.cols()))
        .collect()
}

/// Rejects mis-shaped or non-finite gradients before any state changes.
fn check_gradients(
    specs: &[ParamSpec],
    opt: &OptimizerState,
    workers: &[WorkerState],
    grads: &[Vec<Matrix>],
    comm: &Communicator,
) -> Result<()> {
    let w = comm.world_size();
    if grads.len() != w || workers.len() != w {
        return Err(Error::contract(
            "efsgd::step",
            format!(
                "world size {w}, got {} gradient sets and {} worker states",
                grads.len(),
                workers.len()
            ),
        ));
    }
    if opt.params.len() != specs.len() {
        return Err(Error::contract(
            "efsgd::step",
            format!("{} params for {} specs", opt.params.len(), specs.len()),
        ));
    }
    for (worker, g) in grads.iter().enumerate() {
        if g.len() != specs.len() {
            return Err(Error::contract(
                "efsgd::step",
                format!("worker {worker} sent {} gradients for {} params", g.len(), specs.len()),
            ));
        }
        for ((spec, gi), x) in specs.iter().zip(g).zip(&opt.params) {
            if gi.shape() != x.shape() {
                return Err(Error::contract(
                    "efsgd::step",
                    format!(
                        "gradient for `{}` has shape {:?}, parameter is {:?}",
                        spec.name(),
                        gi.shape(),
                        x.shape()
                    ),
                ));
            }
            if !gi.is_finite() {
                return Err(Error::NonFiniteGradient {
                    param: spec.name().to_string(),
                    worker,
                });
            }
        }
    }
    Ok(())
}

/// `m = λm + Δ′; x = x − γ(Δ′ + m)`.
fn apply_momentum_update(x: &mut Matrix, m: &mut Matrix, update: &Matrix, lr: f64, lambda: f64) {
    for ((xi, mi), &di) in x
        .data_mut()
        .iter_mut()
        .zip(m.data_mut().iter_mut())
        .zip(update.data())
    {
        *mi = lambda * *mi + di;
        *xi -= lr * (di + *mi);
    }
}

/// One step of error-feedback SGD. With `error_feedback = false` the
/// residual is discarded (and `e_w` stays zero), which is the ablation used
/// to show that compression without feedback stalls.
///
/// `grads[w][i]` is worker `w`'s gradient for parameter `i`.
#[allow(clippy::too_many_arguments)]
pub fn step(
    specs: &[ParamSpec],
    grads: &[Vec<Matrix>],
    opt: &mut OptimizerState,
    workers: &mut [WorkerState],
    compressor: &mut Compressor,
    comm: &mut Communicator,
    step: u64,
    error_feedback: bool,
) -> Result<CommStats> {
    check_gradients(specs, opt, workers, grads, comm)?;
    let (lr, lambda) = (opt.learning_rate, opt.momentum_coef);
    for (index, spec) in specs.iter().enumerate() {
        let update = if spec.is_bias() {
            let raw: Vec<Matrix> = grads.iter().map(|g| g[index].clone()).collect();
            comm.all_reduce_mean(&raw)?
        } else {
            let deltas: Vec<Matrix> = if error_feedback {
                par::map_indexed(grads.len(), |w| {
                    grads[w][index]
                        .add(&workers[w].error[index])
                        .expect("shapes checked")
                })
            } else {
                grads.iter().map(|g| g[index].clone()).collect()
            };
            let ex = compressor.exchange(ParamKey { index, step }, &deltas, comm)?;
            if error_feedback {
                for (w, (delta, local)) in deltas.iter().zip(&ex.local).enumerate() {
                    let e = delta.sub(local)?;
                    if cfg!(debug_assertions) {
                        let back = e.add(local)?;
                        let scale = delta.max_abs().max(local.max_abs()).max(1.0);
                        assert!(
                            back.max_abs_diff(delta) <= 1e-12 * scale,
                            "error memory of worker {w} drifted for `{}`",
                            spec.name()
                        );
                    }
                    workers[w].error[index] = e;
                }
            }
            ex.aggregate
        };
        apply_momentum_update(
            &mut opt.params[index],
            &mut opt.momentum[index],
            &update,
            lr,
            lambda,
        );
    }
    Ok(comm.finish_step())
}

/// One step without error feedback: `m_w = λ·m_w + g_w`, exchange
/// `C(m_w)`, then `x = x − γ·aggregate`.
#[allow(clippy::too_many_arguments)]
pub fn step_plain_momentum(
    specs: &[ParamSpec],
    grads: &[Vec<Matrix>],
    opt: &mut OptimizerState,
    workers: &mut [WorkerState],
    compressor: &mut Compressor,
    comm: &mut Communicator,
    step: u64,
) -> Result<CommStats> {
    check_gradients(specs, opt, workers, grads, comm)?;
    let (lr, lambda) = (opt.learning_rate, opt.momentum_coef);
    for (index, spec) in specs.iter().enumerate() {
        for (w, state) in workers.iter_mut().enumerate() {
            let m = &mut state.momentum[index];
            for (mi, &gi) in m.data_mut().iter_mut().zip(grads[w][index].data()) {
                *mi = lambda * *mi + gi;
            }
        }
        let local: Vec<Matrix> = workers.iter().map(|s| s.momentum[index].clone()).collect();
        let update = if spec.is_bias() {
            comm.all_reduce_mean(&local)?
        } else {
            compressor
                .exchange(ParamKey { index, step }, &local, comm)?
                .aggregate
        };
        for (xi, &ui) in opt.params[index].data_mut().iter_mut().zip(update.data()) {
            *xi -= lr * ui;
        }
    }
    Ok(comm.finish_step())
}
