//! Spectral Atomo: importance sampling of singular components.
//!
//! Probabilities follow the water-filling rule `p_i = min(1, λ·σ_i)` with
//! `Σ p_i = r`. Components are drawn independently with probability `p_i`
//! and the draw is repeated until exactly `r` are selected. That rejection
//! step turns the sample into a conditional Poisson design, whose inclusion
//! probabilities `π_i = P(i ∈ C | |C| = r)` differ from `p_i`; scaling by
//! `σ_i / π_i` keeps the estimator unbiased. [`AtomoScaling::Nominal`]
//! scales by `σ_i / p_i` instead and is biased whenever the rejection step
//! matters.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{svd, Matrix};
use crate::rng::Stream;

use super::payload::CompressedPayload;

/// Singular values at or below this fraction of `σ_max` count as zero.
const ZERO_SIGMA_REL: f64 = 1e-12;
const MAX_REJECTIONS: usize = 1_000_000;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum AtomoScaling {
    #[default]
    ConditionalInclusion,
    Nominal,
}

/// Water-filling probabilities with `Σ p_i = min(r, #nonzero)`.
pub fn atomo_probabilities(sigma: &[f64], r: usize) -> Vec<f64> {
    let sigma_max = sigma.iter().cloned().fold(0.0, f64::max);
    let live: Vec<bool> = sigma
        .iter()
        .map(|&s| s > ZERO_SIGMA_REL * sigma_max && s > 0.0)
        .collect();
    let n_live = live.iter().filter(|&&l| l).count();
    if n_live <= r {
        return live.iter().map(|&l| if l { 1.0 } else { 0.0 }).collect();
    }
    // Grow the saturated set until λ = (r - |T|) / Σ_{i∉T} σ_i is consistent.
    let mut saturated = vec![false; sigma.len()];
    loop {
        let free_mass: f64 = (0..sigma.len())
            .filter(|&i| live[i] && !saturated[i])
            .map(|i| sigma[i])
            .sum();
        let n_sat = saturated.iter().filter(|&&s| s).count();
        let lambda = (r - n_sat) as f64 / free_mass;
        let mut changed = false;
        for i in 0..sigma.len() {
            if live[i] && !saturated[i] && lambda * sigma[i] >= 1.0 {
                saturated[i] = true;
                changed = true;
            }
        }
        if !changed {
            return (0..sigma.len())
                .map(|i| match (live[i], saturated[i]) {
                    (false, _) => 0.0,
                    (true, true) => 1.0,
                    (true, false) => lambda * sigma[i],
                })
                .collect();
        }
    }
}

/// Elementary symmetric polynomials `e_0..=e_k` of `w`.
fn elementary_symmetric(w: impl Iterator<Item = f64>, k: usize) -> Vec<f64> {
    let mut e = vec![0.0; k + 1];
    e[0] = 1.0;
    for x in w {
        for j in (1..=k).rev() {
            e[j] += x * e[j - 1];
        }
    }
    e
}

/// `P(i ∈ C | |C| = r)` when each `i` is included independently with
/// probability `p_i` and the draw is conditioned on exactly `r` inclusions.
pub fn conditional_inclusion(p: &[f64], r: usize) -> Vec<f64> {
    let forced = p.iter().filter(|&&x| x >= 1.0).count();
    let free: Vec<usize> = (0..p.len()).filter(|&i| p[i] > 0.0 && p[i] < 1.0).collect();
    let need = r.saturating_sub(forced);
    let mut pi: Vec<f64> = p.iter().map(|&x| if x >= 1.0 { 1.0 } else { 0.0 }).collect();
    if need == 0 || free.is_empty() {
        return pi;
    }
    let w: Vec<f64> = free.iter().map(|&i| p[i] / (1.0 - p[i])).collect();
    let total = elementary_symmetric(w.iter().copied(), need)[need];
    for (slot, &i) in free.iter().enumerate() {
        let others = w
            .iter()
            .enumerate()
            .filter(|&(j, _)| j != slot)
            .map(|(_, &x)| x);
        let e = elementary_symmetric(others, need - 1);
        pi[i] = w[slot] * e[need - 1] / total;
    }
    pi
}

pub fn atomo_compress(
    m: &Matrix,
    r: usize,
    rng: &mut Stream,
    scaling: AtomoScaling,
) -> Result<CompressedPayload> {
    let (n, cols) = m.shape();
    if r == 0 || r > n.min(cols) {
        return Err(Error::contract(
            "atomo_compress",
            format!("rank {r} outside 1..={} for {n}x{cols}", n.min(cols)),
        ));
    }
    let dec = svd(m);
    let p = atomo_probabilities(&dec.sigma, r);
    let target = r.min(p.iter().filter(|&&x| x > 0.0).count());
    let mut chosen = Vec::with_capacity(target);
    for attempt in 0.. {
        if attempt == MAX_REJECTIONS {
            return Err(Error::contract(
                "atomo_compress",
                "rejection sampling did not select exactly r components",
            ));
        }
        chosen.clear();
        for (i, &pi) in p.iter().enumerate() {
            if pi > 0.0 && rng.random::<f64>() < pi {
                chosen.push(i);
            }
        }
        if chosen.len() == target {
            break;
        }
    }
    let weight = match scaling {
        AtomoScaling::ConditionalInclusion => conditional_inclusion(&p, target),
        AtomoScaling::Nominal => p.clone(),
    };
    let mut u_scaled = Matrix::zeros(n, r);
    let mut v = Matrix::zeros(cols, r);
    for (slot, &i) in chosen.iter().enumerate() {
        let s = dec.sigma[i] / weight[i];
        u_scaled.set_col(slot, &dec.u.col(i).iter().map(|x| x * s).collect::<Vec<_>>());
        v.set_col(slot, &dec.v.col(i));
    }
    Ok(CompressedPayload::AtomoFactors { u_scaled, v })
}

/// Gather-side aggregation: mean of every worker's `U′·V′ᵀ`, workers in
/// order.
pub fn atomo_aggregate(payloads: &[CompressedPayload]) -> Matrix {
    let (rows, cols) = payloads[0].shape();
    let mut out = Matrix::zeros(rows, cols);
    for p in payloads {
        assert!(matches!(p, CompressedPayload::AtomoFactors { .. }));
        out = out.add(&p.decompress()).expect("shapes agree");
    }
    let w = payloads.len() as f64;
    out.map(|v| v / w)
}
