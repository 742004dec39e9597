//! Self-check suites behind `powersgd verify`.
//!
//! Each suite runs a handful of checks and reports observed against
//! expected values. Fixtures are seeded, so a suite either always passes or
//! always fails on a given build.

use std::fmt;
use std::str::FromStr;

use serde::Serialize;

use crate::commsim::Communicator;
use crate::compressors::{
    atomo_compress, payload_bits, powersgd_compress_aggregate, sketch_basis,
    unbiased_rank_r_compress, AtomoScaling, Compressor, CompressorConfig, CompressorKind, ParamKey,
    PowerSgdState,
};
use crate::error::{Error, Result};
use crate::linalg::{best_rank_r_error, matmul_nt, orthogonalize, spectrum, Matrix};
use crate::models::{compression_ratio, data_per_epoch_mib, CoefficientDisplay, ModelCatalog};
use crate::par;
use crate::rng::{self, label};
use crate::train::{run, RunConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Suite {
    Linearity,
    Warmstart,
    EfIdentity,
    Ratios,
    Scaling,
    Unbiasedness,
    EfNecessity,
    Quality,
}

impl Suite {
    pub const ALL: [Suite; 8] = [
        Suite::Linearity,
        Suite::Warmstart,
        Suite::EfIdentity,
        Suite::Ratios,
        Suite::Scaling,
        Suite::Unbiasedness,
        Suite::EfNecessity,
        Suite::Quality,
    ];

    pub fn id(self) -> &'static str {
        match self {
            Suite::Linearity => "linearity",
            Suite::Warmstart => "warmstart",
            Suite::EfIdentity => "ef-identity",
            Suite::Ratios => "ratios",
            Suite::Scaling => "scaling",
            Suite::Unbiasedness => "unbiasedness",
            Suite::EfNecessity => "ef-necessity",
            Suite::Quality => "quality",
        }
    }
}

impl fmt::Display for Suite {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.id())
    }
}

impl FromStr for Suite {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Suite::ALL
            .into_iter()
            .find(|x| x.id() == s.to_ascii_lowercase())
            .ok_or_else(|| Error::Unknown {
                kind: "suite",
                name: s.to_string(),
            })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub observed: String,
    pub expected: String,
}

impl Check {
    fn new(name: impl Into<String>, passed: bool, observed: impl fmt::Display, expected: impl fmt::Display) -> Self {
        Self {
            name: name.into(),
            passed,
            observed: observed.to_string(),
            expected: expected.to_string(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SuiteReport {
    pub suite: Suite,
    pub checks: Vec<Check>,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }
}

impl fmt::Display for SuiteReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for c in &self.checks {
            writeln!(
                f,
                "{} {}/{}: observed {}, expected {}",
                if c.passed { "PASS" } else { "FAIL" },
                self.suite,
                c.name,
                c.observed,
                c.expected
            )?;
        }
        Ok(())
    }
}

pub fn run_suite(suite: Suite) -> Result<SuiteReport> {
    let checks = match suite {
        Suite::Linearity => linearity()?,
        Suite::Warmstart => warmstart()?,
        Suite::EfIdentity => ef_identity()?,
        Suite::Ratios => ratios(),
        Suite::Scaling => scaling()?,
        Suite::Unbiasedness => unbiasedness()?,
        Suite::EfNecessity => ef_necessity()?,
        Suite::Quality => quality()?,
    };
    Ok(SuiteReport { suite, checks })
}

/// Random `rows×cols` matrix with orthonormal singular vectors and a
/// prescribed gap `σ_r / σ_{r+1} = gap`. Leading values lie in `[2, 4]`,
/// trailing ones in `(0, σ_{r+1}]`.
pub fn gapped_matrix(rows: usize, cols: usize, r: usize, gap: f64, seed: u64) -> Matrix {
    let k = rows.min(cols);
    let mut s = rng::stream(seed, &[label::FIXTURE, rows as u64, cols as u64]);
    let u = orthogonalize(&Matrix::random_normal(rows, k, 1.0, &mut s)).expect("k <= rows");
    let v = orthogonalize(&Matrix::random_normal(cols, k, 1.0, &mut s)).expect("k <= cols");
    let uniform = |s: &mut rng::Stream| rand::Rng::random::<f64>(s);
    let mut head: Vec<f64> = (0..r).map(|_| 2.0 + 2.0 * uniform(&mut s)).collect();
    head.sort_by(|a, b| b.total_cmp(a));
    let next = head[r - 1] / gap;
    let mut tail: Vec<f64> = (r + 1..k).map(|_| next * uniform(&mut s)).collect();
    tail.sort_by(|a, b| b.total_cmp(a));
    let sigma: Vec<f64> = head.into_iter().chain([next]).chain(tail).collect();
    let us = Matrix::from_fn(rows, k, |i, j| u.get(i, j) * sigma[j]);
    matmul_nt(&us, &v).expect("inner dims agree")
}

/// Repeats single-step warm-started PowerSGD on a fixed matrix until the
/// reconstruction error is within `tol` (relative) of the best rank-`r`
/// error. Returns the number of steps taken, if any.
pub fn warm_start_iterations(m: &Matrix, r: usize, tol: f64, max_steps: usize, seed: u64) -> Result<Option<usize>> {
    let best = best_rank_r_error(m, r)?.sqrt();
    let mut state = PowerSgdState::new(r, seed);
    let mut comm = Communicator::new(1)?;
    for step in 1..=max_steps {
        let round = powersgd_compress_aggregate(std::slice::from_ref(m), 0, &mut state, &mut comm)?;
        let err = m.distance_sq(&round.payload.decompress()).sqrt();
        if (err - best).abs() <= tol * best {
            return Ok(Some(step));
        }
    }
    Ok(None)
}

/// Entrywise mean and standard error of `draw(i)` over `n` draws. Draws are
/// computed in parallel and summed in index order.
pub fn monte_carlo_moments(n: usize, draw: impl Fn(usize) -> Matrix + Sync + Send) -> (Matrix, Matrix) {
    const CHUNK: usize = 256;
    let chunks = n.div_ceil(CHUNK);
    let partial = par::map_indexed(chunks, |c| {
        let mut sum: Option<(Matrix, Matrix)> = None;
        for i in c * CHUNK..((c + 1) * CHUNK).min(n) {
            let x = draw(i);
            let sq = x.map(|v| v * v);
            sum = Some(match sum {
                None => (x, sq),
                Some((a, b)) => (a.add(&x).expect("same shape"), b.add(&sq).expect("same shape")),
            });
        }
        sum.expect("chunks are non-empty")
    });
    let (mut s1, mut s2) = partial[0].clone();
    for (a, b) in &partial[1..] {
        s1 = s1.add(a).expect("same shape");
        s2 = s2.add(b).expect("same shape");
    }
    let nf = n as f64;
    let mean = s1.scale(1.0 / nf);
    let se = s2
        .zip_with(&mean, |q, mu| ((q / nf - mu * mu).max(0.0) * nf / (nf - 1.0) / nf).sqrt())
        .expect("same shape");
    (mean, se)
}

/// Largest `|mean − target| / se` over entries (entries with zero spread
/// must match exactly).
pub fn max_standard_errors(mean: &Matrix, se: &Matrix, target: &Matrix) -> f64 {
    let mut worst: f64 = 0.0;
    for ((&mu, &s), &t) in mean.data().iter().zip(se.data()).zip(target.data()) {
        let d = (mu - t).abs();
        let z = if s > 0.0 {
            d / s
        } else if d <= 1e-12 * t.abs().max(1.0) {
            0.0
        } else {
            f64::INFINITY
        };
        worst = worst.max(z);
    }
    worst
}

/// The 6×5 matrix used by the Monte Carlo suites.
pub fn monte_carlo_fixture() -> Matrix {
    Matrix::from_rows(&[
        &[3.0, -1.0, 0.5, 2.0, 0.0],
        &[1.0, 2.5, -0.5, 0.0, 1.5],
        &[-2.0, 0.5, 1.0, 1.0, -1.0],
        &[0.5, 0.0, 2.0, -1.5, 0.5],
        &[1.5, -2.0, 0.0, 0.5, 2.0],
        &[0.0, 1.0, -1.0, 2.5, -0.5],
    ])
}

fn max_param_deviation(a: &[Matrix], b: &[Matrix]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x.max_abs_diff(y)).fold(0.0, f64::max)
}

fn linearity() -> Result<Vec<Check>> {
    let mut checks = Vec::new();
    // One round on fixed inputs: W workers against one worker fed the mean.
    let mut s = rng::stream(11, &[label::FIXTURE]);
    let locals: Vec<Matrix> = (0..4).map(|_| Matrix::random_normal(24, 18, 1.0, &mut s)).collect();
    let mean = Communicator::new(4)?.all_reduce_mean(&locals)?;
    let mut multi = PowerSgdState::new(2, 5);
    let mut single = PowerSgdState::new(2, 5);
    let a = powersgd_compress_aggregate(&locals, 0, &mut multi, &mut Communicator::new(4)?)?;
    let b = powersgd_compress_aggregate(&[mean], 0, &mut single, &mut Communicator::new(1)?)?;
    let dev = a.payload.decompress().max_abs_diff(&b.payload.decompress());
    checks.push(Check::new("payload", dev <= 1e-12, format!("{dev:.3e}"), "<= 1e-12"));

    for steps in [50u64, 200] {
        let base = RunConfig {
            compressor: CompressorKind::PowerSgd,
            rank: 2,
            steps,
            ..RunConfig::default()
        };
        let w4 = run(&base)?;
        let w1 = run(&RunConfig { workers: 1, ..base })?;
        let dev = max_param_deviation(&w4.params, &w1.params);
        checks.push(Check::new(
            format!("trajectory-{steps}"),
            dev <= 1e-9,
            format!("{dev:.3e}"),
            "<= 1e-9",
        ));
    }
    Ok(checks)
}

fn warmstart() -> Result<Vec<Check>> {
    let results = par::map_indexed(20, |i| {
        let m = gapped_matrix(64, 48, 2, 1.5, i as u64);
        warm_start_iterations(&m, 2, 1e-6, 50, i as u64)
    });
    let mut worst = 0;
    let mut missed = 0;
    for r in results {
        match r? {
            Some(k) => worst = worst.max(k),
            None => missed += 1,
        }
    }
    Ok(vec![Check::new(
        "recovery",
        missed == 0,
        format!("{missed} misses, worst {worst} steps"),
        "all 20 within 50 steps",
    )])
}

fn ef_identity() -> Result<Vec<Check>> {
    let config = RunConfig {
        compressor: CompressorKind::None,
        workers: 1,
        steps: 100,
        ..RunConfig::default()
    };
    let problem = config.build_problem()?;
    let out = crate::train::run_problem(&config, problem.as_ref())?;
    let mut x = problem.initial_params(config.seed);
    let mut m: Vec<Matrix> = x.iter().map(|p| Matrix::zeros(p.rows(), p.cols())).collect();
    for t in 0..config.steps {
        let batch = crate::train::worker_batches(&config, problem.num_samples(), t).concat();
        let g = problem.gradient(&x, &batch);
        for i in 0..x.len() {
            for ((xi, mi), gi) in x[i].data_mut().iter_mut().zip(m[i].data_mut()).zip(g[i].data()) {
                *mi = config.momentum * *mi + gi;
                *xi -= config.learning_rate * (gi + *mi);
            }
        }
    }
    let identical = x
        .iter()
        .zip(&out.params)
        .all(|(a, b)| a.data().iter().zip(b.data()).all(|(p, q)| p.to_bits() == q.to_bits()));
    Ok(vec![Check::new(
        "bitwise",
        identical,
        format!("max deviation {:.3e}", max_param_deviation(&x, &out.params)),
        "0 (bitwise)",
    )])
}

/// Reference per-row coefficients and totals (rank-1 ratio, rounded).
const RESNET18_ROWS: [u128; 21] = [
    461, 461, 461, 419, 230, 230, 230, 209, 115, 115, 115, 171, 105, 58, 58, 58, 58, 85, 43, 10, 19,
];
const LSTM_ROWS: [u128; 7] = [636, 520, 520, 520, 520, 520, 520];

fn ratios() -> Vec<Check> {
    let mut checks = Vec::new();
    for (catalog, rows, total, bias_kib, total_mib) in [
        (ModelCatalog::resnet18(), &RESNET18_ROWS[..], 243, 38, 43),
        (ModelCatalog::lstm(), &LSTM_ROWS[..], 310, 174, 110),
    ] {
        let rep = compression_ratio(&catalog, CompressorKind::PowerSgd, 1);
        let got: Vec<u128> = rep
            .rows
            .iter()
            .map(|r| match rep.row_display(r) {
                CoefficientDisplay::PerRank(c) | CoefficientDisplay::Fixed(c) => c,
            })
            .collect();
        checks.push(Check::new(
            format!("{}-rows", catalog.name),
            got == rows,
            format!("{got:?}"),
            format!("{rows:?}"),
        ));
        checks.push(Check::new(
            format!("{}-total", catalog.name),
            rep.total_display() == CoefficientDisplay::PerRank(total),
            rep.total_display(),
            CoefficientDisplay::PerRank(total),
        ));
        checks.push(Check::new(
            format!("{}-sizes", catalog.name),
            rep.bias_kib() == bias_kib && rep.total_mib() == total_mib,
            format!("{} KB biases, {} MB total", rep.bias_kib(), rep.total_mib()),
            format!("{bias_kib} KB biases, {total_mib} MB total"),
        ));
    }
    // Per-epoch traffic at ranks 1, 2, 4. Ratios are exact; megabytes are
    // printed as whole numbers, so they pass within 5 % or within the
    // rounding interval of the printed value.
    for (catalog, sgd_mb, table) in [
        (ModelCatalog::resnet18(), 1023.0, [(1, 243, 4.0), (2, 136, 8.0), (4, 72, 14.0)]),
        (ModelCatalog::lstm(), 7730.0, [(1, 310, 25.0), (2, 203, 38.0), (4, 120, 64.0)]),
    ] {
        let batches = catalog.batches_per_epoch.expect("built-ins set batches per epoch");
        let sgd = data_per_epoch_mib(&compression_ratio(&catalog, CompressorKind::None, 1), batches);
        checks.push(Check::new(
            format!("{}-epoch-sgd", catalog.name),
            megabytes_match(sgd, sgd_mb),
            format!("{sgd:.1} MB"),
            format!("{sgd_mb} MB"),
        ));
        for (rank, ratio, mb) in table {
            let rep = compression_ratio(&catalog, CompressorKind::PowerSgd, rank);
            let got = data_per_epoch_mib(&rep, batches);
            let ok = rep.total_ratio_rounded() == ratio && megabytes_match(got, mb);
            checks.push(Check::new(
                format!("{}-epoch-rank{rank}", catalog.name),
                ok,
                format!("{}x, {got:.2} MB", rep.total_ratio_rounded()),
                format!("{ratio}x, {mb} MB"),
            ));
        }
    }
    checks
}

/// Within 5 % of a whole-megabyte figure, or within its rounding interval.
pub fn megabytes_match(got: f64, printed: f64) -> bool {
    (got - printed).abs() <= (0.05 * printed).max(0.5)
}

fn scaling() -> Result<Vec<Check>> {
    let (n, m, r) = (64, 48, 2);
    let mut checks = Vec::new();
    for kind in [CompressorKind::PowerSgd, CompressorKind::Signum, CompressorKind::TopK] {
        let mut per_w = Vec::new();
        for w in [2usize, 4, 8, 16] {
            let mut s = rng::stream(3, &[label::FIXTURE, w as u64]);
            let locals: Vec<Matrix> = (0..w).map(|_| Matrix::random_normal(n, m, 1.0, &mut s)).collect();
            let mut c = Compressor::new(CompressorConfig::new(kind, r, 7))?;
            let mut comm = Communicator::new(w)?;
            c.exchange(ParamKey { index: 0, step: 0 }, &locals, &mut comm)?;
            per_w.push((w, comm.finish_step()));
        }
        let bits = payload_bits(kind, n, m, r);
        let ok = match kind {
            CompressorKind::PowerSgd => per_w
                .iter()
                .all(|(_, st)| {
                    st.decode_ops == per_w[0].1.decode_ops
                        && st.bits_allreduced == per_w[0].1.bits_allreduced
                        && st.bits_gathered == 0
                }),
            _ => per_w.iter().all(|(w, st)| {
                st.decode_ops * 2 == per_w[0].1.decode_ops * *w as u64
                    && st.bits_gathered == bits * *w as u64
            }),
        };
        let observed: Vec<String> = per_w
            .iter()
            .map(|(w, st)| format!("W={w}: ops {} gathered {}", st.decode_ops, st.bits_gathered))
            .collect();
        checks.push(Check::new(
            kind.id(),
            ok,
            observed.join("; "),
            if kind == CompressorKind::PowerSgd {
                "decode ops constant in W".to_string()
            } else {
                format!("decode ops and gathered bits proportional to W ({bits} bits each)")
            },
        ));
    }
    Ok(checks)
}

fn unbiasedness() -> Result<Vec<Check>> {
    let target = monte_carlo_fixture();
    let (n, m) = target.shape();
    let (mean, se) = monte_carlo_moments(10_000, |i| {
        let basis = sketch_basis(17, 0, i as u64, m, 2);
        unbiased_rank_r_compress(&target, &basis).expect("shapes agree").decompress()
    });
    let z_sketch = max_standard_errors(&mean, &se, &target);
    let (mean, se) = monte_carlo_moments(20_000, |i| {
        let mut s = rng::stream(19, &[label::ATOMO, i as u64]);
        atomo_compress(&target, 2, &mut s, AtomoScaling::ConditionalInclusion)
            .expect("valid rank")
            .decompress()
    });
    let z_atomo = max_standard_errors(&mean, &se, &target);
    debug_assert_eq!(mean.shape(), (n, m));
    Ok(vec![
        Check::new("unbiased-rank", z_sketch <= 3.0, format!("{z_sketch:.2} SE"), "<= 3 SE"),
        Check::new("atomo", z_atomo <= 3.0, format!("{z_atomo:.2} SE"), "<= 3 SE"),
    ])
}

fn ef_necessity() -> Result<Vec<Check>> {
    let base = RunConfig {
        compressor: CompressorKind::PowerSgd,
        rank: 1,
        steps: 500,
        ..RunConfig::default()
    };
    let with = run(&base)?.final_loss();
    let without = run(&RunConfig {
        error_feedback: Some(false),
        ..base
    })?
    .final_loss();
    let ratio = without / with;
    Ok(vec![Check::new(
        "loss-ratio",
        ratio >= 10.0,
        format!("{ratio:.1} ({without:.4e} / {with:.4e})"),
        ">= 10",
    )])
}

fn quality() -> Result<Vec<Check>> {
    let mut checks = Vec::new();
    for seed in 1..=5 {
        let base = RunConfig {
            seed,
            steps: 500,
            ..RunConfig::default()
        };
        let biased = run(&RunConfig {
            compressor: CompressorKind::PowerSgd,
            rank: 1,
            ..base.clone()
        })?;
        let unbiased = run(&RunConfig {
            compressor: CompressorKind::UnbiasedRank,
            rank: 2,
            error_feedback: Some(false),
            ..base
        })?;
        let bits = |o: &crate::train::RunOutcome| o.records.last().map_or(0, |r| r.bits_sent_cumulative);
        checks.push(Check::new(
            format!("seed-{seed}"),
            biased.final_loss() < unbiased.final_loss() && bits(&biased) == bits(&unbiased),
            format!(
                "{:.4e} vs {:.4e} ({} vs {} bits)",
                biased.final_loss(),
                unbiased.final_loss(),
                bits(&biased),
                bits(&unbiased)
            ),
            "PowerSGD rank 1 < unbiased rank 2 at equal bits",
        ));
    }
    Ok(checks)
}

/// Singular values of `m`, for fixtures that need to report their gap.
pub fn spectral_gap(m: &Matrix, r: usize) -> f64 {
    let s = spectrum(m);
    s[r - 1] / s[r]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gapped_fixture_has_requested_gap() {
        let m = gapped_matrix(20, 12, 2, 1.5, 3);
        assert!((spectral_gap(&m, 2) - 1.5).abs() < 1e-9);
    }

    #[test]
    fn moments_of_constant_draws() {
        let c = Matrix::from_fn(2, 3, |i, j| (i + j) as f64);
        let (mean, se) = monte_carlo_moments(1000, |_| c.clone());
        assert!(mean.max_abs_diff(&c) < 1e-12);
        assert!(se.max_abs() < 1e-6);
        assert_eq!(max_standard_errors(&mean, &se, &c), 0.0);
    }

    #[test]
    fn suite_ids_round_trip() {
        for s in Suite::ALL {
            assert_eq!(s.id().parse::<Suite>().unwrap(), s);
        }
        assert!("nope".parse::<Suite>().is_err());
    }

    #[test]
    fn cheap_suites_pass() {
        for s in [Suite::Ratios, Suite::Scaling] {
            let rep = run_suite(s).unwrap();
            assert!(rep.passed(), "{rep}");
        }
    }
}
