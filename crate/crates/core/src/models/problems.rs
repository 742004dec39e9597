//! Desk-scale training problems with hand-written gradients.
//!
//! Each problem owns a synthetic dataset drawn from a seed. Losses and
//! gradients are means over an explicit list of sample indices, summed in the
//! order given, so that callers control the reduction order exactly.

use std::ops::Range;

use super::ParamSpec;
use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::rng::{self, label};

pub trait Problem: Send + Sync {
    fn name(&self) -> &str;
    fn params(&self) -> &[ParamSpec];
    fn num_samples(&self) -> usize;
    fn initial_params(&self, seed: u64) -> Vec<Matrix>;
    /// Mean loss over `samples`.
    fn loss(&self, params: &[Matrix], samples: &[usize]) -> f64;
    /// Mean gradient over `samples`, one matrix per parameter in catalog
    /// order (biases as `len×1` columns).
    fn gradient(&self, params: &[Matrix], samples: &[usize]) -> Vec<Matrix>;
    /// Loss at the global optimum, when known in closed form.
    fn optimal_loss(&self) -> Option<f64> {
        None
    }

    fn full_loss(&self, params: &[Matrix]) -> f64 {
        let all: Vec<usize> = (0..self.num_samples()).collect();
        self.loss(params, &all)
    }
}

/// Contiguous shard `w` of `shards` over `n` samples. Shards differ in size
/// by at most one and together cover `0..n` exactly once.
pub fn shard_range(n: usize, w: usize, shards: usize) -> Range<usize> {
    assert!(w < shards, "shard {w} out of {shards}");
    (w * n / shards)..((w + 1) * n / shards)
}

/// Mini-batch of `batch` distinct indices from `shard`, drawn from the data
/// stream for `(shard_id, step)`. `batch = None` means the whole shard.
pub fn sample_batch(
    seed: u64,
    shard: Range<usize>,
    shard_id: usize,
    step: u64,
    batch: Option<usize>,
) -> Vec<usize> {
    let len = shard.len();
    match batch {
        Some(b) if b < len => {
            let mut s = rng::stream(seed, &[label::BATCH, shard_id as u64, step]);
            let mut idx: Vec<usize> = rand::seq::index::sample(&mut s, len, b)
                .into_iter()
                .map(|i| shard.start + i)
                .collect();
            idx.sort_unstable();
            idx
        }
        _ => shard.collect(),
    }
}

fn cholesky_solve(a: &Matrix, b: &Matrix) -> Matrix {
    let n = a.rows();
    let mut l = Matrix::zeros(n, n);
    for i in 0..n {
        for j in 0..=i {
            let mut s = a.get(i, j);
            for k in 0..j {
                s -= l.get(i, k) * l.get(j, k);
            }
            if i == j {
                l.set(i, i, s.max(f64::MIN_POSITIVE).sqrt());
            } else {
                l.set(i, j, s / l.get(j, j));
            }
        }
    }
    let mut x = b.clone();
    for c in 0..b.cols() {
        for i in 0..n {
            let mut s = x.get(i, c);
            for k in 0..i {
                s -= l.get(i, k) * x.get(k, c);
            }
            x.set(i, c, s / l.get(i, i));
        }
        for i in (0..n).rev() {
            let mut s = x.get(i, c);
            for k in (i + 1)..n {
                s -= l.get(k, i) * x.get(k, c);
            }
            x.set(i, c, s / l.get(i, i));
        }
    }
    x
}

/// Multi-output linear regression `y ≈ W x + b` with squared loss
/// `½‖W x + b − y‖²` averaged over samples.
#[derive(Debug, Clone)]
pub struct LeastSquares {
    params: Vec<ParamSpec>,
    inputs: Matrix,
    targets: Matrix,
    optimum: f64,
}

/// `outputs × inputs` least-squares task with `samples` examples. Feature
/// scales decay as `1/√(1+j)` so the gradient has a non-flat spectrum.
pub fn least_squares_problem(
    outputs: usize,
    inputs: usize,
    samples: usize,
    noise: f64,
    seed: u64,
) -> Result<LeastSquares> {
    if outputs == 0 || inputs == 0 || samples <= inputs {
        return Err(Error::contract(
            "least_squares_problem",
            format!("need positive dims and more samples than inputs, got {outputs}x{inputs} with {samples} samples"),
        ));
    }
    if !(noise >= 0.0 && noise.is_finite()) {
        return Err(Error::contract("least_squares_problem", "noise must be finite and >= 0"));
    }
    let mut s = rng::stream(seed, &[label::DATA]);
    let truth = Matrix::random_normal(outputs, inputs, 1.0, &mut s);
    let truth_bias: Vec<f64> = (0..outputs).map(|_| rng::standard_normal(&mut s)).collect();
    let x = Matrix::from_fn(samples, inputs, |_, j| {
        rng::standard_normal(&mut s) / (1.0 + j as f64).sqrt()
    });
    let mut y = Matrix::from_fn(samples, outputs, |i, o| {
        let mut v = truth_bias[o];
        for j in 0..inputs {
            v += truth.get(o, j) * x.get(i, j);
        }
        v
    });
    if noise > 0.0 {
        for v in y.data_mut() {
            *v += noise * rng::standard_normal(&mut s);
        }
    }
    let mut problem = LeastSquares {
        params: vec![
            ParamSpec::new("weight", vec![outputs, inputs])?,
            ParamSpec::new("bias", vec![outputs])?,
        ],
        inputs: x,
        targets: y,
        optimum: 0.0,
    };
    problem.optimum = problem.solve_optimum();
    Ok(problem)
}

impl LeastSquares {
    pub fn outputs(&self) -> usize {
        self.targets.cols()
    }

    pub fn inputs(&self) -> usize {
        self.inputs.cols()
    }

    /// Closed-form minimiser of the full-data loss via the normal equations
    /// on the bias-augmented design.
    pub fn optimal_params(&self) -> Vec<Matrix> {
        let (n, d) = self.inputs.shape();
        let z = Matrix::from_fn(n, d + 1, |i, j| if j < d { self.inputs.get(i, j) } else { 1.0 });
        let gram = crate::linalg::matmul_tn(&z, &z).expect("shapes agree");
        let rhs = crate::linalg::matmul_tn(&z, &self.targets).expect("shapes agree");
        let theta = cholesky_solve(&gram, &rhs);
        let w = Matrix::from_fn(self.outputs(), d, |o, j| theta.get(j, o));
        let b = Matrix::from_fn(self.outputs(), 1, |o, _| theta.get(d, o));
        vec![w, b]
    }

    fn solve_optimum(&self) -> f64 {
        self.full_loss(&self.optimal_params())
    }

    fn residual(&self, params: &[Matrix], i: usize) -> Vec<f64> {
        let (w, b) = (&params[0], &params[1]);
        let x = self.inputs.row(i);
        (0..self.outputs())
            .map(|o| {
                let mut v = b.get(o, 0);
                for (wj, xj) in w.row(o).iter().zip(x) {
                    v += wj * xj;
                }
                v - self.targets.get(i, o)
            })
            .collect()
    }
}

impl Problem for LeastSquares {
    fn name(&self) -> &str {
        "least-squares"
    }

    fn params(&self) -> &[ParamSpec] {
        &self.params
    }

    fn num_samples(&self) -> usize {
        self.inputs.rows()
    }

    fn initial_params(&self, _seed: u64) -> Vec<Matrix> {
        vec![
            Matrix::zeros(self.outputs(), self.inputs()),
            Matrix::zeros(self.outputs(), 1),
        ]
    }

    fn loss(&self, params: &[Matrix], samples: &[usize]) -> f64 {
        let total: f64 = samples
            .iter()
            .map(|&i| self.residual(params, i).iter().map(|r| r * r).sum::<f64>())
            .sum();
        0.5 * total / samples.len() as f64
    }

    fn gradient(&self, params: &[Matrix], samples: &[usize]) -> Vec<Matrix> {
        let mut gw = Matrix::zeros(self.outputs(), self.inputs());
        let mut gb = Matrix::zeros(self.outputs(), 1);
        for &i in samples {
            let r = self.residual(params, i);
            let x = self.inputs.row(i);
            for (o, &ro) in r.iter().enumerate() {
                for (j, &xj) in x.iter().enumerate() {
                    gw.add_at(o, j, ro * xj);
                }
                gb.add_at(o, 0, ro);
            }
        }
        let k = samples.len() as f64;
        vec![gw.map(|v| v / k), gb.map(|v| v / k)]
    }

    fn optimal_loss(&self) -> Option<f64> {
        Some(self.optimum)
    }
}

/// One-hidden-layer tanh network regressing onto a random teacher network of
/// the same shape.
#[derive(Debug, Clone)]
pub struct TinyMlp {
    params: Vec<ParamSpec>,
    inputs: Matrix,
    targets: Matrix,
    hidden: usize,
}

/// `dims = [inputs, hidden, outputs]`.
pub fn tiny_mlp_problem(dims: [usize; 3], samples: usize, seed: u64) -> Result<TinyMlp> {
    let [d, h, o] = dims;
    if d == 0 || h == 0 || o == 0 || samples == 0 {
        return Err(Error::contract(
            "tiny_mlp_problem",
            format!("degenerate dims {dims:?} with {samples} samples"),
        ));
    }
    let mut s = rng::stream(seed, &[label::DATA]);
    let teacher = TinyMlp {
        params: vec![],
        inputs: Matrix::zeros(1, d),
        targets: Matrix::zeros(1, o),
        hidden: h,
    };
    let teacher_params = vec![
        Matrix::random_normal(h, d, 1.0 / (d as f64).sqrt(), &mut s),
        Matrix::random_normal(h, 1, 0.1, &mut s),
        Matrix::random_normal(o, h, 1.0 / (h as f64).sqrt(), &mut s),
        Matrix::random_normal(o, 1, 0.1, &mut s),
    ];
    let inputs = Matrix::random_normal(samples, d, 1.0, &mut s);
    let mut targets = Matrix::zeros(samples, o);
    for i in 0..samples {
        let (_, out) = teacher.forward(&teacher_params, inputs.row(i));
        for (k, v) in out.into_iter().enumerate() {
            targets.set(i, k, v);
        }
    }
    Ok(TinyMlp {
        params: vec![
            ParamSpec::new("fc1.weight", vec![h, d])?,
            ParamSpec::new("fc1.bias", vec![h])?,
            ParamSpec::new("fc2.weight", vec![o, h])?,
            ParamSpec::new("fc2.bias", vec![o])?,
        ],
        inputs,
        targets,
        hidden: h,
    })
}

impl TinyMlp {
    fn forward(&self, p: &[Matrix], x: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let hidden: Vec<f64> = (0..self.hidden)
            .map(|j| {
                let mut v = p[1].get(j, 0);
                for (w, xi) in p[0].row(j).iter().zip(x) {
                    v += w * xi;
                }
                v.tanh()
            })
            .collect();
        let out = (0..p[2].rows())
            .map(|k| {
                let mut v = p[3].get(k, 0);
                for (w, hj) in p[2].row(k).iter().zip(&hidden) {
                    v += w * hj;
                }
                v
            })
            .collect();
        (hidden, out)
    }
}

impl Problem for TinyMlp {
    fn name(&self) -> &str {
        "mlp"
    }

    fn params(&self) -> &[ParamSpec] {
        &self.params
    }

    fn num_samples(&self) -> usize {
        self.inputs.rows()
    }

    fn initial_params(&self, seed: u64) -> Vec<Matrix> {
        let mut s = rng::stream(seed, &[label::INIT]);
        self.params
            .iter()
            .map(|p| {
                let (n, m) = p.matrix_shape();
                if p.is_bias() {
                    Matrix::zeros(n, m)
                } else {
                    Matrix::random_normal(n, m, 1.0 / (m as f64).sqrt(), &mut s)
                }
            })
            .collect()
    }

    fn loss(&self, params: &[Matrix], samples: &[usize]) -> f64 {
        let total: f64 = samples
            .iter()
            .map(|&i| {
                let (_, out) = self.forward(params, self.inputs.row(i));
                out.iter()
                    .zip(self.targets.row(i))
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum::<f64>()
            })
            .sum();
        0.5 * total / samples.len() as f64
    }

    fn gradient(&self, params: &[Matrix], samples: &[usize]) -> Vec<Matrix> {
        let mut grads: Vec<Matrix> = params.iter().map(|p| Matrix::zeros(p.rows(), p.cols())).collect();
        for &i in samples {
            let x = self.inputs.row(i);
            let (hidden, out) = self.forward(params, x);
            let d_out: Vec<f64> = out.iter().zip(self.targets.row(i)).map(|(a, b)| a - b).collect();
            for (k, &dk) in d_out.iter().enumerate() {
                for (j, &hj) in hidden.iter().enumerate() {
                    grads[2].add_at(k, j, dk * hj);
                }
                grads[3].add_at(k, 0, dk);
            }
            for (j, &hj) in hidden.iter().enumerate() {
                let mut back = 0.0;
                for (k, &dk) in d_out.iter().enumerate() {
                    back += params[2].get(k, j) * dk;
                }
                let dpre = back * (1.0 - hj * hj);
                for (l, &xl) in x.iter().enumerate() {
                    grads[0].add_at(j, l, dpre * xl);
                }
                grads[1].add_at(j, 0, dpre);
            }
        }
        let k = samples.len() as f64;
        grads.into_iter().map(|g| g.map(|v| v / k)).collect()
    }
}

/// Largest relative error between the analytic gradient and central
/// differences, over `points` random parameter vectors and every coordinate.
pub fn finite_difference_check(problem: &dyn Problem, points: usize, seed: u64) -> f64 {
    let samples: Vec<usize> = (0..problem.num_samples()).collect();
    let mut worst: f64 = 0.0;
    for pt in 0..points {
        let mut s = rng::stream(seed, &[label::FIXTURE, pt as u64]);
        let params: Vec<Matrix> = problem
            .params()
            .iter()
            .map(|p| {
                let (n, m) = p.matrix_shape();
                Matrix::random_normal(n, m, 1.0, &mut s)
            })
            .collect();
        let grad = problem.gradient(&params, &samples);
        for (pi, g) in grad.iter().enumerate() {
            for e in 0..g.len() {
                let x0 = params[pi].data()[e];
                let h = 1e-6 * x0.abs().max(1.0);
                let mut plus = params.clone();
                plus[pi].data_mut()[e] = x0 + h;
                let mut minus = params.clone();
                minus[pi].data_mut()[e] = x0 - h;
                let fd = (problem.loss(&plus, &samples) - problem.loss(&minus, &samples)) / (2.0 * h);
                let an = g.data()[e];
                let denom = an.abs().max(fd.abs()).max(1e-8);
                worst = worst.max((an - fd).abs() / denom);
            }
        }
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn noiseless_optimum_is_zero() {
        let p = least_squares_problem(4, 6, 40, 0.0, 1).unwrap();
        assert!(p.optimal_loss().unwrap() < 1e-20);
        let noisy = least_squares_problem(4, 6, 40, 0.5, 1).unwrap();
        assert!(noisy.optimal_loss().unwrap() > 0.0);
    }

    #[test]
    fn optimum_has_zero_gradient() {
        let p = least_squares_problem(3, 5, 50, 0.3, 2).unwrap();
        let all: Vec<usize> = (0..50).collect();
        let g = p.gradient(&p.optimal_params(), &all);
        assert!(g.iter().all(|m| m.max_abs() < 1e-10));
    }

    #[test]
    fn gradients_pass_central_differences() {
        let ls = least_squares_problem(3, 4, 30, 0.1, 3).unwrap();
        assert!(finite_difference_check(&ls, 20, 1) <= 1e-5);
        let mlp = tiny_mlp_problem([4, 5, 2], 25, 4).unwrap();
        assert!(finite_difference_check(&mlp, 20, 2) <= 1e-5);
    }

    #[test]
    fn shards_partition_the_dataset() {
        for shards in 1..=7 {
            let mut seen = vec![0; 50];
            for w in 0..shards {
                for i in shard_range(50, w, shards) {
                    seen[i] += 1;
                }
            }
            assert!(seen.iter().all(|&c| c == 1));
        }
    }

    #[test]
    fn batches_are_deterministic_and_in_shard() {
        let a = sample_batch(1, 10..30, 2, 5, Some(4));
        assert_eq!(a, sample_batch(1, 10..30, 2, 5, Some(4)));
        assert_eq!(a.len(), 4);
        assert!(a.iter().all(|i| (10..30).contains(i)));
        assert_eq!(sample_batch(1, 10..13, 0, 0, Some(9)), vec![10, 11, 12]);
    }

    #[test]
    fn degenerate_dims_rejected() {
        assert!(least_squares_problem(0, 3, 10, 0.0, 1).is_err());
        assert!(least_squares_problem(2, 3, 3, 0.0, 1).is_err());
        assert!(tiny_mlp_problem([3, 0, 1], 10, 1).is_err());
    }
}
