//! Oracles shared by the integration tests. Nothing here calls into the
//! crate's linear algebra.

#![allow(dead_code)]

use powersgd::Matrix;

/// Singular values of `m`, descending, by one-sided Jacobi rotations on the
/// columns of `m` (or of `mᵀ` when wide).
pub fn jacobi_singular_values(m: &Matrix) -> Vec<f64> {
    let (rows, cols) = m.shape();
    let (r, c, get): (usize, usize, Box<dyn Fn(usize, usize) -> f64>) = if rows >= cols {
        (rows, cols, Box::new(|i, j| m.get(i, j)))
    } else {
        (cols, rows, Box::new(|i, j| m.get(j, i)))
    };
    let mut a: Vec<Vec<f64>> = (0..c).map(|j| (0..r).map(|i| get(i, j)).collect()).collect();
    for _sweep in 0..100 {
        let mut off: f64 = 0.0;
        for p in 0..c {
            for q in p + 1..c {
                let alpha: f64 = a[p].iter().map(|x| x * x).sum();
                let beta: f64 = a[q].iter().map(|x| x * x).sum();
                let gamma: f64 = a[p].iter().zip(&a[q]).map(|(x, y)| x * y).sum();
                if gamma == 0.0 {
                    continue;
                }
                off = off.max(gamma.abs() / (alpha * beta).sqrt());
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let t = if zeta == 0.0 { 1.0 } else { t };
                let cs = 1.0 / (1.0 + t * t).sqrt();
                let sn = cs * t;
                for i in 0..r {
                    let (x, y) = (a[p][i], a[q][i]);
                    a[p][i] = cs * x - sn * y;
                    a[q][i] = sn * x + cs * y;
                }
            }
        }
        if off < 1e-15 {
            break;
        }
    }
    let mut s: Vec<f64> = a.iter().map(|col| col.iter().map(|x| x * x).sum::<f64>().sqrt()).collect();
    s.sort_by(|x, y| y.total_cmp(x));
    s
}

/// `‖M − M_r‖_F` for the best rank-`r` approximation.
pub fn best_rank_error(m: &Matrix, r: usize) -> f64 {
    jacobi_singular_values(m)[r..].iter().map(|s| s * s).sum::<f64>().sqrt()
}

/// Mean with the documented reduction order: strides 1, 2, 4, …, slot `i`
/// absorbs slot `i + stride`, then one division by `W`.
pub fn tree_mean(xs: &[Vec<f64>]) -> Vec<f64> {
    let mut slots: Vec<Vec<f64>> = xs.to_vec();
    let w = slots.len();
    let mut stride = 1;
    while stride < w {
        let mut i = 0;
        while i + stride < w {
            let other = slots[i + stride].clone();
            for (a, b) in slots[i].iter_mut().zip(other) {
                *a += b;
            }
            i += 2 * stride;
        }
        stride *= 2;
    }
    slots[0].iter().map(|v| v / w as f64).collect()
}

/// Entrywise mean and standard error, accumulated sequentially (Welford).
pub fn mean_and_se(draws: impl Iterator<Item = Vec<f64>>) -> (Vec<f64>, Vec<f64>) {
    let mut n = 0.0;
    let mut mean: Vec<f64> = Vec::new();
    let mut m2: Vec<f64> = Vec::new();
    for x in draws {
        if mean.is_empty() {
            mean = vec![0.0; x.len()];
            m2 = vec![0.0; x.len()];
        }
        n += 1.0;
        for ((mu, s), v) in mean.iter_mut().zip(m2.iter_mut()).zip(x) {
            let d = v - *mu;
            *mu += d / n;
            *s += d * (v - *mu);
        }
    }
    let se = m2.iter().map(|s| (s / (n - 1.0) / n).sqrt()).collect();
    (mean, se)
}
