mod common;

use powersgd::compressors::{
    atomo_compress, best_approx_compress, payload_bits, sign_norm_compress, sparse_budget,
    topk_compress, AtomoScaling, ParamKey,
};
use powersgd::rng::{self, label};
use powersgd::verify::monte_carlo_fixture;
use powersgd::{Communicator, Compressor, CompressorConfig, CompressorKind as K, Matrix};
use proptest::prelude::*;

fn workers(w: usize, n: usize, m: usize, seed: u64) -> Vec<Matrix> {
    let mut s = rng::stream(seed, &[label::FIXTURE]);
    (0..w).map(|_| Matrix::random_normal(n, m, 1.0, &mut s)).collect()
}

fn aggregate(kind: K, locals: &[Matrix]) -> Matrix {
    let mut c = Compressor::new(CompressorConfig::new(kind, 2, 7)).unwrap();
    let mut comm = Communicator::new(locals.len()).unwrap();
    c.exchange(ParamKey { index: 0, step: 3 }, locals, &mut comm)
        .unwrap()
        .aggregate
}

fn mean(locals: &[Matrix]) -> Matrix {
    let data: Vec<Vec<f64>> = locals.iter().map(|m| m.data().to_vec()).collect();
    let (r, c) = locals[0].shape();
    Matrix::new(r, c, common::tree_mean(&data)).unwrap()
}

#[test]
fn linear_schemes_commute_with_averaging() {
    let locals = workers(4, 12, 9, 1);
    let avg = mean(&locals);
    for kind in K::ALL.into_iter().filter(|k| k.is_linear()) {
        let many = aggregate(kind, &locals);
        let one = aggregate(kind, std::slice::from_ref(&avg));
        let dev = many.max_abs_diff(&one) / avg.max_abs();
        assert!(dev <= 1e-12, "{kind}: {dev:e}");
    }
}

#[test]
fn nonlinear_schemes_do_not_commute() {
    let locals = workers(4, 12, 9, 2);
    let avg = mean(&locals);
    for kind in K::ALL.into_iter().filter(|k| !k.is_linear()) {
        let many = aggregate(kind, &locals);
        let one = aggregate(kind, std::slice::from_ref(&avg));
        assert!(many.max_abs_diff(&one) > 1e-3, "{kind} looked linear");
    }
}

#[test]
fn nominal_atomo_scaling_is_biased() {
    let target = monte_carlo_fixture();
    let (mean, se) = common::mean_and_se((0..20_000u64).map(|i| {
        let mut s = rng::stream(29, &[label::ATOMO, i]);
        atomo_compress(&target, 2, &mut s, AtomoScaling::Nominal)
            .unwrap()
            .decompress()
            .into_data()
    }));
    let z = mean
        .iter()
        .zip(&se)
        .zip(target.data())
        .map(|((mu, s), t)| (mu - t).abs() / s)
        .fold(0.0, f64::max);
    assert!(z > 6.0, "nominal scaling looked unbiased: {z:.2} SE");
}

#[test]
fn best_approx_reproduces_low_rank_input() {
    let mut s = rng::stream(3, &[label::FIXTURE]);
    let u = Matrix::random_normal(20, 2, 1.0, &mut s);
    let v = Matrix::random_normal(15, 2, 1.0, &mut s);
    let m = powersgd::linalg::matmul_nt(&u, &v).unwrap();
    let back = best_approx_compress(&m, 2, 5).unwrap().decompress();
    assert!(back.max_abs_diff(&m) <= 1e-9 * m.max_abs());
}

fn matrix_strategy() -> impl Strategy<Value = Matrix> {
    (1usize..8, 1usize..8).prop_flat_map(|(n, m)| {
        proptest::collection::vec(-10.0f64..10.0, n * m)
            .prop_map(move |d| Matrix::new(n, m, d).unwrap())
    })
}

proptest! {
    #[test]
    fn topk_is_idempotent(m in matrix_strategy(), rank in 1usize..4) {
        let (r, c) = m.shape();
        let budget = sparse_budget(r, c, rank);
        let once = topk_compress(&m, budget).decompress();
        let twice = topk_compress(&once, budget).decompress();
        prop_assert_eq!(once, twice);
    }

    #[test]
    fn sign_norm_is_idempotent(m in matrix_strategy()) {
        prop_assume!(m.data().iter().all(|&x| x != 0.0));
        let once = sign_norm_compress(&m).decompress();
        let twice = sign_norm_compress(&once).decompress();
        prop_assert!(once.max_abs_diff(&twice) <= 1e-12 * once.max_abs());
    }

    #[test]
    fn all_reduce_matches_reference_tree(w in 1usize..9, n in 1usize..6, m in 1usize..6, seed in 0u64..1000) {
        let locals = workers(w, n, m, seed);
        let mut comm = Communicator::new(w).unwrap();
        let got = comm.all_reduce_mean(&locals).unwrap();
        prop_assert_eq!(got, mean(&locals));
    }

    #[test]
    fn random_k_never_outweighs_matching_rank(n in 1usize..300, m in 1usize..300, rank in 1usize..8) {
        let low_rank = payload_bits(K::PowerSgd, n, m, rank);
        prop_assert!(payload_bits(K::RandomK, n, m, rank) <= low_rank);
        prop_assert!(payload_bits(K::RandomK, n, m, rank) <= payload_bits(K::None, n, m, rank));
        prop_assert!(sparse_budget(n, m, rank) <= n * m);
    }

    #[test]
    fn low_rank_payload_grows_with_rank(n in 8usize..300, m in 8usize..300, rank in 1usize..8) {
        let one = payload_bits(K::PowerSgd, n, m, 1);
        prop_assert_eq!(payload_bits(K::PowerSgd, n, m, rank), rank as u64 * one);
    }
}
