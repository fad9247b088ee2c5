mod common;

use common::{max_abs_diff, naive_matmul, rng, uniform_vec};
use proptest::prelude::*;
use rslora_ts::linalg::Tensor;
use rslora_ts::rslora::{scaling_factor, scaling_factor_with_exponent, AdaptedLinear, LowRankAdapter};
use rslora_ts::Error;

fn random_layer(seed: u64, d: usize, dp: usize, r: usize) -> AdaptedLinear {
    let mut g = rng(seed);
    let mut a = LowRankAdapter::init(d, dp, r, 2.0, 0.3, seed).unwrap();
    let y = Tensor::new(&[d, r], uniform_vec(&mut g, d * r, -1.0, 1.0)).unwrap();
    let x = a.x().clone();
    a.set_factors(y, x).unwrap();
    let w = Tensor::new(&[d, dp], uniform_vec(&mut g, d * dp, -1.0, 1.0)).unwrap();
    AdaptedLinear::new(w, a).unwrap()
}

#[test]
fn zero_init_leaves_base_output() {
    let a = LowRankAdapter::init(5, 7, 3, 1.0, 0.02, 9).unwrap();
    assert!(a.y().data().iter().all(|v| *v == 0.0));
    let w = Tensor::new(&[5, 7], (0..35).map(|i| i as f64 / 7.0).collect()).unwrap();
    let layer = AdaptedLinear::new(w.clone(), a).unwrap();
    let z = Tensor::vector((0..7).map(f64::from).collect());
    let want = naive_matmul(w.data(), z.data(), 5, 7, 1);
    assert_eq!(layer.forward(&z).unwrap().data(), &want[..]);
}

#[test]
fn merged_weight_reproduces_forward() {
    for seed in 0..20 {
        let layer = random_layer(seed, 6, 5, 3);
        let mut g = rng(100 + seed);
        let z = uniform_vec(&mut g, 5, -2.0, 2.0);
        let merged = layer.merge();
        let via_merge = naive_matmul(merged.data(), &z, 6, 5, 1);
        let direct = layer.forward(&Tensor::vector(z)).unwrap();
        assert!(max_abs_diff(direct.data(), &via_merge) < 1e-12);
    }
}

#[test]
fn batch_forward_matches_per_row() {
    let layer = random_layer(3, 4, 6, 2);
    let mut g = rng(3);
    let rows = uniform_vec(&mut g, 18, -1.0, 1.0);
    let batch = layer.forward(&Tensor::matrix(3, 6, rows.clone()).unwrap()).unwrap();
    for (i, row) in rows.chunks(6).enumerate() {
        let one = layer.forward(&Tensor::vector(row.to_vec())).unwrap();
        assert!(max_abs_diff(one.data(), batch.row(i)) < 1e-14);
    }
}

#[test]
fn rejects_bad_hyperparameters() {
    assert!(matches!(LowRankAdapter::init(4, 4, 5, 1.0, 0.02, 0), Err(Error::Rank { .. })));
    assert!(matches!(scaling_factor(0, 1.0), Err(Error::Domain(_))));
    assert!(matches!(scaling_factor(4, -1.0), Err(Error::Domain(_))));
    let mut layer = random_layer(0, 3, 3, 2);
    let before = layer.adapter().clone();
    assert!(layer.sgd_step(&[], -0.1).is_err());
    assert_eq!(layer.adapter(), &before);
}

#[test]
fn zero_learning_rate_keeps_factors() {
    let mut layer = random_layer(5, 4, 4, 2);
    let before = layer.adapter().clone();
    let pair = (Tensor::vector(vec![1.0; 4]), Tensor::vector(vec![0.5; 4]));
    layer.sgd_step(&[pair], 0.0).unwrap();
    assert!(layer.adapter().y().bit_eq(before.y()));
    assert!(layer.adapter().x().bit_eq(before.x()));
}

#[test]
fn batched_grads_sum_per_example_grads() {
    let layer = random_layer(8, 5, 4, 3);
    let mut g = rng(8);
    let z = uniform_vec(&mut g, 12, -1.0, 1.0);
    let v = uniform_vec(&mut g, 15, -1.0, 1.0);
    let (by, bx) = layer
        .analytic_grads(&Tensor::matrix(3, 4, z.clone()).unwrap(), &Tensor::matrix(3, 5, v.clone()).unwrap())
        .unwrap();
    let mut sy = vec![0.0; by.numel()];
    let mut sx = vec![0.0; bx.numel()];
    for i in 0..3 {
        let (y, x) = layer
            .analytic_grads(&Tensor::vector(z[i * 4..i * 4 + 4].to_vec()), &Tensor::vector(v[i * 5..i * 5 + 5].to_vec()))
            .unwrap();
        sy.iter_mut().zip(y.data()).for_each(|(a, b)| *a += b);
        sx.iter_mut().zip(x.data()).for_each(|(a, b)| *a += b);
    }
    assert!(max_abs_diff(by.data(), &sy) < 1e-13);
    assert!(max_abs_diff(bx.data(), &sx) < 1e-13);
}

proptest! {
    #[test]
    fn beta_times_sqrt_rank_is_alpha(r in 1usize..4096, alpha in 0.01f64..100.0) {
        let b = scaling_factor(r, alpha).unwrap();
        prop_assert!((b * (r as f64).sqrt() - alpha).abs() <= 1e-12 * alpha);
    }

    #[test]
    fn exponent_family_is_monotone(r in 2usize..1024, g1 in 0.0f64..1.0, dg in 0.01f64..1.0) {
        let lo = scaling_factor_with_exponent(r, 1.0, g1).unwrap();
        let hi = scaling_factor_with_exponent(r, 1.0, g1 + dg).unwrap();
        prop_assert!(hi < lo);
    }

    #[test]
    fn init_is_seed_deterministic(d in 1usize..8, dp in 1usize..8, seed: u64) {
        let r = d.min(dp);
        let a = LowRankAdapter::init(d, dp, r, 1.0, 0.02, seed).unwrap();
        let b = LowRankAdapter::init(d, dp, r, 1.0, 0.02, seed).unwrap();
        prop_assert!(a.x().bit_eq(b.x()));
        prop_assert_eq!(a.num_params(), r * (d + dp));
    }
}
