mod common;

use common::*;
use proptest::prelude::*;
use qnet::tensor::{conv1d, conv2d, dense, global_avg_pool, softmax_cross_entropy, Tape, Tensor};

#[test]
fn conv1d_matches_nested_loop_exactly() {
    let mut r = rng(1);
    let x = randn(&mut r, 4 * 16);
    let w = randn(&mut r, 8 * 4 * 3);
    let y = conv1d(&Tensor::new(vec![4, 16], x.clone()).unwrap(), &Tensor::new(vec![8, 4, 3], w.clone()).unwrap(), 2, 0).unwrap();
    assert_eq!(y.shape(), &[8, 12]);
    let want = conv1d_ref(&x, 4, 16, &w, 8, 3, 2, 0);
    for (a, b) in y.data().iter().zip(&want) {
        assert_eq!(a.to_bits(), b.to_bits());
    }
}

#[test]
fn conv2d_matches_nested_loop_exactly() {
    let mut r = rng(2);
    let x = randn(&mut r, 3 * 8 * 8);
    let w = randn(&mut r, 4 * 3 * 3 * 3);
    let y = conv2d(&Tensor::new(vec![3, 8, 8], x.clone()).unwrap(), &Tensor::new(vec![4, 3, 3, 3], w.clone()).unwrap(), 2, 1).unwrap();
    assert_eq!(y.shape(), &[4, 4, 4]);
    let want = conv2d_ref(&x, 3, 8, 8, &w, 4, 3, 2, 1);
    for (a, b) in y.data().iter().zip(&want) {
        assert_eq!(a.to_bits(), b.to_bits());
    }
    let zero = conv2d(&Tensor::new(vec![3, 8, 8], x).unwrap(), &Tensor::zeros(vec![4, 3, 3, 3]), 2, 1).unwrap();
    assert!(zero.data().iter().all(|&v| v == 0.0));
}

#[test]
fn dense_100_by_39_matches_oracle_exactly() {
    let mut r = rng(3);
    let x = randn(&mut r, 39);
    let w = randn(&mut r, 100 * 39);
    let b = randn(&mut r, 100);
    let y = dense(
        &Tensor::new(vec![39], x.clone()).unwrap(),
        &Tensor::new(vec![100, 39], w.clone()).unwrap(),
        &Tensor::new(vec![100], b.clone()).unwrap(),
    )
    .unwrap();
    for (a, e) in y.data().iter().zip(dense_ref(&x, &w, &b)) {
        assert_eq!(a.to_bits(), e.to_bits());
    }
}

#[test]
fn pooling_within_one_ulp_of_mean() {
    let mut r = rng(4);
    let x = randn(&mut r, 6 * 97);
    let y = global_avg_pool(&Tensor::new(vec![6, 97], x.clone()).unwrap()).unwrap();
    for c in 0..6 {
        let mean = x[c * 97..][..97].iter().map(|&v| v as f64).sum::<f64>() / 97.0;
        assert!(ulps(y.data()[c], mean as f32) <= 1);
    }
}

#[test]
fn cross_entropy_matches_f64_oracle() {
    let mut r = rng(5);
    for k in 2..12 {
        let z = randn(&mut r, k).iter().map(|v| v * 3.0).collect::<Vec<f32>>();
        let raw: Vec<f64> = (0..k).map(|i| ((i * 7 + 3) % 5) as f64 + 0.5).collect();
        let s: f64 = raw.iter().sum();
        let t64: Vec<f64> = raw.iter().map(|v| v / s).collect();
        let t32: Vec<f32> = t64.iter().map(|&v| v as f32).collect();
        let got = softmax_cross_entropy(&Tensor::new(vec![k], z.clone()).unwrap(), &t32).unwrap() as f64;
        let zd: Vec<f64> = z.iter().map(|&v| v as f64).collect();
        let t_used: Vec<f64> = t32.iter().map(|&v| v as f64).collect();
        let want = cross_entropy_f64(&zd, &t_used);
        assert!(((got - want) / want).abs() <= 1e-6, "k={k}: {got} vs {want}");
    }
}

#[test]
fn conv1d_sum_gradients_match_finite_differences() {
    let mut r = rng(6);
    let (ci, co, l, k, dil, pad) = (3, 4, 12, 3, 2, 2);
    let x = randn(&mut r, ci * l);
    let w = randn(&mut r, co * ci * k);
    let mut tape = Tape::new();
    let xi = tape.leaf(&Tensor::new(vec![1, ci, l], x.clone()).unwrap().with_grad(true));
    let wi = tape.leaf(&Tensor::new(vec![co, ci, k], w.clone()).unwrap().with_grad(true));
    let y = tape.conv1d(xi, wi, dil, pad).unwrap();
    let loss = tape.sum(y);
    let g = tape.backward(loss).unwrap();
    // conv is linear in each operand, so a wide step has no truncation error
    let h = 0.05f32;
    let objective = |x: &[f32], w: &[f32]| -> f64 { conv1d_ref(x, ci, l, w, co, k, dil, pad).iter().map(|&v| v as f64).sum() };
    let check = |analytic: &[f32], base: &[f32], is_x: bool| {
        let mut num = 0.0f64;
        let mut den = 0.0f64;
        for i in 0..base.len() {
            let mut p = base.to_vec();
            let mut m = base.to_vec();
            p[i] += h;
            m[i] -= h;
            let (fp, fm) = if is_x { (objective(&p, &w), objective(&m, &w)) } else { (objective(&x, &p), objective(&x, &m)) };
            let fd = (fp - fm) / (p[i] as f64 - m[i] as f64);
            num += (analytic[i] as f64 - fd).powi(2);
            den += fd * fd;
        }
        assert!((num / den).sqrt() <= 1e-4, "rel err {}", (num / den).sqrt());
    };
    check(g.get(xi).unwrap(), &x, true);
    check(g.get(wi).unwrap(), &w, false);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn conv1d_any_geometry_matches_oracle(ci in 1usize..4, co in 1usize..4, k in 1usize..4, dil in 1usize..4, extra in 1usize..8, pad_frac in 0usize..3, seed in 0u64..1000) {
        let pad = pad_frac.min(dil * (k - 1));
        let l = dil * (k - 1) + extra;
        let mut r = rng(seed);
        let x = randn(&mut r, ci * l);
        let w = randn(&mut r, co * ci * k);
        let y = conv1d(&Tensor::new(vec![ci, l], x.clone()).unwrap(), &Tensor::new(vec![co, ci, k], w.clone()).unwrap(), dil, pad).unwrap();
        let want = conv1d_ref(&x, ci, l, &w, co, k, dil, pad);
        prop_assert_eq!(y.data().len(), want.len());
        for (a, b) in y.data().iter().zip(&want) {
            prop_assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn conv2d_any_geometry_matches_oracle(ci in 1usize..3, co in 1usize..3, k in 1usize..4, stride in 1usize..3, pad in 0usize..2, h in 0usize..5, w in 0usize..5, seed in 0u64..1000) {
        let (h, wd) = (k + h, k + w);
        let mut r = rng(seed);
        let x = randn(&mut r, ci * h * wd);
        let kern = randn(&mut r, co * ci * k * k);
        let y = conv2d(&Tensor::new(vec![ci, h, wd], x.clone()).unwrap(), &Tensor::new(vec![co, ci, k, k], kern.clone()).unwrap(), stride, pad).unwrap();
        let want = conv2d_ref(&x, ci, h, wd, &kern, co, k, stride, pad);
        for (a, b) in y.data().iter().zip(&want) {
            prop_assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn backward_is_linear_in_the_seed(n in 1usize..20, a in -3.0f32..3.0, seed in 0u64..1000) {
        let mut r = rng(seed);
        let x = randn(&mut r, 2 * n);
        let w = randn(&mut r, 3 * n);
        let mut tape = Tape::new();
        let xi = tape.leaf(&Tensor::new(vec![2, n], x).unwrap().with_grad(true));
        let wi = tape.leaf(&Tensor::new(vec![3, n], w).unwrap().with_grad(true));
        let y = tape.dense(xi, wi, None).unwrap();
        let s1 = randn(&mut r, 6);
        let scaled: Vec<f32> = s1.iter().map(|v| v * a).collect();
        let g1 = tape.backward_from(y, s1).unwrap();
        let g2 = tape.backward_from(y, scaled).unwrap();
        for (p, q) in g1.get(wi).unwrap().iter().zip(g2.get(wi).unwrap()) {
            prop_assert!((p * a - q).abs() <= 1e-5 * (1.0 + q.abs()));
        }
    }

    #[test]
    fn shape_mismatch_is_an_error_not_a_panic(c in 1usize..5, l in 1usize..10, wc in 1usize..5) {
        let x = Tensor::zeros(vec![c, l]);
        let w = Tensor::zeros(vec![2, wc, 1]);
        prop_assert_eq!(conv1d(&x, &w, 1, 0).is_ok(), c == wc);
    }
}
