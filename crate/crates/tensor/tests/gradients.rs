//! Finite-difference verification of every differentiable operation.
//!
//! Tolerances: h = 1e-3, relative error <= 1e-3 at >= 95% of checked
//! coordinates, coordinates with |analytic| and |fd| below 1e-8 excluded.

use incount_tensor::gradcheck::{central_diff, compare};
use incount_tensor::{Graph, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const H: f64 = 1e-3;
const REL_TOL: f64 = 1e-3;
const ABS_FLOOR: f64 = 1e-8;

fn rand_vec(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(lo..hi)).collect()
}

/// Runs `forward` once for the analytic gradients, then FD-checks each input.
fn check_op<F>(seed: u64, inputs: &[Tensor<f64>], forward: F)
where
    F: Fn(&Graph<f64>, &[Tensor<f64>]) -> Tensor<f64>,
{
    let graph = Graph::new();
    let loss = forward(&graph, inputs);
    graph.backward(&loss).unwrap();
    for (idx, input) in inputs.iter().enumerate() {
        let analytic = input.grad().expect("input requires grad");
        let fd = central_diff(input, H, || {
            let g = Graph::new();
            forward(&g, inputs).item().unwrap()
        });
        let report = compare(&analytic, &fd, REL_TOL, ABS_FLOOR);
        assert!(
            report.pass_fraction() >= 0.95,
            "seed {seed} input {idx}: {}/{} coords passed, max rel err {:.3e}",
            report.passed,
            report.checked,
            report.max_rel_err
        );
    }
}

#[test]
fn conv2d_gradients_match_finite_differences() {
    for seed in 0..20 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = rng.gen_range(1..3usize);
        let cin = rng.gen_range(1..3usize);
        let cout = rng.gen_range(1..3usize);
        let h = rng.gen_range(3..6usize);
        let w = rng.gen_range(3..6usize);
        let (kh, kw) = (3, 3);
        let stride = rng.gen_range(1..3usize);
        let padding = rng.gen_range(0..2usize);
        if h + 2 * padding < kh || w + 2 * padding < kw {
            continue;
        }
        let x = Tensor::from_vec(
            vec![n, cin, h, w],
            rand_vec(&mut rng, n * cin * h * w, -1.0, 1.0),
            true,
        )
        .unwrap();
        let k = Tensor::from_vec(
            vec![cout, cin, kh, kw],
            rand_vec(&mut rng, cout * cin * kh * kw, -1.0, 1.0),
            true,
        )
        .unwrap();
        let b = Tensor::from_vec(vec![cout], rand_vec(&mut rng, cout, -1.0, 1.0), true).unwrap();
        check_op(seed, &[x, k, b], move |g, ts| {
            let y = g.conv2d(&ts[0], &ts[1], Some(&ts[2]), stride, padding).unwrap();
            g.sum(&y).unwrap()
        });
    }
}

#[test]
fn elementwise_gradients_match_finite_differences() {
    for seed in 0..20 {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
        let n = rng.gen_range(2..12usize);
        // keep values away from the relu/abs kinks so FD is meaningful
        let far = |rng: &mut ChaCha8Rng, n: usize| -> Vec<f64> {
            (0..n)
                .map(|_| {
                    let v: f64 = rng.gen_range(0.05..1.0);
                    if rng.gen_bool(0.5) {
                        v
                    } else {
                        -v
                    }
                })
                .collect()
        };
        let a = Tensor::from_vec(vec![n], far(&mut rng, n), true).unwrap();
        let b = Tensor::from_vec(vec![n], far(&mut rng, n), true).unwrap();

        check_op(seed, &[a.deep_clone()], |g, ts| {
            let y = g.relu(&ts[0]).unwrap();
            g.sq_l2_norm(&y).unwrap()
        });
        check_op(seed, &[a.deep_clone()], |g, ts| {
            let y = g.abs(&ts[0]).unwrap();
            g.sq_l2_norm(&y).unwrap()
        });
        check_op(seed, &[a.deep_clone(), b.deep_clone()], |g, ts| {
            let y = g.add(&ts[0], &ts[1]).unwrap();
            g.sq_l2_norm(&y).unwrap()
        });
        check_op(seed, &[a.deep_clone(), b.deep_clone()], |g, ts| {
            let y = g.sub(&ts[0], &ts[1]).unwrap();
            g.sq_l2_norm(&y).unwrap()
        });
        check_op(seed, &[a.deep_clone(), b.deep_clone()], |g, ts| {
            let y = g.mul(&ts[0], &ts[1]).unwrap();
            g.sum(&y).unwrap()
        });
        check_op(seed, &[a.deep_clone()], |g, ts| {
            let y = g.scale(&ts[0], 1.7).unwrap();
            g.sq_l2_norm(&y).unwrap()
        });
    }
}

#[test]
fn reduction_gradients_match_finite_differences() {
    for seed in 0..20 {
        let mut rng = ChaCha8Rng::seed_from_u64(200 + seed);
        let n = rng.gen_range(2..16usize);
        let vals: Vec<f64> = (0..n)
            .map(|_| {
                let v: f64 = rng.gen_range(0.05..1.0);
                if rng.gen_bool(0.5) {
                    v
                } else {
                    -v
                }
            })
            .collect();
        let a = Tensor::from_vec(vec![n], vals, true).unwrap();
        check_op(seed, &[a.deep_clone()], |g, ts| g.sum(&ts[0]).unwrap());
        check_op(seed, &[a.deep_clone()], |g, ts| g.l1_norm(&ts[0]).unwrap());
        check_op(seed, &[a.deep_clone()], |g, ts| g.sq_l2_norm(&ts[0]).unwrap());
    }
}

#[test]
fn div_scalar_gradients_match_finite_differences() {
    for seed in 0..20 {
        let mut rng = ChaCha8Rng::seed_from_u64(300 + seed);
        let n = rng.gen_range(2..10usize);
        let a = Tensor::from_vec(vec![n], rand_vec(&mut rng, n, -1.0, 1.0), true).unwrap();
        let s = Tensor::from_vec(vec![], vec![rng.gen_range(0.5..2.0)], true).unwrap();
        check_op(seed, &[a, s], |g, ts| {
            let y = g.div_scalar(&ts[0], &ts[1]).unwrap();
            g.sq_l2_norm(&y).unwrap()
        });
    }
}

#[test]
fn batch_select_gradients_match_finite_differences() {
    for seed in 0..20 {
        let mut rng = ChaCha8Rng::seed_from_u64(400 + seed);
        let b = rng.gen_range(2..4usize);
        let per = rng.gen_range(2..6usize);
        let idx = rng.gen_range(0..b);
        let a = Tensor::from_vec(vec![b, per], rand_vec(&mut rng, b * per, -1.0, 1.0), true).unwrap();
        check_op(seed, &[a], move |g, ts| {
            let y = g.batch_select(&ts[0], idx).unwrap();
            g.sq_l2_norm(&y).unwrap()
        });
    }
}

#[test]
fn composed_network_gradients_match_finite_differences() {
    // conv -> relu -> conv -> relu -> sum, gradients w.r.t. everything
    for seed in 0..20 {
        let mut rng = ChaCha8Rng::seed_from_u64(500 + seed);
        let x = Tensor::from_vec(vec![1, 2, 5, 5], rand_vec(&mut rng, 50, -1.0, 1.0), true).unwrap();
        let k1 = Tensor::from_vec(vec![3, 2, 3, 3], rand_vec(&mut rng, 54, -0.7, 0.7), true).unwrap();
        let b1 = Tensor::from_vec(vec![3], rand_vec(&mut rng, 3, -0.5, 0.5), true).unwrap();
        let k2 = Tensor::from_vec(vec![1, 3, 1, 1], rand_vec(&mut rng, 3, -0.7, 0.7), true).unwrap();
        check_op(seed, &[x, k1, b1, k2], |g, ts| {
            let c1 = g.conv2d(&ts[0], &ts[1], Some(&ts[2]), 1, 1).unwrap();
            let r1 = g.relu(&c1).unwrap();
            let c2 = g.conv2d(&r1, &ts[3], None, 1, 0).unwrap();
            let r2 = g.relu(&c2).unwrap();
            g.sum(&r2).unwrap()
        });
    }
}

#[test]
fn backward_is_linear_in_the_loss() {
    // grad(a*L1 + b*L2) == a*grad(L1) + b*grad(L2) within 1e-10
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    for _ in 0..10 {
        let n = rng.gen_range(2..8usize);
        let vals = rand_vec(&mut rng, n, -1.0, 1.0);
        let (a, b) = (rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0));

        let grad_of = |weight_a: f64, weight_b: f64, combined: bool| -> Vec<f64> {
            let x = Tensor::from_vec(vec![n], vals.clone(), true).unwrap();
            let g = Graph::new();
            let l1 = g.sq_l2_norm(&x).unwrap();
            let sq = g.mul(&x, &x).unwrap();
            let cube_ish = g.mul(&sq, &x).unwrap();
            let l2 = g.sum(&cube_ish).unwrap();
            let loss = if combined {
                let s1 = g.scale(&l1, weight_a).unwrap();
                let s2 = g.scale(&l2, weight_b).unwrap();
                g.add(&s1, &s2).unwrap()
            } else if weight_a != 0.0 {
                g.scale(&l1, weight_a).unwrap()
            } else {
                g.scale(&l2, weight_b).unwrap()
            };
            g.backward(&loss).unwrap();
            x.grad().unwrap()
        };

        let combined = grad_of(a, b, true);
        let g1 = grad_of(a, 0.0, false);
        let g2 = grad_of(0.0, b, false);
        for i in 0..n {
            assert!(
                (combined[i] - (g1[i] + g2[i])).abs() < 1e-10,
                "linearity violated at {i}: {} vs {}",
                combined[i],
                g1[i] + g2[i]
            );
        }
    }
}
