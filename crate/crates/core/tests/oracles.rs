mod common;

use common::*;
use lowrank::attacks::{lora_gradients, GradThrough};
use lowrank::linalg::{self, Matrix};
use lowrank::model::{cross_entropy, LayerParams, Model, ModelParams, ModelSpec};
use lowrank::tensor::{channel_matmul, channel_matmul_nt, channel_matmul_tn, grad_normalize, normalize_per_image};
use lowrank::Tensor4;
use rand::Rng;

fn transpose_last(x: &Tensor4) -> Tensor4 {
    let [d, c, n, m] = x.dims();
    Tensor4::from_fn([d, c, m, n], |[b, ch, i, j]| x.get([b, ch, j, i]))
}

#[test]
fn channel_products_match_triple_loop() {
    for (seed, &(d, c, n, r, m)) in [(2, 3, 5, 2, 4), (1, 1, 1, 1, 1), (3, 2, 7, 7, 3)].iter().enumerate() {
        let a = uniform_tensor([d, c, n, r], -1.0, 1.0, seed as u64);
        let b = uniform_tensor([d, c, r, m], -1.0, 1.0, 100 + seed as u64);
        let want = naive_channel_matmul(&a, &b);
        assert!(channel_matmul(&a, &b).unwrap().max_abs_diff(&want) < 1e-13);

        // a·bᵀ and aᵀ·b through explicit transposes.
        let bt = transpose_last(&b);
        assert!(channel_matmul_nt(&a, &bt).unwrap().max_abs_diff(&want) < 1e-13);
        let at = transpose_last(&a);
        assert!(channel_matmul_tn(&at, &b).unwrap().max_abs_diff(&want) < 1e-13);
    }
}

#[test]
fn grad_normalize_is_the_jacobian_transpose() {
    let z = uniform_tensor([2, 2, 3, 3], -1.0, 1.0, 7);
    let w = uniform_tensor([2, 2, 3, 3], -1.0, 1.0, 8);
    let g = grad_normalize(&z, &w).unwrap();
    let objective = |z: &Tensor4| -> f64 {
        let (n, _) = normalize_per_image(z);
        n.data().iter().zip(w.data()).map(|(a, b)| a * b).sum()
    };
    for i in 0..z.len() {
        let fd = central_difference(&z, i, 1e-6, objective);
        assert!((fd - g.data()[i]).abs() < 1e-8, "coord {i}: fd {fd} vs {}", g.data()[i]);
    }
}

fn linear_model(c: usize, n: usize, m: usize, classes: usize, seed: u64) -> Model {
    let spec = ModelSpec::linear([c, n, m], classes).unwrap();
    Model::init(spec, seed).unwrap()
}

#[test]
fn linear_softmax_gradient_has_closed_form() {
    let model = linear_model(2, 3, 4, 5, 11);
    let x = uniform_tensor([3, 2, 3, 4], 0.0, 1.0, 12);
    let labels = [0, 4, 2];
    let (losses, g) = model.input_gradients(&x, &labels).unwrap();
    let dense = &model.params().layers[1];
    let k = 24;
    for b in 0..3 {
        let xi = x.image(b);
        let logits: Vec<f64> = (0..5)
            .map(|o| dense.bias[o] + (0..k).map(|i| dense.weight[o * k + i] * xi[i]).sum::<f64>())
            .collect();
        let mx = logits.iter().cloned().fold(f64::MIN, f64::max);
        let z: f64 = logits.iter().map(|l| (l - mx).exp()).sum();
        let p: Vec<f64> = logits.iter().map(|l| (l - mx).exp() / z).collect();
        assert!((losses[b] + p[labels[b]].ln()).abs() < 1e-12);
        for i in 0..k {
            let want: f64 = (0..5)
                .map(|o| dense.weight[o * k + i] * (p[o] - if o == labels[b] { 1.0 } else { 0.0 }))
                .sum();
            assert!((g.image(b)[i] - want).abs() < 1e-12);
        }
    }
}

#[test]
fn input_gradients_match_finite_differences() {
    let specs = [
        ModelSpec::linear([2, 4, 4], 3).unwrap(),
        ModelSpec::mlp([2, 4, 4], 3).unwrap(),
        ModelSpec::cnn([2, 8, 8], 3).unwrap(),
    ];
    for (s, spec) in specs.into_iter().enumerate() {
        let [c, n, m] = spec.input_dims;
        let model = Model::init(spec, 20 + s as u64).unwrap();
        let x = uniform_tensor([2, c, n, m], 0.1, 0.9, 30 + s as u64);
        let labels = [1, 2];
        let (_, g) = model.input_gradients(&x, &labels).unwrap();
        let total = |x: &Tensor4| model.input_gradients(x, &labels).unwrap().0.iter().sum::<f64>();
        let mut r = rng(40 + s as u64);
        for _ in 0..30 {
            let i = r.random_range(0..x.len());
            let fd = central_difference(&x, i, 1e-5, total);
            let an = g.data()[i];
            assert!(
                (fd - an).abs() <= 1e-6 + 1e-4 * an.abs(),
                "model {s} coord {i}: fd {fd} vs {an}"
            );
        }
    }
}

#[test]
fn parameter_gradients_match_finite_differences() {
    for spec in [
        ModelSpec::mlp([1, 4, 4], 3).unwrap(),
        ModelSpec::cnn([1, 8, 8], 3).unwrap(),
    ] {
        let [c, n, m] = spec.input_dims;
        let model = Model::init(spec.clone(), 3).unwrap();
        let x = uniform_tensor([4, c, n, m], 0.0, 1.0, 4);
        let labels = [0, 1, 2, 1];
        let (loss, grads) = model.grad_params(&x, &labels).unwrap();
        let logits = model.forward(&x).unwrap();
        assert!((loss - cross_entropy(&logits, &labels).unwrap()).abs() < 1e-12);

        let mut r = rng(5);
        for _ in 0..20 {
            let li = loop {
                let li = r.random_range(0..grads.len());
                if !grads[li].weight.is_empty() {
                    break li;
                }
            };
            let wi = r.random_range(0..grads[li].weight.len());
            let eval = |delta: f64| {
                let mut params = model.params().clone();
                params.layers[li].weight[wi] += delta;
                let m = Model::new(spec.clone(), params).unwrap();
                cross_entropy(&m.forward(&x).unwrap(), &labels).unwrap()
            };
            let h = 1e-5;
            let fd = (eval(h) - eval(-h)) / (2.0 * h);
            let an = grads[li].weight[wi];
            assert!(
                (fd - an).abs() <= 1e-7 + 1e-4 * an.abs(),
                "layer {li} w{wi}: {fd} vs {an}"
            );
        }
    }
}

#[test]
fn zero_weights_give_uniform_prediction_loss() {
    let spec = ModelSpec::linear([1, 2, 2], 4).unwrap();
    let params = ModelParams {
        layers: vec![
            LayerParams::default(),
            LayerParams {
                weight: vec![0.0; 16],
                bias: vec![0.0; 4],
            },
        ],
        seed: 0,
    };
    let model = Model::new(spec, params).unwrap();
    let x = uniform_tensor([2, 1, 2, 2], 0.0, 1.0, 1);
    let (losses, _) = model.input_gradients(&x, &[0, 3]).unwrap();
    for l in losses {
        assert!((l - 4f64.ln()).abs() < 1e-14);
    }
}

#[test]
fn singular_values_match_jacobi_oracle() {
    let mut r = rng(9);
    for t in 0..60 {
        let rows = r.random_range(1..=12);
        let cols = r.random_range(1..=12);
        let a = uniform_matrix(rows, cols, 1000 + t);
        let svd = linalg::svd(&a).unwrap();
        let want = oracle_singular_values(&a);
        let scale = want[0].max(1e-300);
        for (s, w) in svd.sigma.iter().zip(&want) {
            assert!((s - w).abs() <= 1e-7 * scale, "{rows}x{cols}: {s} vs {w}");
        }
        assert!(svd.reconstruct().max_abs_diff(&a) <= 1e-12 * (1.0 + a.frobenius()));
    }
}

#[test]
fn svd_of_exact_low_rank_matrices() {
    // Sum of two outer products: exactly rank 2.
    let n = 9;
    let u = uniform_matrix(n, 2, 1);
    let v = uniform_matrix(2, n, 2);
    let a = u.matmul(&v).unwrap();
    let svd = linalg::svd(&a).unwrap();
    assert!(svd.sigma[2] <= 1e-12 * svd.sigma[0]);
    assert!(svd.reconstruct_rank(2).max_abs_diff(&a) < 1e-12);
    let nuc = svd.sigma.iter().sum::<f64>();
    let want: f64 = oracle_singular_values(&a).iter().take(2).sum();
    assert!((nuc - want).abs() < 1e-9 * want);
}

#[test]
fn nuclear_norm_averages_channels() {
    let x = uniform_tensor([2, 3, 5, 4], -1.0, 1.0, 77);
    let got = linalg::nuclear_norm(&x);
    for (b, g) in got.iter().enumerate() {
        let mut total = 0.0;
        for c in 0..3 {
            let m = Matrix::from_vec(5, 4, x.channel(b, c).to_vec()).unwrap();
            total += oracle_singular_values(&m).iter().sum::<f64>();
        }
        assert!((g - total / 3.0).abs() < 1e-10);
    }
}

#[test]
fn lora_factor_gradients_match_finite_differences() {
    let model = Model::init(ModelSpec::cnn([2, 8, 8], 3).unwrap(), 6).unwrap();
    let x = uniform_tensor([2, 2, 8, 8], 0.2, 0.8, 7);
    let labels = [0, 2];
    let u = uniform_tensor([2, 2, 8, 2], -1.0, 1.0, 8);
    let v = uniform_tensor([2, 2, 2, 8], -1.0, 1.0, 9);
    let tau = 0.7;
    let (obj, gu, gv) = lora_gradients(&model, &x, &labels, &u, &v, tau, GradThrough::Exact, 1.0).unwrap();

    // Independent forward: explicit product, normalization and clamp.
    let forward = |u: &Tensor4, v: &Tensor4| -> f64 {
        let p = naive_channel_matmul(u, v);
        let mut adv = x.clone();
        for b in 0..2 {
            let n = frobenius(p.image(b));
            for (a, pv) in adv.image_mut(b).iter_mut().zip(p.image(b)) {
                *a = (*a + tau * pv / n).clamp(0.0, 1.0);
            }
        }
        model.input_gradients(&adv, &labels).unwrap().0.iter().sum()
    };
    assert!((obj - forward(&u, &v)).abs() < 1e-12);
    for i in 0..u.len() {
        let fd = central_difference(&u, i, 1e-6, |u| forward(u, &v));
        assert!(
            rel_err(fd, gu.data()[i]) < 1e-4 || (fd - gu.data()[i]).abs() < 1e-8,
            "u{i}"
        );
    }
    for i in 0..v.len() {
        let fd = central_difference(&v, i, 1e-6, |v| forward(&u, v));
        assert!(
            rel_err(fd, gv.data()[i]) < 1e-4 || (fd - gv.data()[i]).abs() < 1e-8,
            "v{i}"
        );
    }
}
