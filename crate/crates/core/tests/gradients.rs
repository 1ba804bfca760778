mod common;

use common::*;
use nst_core::datagen::AugmentPolicy;
use nst_core::ndgrad::{finite_diff_grad, Graph, Tensor};
use nst_core::nnmodel::{init_params, MlpParams, ModelConfig};
use nst_core::rngs::seeded;
use nst_core::ssl::{guess_labels_in, mixmatch_batch, mixmatch_losses_in, nullspace_term_in, MixConfig, MixInputs};
use proptest::prelude::*;
use rand::Rng;

fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(1e-6))
        .fold(0.0, f64::max)
}

fn jittered(widths: Vec<usize>, seed: u64) -> MlpParams {
    let mut p = init_params(&ModelConfig::new(widths, seed)).unwrap();
    let mut rng = seeded(seed ^ 0xabc);
    for t in p.tensors_mut() {
        for v in t.data_mut() {
            *v += rng.random_range(-0.3..0.3);
        }
    }
    p
}

fn graph_grad(
    params: &MlpParams,
    f: impl for<'g> Fn(&nst_core::nnmodel::BoundMlp<'_, 'g>) -> nst_core::ndgrad::Var<'g>,
) -> Vec<f64> {
    let g = Graph::new();
    let model = params.bind(&g);
    let loss = f(&model);
    let grads = g.backward(loss, &model.leaves()).unwrap();
    flatten(&model.gradients(&grads).unwrap())
}

#[test]
fn supervised_loss_matches_oracle() {
    let widths = vec![3, 7, 4];
    let params = jittered(widths.clone(), 3);
    let x = random_tensor(&mut seeded(1), 6, 3, 1.5);
    let y = [0usize, 3, 1, 1, 2, 0];
    let analytic = graph_grad(&params, |m| nst_core::ssl::supervised_loss_in(m, &x, &y).unwrap());
    let numeric = central_diff(
        |flat| {
            let (ws, bs) = unflatten(flat, &widths);
            let p = forward_probs(&ws, &bs, &widths, x.data());
            p.iter().zip(&y).map(|(r, &l)| -r[l].ln()).sum::<f64>() / 6.0
        },
        &flatten(&params),
        1e-5,
    );
    assert!(rel_err(&analytic, &numeric) < 1e-4);
}

#[test]
fn mixmatch_terms_match_finite_differences() {
    let params = jittered(vec![2, 6, 3], 4);
    let labeled_x = random_tensor(&mut seeded(5), 4, 2, 1.0);
    let unlabeled_x = random_tensor(&mut seeded(6), 4, 2, 1.0);
    let pairs = random_tensor(&mut seeded(7), 4, 2, 1.0);
    let config = MixConfig::default();
    let policy = AugmentPolicy::Identity;
    let inputs = MixInputs {
        labeled_x: &labeled_x,
        labeled_y: &[0, 1, 2, 1],
        unlabeled_x: &unlabeled_x,
        pairs: Some(&pairs),
    };
    let (mixed, _) = mixmatch_batch(&params, inputs, &config, &policy, &mut seeded(8), &mut seeded(9)).unwrap();

    // the mixed batch is fixed data; only the model is differentiated
    let value = |p: &[Tensor]| -> nst_core::Result<f64> {
        let params = MlpParams::from_parts(vec![p[0].clone(), p[2].clone()], vec![p[1].clone(), p[3].clone()])?;
        let g = Graph::new();
        let model = params.bind_const(&g);
        let (lx, lu) = mixmatch_losses_in(&model, &mixed)?;
        lx.add(lu.scale(3.0))?.item()
    };
    let leaves: Vec<Tensor> = params.tensors().cloned().collect();
    let numeric: Vec<f64> = finite_diff_grad(value, &leaves, 1e-5)
        .unwrap()
        .into_iter()
        .flat_map(|t| t.into_data())
        .collect();
    let analytic = graph_grad(&params, |m| {
        let (lx, lu) = mixmatch_losses_in(m, &mixed).unwrap();
        lx.add(lu.scale(3.0)).unwrap()
    });
    assert!(rel_err(&analytic, &numeric) < 1e-4);
}

#[test]
fn pair_term_gradient_flows_through_both_guesses() {
    let widths = vec![2, 5, 3];
    let params = jittered(widths.clone(), 10);
    let xj = random_tensor(&mut seeded(11), 3, 2, 1.0);
    let xk = random_tensor(&mut seeded(12), 3, 2, 1.0);
    let analytic = graph_grad(&params, |m| {
        let qj = guess_labels_in(m, &xj, 1, &AugmentPolicy::Identity, 0.5, &mut seeded(0)).unwrap();
        let qk = guess_labels_in(m, &xk, 1, &AugmentPolicy::Identity, 0.5, &mut seeded(0)).unwrap();
        nullspace_term_in(qj, qk).unwrap()
    });
    // oracle: sharpened plain-loop predictions, mean squared row distance
    let sharp = |p: &[f64]| {
        let s: Vec<f64> = p.iter().map(|v| v.powf(2.0)).collect();
        let z: f64 = s.iter().sum();
        s.into_iter().map(|v| v / z).collect::<Vec<_>>()
    };
    let numeric = central_diff(
        |flat| {
            let (ws, bs) = unflatten(flat, &widths);
            let pj = forward_probs(&ws, &bs, &widths, xj.data());
            let pk = forward_probs(&ws, &bs, &widths, xk.data());
            pj.iter()
                .zip(&pk)
                .map(|(a, b)| {
                    sharp(a)
                        .iter()
                        .zip(sharp(b))
                        .map(|(u, v)| (u - v) * (u - v))
                        .sum::<f64>()
                })
                .sum::<f64>()
                / 3.0
        },
        &flatten(&params),
        1e-5,
    );
    assert!(analytic.iter().any(|v| v.abs() > 1e-8));
    assert!(rel_err(&analytic, &numeric) < 1e-4);
}

#[test]
fn gradients_accumulate_over_reuse() {
    let g = Graph::new();
    let x = g.param(Tensor::vector(vec![1.5, -2.0]).unwrap());
    // f = sum(x*x) + sum(x*x) = 2|x|², df/dx = 4x
    let f = x.mul(x).unwrap().sum().add(x.squared_norm()).unwrap();
    let grads = g.backward(f, &[x]).unwrap();
    assert_eq!(grads.of(&x).unwrap().data(), &[6.0, -8.0]);
}

#[test]
fn backward_rejects_non_scalar_and_foreign_leaves() {
    let g = Graph::new();
    let x = g.param(Tensor::vector(vec![1.0, 2.0]).unwrap());
    assert!(g.backward(x.exp(), &[x]).is_err());
    let c = g.constant(Tensor::scalar(1.0));
    assert!(g.backward(x.sum(), &[c]).is_err());
}

proptest! {
    #[test]
    fn softmax_rows_are_positive_distributions(v in prop::collection::vec(-30.0f64..30.0, 12)) {
        let g = Graph::new();
        let p = g.constant(Tensor::matrix(3, 4, v).unwrap()).softmax().unwrap().value();
        for row in p.row_iter() {
            prop_assert!(row.iter().all(|&q| q > 0.0));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn logsumexp_matches_naive_form(v in prop::collection::vec(-20.0f64..20.0, 8)) {
        let g = Graph::new();
        let got = g.constant(Tensor::matrix(2, 4, v.clone()).unwrap()).logsumexp().unwrap().value();
        for (i, row) in v.chunks(4).enumerate() {
            let naive = row.iter().map(|x| x.exp()).sum::<f64>().ln();
            prop_assert!((got.data()[i] - naive).abs() < 1e-12 * naive.abs().max(1.0));
        }
    }

    #[test]
    fn logsumexp_is_stable_for_large_inputs(shift in 500.0f64..700.0) {
        let g = Graph::new();
        let got = g.constant(Tensor::matrix(1, 2, vec![shift, shift]).unwrap()).logsumexp().unwrap().value();
        prop_assert!((got.data()[0] - (shift + 2f64.ln())).abs() < 1e-9);
    }

    #[test]
    fn matmul_gradient_matches_finite_differences(seed in 0u64..200) {
        let mut rng = seeded(seed);
        let a = random_tensor(&mut rng, 3, 4, 1.0);
        let b = random_tensor(&mut rng, 4, 2, 1.0);
        let g = Graph::new();
        let (va, vb) = (g.param(a.clone()), g.param(b.clone()));
        let f = va.matmul(vb).unwrap().exp().sum();
        let grads = g.backward(f, &[va, vb]).unwrap();
        let numeric = finite_diff_grad(
            |p| {
                let g = Graph::new();
                g.constant(p[0].clone()).matmul(g.constant(p[1].clone()))?.exp().sum().item()
            },
            &[a, b],
            1e-6,
        )
        .unwrap();
        prop_assert!(grads.of(&va).unwrap().max_abs_diff(&numeric[0]).unwrap() < 1e-6);
        prop_assert!(grads.of(&vb).unwrap().max_abs_diff(&numeric[1]).unwrap() < 1e-6);
    }
}
