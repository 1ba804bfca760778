use nst_core::datagen::{build_equivalence_classes, make_dataset, split_semi, ClassMode, DatasetKind, PartialDataset};
use nst_core::ndgrad::Tensor;
use nst_core::nnmodel::{ema_update, init_params, MlpParams, ModelConfig};
use nst_core::trainer::{
    argmax_row, evaluate, optimizer_step, rampup_weight, train, AdamConfig, AdamState, Method, TrainConfig,
};
use nst_core::Error;
use proptest::prelude::*;

fn moons(n_labeled: usize, seed: u64) -> PartialDataset {
    let data = make_dataset(&DatasetKind::TwoMoons { noise: 0.1 }, 600, seed).unwrap();
    let split = split_semi(&data, n_labeled, 20, 150, seed).unwrap();
    build_equivalence_classes(&split, ClassMode::PerLabel, seed).unwrap()
}

fn tiny() -> MlpParams {
    MlpParams::from_parts(
        vec![Tensor::matrix(1, 2, vec![0.5, -1.0]).unwrap()],
        vec![Tensor::vector(vec![0.1, 0.0]).unwrap()],
    )
    .unwrap()
}

#[test]
fn adam_matches_hand_rolled_reference() {
    let config = AdamConfig {
        learning_rate: 0.05,
        weight_decay: 0.1,
        ..AdamConfig::default()
    };
    let mut params = tiny();
    let mut state = AdamState::new(&params);
    let mut theta: Vec<f64> = vec![0.5, -1.0, 0.1, 0.0];
    let mut m = [0.0; 4];
    let mut v = [0.0; 4];
    let grads_seq = [[0.3, -0.2, 1.0, 0.0], [0.1, 0.4, -0.5, 2.0], [-1.0, 0.0, 0.2, 0.3]];
    for (t, g) in grads_seq.iter().enumerate() {
        let grads = MlpParams::from_parts(
            vec![Tensor::matrix(1, 2, g[..2].to_vec()).unwrap()],
            vec![Tensor::vector(g[2..].to_vec()).unwrap()],
        )
        .unwrap();
        optimizer_step(&mut params, &grads, &mut state, &config).unwrap();
        let t = (t + 1) as i32;
        for i in 0..4 {
            m[i] = 0.9 * m[i] + 0.1 * g[i];
            v[i] = 0.999 * v[i] + 0.001 * g[i] * g[i];
            let update = (m[i] / (1.0 - 0.9f64.powi(t))) / ((v[i] / (1.0 - 0.999f64.powi(t))).sqrt() + 1e-8);
            theta[i] = (theta[i] - 0.05 * update) * (1.0 - 0.05 * 0.1);
        }
    }
    let got: Vec<f64> = params.tensors().flat_map(|t| t.data().to_vec()).collect();
    for (a, b) in got.iter().zip(&theta) {
        assert!((a - b).abs() < 1e-14, "{got:?} vs {theta:?}");
    }
    assert_eq!(state.steps_taken(), 3);
}

#[test]
fn parameter_file_layout() {
    let params = tiny();
    let mut bytes = Vec::new();
    params.write_to(&mut bytes).unwrap();
    let mut expected = b"NTPM".to_vec();
    for v in [1u32, 1, 1, 2] {
        expected.extend(v.to_le_bytes());
    }
    for v in [0.5f64, -1.0, 0.1, 0.0] {
        expected.extend(v.to_le_bytes());
    }
    assert_eq!(bytes, expected);
    assert_eq!(MlpParams::read_from(&bytes[..]).unwrap(), params);

    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert!(matches!(MlpParams::read_from(&bad[..]), Err(Error::Format(_))));
    assert!(matches!(
        MlpParams::read_from(&bytes[..bytes.len() - 3]),
        Err(Error::Format(_))
    ));
    let mut long = bytes;
    long.push(0);
    assert!(matches!(MlpParams::read_from(&long[..]), Err(Error::Format(_))));
}

#[test]
fn save_and_load_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let params = init_params(&ModelConfig::new(vec![4, 9, 3], 2)).unwrap();
    let path = dir.path().join("model.ntpm");
    params.save(&path).unwrap();
    assert_eq!(MlpParams::load(&path).unwrap(), params);
}

#[test]
fn ema_moves_teacher_towards_student() {
    let teacher = tiny();
    let student = MlpParams::zeros(&[1, 2]).unwrap();
    let next = ema_update(&teacher, &student, 0.75).unwrap();
    let got: Vec<f64> = next.tensors().flat_map(|t| t.data().to_vec()).collect();
    for (a, b) in got.iter().zip([0.375, -0.75, 0.075, 0.0]) {
        assert!((a - b).abs() < 1e-15);
    }
    assert_eq!(ema_update(&teacher, &student, 1.0).unwrap(), teacher);
}

#[test]
fn evaluation_breaks_ties_towards_lowest_index() {
    assert_eq!(argmax_row(&[0.3, 0.3, 0.3]), 0);
    assert_eq!(argmax_row(&[0.1, 0.45, 0.45]), 1);
    let zero = MlpParams::zeros(&[2, 3]).unwrap();
    let x = Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
    assert_eq!(evaluate(&zero, &x, &[0, 1]).unwrap(), 0.5);
    assert!(matches!(evaluate(&zero, &x, &[]), Err(Error::Contract(_))));
}

#[test]
fn every_method_trains_and_is_deterministic() {
    let data = moons(8, 4);
    for method in Method::ALL {
        let config = TrainConfig {
            method,
            steps: 40,
            eval_interval: 20,
            seed: 5,
            ..TrainConfig::default()
        };
        let a = train(&config, &data).unwrap();
        let b = train(&config, &data).unwrap();
        assert!(a.same_outcome(&b), "{method} not deterministic");
        assert_eq!(a.losses.len(), 40);
        assert!(a.losses.iter().all(|l| l.is_finite()), "{method}");
        assert!((0.0..=1.0).contains(&a.final_test_error));
        let steps: Vec<usize> = a.history.iter().map(|h| h.step).collect();
        assert_eq!(steps, vec![20, 40], "{method}");
        assert!(a.history.iter().all(|h| h.validation_error.is_some()));
    }
}

#[test]
fn different_seeds_give_different_runs() {
    let data = moons(8, 1);
    let base = TrainConfig {
        method: Method::Nst,
        steps: 20,
        ..TrainConfig::default()
    };
    let a = train(&base, &data).unwrap();
    let b = train(&TrainConfig { seed: 1, ..base }, &data).unwrap();
    assert_ne!(a.params, b.params);
}

#[test]
fn pair_methods_need_equivalence_classes() {
    let data = make_dataset(&DatasetKind::TwoMoons { noise: 0.1 }, 200, 0).unwrap();
    let split = split_semi(&data, 4, 0, 50, 0).unwrap();
    let config = TrainConfig {
        method: Method::Nst,
        steps: 5,
        ..TrainConfig::default()
    };
    assert!(matches!(train(&config, &split), Err(Error::Config(_))));
    let supervised = TrainConfig {
        method: Method::Supervised,
        ..config
    };
    assert!(train(&supervised, &split).is_ok());
}

#[test]
fn invalid_configs_are_rejected() {
    let data = moons(4, 0);
    for config in [
        TrainConfig {
            learning_rate: 0.0,
            ..TrainConfig::default()
        },
        TrainConfig {
            ema_decay: 1.5,
            ..TrainConfig::default()
        },
        TrainConfig {
            hidden: vec![0],
            ..TrainConfig::default()
        },
    ] {
        assert!(matches!(train(&config, &data), Err(Error::Config(_))), "{config:?}");
    }
}

#[test]
fn method_names_round_trip() {
    for method in Method::ALL {
        assert_eq!(method.name().parse::<Method>().unwrap(), method);
    }
    assert!("mixmatchnst".parse::<Method>().is_err());
}

proptest! {
    #[test]
    fn rampup_is_monotone_and_bounded(length in 1usize..500, max in 0.0f64..100.0, a in 0usize..1000, b in 0usize..1000) {
        let (lo, hi) = (a.min(b), a.max(b));
        let (wl, wh) = (rampup_weight(lo, length, max), rampup_weight(hi, length, max));
        prop_assert!(wl <= wh);
        prop_assert!((0.0..=max).contains(&wl) && wh <= max);
    }
}
