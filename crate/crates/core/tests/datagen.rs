use std::collections::{HashMap, HashSet};
use std::fs;

use nst_core::datagen::{
    augment, build_equivalence_classes, load_dataset_csv, make_dataset, sample_equiv_pairs, save_dataset_csv,
    split_semi, AugmentPolicy, ClassMode, Dataset, DatasetKind,
};
use nst_core::ndgrad::Tensor;
use nst_core::rngs::seeded;
use nst_core::Error;
use proptest::prelude::*;
use statrs::distribution::{ChiSquared, ContinuousCDF};

fn write(dir: &tempfile::TempDir, name: &str, body: &str) -> std::path::PathBuf {
    let path = dir.path().join(name);
    fs::write(&path, body).unwrap();
    path
}

#[test]
fn csv_round_trip_is_exact() {
    let dir = tempfile::tempdir().unwrap();
    let kinds = [
        DatasetKind::TwoMoons { noise: 0.2 },
        DatasetKind::Blobs {
            classes: 4,
            spread: 1.0,
            dim: 3,
        },
        DatasetKind::Rings { noise: 0.05 },
    ];
    for (i, kind) in kinds.iter().enumerate() {
        let data = make_dataset(kind, 120, i as u64).unwrap();
        let path = dir.path().join(format!("d{i}.csv"));
        save_dataset_csv(&data, &path).unwrap();
        let back = load_dataset_csv(&path).unwrap();
        assert_eq!(back.features(), data.features());
        assert_eq!(back.labels(), data.labels());
        assert_eq!(back.classes(), data.classes());
    }
}

#[test]
fn csv_errors_carry_line_numbers() {
    let dir = tempfile::tempdir().unwrap();
    let cases = [
        ("f0,f1,label\n0.1,0.2,0\n0.3,abc,1\n", 3),
        ("f0,f1,label\n0.1,0.2,0\n0.3,0.4\n", 3),
        ("f0,f1,label\n0.1,0.2,0\n0.1,0.2,0\n0.3,0.4,-1\n", 4),
        ("f0,x,label\n0.1,0.2,0\n", 1),
    ];
    for (i, (body, line)) in cases.iter().enumerate() {
        let path = write(&dir, &format!("bad{i}.csv"), body);
        match load_dataset_csv(&path) {
            Err(Error::Parse { line: got, .. }) => assert_eq!(got, *line, "case {i}"),
            other => panic!("case {i}: {other:?}"),
        }
    }
    let gap = write(&dir, "gap.csv", "f0,label\n0.1,0\n0.2,2\n");
    assert!(matches!(load_dataset_csv(&gap), Err(Error::LabelDomain(_))));
    assert!(matches!(
        load_dataset_csv(dir.path().join("missing.csv")),
        Err(Error::Io { .. })
    ));
}

#[test]
fn generators_are_seed_deterministic() {
    let kind = DatasetKind::TwoMoons { noise: 0.1 };
    assert_eq!(make_dataset(&kind, 50, 7).unwrap(), make_dataset(&kind, 50, 7).unwrap());
    assert_ne!(make_dataset(&kind, 50, 7).unwrap(), make_dataset(&kind, 50, 8).unwrap());
}

/// Unlabeled classes of sizes 4, 2 and 2 give 12 + 2 + 2 = 16 ordered pairs.
fn sixteen_pair_pool() -> nst_core::datagen::PartialDataset {
    let labels = vec![0, 0, 0, 0, 0, 1, 1, 1, 2, 2, 2];
    let features = Tensor::matrix(11, 1, (0..11).map(f64::from).collect()).unwrap();
    let data = Dataset::new(features, labels, 3, 0).unwrap();
    let split = split_semi(&data, 3, 0, 0, 1).unwrap();
    build_equivalence_classes(&split, ClassMode::PerLabel, 1).unwrap()
}

#[test]
fn pair_sampling_is_uniform_over_ordered_pairs() {
    let partial = sixteen_pair_pool();
    let sizes: Vec<usize> = partial.equivalence_classes().iter().map(|c| c.len()).collect();
    assert_eq!(sizes, vec![4, 2, 2]);
    let draws = 32_000;
    let mut counts: HashMap<(usize, usize), usize> = HashMap::new();
    let mut rng = seeded(99);
    for _ in 0..draws {
        let batch = sample_equiv_pairs(&partial, 1, &mut rng).unwrap();
        *counts.entry(batch.pairs[0]).or_default() += 1;
    }
    assert_eq!(counts.len(), 16);
    let expected = draws as f64 / 16.0;
    let stat: f64 = counts.values().map(|&c| (c as f64 - expected).powi(2) / expected).sum();
    let critical = ChiSquared::new(15.0).unwrap().inverse_cdf(0.999);
    assert!((critical - 37.697).abs() < 1e-3);
    assert!(stat < critical, "chi-square {stat} ≥ {critical}");
}

#[test]
fn pairs_are_distinct_within_a_batch_when_possible() {
    let partial = sixteen_pair_pool();
    let mut rng = seeded(3);
    let batch = sample_equiv_pairs(&partial, 16, &mut rng).unwrap();
    assert_eq!(batch.pairs.iter().collect::<HashSet<_>>().len(), 16);
    // more than the pool: repeats are allowed
    assert_eq!(sample_equiv_pairs(&partial, 40, &mut rng).unwrap().len(), 40);
}

#[test]
fn singleton_classes_have_no_pairs() {
    let data = make_dataset(&DatasetKind::TwoMoons { noise: 0.1 }, 6, 0).unwrap();
    let split = split_semi(&data, 4, 0, 0, 0).unwrap();
    let partial = build_equivalence_classes(&split, ClassMode::PerLabel, 0).unwrap();
    assert!(partial.equivalence_classes().iter().all(|c| c.len() < 2));
    assert!(matches!(
        sample_equiv_pairs(&partial, 1, &mut seeded(0)),
        Err(Error::EmptyPairPool(_))
    ));
}

#[test]
fn identity_augmentation_is_a_no_op() {
    let x = Tensor::from_rows(&[vec![1.0, -2.0], vec![0.5, 0.25]]).unwrap();
    assert_eq!(augment(&x, &AugmentPolicy::Identity, &mut seeded(0)).unwrap(), x);
    let flipped = augment(&x, &AugmentPolicy::AxisFlip { p: 1.0 }, &mut seeded(0)).unwrap();
    assert_eq!(flipped, x.map(|v| -v));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn splits_partition_the_dataset(
        n in 60usize..200,
        n_labeled in 2usize..20,
        n_validation in 0usize..10,
        n_test in 0usize..30,
        seed in 0u64..1000,
    ) {
        let data = make_dataset(&DatasetKind::TwoMoons { noise: 0.1 }, n, seed).unwrap();
        let split = split_semi(&data, n_labeled, n_validation, n_test, seed).unwrap();
        let parts = [split.labeled(), split.unlabeled(), split.validation(), split.test()];
        let mut all: Vec<usize> = parts.iter().flat_map(|p| p.iter().copied()).collect();
        prop_assert_eq!(all.len(), n);
        all.sort_unstable();
        all.dedup();
        prop_assert_eq!(all.len(), n);
        prop_assert_eq!(split.labeled().len(), n_labeled);
        prop_assert_eq!(split.validation().len(), n_validation);
        prop_assert_eq!(split.test().len(), n_test);
        // stratified: every class present, counts differ by at most one
        let mut per_class = [0usize; 2];
        for &i in split.labeled() {
            per_class[data.labels()[i]] += 1;
        }
        prop_assert!(per_class.iter().all(|&c| c >= 1));
        prop_assert!(per_class[0].abs_diff(per_class[1]) <= 1);
    }

    #[test]
    fn fixed_size_classes_respect_size_and_labels(size in 2usize..6, seed in 0u64..500) {
        let kind = DatasetKind::Blobs { classes: 3, spread: 1.0, dim: 2 };
        let data = make_dataset(&kind, 90, seed).unwrap();
        let split = split_semi(&data, 6, 0, 20, seed).unwrap();
        let partial = build_equivalence_classes(&split, ClassMode::FixedSize { size }, seed).unwrap();
        let mut covered = 0;
        for class in partial.equivalence_classes() {
            prop_assert!(class.len() <= size && !class.is_empty());
            let label = partial.hidden_label(class.members[0]);
            prop_assert!(class.members.iter().all(|&m| partial.hidden_label(m) == label));
            covered += class.len();
        }
        prop_assert_eq!(covered, partial.unlabeled().len());
    }
}
