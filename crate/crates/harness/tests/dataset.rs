use std::collections::BTreeSet;

use proptest::prelude::*;
use repsgg_harness::dataset::*;

fn histogram(data: &Dataset, predicates: usize) -> Vec<usize> {
    let mut h = vec![0; predicates];
    for s in data.train.scenes.iter().chain(&data.test.scenes) {
        for t in &s.triplets {
            h[t[1]] += 1;
        }
    }
    h
}

fn balanced(zipf: f64, scenes: usize, seed: u64) -> DatasetSpec {
    DatasetSpec {
        train_scenes: scenes,
        test_scenes: 0,
        classes: 4,
        predicates: 5,
        zipf_exponent: zipf,
        class_fraction: 1.0,
        zero_shot_fraction: 0.0,
        seed,
        ..Default::default()
    }
}

#[test]
fn fixed_seed_gives_identical_files() {
    let spec = DatasetSpec { train_scenes: 30, test_scenes: 10, seed: 5, ..Default::default() };
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    generate_dataset(&spec).unwrap().write(a.path()).unwrap();
    generate_dataset(&spec).unwrap().write(b.path()).unwrap();
    for split in [Split::Train, Split::Test] {
        let x = std::fs::read(a.path().join(split.file_name())).unwrap();
        let y = std::fs::read(b.path().join(split.file_name())).unwrap();
        assert_eq!(x, y);
    }
    let reseeded = generate_dataset(&DatasetSpec { seed: 6, ..spec.clone() }).unwrap();
    assert_ne!(reseeded.train, generate_dataset(&spec).unwrap().train);
}

#[test]
fn files_round_trip_exactly() {
    let data =
        generate_dataset(&DatasetSpec { train_scenes: 20, test_scenes: 5, seed: 2, ..Default::default() }).unwrap();
    let dir = tempfile::tempdir().unwrap();
    data.write(dir.path()).unwrap();
    assert_eq!(SplitFile::read(&dir.path().join(Split::Train.file_name())).unwrap(), data.train);
    assert_eq!(SplitFile::read(&dir.path().join(Split::Test.file_name())).unwrap(), data.test);
}

#[test]
fn zero_exponent_is_uniform() {
    let data = generate_dataset(&balanced(0.0, 2000, 3)).unwrap();
    let h = histogram(&data, 5);
    let total: usize = h.iter().sum();
    let expect = total as f64 / 5.0;
    let chi2: f64 = h.iter().map(|&c| (c as f64 - expect).powi(2) / expect).sum();
    // 0.1% critical value of chi-square with 4 degrees of freedom.
    assert!(chi2 < 18.47, "histogram {h:?}, chi2 {chi2}");
}

#[test]
fn exponent_two_gives_head_to_tail_ratio_25() {
    let mut h = vec![0; 5];
    let mut seed = 0;
    while h.iter().sum::<usize>() < 10_000 {
        let data = generate_dataset(&balanced(2.0, 500, 100 + seed)).unwrap();
        h.iter_mut().zip(histogram(&data, 5)).for_each(|(a, b)| *a += b);
        seed += 1;
    }
    let ratio = h[0] as f64 / h[4] as f64;
    // Relative standard error of the ratio is sqrt(1/n_head + 1/n_tail).
    let rel_se = (1.0 / h[0] as f64 + 1.0 / h[4] as f64).sqrt();
    assert!((ratio / 25.0 - 1.0).abs() < 4.0 * rel_se, "histogram {h:?}, ratio {ratio}");
}

#[test]
fn scenes_satisfy_invariants() {
    let spec = DatasetSpec {
        train_scenes: 150,
        test_scenes: 80,
        classes: 8,
        predicates: 10,
        zipf_exponent: 1.5,
        geometry_families: Some(4),
        seed: 11,
        ..Default::default()
    };
    let data = generate_dataset(&spec).unwrap();
    for split in [&data.train, &data.test] {
        for s in &split.scenes {
            let mut seen = BTreeSet::new();
            for t in &s.triplets {
                assert!(t[0] < s.entities.len() && t[2] < s.entities.len() && t[1] < 10);
                assert_ne!(t[0], t[2]);
                assert!(seen.insert(*t), "duplicate {t:?}");
            }
            for e in &s.entities {
                let b = e.bbox;
                assert!(b[0] >= 0.0 && b[1] >= 0.0 && b[2] <= 1.0 && b[3] <= 1.0 && b[0] < b[2] && b[1] < b[3]);
                let diag = (b[2] - b[0]).hypot(b[3] - b[1]) * 128.0;
                assert_eq!(e.scale, scale_level(diag));
                assert!(e.class < 8);
            }
        }
        assert!((split.priors.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(split.priors.iter().all(|&p| p > 0.0));
    }
    assert_eq!(data.train.priors, smoothed_priors(&data.train.scenes, 10));
    // The registry lists exactly the training combinations.
    let mut train_combos = BTreeSet::new();
    for s in &data.train.scenes {
        for t in &s.triplets {
            train_combos.insert([s.entities[t[0]].class, t[1], s.entities[t[2]].class]);
        }
    }
    assert_eq!(data.train.seen_triples, train_combos.iter().copied().collect::<Vec<_>>());
    assert_eq!(data.test.seen_triples, data.train.seen_triples);
    // Some test relations are zero-shot, and every predicate occurs in training.
    let unseen = data
        .test
        .scenes
        .iter()
        .flat_map(|s| s.triplets.iter().map(move |t| [s.entities[t[0]].class, t[1], s.entities[t[2]].class]))
        .filter(|c| !train_combos.contains(c))
        .count();
    assert!(unseen > 0);
    let h =
        histogram(&Dataset { train: data.train.clone(), test: SplitFile { scenes: vec![], ..data.test.clone() } }, 10);
    assert!(h.iter().all(|&c| c > 0), "{h:?}");
}

#[test]
fn invalid_specs_are_rejected() {
    for spec in [
        DatasetSpec { predicates: 0, ..Default::default() },
        DatasetSpec { entities_per_scene: [1, 3], ..Default::default() },
        DatasetSpec { box_size: [0.3, 0.1], ..Default::default() },
        DatasetSpec { zero_shot_fraction: 1.0, ..Default::default() },
    ] {
        assert!(generate_dataset(&spec).is_err());
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(40))]
    #[test]
    fn generated_scenes_are_well_formed(
        seed in 0u64..10_000,
        classes in 2usize..8,
        predicates in 1usize..8,
        zipf in 0.0f64..2.5,
        zero_shot in 0.0f64..0.3,
    ) {
        let spec = DatasetSpec {
            train_scenes: 15,
            test_scenes: 8,
            classes,
            predicates,
            zipf_exponent: zipf,
            zero_shot_fraction: zero_shot,
            seed,
            ..Default::default()
        };
        let data = generate_dataset(&spec).unwrap();
        for split in [&data.train, &data.test] {
            prop_assert!((split.priors.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            for s in &split.scenes {
                let n = s.entities.len();
                let unique: BTreeSet<_> = s.triplets.iter().collect();
                prop_assert_eq!(unique.len(), s.triplets.len());
                for t in &s.triplets {
                    prop_assert!(t[0] < n && t[2] < n && t[0] != t[2] && t[1] < predicates);
                }
                for e in &s.entities {
                    let b = e.bbox;
                    prop_assert!(e.class < classes && 0.0 <= b[0] && b[0] < b[2] && b[2] <= 1.0 && 0.0 <= b[1] && b[1] < b[3] && b[3] <= 1.0);
                }
            }
            prop_assert!(split.samples(classes).is_ok());
        }
    }
}
