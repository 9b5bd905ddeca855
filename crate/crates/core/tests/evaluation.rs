mod common;

use capsgan_core::datasets::{
    make_synthetic, LabeledDataset, Provenance, SyntheticSpec, ValueRange,
};
use capsgan_core::evaluation::{
    gam_battle, gam_both, label_spread, label_spread_fit, semi_sup_experiment, stratified_sample,
    Affinity, EvalError, GamConfig, LabelSpreadConfig, SemiSupConfig, Verdict,
};
use capsgan_core::gan::{GanConfig, GanModel, Variant};
use capsgan_core::rng::SeededRng;
use capsgan_core::Tensor;
use common::{blobs, closed_form, mutual_knn_dense, one_label_each};
use nalgebra::DMatrix;

fn points(rng: &mut SeededRng, n: usize, dim: usize) -> Vec<Vec<f64>> {
    (0..n)
        .map(|_| (0..dim).map(|_| rng.normal()).collect())
        .collect()
}

fn tight() -> LabelSpreadConfig {
    LabelSpreadConfig {
        tol: 1e-13,
        max_iters: 100_000,
        ..LabelSpreadConfig::default()
    }
}

#[test]
fn iteration_reaches_the_closed_form() {
    let mut rng = SeededRng::new(17);
    for (n, classes, affinity) in [
        (40, 2, Affinity::Knn { k: 7 }),
        (200, 3, Affinity::Knn { k: 7 }),
        (120, 4, Affinity::Knn { k: 3 }),
        (60, 3, Affinity::Rbf { gamma: 0.5 }),
    ] {
        let dim = 3;
        let x = points(&mut rng, n, dim);
        let labels: Vec<Option<usize>> = (0..n)
            .map(|i| (i % 5 == 0).then_some(i / 5 % classes))
            .collect();
        let cfg = LabelSpreadConfig {
            affinity,
            alpha: 0.2 + 0.6 * rng.uniform(),
            ..tight()
        };
        let fit = label_spread(&x.concat(), dim, &labels, classes, &cfg).unwrap();
        assert!(fit.converged);

        let w = match affinity {
            Affinity::Knn { k } => mutual_knn_dense(&x, k),
            Affinity::Rbf { gamma } => DMatrix::from_fn(n, n, |i, j| {
                let d: f64 = x[i].iter().zip(&x[j]).map(|(p, q)| (p - q) * (p - q)).sum();
                if i == j {
                    0.0
                } else {
                    (-gamma * d).exp()
                }
            }),
        };
        let y = DMatrix::from_fn(
            n,
            classes,
            |i, c| if labels[i] == Some(c) { 1.0 } else { 0.0 },
        );
        let f = closed_form(&w, &y, cfg.alpha);
        for i in 0..n {
            for c in 0..classes {
                let got = fit.row(i)[c];
                assert!(
                    (got - f[(i, c)]).abs() <= 1e-6,
                    "n={n} node {i} class {c}: {got} vs {}",
                    f[(i, c)]
                );
                assert!(got >= 0.0);
            }
        }
    }
}

#[test]
fn changes_shrink_geometrically() {
    let mut rng = SeededRng::new(3);
    let x = points(&mut rng, 150, 2);
    let labels: Vec<Option<usize>> = (0..150).map(|i| (i < 6).then_some(i % 2)).collect();
    let fit = label_spread(&x.concat(), 2, &labels, 2, &tight()).unwrap();
    assert!(
        fit.deltas.windows(2).all(|w| w[1] <= w[0] + 1e-15),
        "{:?}",
        fit.deltas
    );
    assert_eq!(fit.iterations, fit.deltas.len());
}

#[test]
fn fully_labeled_graph_keeps_its_labels() {
    let mut rng = SeededRng::new(9);
    let x = points(&mut rng, 80, 4);
    let truth: Vec<usize> = (0..80).map(|_| rng.below(3)).collect();
    let labels: Vec<Option<usize>> = truth.iter().map(|&l| Some(l)).collect();
    // with alpha < 1/2 a node's own label outweighs anything its neighbours send
    let cfg = LabelSpreadConfig {
        alpha: 0.2,
        ..tight()
    };
    let fit = label_spread(&x.concat(), 4, &labels, 3, &cfg).unwrap();
    assert_eq!(fit.labels, truth);
}

#[test]
fn two_blobs_from_one_label_each() {
    let cfg = LabelSpreadConfig {
        affinity: Affinity::Rbf { gamma: 0.25 },
        ..LabelSpreadConfig::default()
    };
    for seed in 0..10 {
        let (x, truth) = blobs(seed);
        let fit = label_spread(&x, 2, &one_label_each(&truth), 2, &cfg).unwrap();
        let correct = (2..102).filter(|&i| fit.labels[i] == truth[i]).count();
        assert!(correct >= 99, "seed {seed}: {correct}/100");
    }
}

#[test]
fn mutual_knn_errors_come_from_unreached_fragments() {
    for seed in 0..10 {
        let (x, truth) = blobs(seed);
        let fit = label_spread(
            &x,
            2,
            &one_label_each(&truth),
            2,
            &LabelSpreadConfig::default(),
        )
        .unwrap();
        for i in (2..102).filter(|&i| fit.labels[i] != truth[i]) {
            assert!(
                fit.prior_assigned.contains(&i),
                "seed {seed}: node {i} reached but misclassified"
            );
            assert!(fit.row(i).iter().all(|&v| v == 0.0));
        }
    }
}

#[test]
fn spreading_input_errors() {
    let cfg = LabelSpreadConfig::default();
    assert!(matches!(
        label_spread(&[0.0, 1.0], 1, &[None, None], 2, &cfg),
        Err(EvalError::NoLabels)
    ));
    assert!(matches!(
        label_spread(&[0.0, 1.0, 2.0], 1, &[Some(0), None], 2, &cfg),
        Err(EvalError::LengthMismatch { .. })
    ));
    assert!(label_spread(&[0.0, 1.0], 1, &[Some(2), None], 2, &cfg).is_err());
    let bad = LabelSpreadConfig { alpha: 1.0, ..cfg };
    assert!(matches!(
        label_spread(&[0.0, 1.0], 1, &[Some(0), None], 2, &bad),
        Err(EvalError::Config(_))
    ));
}

fn synthetic(per_mode: usize, modes: usize, seed: u64) -> LabeledDataset {
    let spec = SyntheticSpec {
        samples_per_mode: per_mode,
        modes,
        ..SyntheticSpec::default()
    };
    make_synthetic(&spec, seed).unwrap()
}

#[test]
fn fit_on_images_uses_labeled_nodes_first() {
    let ds = synthetic(30, 3, 4);
    let labeled = ds.subset(&[0, 30, 60]).unwrap();
    let cfg = LabelSpreadConfig {
        affinity: Affinity::Rbf { gamma: 0.5 },
        ..LabelSpreadConfig::default()
    };
    let fit = label_spread_fit(&labeled, &ds.images, &cfg).unwrap();
    assert_eq!(fit.labels.len(), 3 + 90);
    assert_eq!(&fit.labels[..3], &[0, 1, 2]);
    let acc = fit.labels[3..]
        .iter()
        .zip(&ds.labels)
        .filter(|(a, b)| a == b)
        .count();
    assert_eq!(acc, 90);
    let wrong = Tensor::zeros(&[2, 1, 4, 4]);
    assert!(matches!(
        label_spread_fit(&labeled, &wrong, &LabelSpreadConfig::default()),
        Err(EvalError::ShapeMismatch { .. })
    ));
}

#[test]
fn stratified_sampling_covers_every_class() {
    let images = Tensor::zeros(&[100, 1, 1, 1]);
    let labels: Vec<usize> = (0..100)
        .map(|i| {
            if i < 70 {
                0
            } else if i < 95 {
                1
            } else {
                2
            }
        })
        .collect();
    let ds = LabeledDataset::new(images, labels, 4, Provenance::Real, ValueRange::Raw01).unwrap();
    let whole = stratified_sample(&ds, 100, 5).unwrap();
    assert_eq!(whole, (0..100).collect::<Vec<_>>());
    for n in [3, 4, 10, 37, 90] {
        let idx = stratified_sample(&ds, n, 5).unwrap();
        assert_eq!(idx.len(), n);
        assert!(idx.windows(2).all(|w| w[0] < w[1]));
        let counts = ds.subset(&idx).unwrap().class_counts();
        assert!(counts[..3].iter().all(|&c| c >= 1), "{counts:?}");
        assert_eq!(counts[3], 0);
        // shares stay within one of proportional after the guaranteed slot
        let rest = n - 3;
        for (c, &total) in [70usize, 25, 5].iter().enumerate() {
            let share = rest as f64 * total as f64 / 100.0;
            assert!(
                (counts[c] as f64 - 1.0 - share).abs() <= 1.0 + 1e-9,
                "n={n} class {c}: {counts:?}"
            );
        }
    }
    assert_eq!(
        stratified_sample(&ds, 10, 5).unwrap(),
        stratified_sample(&ds, 10, 5).unwrap()
    );
    assert!(matches!(
        stratified_sample(&ds, 2, 0),
        Err(EvalError::Stratification { class: 2 })
    ));
    assert!(matches!(
        stratified_sample(&ds, 101, 0),
        Err(EvalError::Config(_))
    ));
}

fn model(variant: Variant, seed: u64) -> GanModel {
    GanModel::new(GanConfig::synthetic(variant, seed)).unwrap()
}

#[test]
fn self_battle_is_an_exact_tie() {
    let test = synthetic(50, 2, 8).to_signed();
    for variant in [Variant::Capsule, Variant::Convolutional] {
        let m = model(variant, 2);
        let cfg = GamConfig {
            n_samples: 200,
            ..GamConfig::default()
        };
        let r = match gam_battle(&m, &m, &test, &cfg, 4) {
            Ok(r) => r,
            // an untrained capsule critic may call every image fake
            Err(EvalError::DegenerateBattle { .. }) => continue,
            Err(e) => panic!("{e}"),
        };
        assert_eq!((r.r_samples, r.r_test, r.verdict), (1.0, 1.0, Verdict::Tie));
    }
}

#[test]
fn swapping_models_inverts_ratios() {
    let test = synthetic(50, 2, 8).to_signed();
    let cfg = GamConfig {
        n_samples: 300,
        ..GamConfig::default()
    };
    let (a, b) = (
        model(Variant::Convolutional, 1),
        model(Variant::Convolutional, 2),
    );
    let ab = gam_battle(&a, &b, &test, &cfg, 6).unwrap();
    let ba = gam_battle(&b, &a, &test, &cfg, 6).unwrap();
    assert!((ab.r_samples * ba.r_samples - 1.0).abs() <= 1e-12);
    assert!((ab.r_test * ba.r_test - 1.0).abs() <= 1e-12);
    assert_eq!(ab.verdict.flipped(), ba.verdict);
    let both = gam_both(&a, &b, &test, &cfg, 6).unwrap();
    assert_eq!(both.forward, ab);
    assert_eq!(both.reverse, ba);
    for acc in [
        ab.acc_d1_on_g2,
        ab.acc_d2_on_g1,
        ab.acc_d1_on_test,
        ab.acc_d2_on_test,
    ] {
        assert!((0.0..=1.0).contains(&acc));
    }
}

#[test]
fn battle_rejects_mismatched_models() {
    let small = model(Variant::Capsule, 1);
    let big = GanModel::new(GanConfig::mnist(Variant::Convolutional, 1)).unwrap();
    let test = synthetic(5, 2, 1).to_signed();
    assert!(matches!(
        gam_battle(&small, &big, &test, &GamConfig::default(), 0),
        Err(EvalError::ShapeMismatch { .. })
    ));
}

#[test]
fn semi_supervised_report_is_consistent() {
    let train = synthetic(100, 2, 1);
    let test = synthetic(40, 2, 2);
    let m = model(Variant::Capsule, 3);
    let cfg = SemiSupConfig {
        n_labeled: 10,
        n_unlabeled: 60,
        ..SemiSupConfig::default()
    };
    let r = semi_sup_experiment(&m, &train, &test, &cfg, 5).unwrap();
    assert_eq!((r.n_labeled, r.n_unlabeled, r.n_test), (10, 60, 80));
    assert_eq!(r.error_rate + r.accuracy, 1.0);
    assert!((r.majority_baseline_error - 0.5).abs() < 1e-12);
    assert_eq!(r, semi_sup_experiment(&m, &train, &test, &cfg, 5).unwrap());
    // real labeled points alone already separate two bar templates
    assert!(r.error_rate < r.majority_baseline_error, "{r:?}");

    let cfg = SemiSupConfig {
        n_labeled: 1,
        ..cfg
    };
    assert!(matches!(
        semi_sup_experiment(&m, &train, &test, &cfg, 5),
        Err(EvalError::Stratification { class: 1 })
    ));
}
