use netdisguise::disguise::DisguiseConfig;
use netdisguise::graph::ModelGraph;
use netdisguise::steganalysis::{
    build_pool, cross_validate, histogram, histogram_feature, ArchTemplate, DetectorConfig, DetectorKind, ModelLabel, PoolSpec, PoolTraining, TaskPair,
};
use netdisguise::tasks::{Generator, TaskSpec};
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn uniform_values_fill_bins_evenly() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let n = 1_000_000;
    let v: Vec<f32> = (0..n).map(|_| rng.random::<f32>()).collect();
    let h = histogram(&v, 100).unwrap();
    // multinomial cell sd; 4σ keeps the family-wise level over 100 bins near 0.6%
    let sd = (0.01f64 * 0.99 / n as f64).sqrt();
    for (b, p) in h.iter().enumerate() {
        assert!((p - 0.01).abs() <= 4.0 * sd, "bin {b}: {p}");
    }
}

proptest! {
    #[test]
    fn histogram_is_normalized_and_order_free(mut v in prop::collection::vec(-1e3f32..1e3, 1..400), seed in any::<u64>()) {
        let h = histogram(&v, 100).unwrap();
        prop_assert!((h.iter().sum::<f64>() - 1.0).abs() <= 1e-6);
        v.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        prop_assert_eq!(histogram(&v, 100).unwrap(), h);
    }
}

fn detector() -> DetectorConfig {
    DetectorConfig { folds: 5, epochs: 60, lr: 0.01, batch_size: 16, seed: 3 }
}

#[test]
fn identical_features_give_chance_accuracy() {
    let x = vec![vec![0.01; 100]; 200];
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut y: Vec<usize> = (0..200).map(|i| i % 2).collect();
    y.shuffle(&mut rng);
    for kind in [DetectorKind::Linear, DetectorKind::Mlp] {
        let acc = cross_validate(kind, &x, &y, &detector()).unwrap();
        // binomial sd at n = 200 is 0.035
        assert!((acc - 0.5).abs() <= 0.11, "{kind:?}: {acc}");
    }
}

#[test]
fn shuffled_labels_concentrate_at_chance() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x: Vec<Vec<f64>> = (0..200).map(|_| (0..100).map(|_| rng.random::<f64>()).collect()).collect();
    let mut y: Vec<usize> = (0..200).map(|i| i % 2).collect();
    y.shuffle(&mut rng);
    for kind in [DetectorKind::Linear, DetectorKind::Mlp] {
        let acc = cross_validate(kind, &x, &y, &detector()).unwrap();
        assert!((acc - 0.5).abs() <= 0.11, "{kind:?}: {acc}");
    }
}

#[test]
fn planted_outlier_is_detected() {
    let archs = [
        ArchTemplate { name: "a".into(), conv_filters: vec![4, 8], batchnorm: true, hidden: None },
        ArchTemplate { name: "b".into(), conv_filters: vec![6, 6, 8], batchnorm: false, hidden: Some(8) },
    ];
    let mut x = Vec::new();
    let mut y = Vec::new();
    for seed in 0..40u64 {
        let arch = &archs[seed as usize % 2];
        let g = ModelGraph::init(arch.layers([1, 8, 8], 4), &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        let mut planted = g.clone();
        planted.params_mut()[seed as usize * 7 % g.param_count()] = 1e6;
        x.push(histogram_feature(&g).unwrap());
        y.push(0);
        x.push(histogram_feature(&planted).unwrap());
        y.push(1);
    }
    for kind in [DetectorKind::Linear, DetectorKind::Mlp] {
        let acc = cross_validate(kind, &x, &y, &detector()).unwrap();
        assert!(acc >= 0.95, "{kind:?}: {acc}");
    }
}

#[test]
fn degenerate_training_split_is_rejected() {
    let x = vec![vec![0.0; 100]; 10];
    assert!(cross_validate(DetectorKind::Linear, &x, &[0; 10], &detector()).is_err());
}

fn tiny_pool() -> PoolSpec {
    let spec = |generator, seed| TaskSpec { generator, seed, input_shape: [1, 8, 8], train_size: 96, test_size: 48 };
    PoolSpec {
        task_pairs: vec![
            TaskPair {
                name: "blobs-textures".into(),
                secret: spec(Generator::Blobs { classes: 4, spread: 0.3, jitter: 0.5, noise: 0.05 }, 1),
                stego: spec(Generator::Textures { noise: 0.3 }, 2),
            },
            TaskPair {
                name: "spiral-blobs".into(),
                secret: spec(Generator::Spiral { classes: 3, turns: 0.75, jitter: 0.3, noise: 0.05 }, 3),
                stego: spec(Generator::Blobs { classes: 2, spread: 0.3, jitter: 0.5, noise: 0.05 }, 4),
            },
        ],
        architectures: vec![
            ArchTemplate { name: "bn".into(), conv_filters: vec![8, 16, 16], batchnorm: true, hidden: None },
            ArchTemplate { name: "deep".into(), conv_filters: vec![4, 4, 6], batchnorm: false, hidden: Some(6) },
        ],
        seeds: vec![10, 11],
        training: PoolTraining {
            secret_epochs: 3,
            secret_lr: 0.01,
            disguise: DisguiseConfig { epochs_secret: 1, epochs_stego: 2, grad_batches: 2, tau_se: Some(1.0), tau_st: f64::INFINITY, ..Default::default() },
        },
        detector: detector(),
        key: 5,
    }
}

#[test]
fn pool_grid_is_balanced_and_reproducible() {
    let spec = tiny_pool();
    let pool = build_pool(&spec).unwrap();
    assert!(pool.failures.is_empty(), "{:?}", pool.failures);
    let covers = pool.members.iter().filter(|m| m.label == ModelLabel::Cover).count();
    let stegos = pool.members.iter().filter(|m| m.label == ModelLabel::Stego).count();
    assert_eq!((covers, stegos), (8, 8));
    for pair in pool.members.chunks(2) {
        assert_eq!(pair[0].param_count, pair[1].param_count);
    }
    let again = build_pool(&spec).unwrap();
    assert_eq!(serde_json::to_string(&again).unwrap(), serde_json::to_string(&pool).unwrap());
}

#[test]
fn failing_cells_are_reported() {
    let mut spec = tiny_pool();
    // the second architecture cannot carry its side information
    spec.architectures[1] = ArchTemplate { name: "tiny".into(), conv_filters: vec![1], batchnorm: true, hidden: None };
    let pool = build_pool(&spec).unwrap();
    assert_eq!(pool.members.len(), 8);
    assert_eq!(pool.failures.len(), 4);
    assert!(pool.failures.iter().all(|f| f.architecture == "tiny"));
}
