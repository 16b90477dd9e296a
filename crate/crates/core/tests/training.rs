use normaug::autodiff::Tensor;
use normaug::datagen::{Dataset, GenConfig};
use normaug::experiment::Benchmark;
use normaug::inference::{FusionStrategy, SubpathScope};
use normaug::model::{Model, ModelConfig};
use normaug::normbank::enumerate_reduced_combinations;
use normaug::rng;
use normaug::training::{
    sample_batch, sample_combination, train, train_step, write_metrics, CombinationMode, Sgd, SgdConfig, TrainConfig,
    METRICS_HEADER,
};
use normaug::Error;

fn toy() -> Dataset<f64> {
    // Two domains, two linearly separable classes.
    let mut x = Vec::new();
    let (mut labels, mut domains) = (Vec::new(), Vec::new());
    for d in 0..2 {
        for i in 0..20 {
            let c = i % 2;
            let s = if c == 0 { -1.0 } else { 1.0 };
            let jitter = (i as f64 * 0.37 + d as f64).sin() * 0.3;
            x.extend([s * 2.0 + jitter + d as f64, 0.5 * jitter - d as f64, s + 0.1 * jitter]);
            labels.push(c);
            domains.push(d);
        }
    }
    Dataset::new(Tensor::new(vec![40, 3], x).unwrap(), labels, domains, 2, 2).unwrap()
}

fn toy_model(use_aug: bool) -> Model<f64> {
    Model::init(
        ModelConfig {
            input_dim: 3,
            hidden: vec![6],
            classes: 2,
            domains: 2,
            use_aug,
            ..ModelConfig::default()
        },
        5,
    )
    .unwrap()
}

fn small_bench() -> Benchmark {
    let gen = GenConfig {
        per_cell: 24,
        dim: 6,
        classes: 3,
        ..GenConfig::default()
    };
    Benchmark::generate(&gen, 0.25).unwrap()
}

fn small_train() -> TrainConfig {
    TrainConfig {
        epochs: 3,
        per_domain_batch: 6,
        ..TrainConfig::default()
    }
}

#[test]
fn loss_decreases_on_separable_toy() {
    let data = toy();
    let mut m = toy_model(true);
    let parts = m.partitions().unwrap();
    let mut opt = Sgd::new(TrainConfig::default().sgd());
    let mut r = rng::stream(0, 3);
    let mut losses = Vec::new();
    for step in 0..50 {
        let b = sample_batch(&data, 8, &mut r).unwrap();
        let p = sample_combination(&parts, &mut r, CombinationMode::Random).unwrap();
        losses.push(train_step(&mut m, &b, Some(p), &mut opt, 1.0, 1.0, (1, step + 1)).unwrap().loss);
    }
    let head: f64 = losses[..5].iter().sum::<f64>() / 5.0;
    let tail: f64 = losses[45..].iter().sum::<f64>() / 5.0;
    assert!(tail < head, "{head} -> {tail}");
}

#[test]
fn zero_learning_rate_freezes_parameters() {
    let data = toy();
    let mut m = toy_model(true);
    let before = m.clone();
    let mut opt = Sgd::new(SgdConfig {
        lr_backbone: 0.0,
        lr_classifier: 0.0,
        momentum: 0.9,
        weight_decay: 5e-4,
    });
    let parts = m.partitions().unwrap();
    let mut r = rng::stream(0, 4);
    for _ in 0..3 {
        let b = sample_batch(&data, 4, &mut r).unwrap();
        train_step(&mut m, &b, Some(&parts[0]), &mut opt, 1.0, 1.0, (1, 1)).unwrap();
    }
    let mut same = true;
    m.visit_params(|name, t, _| {
        before.visit_params(|n, u, _| {
            if n == name {
                same &= t.data() == u.data();
            }
        })
    });
    assert!(same);
}

#[test]
fn without_augmentation_there_is_no_bank() {
    let data = toy();
    let mut m = toy_model(false);
    assert!(!m.has_bank());
    let mut opt = Sgd::new(TrainConfig::default().sgd());
    let b = sample_batch(&data, 4, &mut rng::stream(0, 5)).unwrap();
    let out = train_step(&mut m, &b, None, &mut opt, 1.0, 1.0, (1, 1)).unwrap();
    assert_eq!(out.loss, out.main_loss);
}

#[test]
fn reduced_partitions_drawn_uniformly() {
    let parts = enumerate_reduced_combinations(3).unwrap();
    let mut r = rng::stream(42, 7);
    let mut counts = vec![0usize; parts.len()];
    for _ in 0..4000 {
        let p = sample_combination(&parts, &mut r, CombinationMode::Random).unwrap();
        counts[parts.iter().position(|q| q == p).unwrap()] += 1;
    }
    for c in counts {
        let f = c as f64 / 4000.0;
        assert!((f - 0.25).abs() <= 0.03, "{f}");
    }
    for _ in 0..50 {
        assert!(sample_combination(&parts, &mut r, CombinationMode::SingleOnly).unwrap().is_all_singletons());
    }
}

#[test]
fn seeded_training_is_reproducible() {
    let bench = small_bench();
    let cfg = small_train();
    let run = || {
        let mut m = Model::init(bench.model_config(&ModelConfig::default()), 3).unwrap();
        let metrics = train(&mut m, &bench.splits(), &cfg, FusionStrategy::MeanMeanIM, SubpathScope::IndependentOnly, |_| {})
            .unwrap();
        (m, metrics)
    };
    let (m1, a) = run();
    let (m2, b) = run();
    assert_eq!(m1, m2);
    assert_eq!(a, b);
    assert_eq!(a.len(), 3);
    assert_eq!(m1.epoch, 3);
    let mut csv = Vec::new();
    write_metrics(&a, &mut csv).unwrap();
    let text = String::from_utf8(csv).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], METRICS_HEADER);
    assert_eq!(lines.len(), 4);
    assert!(lines[3].starts_with("3,"));
}

#[test]
fn non_finite_loss_aborts() {
    let bench = small_bench();
    let mut m = Model::init(bench.model_config(&ModelConfig::default()), 3).unwrap();
    m.classifiers_mut().main_mut().weight.data_mut()[0] = f64::NAN;
    let err = train(&mut m, &bench.splits(), &small_train(), FusionStrategy::MainOnly, SubpathScope::IndependentOnly, |_| {})
        .unwrap_err();
    assert!(matches!(err, Error::NonFiniteLoss { epoch: 1, iteration: 1, .. }), "{err}");
}
