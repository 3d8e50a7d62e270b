use fiwkit::datasets::LabeledDataset;
use fiwkit::network::{quantise_network, Architecture, LayerSpec, PtqConfig};
use fiwkit::qat::{evaluate, evaluate_int, train, Optimizer, TrainConfig};
use fiwkit::quant::ScaleRule;

/// Bright-left vs bright-right 2x2 images, 40 per class.
fn separable() -> LabeledDataset {
    let mut images = Vec::new();
    let mut labels = Vec::new();
    for i in 0..80u32 {
        let class = (i % 2) as u8;
        let hi = 180 + (i * 7 % 70) as u8;
        let lo = (i * 13 % 60) as u8;
        images.push(if class == 0 {
            vec![hi, lo, hi, lo]
        } else {
            vec![lo, hi, lo, hi]
        });
        labels.push(class);
    }
    LabeledDataset {
        shape: [1, 2, 2],
        images,
        labels,
        split: "separable".into(),
    }
}

fn dense_arch() -> Architecture {
    Architecture {
        name: "linear".into(),
        input_shape: [1, 2, 2],
        input_bits: 8,
        layers: vec![LayerSpec::Flatten, LayerSpec::Dense { out_features: 2 }],
    }
}

#[test]
fn plain_sgd_separates_linearly_separable_data() {
    let ds = separable();
    let cfg = TrainConfig {
        epochs: 200,
        batch_size: 8,
        learning_rate: 0.1,
        lr_decay: 1.0,
        ..TrainConfig::default()
    };
    let out = train(&dense_arch(), &cfg, &ds, &ds).unwrap();
    assert_eq!(out.log.len(), 200);
    assert_eq!(evaluate(&out.net, &ds).unwrap(), 1.0);
    assert!(out.log.last().unwrap().loss < out.log[0].loss);
}

#[test]
fn two_bit_qat_then_integer_inference_separates() {
    let ds = separable();
    let cfg = TrainConfig {
        epochs: 100,
        batch_size: 8,
        learning_rate: 0.05,
        optimizer: Optimizer::adam(),
        bits: Some(2),
        ..TrainConfig::default()
    };
    let out = train(&dense_arch(), &cfg, &ds, &ds).unwrap();
    assert_eq!(out.log.last().unwrap().test_acc, 1.0);
    let int = quantise_network(&out.net, &PtqConfig::symmetric(2, ScaleRule::MaxAbs)).unwrap();
    assert_eq!(evaluate_int(&int, &ds).unwrap(), 1.0);
}

#[test]
fn training_is_reproducible_and_seed_sensitive() {
    let ds = separable();
    let cfg = TrainConfig {
        epochs: 3,
        batch_size: 4,
        ..TrainConfig::default()
    };
    let a = train(&dense_arch(), &cfg, &ds, &ds).unwrap();
    let b = train(&dense_arch(), &cfg, &ds, &ds).unwrap();
    assert_eq!(a.net, b.net);
    assert_eq!(a.log, b.log);
    let c = train(&dense_arch(), &TrainConfig { seed: 2, ..cfg }, &ds, &ds).unwrap();
    assert_ne!(a.net, c.net);
}

#[test]
fn divergence_is_reported() {
    let ds = separable();
    let cfg = TrainConfig {
        epochs: 50,
        learning_rate: 1e6,
        lr_decay: 1.0,
        ..TrainConfig::default()
    };
    let arch = Architecture {
        layers: vec![
            LayerSpec::Flatten,
            LayerSpec::Dense { out_features: 2 },
            LayerSpec::Square,
            LayerSpec::Dense { out_features: 2 },
        ],
        ..dense_arch()
    };
    assert!(matches!(
        train(&arch, &cfg, &ds, &ds),
        Err(fiwkit::Error::Diverged { .. })
    ));
}
