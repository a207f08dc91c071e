mod common;

use rwgcn_core::train::{
    make_toy_dataset, nesterov_step, schedule_lr, toy_network_config, train, unrolled_loss, unrolled_step,
    window_batch, GrowPlan, Nesterov, OptimizerConfig, TrainConfig,
};
use rwgcn_core::{Error, Mode, Network, NetworkConfig, SkeletonLayout, Variant};

fn tiny_coco(seed: u64) -> Network {
    Network::new(NetworkConfig::from_plan(2, 2, SkeletonLayout::coco18(), &[(4, 1), (4, 2)]).with_seed(seed)).unwrap()
}

#[test]
fn one_small_step_lowers_the_sample_loss() {
    let data = make_toy_dataset(20, 8, 11).unwrap();
    let opt = OptimizerConfig {
        lr: 1e-4,
        momentum: 0.0,
        weight_decay: 0.0,
        ..Default::default()
    };
    for i in 0..20 {
        let mut net = tiny_coco(100 + i as u64);
        let (w, p) = window_batch(&[&data.clips[i]], 1, 4).unwrap();
        let labels = [data.labels[i]];
        let before = unrolled_loss(&net, &w, p, &labels, Mode::Eval).unwrap();
        net.zero_grad();
        unrolled_step(&mut net, &w, p, &labels, Mode::Eval, false, false).unwrap();
        nesterov_step(&mut net, &mut Nesterov::new(), opt.lr, &opt);
        let after = unrolled_loss(&net, &w, p, &labels, Mode::Eval).unwrap();
        assert!(after < before, "sample {i}: {after} >= {before}");
    }
}

#[test]
fn seventy_epoch_lr_trace() {
    let data = make_toy_dataset(2, 8, 1).unwrap();
    let mut net = tiny_coco(2);
    let opt = OptimizerConfig {
        decay_epochs: vec![30, 60],
        restart_epochs: vec![40],
        ..Default::default()
    };
    let cfg = TrainConfig {
        epochs: 70,
        batch_size: 2,
        window_len: 8,
        ..Default::default()
    };
    let report = train(&mut net, &data, &opt, &cfg).unwrap();
    assert_eq!(report.metrics.len(), 70);
    for m in &report.metrics {
        assert_eq!(m.lr, schedule_lr(m.epoch, &opt));
    }
    assert_eq!(report.metrics[29].lr, 0.01);
    assert!((report.metrics[30].lr - 0.001).abs() < 1e-15);
    assert_eq!(report.metrics[40].lr, 0.01);
}

#[test]
fn smoothed_toy_loss_decreases() {
    let data = make_toy_dataset(64, 16, 0).unwrap();
    let mut net = Network::new(toy_network_config(1)).unwrap();
    let cfg = TrainConfig {
        epochs: 30,
        window_len: 8,
        seed: 3,
        ..Default::default()
    };
    let report = train(&mut net, &data, &OptimizerConfig::default(), &cfg).unwrap();
    let means: Vec<f64> = report
        .metrics
        .chunks(10)
        .map(|c| c.iter().map(|m| m.loss).sum::<f64>() / c.len() as f64)
        .collect();
    for pair in means.windows(2) {
        assert!(pair[1] < pair[0], "{means:?}");
    }
}

#[test]
fn every_feedback_variant_attaches_continuously() {
    let data = make_toy_dataset(8, 8, 5).unwrap();
    for variant in [Variant::Semantic, Variant::Control, Variant::SemanticControl] {
        let mut net = tiny_coco(6);
        let cfg = TrainConfig {
            epochs: 2,
            batch_size: 4,
            window_len: 4,
            grow: Some(GrowPlan {
                attach_epoch: 1,
                variant,
            }),
            ..Default::default()
        };
        let report = train(&mut net, &data, &OptimizerConfig::default(), &cfg).unwrap();
        let g = report.grow.unwrap();
        assert_eq!(g.epoch, 1);
        assert_eq!(g.loss_before, g.loss_after, "{variant}");
        assert_eq!(net.variant(), variant);
    }
}

#[test]
fn non_finite_input_reports_divergence() {
    let mut data = make_toy_dataset(2, 8, 7).unwrap();
    data.clips[0].data.data_mut()[0] = f64::NAN;
    let mut net = tiny_coco(8);
    let cfg = TrainConfig {
        epochs: 1,
        batch_size: 2,
        window_len: 8,
        ..Default::default()
    };
    match train(&mut net, &data, &OptimizerConfig::default(), &cfg) {
        Err(Error::Divergence {
            epoch: 0,
            step: 0,
            loss,
        }) => assert!(loss.is_nan()),
        other => panic!("{other:?}"),
    }
}

#[test]
fn bad_configs_are_rejected() {
    let data = make_toy_dataset(2, 8, 7).unwrap();
    let mut net = tiny_coco(9);
    let zero_epoch_grow = TrainConfig {
        grow: Some(GrowPlan {
            attach_epoch: 0,
            variant: Variant::Semantic,
        }),
        ..Default::default()
    };
    assert!(matches!(
        train(&mut net, &data, &OptimizerConfig::default(), &zero_epoch_grow),
        Err(Error::Config(_))
    ));
    let bad_lr = OptimizerConfig {
        lr: 0.0,
        ..Default::default()
    };
    assert!(matches!(
        train(&mut net, &data, &bad_lr, &TrainConfig::default()),
        Err(Error::Config(_))
    ));
    let mut three = data.clone();
    three.labels[0] = 2;
    assert!(matches!(
        train(&mut net, &three, &OptimizerConfig::default(), &TrainConfig::default()),
        Err(Error::Data(_))
    ));
}
