use std::f64::consts::PI;

use ccn_core::head::BBox;
use ccn_core::synthcam::{generate_dataset, GenConfig};
use ccn_core::tensor::Tensor;
use ccn_core::trainer::*;
use ccn_core::PadMode;

fn record(label: usize, angle_deg: f64, truth_deg: f64) -> EvalRecord {
    let b = BBox::new(16.0, 16.0, 20.0, 20.0);
    EvalRecord {
        label,
        ranking: vec![label, 3 - label],
        angle: angle_deg.to_radians(),
        angle_degenerate: false,
        azimuth: Some(truth_deg.to_radians()),
        pred_box: b,
        true_box: b,
    }
}

fn tiny_config(head_mode: HeadMode) -> (TrainConfig, GenConfig) {
    let gen = GenConfig { n_classes: 2, n_views: 4, image_size: 16, samples_per_cell: 5, ..GenConfig::default() };
    let cfg = TrainConfig {
        arch: Architecture { k: 3, n_views: 4, n_classes: 2, ch_in: 4, ch_out: 4, head_mode, pad_mode: PadMode::Wrap },
        backbone_widths: [4, 4, 4],
        epochs: 2,
        batch_size: 4,
        lr_decay_epochs: vec![1],
        ..TrainConfig::default()
    };
    (cfg, gen)
}

#[test]
fn plain_step_subtracts_the_gradient() {
    let mut p = vec![Tensor::from_vec(vec![1.0, -2.0])];
    let g = vec![Tensor::from_vec(vec![0.5, 0.25])];
    let mut v = vec![Tensor::zeros(&[2])];
    sgd_step(&mut p, &g, &mut v, 1.0, 0.0, 0.0).unwrap();
    assert_eq!(p[0].data(), &[0.5, -2.25]);
}

#[test]
fn momentum_accumulates_over_two_steps() {
    let g = vec![Tensor::from_vec(vec![2.0])];
    let mut p = vec![Tensor::from_vec(vec![0.0])];
    let mut v = vec![Tensor::zeros(&[1])];
    sgd_step(&mut p, &g, &mut v, 1.0, 0.9, 0.0).unwrap();
    sgd_step(&mut p, &g, &mut v, 1.0, 0.9, 0.0).unwrap();
    // g + (0.9 g + g)
    assert!((p[0].data()[0] + 2.0 * 2.9).abs() < 1e-12);
}

#[test]
fn weight_decay_pulls_toward_zero() {
    let mut p = vec![Tensor::from_vec(vec![4.0])];
    let mut v = vec![Tensor::zeros(&[1])];
    sgd_step(&mut p, &[Tensor::zeros(&[1])], &mut v, 0.5, 0.0, 0.25).unwrap();
    assert_eq!(p[0].data(), &[3.5]);
}

#[test]
fn rejected_step_changes_nothing() {
    let mut p = vec![Tensor::from_vec(vec![1.0]), Tensor::from_vec(vec![2.0])];
    let mut v = vec![Tensor::zeros(&[1]), Tensor::zeros(&[1])];
    let g = vec![Tensor::from_vec(vec![1.0]), Tensor::from_vec(vec![f64::NAN])];
    assert!(sgd_step(&mut p, &g, &mut v, 1.0, 0.9, 0.0).is_err());
    assert_eq!(p[0].data(), &[1.0]);
    assert_eq!(v[0].data(), &[0.0]);
}

#[test]
fn schedule_decays_at_listed_epochs() {
    let cfg = TrainConfig { lr: 0.01, lr_decay_epochs: vec![15], lr_decay_factor: 0.1, ..TrainConfig::default() };
    assert_eq!(cfg.lr_at(0), 0.01);
    assert_eq!(cfg.lr_at(14), 0.01);
    assert!((cfg.lr_at(15) - 0.001).abs() < 1e-18);
}

#[test]
fn metric_examples() {
    let recs = [record(1, 10.0, 0.0), record(1, 20.0, 0.0), record(2, 40.0, 0.0)];
    let m = compute_metrics(&recs, 2, 24).unwrap();
    assert!((m.mederr_deg - 20.0).abs() < 1e-9);
    assert!((m.acc_pi_6 - 2.0 / 3.0).abs() < 1e-12);
    assert_eq!(m.top1, 1.0);

    let flipped = [record(1, 180.0, 0.0), record(2, 90.0, -90.0)];
    let m = compute_metrics(&flipped, 2, 24).unwrap();
    assert!(m.aos.abs() < 1e-12);
    assert!((m.mederr_deg - 180.0).abs() < 1e-9);
    assert_eq!(m.avp_joint, 0.0);
}

#[test]
fn errors_wrap_around_the_circle() {
    assert!((angular_error_deg(350f64.to_radians(), 10f64.to_radians()) - 20.0).abs() < 1e-9);
    assert!((angular_error_deg(PI, -PI) - 0.0).abs() < 1e-9);
    assert_eq!(median(&[3.0, 1.0, 2.0, 10.0]), Some(2.5));
    assert_eq!(median(&[]), None);
}

#[test]
fn zero_rate_leaves_parameters_and_rejects_training() {
    let init = Model::init(tiny_config(HeadMode::Ccn).0.arch, [4, 4, 4], 0).unwrap();
    let mut params: Vec<Tensor> = init.params.iter().map(|p| p.tensor.clone()).collect();
    let grads: Vec<Tensor> = params.iter().map(|p| Tensor::full(p.shape(), 3.0)).collect();
    let mut v: Vec<Tensor> = params.iter().map(|p| Tensor::zeros(p.shape())).collect();
    sgd_step(&mut params, &grads, &mut v, 0.0, 0.9, 0.0).unwrap();
    assert!(params.iter().zip(&init.params).all(|(a, b)| a == &b.tensor));

    let (mut cfg, gen) = tiny_config(HeadMode::Ccn);
    cfg.lr = 0.0;
    let data = generate_dataset(&gen).unwrap();
    assert!(train(&cfg, &data.train, &data.val, &mut |_| {}).is_err());
}

#[test]
fn training_is_deterministic_for_both_heads() {
    for mode in [HeadMode::Ccn, HeadMode::Baseline] {
        let (cfg, gen) = tiny_config(mode);
        let data = generate_dataset(&gen).unwrap();
        let mut lines = Vec::new();
        let a = train(&cfg, &data.train, &data.val, &mut |r| lines.push(r.to_string())).unwrap();
        let b = train(&cfg, &data.train, &data.val, &mut |_| {}).unwrap();
        assert_eq!(a, b);
        assert_eq!(lines.len(), 2);
        assert!(lines[1].starts_with("epoch=1 lr=1.000e-3 "), "{}", lines[1]);
        assert!(a.log.iter().all(|r| r.loss.is_finite()));
        let bits = |m: &Model| m.params.iter().flat_map(|p| p.tensor.data().iter().map(|v| v.to_bits())).collect::<Vec<_>>();
        assert_eq!(bits(&a.model), bits(&b.model));
    }
}

#[test]
fn heads_share_the_initial_backbone() {
    let (cfg, _) = tiny_config(HeadMode::Ccn);
    let a = Model::init(cfg.arch, cfg.backbone_widths, 4).unwrap();
    let b = Model::init(Architecture { head_mode: HeadMode::Baseline, ..cfg.arch }, cfg.backbone_widths, 4).unwrap();
    for i in 0..8 {
        assert_eq!(a.params[i], b.params[i]);
    }
}

#[test]
fn fully_stripped_training_stays_finite() {
    let (cfg, gen) = tiny_config(HeadMode::Ccn);
    let data = generate_dataset(&GenConfig { strip_fraction: 1.0, ..gen }).unwrap();
    let out = train(&cfg, &data.train, &data.val, &mut |_| {}).unwrap();
    assert!(out.log.iter().all(|r| r.loss.is_finite() && r.l_view == 0.0));
    let recs = predict_dataset(&out.model, &data.val).unwrap();
    assert!(recs.iter().all(|r| r.angle.is_finite() && r.angle > -PI && r.angle <= PI));
}

#[test]
fn incompatible_data_is_rejected() {
    let (cfg, gen) = tiny_config(HeadMode::Ccn);
    let data = generate_dataset(&GenConfig { n_views: 6, ..gen }).unwrap();
    assert!(train(&cfg, &data.train, &data.val, &mut |_| {}).is_err());
}
