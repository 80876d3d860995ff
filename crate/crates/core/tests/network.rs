mod common;

use common::*;
use ppac_core::adaptive::{
    adaptive_conv_forward, conv2d_forward, Activation, AdaptiveConvConfig, AdaptiveKernelParams, ConvParams,
    NormalizationMode,
};
use ppac_core::data::{generate_scene, SceneSpec};
use ppac_core::net::{NetInputs, NetKind, RefinementNet};
use ppac_core::train::{adam_step, aee_loss, train_epochs, LossKind, LrSchedule, Sample, TrainConfig};
use ppac_core::{Task, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn inputs(task: Task, n: usize, seed: u64) -> NetInputs<f64> {
    NetInputs::random(task, n, 9, 11, &mut ChaCha8Rng::seed_from_u64(seed))
}

fn center_tap(channels: usize) -> AdaptiveKernelParams<f64> {
    let w = Tensor::from_fn([1, 1, 7, 7], |_, _, y, x| if (y, x) == (3, 3) { 1.0 } else { 0.0 });
    AdaptiveKernelParams::matched(w, vec![0.0; channels], true).unwrap()
}

#[test]
fn single_tap_configuration_is_the_identity() {
    for task in [Task::Flow, Task::Segmentation] {
        let mut net = RefinementNet::<f64>::build(NetKind::Ppac, task, 3).unwrap();
        for k in 0..2 {
            net.set_adaptive_params(k, &center_tap(task.estimate_channels())).unwrap();
        }
        let x = inputs(task, 2, 1);
        let out = net.forward(&x).unwrap();
        assert!(max_rel_diff(&out, &x.estimate) < 1e-12);
    }
}

#[test]
fn constant_estimate_is_reproduced() {
    let net = RefinementNet::<f64>::build(NetKind::Ppac, Task::Flow, 4).unwrap();
    let mut x = inputs(Task::Flow, 1, 2);
    x.estimate = Tensor::full(x.estimate.shape(), -2.5);
    let out = net.forward(&x).unwrap();
    // biases start at zero
    assert!(out.data().iter().all(|v| (v + 2.5).abs() < 1e-9));
}

#[test]
fn batch_of_two_equals_two_batches_of_one() {
    for kind in [NetKind::Ppac, NetKind::Pac, NetKind::Simple] {
        let net = RefinementNet::<f64>::build(kind, Task::Flow, 5).unwrap();
        let x = inputs(Task::Flow, 2, 3);
        let joint = net.forward(&x).unwrap();
        for b in 0..2 {
            let single = net.forward(&x.sample(b)).unwrap();
            assert!(max_rel_diff(&single, &joint.sample(b)) < 1e-6, "{kind:?}");
        }
    }
}

fn dense_chain(net: &RefinementNet<f64>, prefix: &str, x: &Tensor<f64>, last: Activation) -> Tensor<f64> {
    let mut x = x.clone();
    let mut k = 0;
    while let Some(w) = net.params().find(&format!("{prefix}.{k}.weight")) {
        let b = net.params().find(&format!("{prefix}.{k}.bias")).unwrap();
        let p = ConvParams::new(net.params().value(w).clone(), net.params().value(b).data().to_vec()).unwrap();
        let act = if net.params().find(&format!("{prefix}.{}.weight", k + 1)).is_some() { Activation::Relu } else { last };
        x = conv2d_forward(&x, &p, act).unwrap().0;
        k += 1;
    }
    x
}

#[test]
fn ppac_forward_is_the_composition_of_its_layers() {
    let net = RefinementNet::<f64>::build(NetKind::Ppac, Task::Flow, 6).unwrap();
    let x = inputs(Task::Flow, 1, 4);
    let feats = dense_chain(&net, "guidance", &x.guidance, Activation::None);
    let conf = dense_chain(&net, "probability", &x.log_probability, Activation::Sigmoid);
    let mut est = x.estimate.clone();
    for k in 0..2 {
        let cfg = AdaptiveConvConfig::new(NormalizationMode::Advanced)
            .with_epsilon(net.epsilon_denom())
            .with_features(feats.channel_range(5 * k..5 * k + 5))
            .with_confidences(conf.channel_range(k..k + 1));
        let p = net.adaptive_params(k).unwrap();
        est = reference_forward(&est, &p, &cfg);
    }
    assert!(max_rel_diff(&net.forward(&x).unwrap(), &est) < 1e-6);
    assert_eq!(net.guidance_features(&x).unwrap(), feats);
    assert!(net.confidences(&x).unwrap().unwrap().data().iter().all(|c| *c > 0.0 && *c < 1.0));
}

#[test]
fn unit_confidences_reduce_the_combination_to_pac() {
    let net = RefinementNet::<f64>::build(NetKind::Ppac, Task::Flow, 7).unwrap();
    let x = inputs(Task::Flow, 1, 5);
    let feats = net.guidance_features(&x).unwrap();
    let ones = Tensor::full([1, 2, 9, 11], 1.0);
    let ppac = net.combine(&x.estimate, &feats, Some(&ones)).unwrap();
    let pac = net.combine(&x.estimate, &feats, None).unwrap();
    assert!(max_rel_diff(&ppac, &pac) < 1e-12);
    // and the combination equals the layer-by-layer operator
    let mut est = x.estimate.clone();
    for k in 0..2 {
        let cfg = AdaptiveConvConfig::new(NormalizationMode::Advanced)
            .with_epsilon(net.epsilon_denom())
            .with_features(feats.channel_range(net.feature_channels(k).unwrap()));
        est = adaptive_conv_forward(&est, &net.adaptive_params(k).unwrap(), cfg).unwrap().0;
    }
    assert!(max_rel_diff(&pac, &est) < 1e-12);
}

#[test]
fn wrong_input_layout_is_rejected() {
    let net = RefinementNet::<f64>::build(NetKind::Ppac, Task::Flow, 0).unwrap();
    let x = inputs(Task::Segmentation, 1, 0);
    assert!(net.forward(&x).is_err());
}

#[test]
fn normalization_weights_stay_positive_under_adam() {
    let mut net = RefinementNet::<f64>::build(NetKind::Pac, Task::Flow, 2).unwrap();
    let x = inputs(Task::Flow, 1, 9);
    let gt = Tensor::full(x.estimate.shape(), 40.0);
    for _ in 0..30 {
        let (out, cache) = net.forward_train(&x).unwrap();
        let (_, g) = aee_loss(&out, &gt, None).unwrap();
        net.params_mut().zero_grads();
        net.backward(&cache, &g).unwrap();
        adam_step(net.params_mut(), 0.5).unwrap();
    }
    for k in 0..2 {
        assert!(net.adaptive_params(k).unwrap().norm_weight().data().iter().all(|w| *w > 0.0));
    }
}

#[test]
fn memorization_run_decreases_training_aee() {
    let spec = SceneSpec { height: 32, width: 32, ..SceneSpec::default() };
    let samples: Vec<Sample<f32>> = (0..4)
        .map(|s| {
            let sc = generate_scene(&spec, 40 + s).unwrap();
            Sample { inputs: sc.inputs(), target: sc.target() }
        })
        .collect();
    let mut net = RefinementNet::<f32>::build(NetKind::Ppac, Task::Flow, 1).unwrap();
    let cfg = TrainConfig {
        loss: LossKind::Aee,
        schedule: LrSchedule::constant(1e-3),
        epochs: 10,
        batch: 4,
        crop: None,
        seed: 0,
    };
    let log = train_epochs(&mut net, &samples, None, &cfg).unwrap().log;
    for pair in log.windows(2) {
        assert!(pair[1].train_loss < pair[0].train_loss, "{log:?}");
    }
}
