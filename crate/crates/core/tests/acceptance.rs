//! Acceptance runner: one PASS/FAIL line per criterion, nonzero exit on any
//! failure. The training criteria take roughly twenty minutes on one core.

mod common;

use std::process::ExitCode;
use std::time::Instant;

use common::*;
use ppac_core::adaptive::{
    adaptive_conv_forward, conv2d_forward, kernel_tensor, Activation, AdaptiveConvConfig, AdaptiveKernelParams,
    ConvParams, NormalizationMode,
};
use ppac_core::data::metrics::eval_flow;
use ppac_core::data::{generate_scene, SceneSpec, BOUNDARY_RADIUS};
use ppac_core::io::{decode_checkpoint, decode_flo, decode_pfm, encode_checkpoint, encode_flo, encode_pfm};
use ppac_core::net::{oracle_log_probability, NetKind, RefinementNet};
use ppac_core::train::{evaluate, gradient_suite, train_epochs, LossKind, LrSchedule, Sample, Target, TrainConfig};
use ppac_core::{Task, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const GRAD_TOL: f64 = 1e-4;
const REFERENCE_TOL: f64 = 1e-6;
const EQUAL_TOL: f64 = 1e-6;
const OUTLIER_TOL: f64 = 0.05;
const MIN_REDUCTION: f64 = 0.30;
const TRAINING_BUDGET_SECS: f64 = 30.0 * 60.0;

// Training protocol shared by the trend, ablation and oracle criteria.
const SCENE_SEED: u64 = 1000;
const NET_SEED: u64 = 7;
const SHUFFLE_SEED: u64 = 3;
const EPOCHS: usize = 40;
const BATCH: usize = 8;
const CROP: usize = 64;
const BASE_LR: f64 = 1e-3;
// picked on the validation split; the dense baseline stalls at 1e-3
const SIMPLE_LR: f64 = 5e-3;

struct Outcome {
    passed: bool,
    detail: String,
}

fn outcome(passed: bool, detail: impl Into<String>) -> Outcome {
    Outcome { passed, detail: detail.into() }
}

fn check(failures: &mut Vec<String>, detail: &mut Vec<String>, ok: bool, what: impl Into<String>) {
    let what = what.into();
    if !ok {
        failures.push(what.clone());
    }
    detail.push(what);
}

fn gradient_criterion() -> Outcome {
    let t = Instant::now();
    let entries = match gradient_suite(11, GRAD_TOL) {
        Ok(e) => e,
        Err(e) => return outcome(false, format!("suite error: {e}")),
    };
    let secs = t.elapsed().as_secs_f64();
    let worst = entries.iter().map(|e| e.report.max_rel_error).fold(0.0, f64::max);
    let failed: Vec<_> = entries.iter().filter(|e| !e.report.passed()).map(|e| format!("{} {}", e.name, e.report)).collect();
    let passed = failed.is_empty() && secs < 120.0;
    let mut detail = format!("{} checks, worst rel err {worst:.2e}, {secs:.1}s", entries.len());
    if !failed.is_empty() {
        detail += &format!("; failing: {}", failed.join("; "));
    }
    outcome(passed, detail)
}

fn reference_criterion() -> Outcome {
    let t = Instant::now();
    let mut worst = 0.0f64;
    let count = 64;
    for seed in 0..count {
        let inst = random_instance(seed);
        match adaptive_conv_forward(&inst.input, &inst.params, inst.cfg.clone()) {
            Ok((out, _)) => worst = worst.max(max_rel_diff(&out, &reference_forward(&inst.input, &inst.params, &inst.cfg))),
            Err(e) => return outcome(false, format!("seed {seed}: {e}")),
        }
    }
    let secs = t.elapsed().as_secs_f64();
    outcome(worst < REFERENCE_TOL && secs < 60.0, format!("{count} configs, max rel err {worst:.2e}, {secs:.2}s"))
}

fn count_criterion() -> Outcome {
    let expected = [
        (NetKind::Ppac, Task::Flow, 12_252),
        (NetKind::Ppac, Task::Segmentation, 14_290),
        (NetKind::Pac, Task::Flow, 12_615),
        (NetKind::Pac, Task::Segmentation, 15_549),
        (NetKind::Simple, Task::Flow, 12_421),
    ];
    let mut ok = true;
    let mut parts = Vec::new();
    for (kind, task, want) in expected {
        let got = RefinementNet::<f64>::build(kind, task, 0).map(|n| n.parameter_count()).unwrap_or(0);
        ok &= got == want;
        parts.push(format!("{}-{}={got}", kind.tag(), task.tag()));
    }
    outcome(ok, parts.join(" "))
}

fn run(input: &Tensor<f64>, params: &AdaptiveKernelParams<f64>, cfg: AdaptiveConvConfig<f64>) -> Tensor<f64> {
    adaptive_conv_forward(input, params, cfg).expect("forward").0
}

fn reduction_criterion() -> Outcome {
    let t = Instant::now();
    let (mut failures, mut detail) = (Vec::new(), Vec::new());
    let mut rng = ChaCha8Rng::seed_from_u64(42);

    // unit confidences reduce to PAC; constant features with no
    // normalization reduce to a plain convolution
    let (mut pac_err, mut conv_err) = (0.0f64, 0.0f64);
    for seed in 0..20 {
        let inst = random_instance(seed + 500);
        let [n, _, h, w] = inst.input.shape();
        let feats = inst.cfg.features.clone().unwrap_or_else(|| Tensor::full([n, 2, h, w], 0.4));
        let pac_cfg = AdaptiveConvConfig { features: Some(feats), confidences: None, ..inst.cfg.clone() };
        let ppac_cfg = pac_cfg.clone().with_confidences(Tensor::full([n, 1, h, w], 1.0));
        pac_err = pac_err.max(max_rel_diff(&run(&inst.input, &inst.params, pac_cfg), &run(&inst.input, &inst.params, ppac_cfg)));
        if !inst.params.shared_channels {
            let cfg = AdaptiveConvConfig::new(NormalizationMode::None).with_features(Tensor::full([n, 3, h, w], -0.7));
            let conv = ConvParams::new(inst.params.weight.clone(), inst.params.bias.clone()).expect("conv params");
            let dense = conv2d_forward(&inst.input, &conv, Activation::None).expect("conv").0;
            conv_err = conv_err.max(max_rel_diff(&run(&inst.input, &inst.params, cfg), &dense));
        }
    }
    check(&mut failures, &mut detail, pac_err < EQUAL_TOL, format!("unit-conf {pac_err:.1e}"));
    check(&mut failures, &mut detail, conv_err < EQUAL_TOL, format!("const-feat {conv_err:.1e}"));

    // confidence scale invariance in advanced mode
    let mut scale_err = 0.0f64;
    for seed in 0..10 {
        let inst = random_instance(seed * 7 + 3);
        let [n, _, h, w] = inst.input.shape();
        let conf = uniform(&mut rng, [n, 1, h, w], 0.2, 1.0);
        let cfg = AdaptiveConvConfig { mode: NormalizationMode::Advanced, ..inst.cfg.clone() };
        let base = run(&inst.input, &inst.params, cfg.clone().with_confidences(conf.clone()));
        for lambda in [0.1, 3.7] {
            let moved = run(&inst.input, &inst.params, cfg.clone().with_confidences(conf.map(|c| c * lambda)));
            scale_err = scale_err.max(max_rel_diff(&base, &moved));
        }
    }
    check(&mut failures, &mut detail, scale_err < EQUAL_TOL, format!("scale {scale_err:.1e}"));

    // constant input is reproduced when the normalization weights match
    let mut const_err = 0.0f64;
    for seed in 0..10u64 {
        let shared = seed % 2 == 0;
        let wshape = if shared { [1, 1, 5, 5] } else { [2, 2, 5, 5] };
        let weight = uniform(&mut rng, wshape, 0.05, 1.0);
        let params = AdaptiveKernelParams::matched(weight, vec![0.0; 2], shared).expect("params");
        let cfg = AdaptiveConvConfig::new(NormalizationMode::Advanced)
            .with_features(uniform(&mut rng, [1, 3, 6, 7], -2.0, 2.0))
            .with_confidences(uniform(&mut rng, [1, 1, 6, 7], 0.1, 1.0));
        let out = run(&Tensor::full([1, 2, 6, 7], 5.0), &params, cfg);
        const_err = const_err.max(out.data().iter().map(|v| (v - 5.0).abs()).fold(0.0, f64::max));
    }
    check(&mut failures, &mut detail, const_err < EQUAL_TOL, format!("constant {const_err:.1e}"));

    let feats = uniform(&mut rng, [2, 3, 6, 5], -2.0, 2.0);
    let k = kernel_tensor(&feats, 5, NormalizationMode::Kernel, 1e-12).expect("kernel");
    let mut sum_err = 0.0f64;
    for b in 0..2 {
        for y in 0..6 {
            for x in 0..5 {
                let sum: f64 = (0..25).map(|o| k.get(b, o, y, x)).sum();
                sum_err = sum_err.max((sum - 1.0).abs());
            }
        }
    }
    check(&mut failures, &mut detail, sum_err < EQUAL_TOL, format!("kernel-sum {sum_err:.1e}"));

    // boundary consistency: interior (2,1) vs next to the boundary (2,4)
    let (input, features) = two_object_scene(5, 10, 5, 2.0, 7.0);
    let params = AdaptiveKernelParams::matched(ramp_weights(3), vec![0.0], true).expect("params");
    let at = |mode| {
        let out = run(&input, &params, AdaptiveConvConfig::new(mode).with_features(features.clone()));
        (out.get(0, 0, 2, 1) - out.get(0, 0, 2, 4)).abs()
    };
    let (adv_gap, kern_gap) = (at(NormalizationMode::Advanced), at(NormalizationMode::Kernel));
    check(&mut failures, &mut detail, adv_gap < 1e-6, format!("boundary adv {adv_gap:.1e}"));
    check(&mut failures, &mut detail, kern_gap > 1e-3, format!("boundary kern {kern_gap:.1e}"));

    // a low-confidence outlier is replaced by its object's value
    let (input, features, conf) = outlier_scene();
    let box3 = AdaptiveKernelParams::matched(Tensor::full([1, 1, 3, 3], 1.0 / 9.0), vec![0.0], false).expect("params");
    let cfg = AdaptiveConvConfig::new(NormalizationMode::Advanced).with_features(features).with_confidences(conf);
    let center = run(&input, &box3, cfg).get(0, 0, 1, 1);
    check(&mut failures, &mut detail, (center - 1.0).abs() < OUTLIER_TOL, format!("outlier center {center:.4}"));

    let secs = t.elapsed().as_secs_f64();
    let ok = failures.is_empty() && secs < 60.0;
    outcome(ok, format!("{}, {secs:.2}s", detail.join(", ")))
}

struct Splits {
    train: Vec<Sample<f32>>,
    val: Vec<Sample<f32>>,
    test: Vec<Sample<f32>>,
    oracle_train: Vec<Sample<f32>>,
    oracle_val: Vec<Sample<f32>>,
    oracle_test: Vec<Sample<f32>>,
}

fn scenes() -> Splits {
    let spec = SceneSpec::default();
    let (mut plain, mut oracle) = (Vec::new(), Vec::new());
    for i in 0..64 {
        let scene = generate_scene(&spec, SCENE_SEED + i).expect("scene");
        let sample = Sample { inputs: scene.inputs::<f32>(), target: scene.target::<f32>() };
        let mut with_oracle = sample.clone();
        with_oracle.inputs.log_probability =
            oracle_log_probability(&sample.inputs.estimate, &scene.gt_field.cast(), Task::Flow.probability_channels())
                .expect("oracle");
        plain.push(sample);
        oracle.push(with_oracle);
    }
    let split = |v: Vec<Sample<f32>>| {
        let mut it = v.into_iter();
        let train: Vec<_> = it.by_ref().take(48).collect();
        let val: Vec<_> = it.by_ref().take(8).collect();
        (train, val, it.collect::<Vec<_>>())
    };
    let (train, val, test) = split(plain);
    let (oracle_train, oracle_val, oracle_test) = split(oracle);
    Splits { train, val, test, oracle_train, oracle_val, oracle_test }
}

/// Pixel-weighted test AEE of the corrupted estimates themselves.
fn unrefined_aee(test: &[Sample<f32>]) -> f64 {
    let (mut sum, mut pixels) = (0.0, 0usize);
    for s in test {
        let Target::Flow { gt, valid } = &s.target else { unreachable!("flow split") };
        let r = eval_flow(&s.inputs.estimate, gt, valid.as_ref(), None, BOUNDARY_RADIUS).expect("eval");
        sum += r.aee.unwrap_or(f64::NAN) * gt.plane_len() as f64;
        pixels += gt.plane_len();
    }
    sum / pixels as f64
}

struct Trained {
    test_aee: f64,
    secs: f64,
}

fn train_and_test(
    kind: NetKind,
    mode: NormalizationMode,
    lr: f64,
    train: &[Sample<f32>],
    val: &[Sample<f32>],
    test: &[Sample<f32>],
) -> Trained {
    let t = Instant::now();
    let mut net = RefinementNet::<f32>::build_with_mode(kind, Task::Flow, mode, NET_SEED).expect("net");
    let cfg = TrainConfig {
        loss: LossKind::Aee,
        schedule: LrSchedule::halving(lr, EPOCHS * 2 / 3 + 1),
        epochs: EPOCHS,
        batch: BATCH,
        crop: Some((CROP, CROP)),
        seed: SHUFFLE_SEED,
    };
    let test_aee = match train_epochs(&mut net, train, Some(val), &cfg) {
        Ok(out) => {
            net.params_mut().restore(&out.best_params).expect("restore");
            evaluate(&net, test).unwrap_or(f64::NAN)
        }
        Err(e) => {
            eprintln!("{} {mode:?}: {e}", kind.tag());
            f64::NAN
        }
    };
    let secs = t.elapsed().as_secs_f64();
    eprintln!("  trained {} {mode:?} lr {lr:e}: test AEE {test_aee:.4} in {secs:.0}s", kind.tag());
    Trained { test_aee, secs }
}

fn round_trip_criterion() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let payloads = 20;
    let (mut flo_ok, mut pfm_ok, mut ckpt_ok) = (0, 0, 0);
    for i in 0..payloads {
        let (h, w) = (rng.gen_range(1..40), rng.gen_range(1..40));
        // arbitrary bit patterns, excluding NaN so equality is meaningful
        let mut draw = || loop {
            let v = f32::from_bits(rng.gen());
            if !v.is_nan() {
                break v;
            }
        };
        let flow = Tensor::from_fn([1, 2, h, w], |_, _, _, _| draw());
        if let Ok(bytes) = encode_flo(&flow) {
            let back = decode_flo::<f32>(&bytes);
            flo_ok += usize::from(back.is_ok_and(|b| b.data().iter().zip(flow.data()).all(|(a, c)| a.to_bits() == c.to_bits())));
        }
        let plane: Vec<f32> = (0..h * w).map(|_| draw()).collect();
        if let Ok(bytes) = encode_pfm(&plane, h, w) {
            let back = decode_pfm(&bytes);
            pfm_ok += usize::from(back.is_ok_and(|(b, bh, bw)| {
                (bh, bw) == (h, w) && b.iter().zip(&plane).all(|(a, c)| a.to_bits() == c.to_bits())
            }));
        }
        let kind = [NetKind::Ppac, NetKind::Pac, NetKind::Simple][i % 3];
        let task = if kind != NetKind::Simple && i % 2 == 1 { Task::Segmentation } else { Task::Flow };
        let mut net = RefinementNet::<f32>::build(kind, task, i as u64).expect("net");
        for p in net.params_mut().iter_mut() {
            p.value.data_mut().iter_mut().for_each(|v| *v = rng.gen_range(-3.0..3.0));
            p.m = (0..p.value.len()).map(|_| rng.gen_range(-1.0..1.0)).collect();
            p.v = (0..p.value.len()).map(|_| rng.gen_range(0.0..1.0)).collect();
            p.step = rng.gen_range(0..10_000);
        }
        let bytes = encode_checkpoint(&net);
        if let Ok(back) = decode_checkpoint::<f32>(&bytes) {
            let same_state = back.params().iter().zip(net.params().iter()).all(|(a, b)| {
                a.name == b.name
                    && a.value.data().iter().zip(b.value.data()).all(|(x, y)| x.to_bits() == y.to_bits())
                    && a.m.iter().zip(&b.m).all(|(x, y)| x.to_bits() == y.to_bits())
                    && a.v.iter().zip(&b.v).all(|(x, y)| x.to_bits() == y.to_bits())
                    && a.step == b.step
            });
            ckpt_ok += usize::from(same_state && encode_checkpoint(&back) == bytes);
        }
    }
    let ok = flo_ok == payloads && pfm_ok == payloads && ckpt_ok == payloads;
    outcome(ok, format!("flo {flo_ok}/{payloads}, float map {pfm_ok}/{payloads}, checkpoint {ckpt_ok}/{payloads}"))
}

fn main() -> ExitCode {
    // the default test invocation passes harness flags; only `--list` matters
    if std::env::args().any(|a| a == "--list") {
        return ExitCode::SUCCESS;
    }
    let mut results: Vec<(usize, &str, Outcome)> = Vec::new();
    let mut report = |id: usize, name: &'static str, o: Outcome| {
        println!("[{}] {id}. {name}: {}", if o.passed { "PASS" } else { "FAIL" }, o.detail);
        results.push((id, name, o));
    };

    report(1, "gradient suite", gradient_criterion());
    report(2, "reference equivalence", reference_criterion());
    report(3, "parameter counts", count_criterion());
    report(4, "reductions and invariances", reduction_criterion());

    let training = Instant::now();
    let data = scenes();
    let unrefined = unrefined_aee(&data.test);
    let adv = NormalizationMode::Advanced;
    let ppac = train_and_test(NetKind::Ppac, adv, BASE_LR, &data.train, &data.val, &data.test);
    let pac = train_and_test(NetKind::Pac, adv, BASE_LR, &data.train, &data.val, &data.test);
    let simple = train_and_test(NetKind::Simple, adv, SIMPLE_LR, &data.train, &data.val, &data.test);
    let reduction = 1.0 - ppac.test_aee / unrefined;
    let trend_secs = ppac.secs + pac.secs + simple.secs;
    report(
        5,
        "refinement trend",
        outcome(
            ppac.test_aee < pac.test_aee
                && pac.test_aee < simple.test_aee
                && simple.test_aee < unrefined
                && reduction >= MIN_REDUCTION
                && trend_secs <= TRAINING_BUDGET_SECS,
            format!(
                "AEE ppac {:.4} < pac {:.4} < simple {:.4} < unrefined {unrefined:.4}, reduction {:.1}%, {trend_secs:.0}s",
                ppac.test_aee,
                pac.test_aee,
                simple.test_aee,
                100.0 * reduction
            ),
        ),
    );

    let kernel = train_and_test(NetKind::Pac, NormalizationMode::Kernel, BASE_LR, &data.train, &data.val, &data.test);
    let none = train_and_test(NetKind::Pac, NormalizationMode::None, BASE_LR, &data.train, &data.val, &data.test);
    report(
        6,
        "normalization ablation",
        outcome(
            pac.test_aee < kernel.test_aee && kernel.test_aee <= none.test_aee,
            format!(
                "AEE advanced {:.4} < kernel {:.4} <= none {:.4}, {:.0}s",
                pac.test_aee,
                kernel.test_aee,
                none.test_aee,
                pac.secs + kernel.secs + none.secs
            ),
        ),
    );

    let oracle = train_and_test(NetKind::Ppac, adv, BASE_LR, &data.oracle_train, &data.oracle_val, &data.oracle_test);
    report(
        7,
        "oracle confidence bound",
        outcome(
            oracle.test_aee <= ppac.test_aee,
            format!("AEE oracle {:.4} <= learned {:.4}, {:.0}s", oracle.test_aee, ppac.test_aee, oracle.secs),
        ),
    );
    eprintln!("  training criteria total {:.0}s", training.elapsed().as_secs_f64());

    report(8, "format round trips", round_trip_criterion());

    let failed: Vec<_> = results.iter().filter(|r| !r.2.passed).map(|r| r.0.to_string()).collect();
    if failed.is_empty() {
        println!("acceptance: all {} criteria passed", results.len());
        ExitCode::SUCCESS
    } else {
        println!("acceptance: failed {}", failed.join(", "));
        ExitCode::FAILURE
    }
}
