//! End-to-end acceptance checks: one test per criterion, each printing a
//! PASS/FAIL line (run with `-- --nocapture` to see them). Training-based
//! criteria share their artifacts through a OnceLock so the expensive runs
//! happen exactly once.

use std::sync::OnceLock;
use std::time::{Duration, Instant};

use gdsr::data::{
    bicubic_baseline, metrics, synth_scene, Metrics, Normalizer, SamplePair,
};
use gdsr::edge::{DspBlock, LightAttention, SamHead};
use gdsr::freq::{dct_basis, spectral_component, Cab, DctPlan, Lcf};
use gdsr::model::{save_checkpoint, GuidedDsr, ModelConfig, ModelOutput};
use gdsr::rng::Rng;
use gdsr::tensor::{
    abs, activation, add, affine, avg_pool2d, avg_pool_smooth, blur121, broadcast_batch,
    check_param_gradients, concat_channels, downsample2, grad_check, global_avg_pool, linear,
    matmul, mul, mul_channels, no_grad, pixel_shuffle, pixel_unshuffle, reshape, resize,
    resize_bicubic, softmax_w, split_channels, sub, sum_all, transpose_hw, window_merge,
    window_partition, Activation, Conv2d, ResizeMode, Shape, Tensor,
};
use gdsr::train::{
    depth_loss, extract_gradient_gt, gradient_loss, lr_at, total_loss, train_epoch, Adam,
    LossConfig, TrainConfig,
};

const H: f64 = 1e-4;
const TOL: f64 = 1e-3;

fn report(criterion: &str, pass: bool, detail: &str) {
    println!(
        "criterion {criterion}: {} — {detail}",
        if pass { "PASS" } else { "FAIL" }
    );
    assert!(pass, "criterion {criterion} failed: {detail}");
}

// ---------------------------------------------------------------------------
// Criterion 1: gradient suite. Every differentiable operation and the
// tiny-preset full model pass grad_check at rel err <= 1e-3 (64-bit,
// h = 1e-4, 3 seeds); total runtime < 5 minutes on one core.
// ---------------------------------------------------------------------------

#[test]
fn criterion_1_gradient_suite() {
    let start = Instant::now();
    let mut worst: (f64, String) = (0.0, String::new());
    let mut track = |name: &str, err: f64| {
        assert!(err <= TOL, "{name}: rel err {err}");
        if err > worst.0 {
            worst = (err, name.to_string());
        }
    };

    for seed in 0..3u64 {
        let mut rng = Rng::new(100 + seed);
        let x = Tensor::<f64>::rand(Shape::new(1, 4, 8, 8), -1.0, 1.0, &mut rng);
        let tag = |n: &str| format!("{n}[{seed}]");

        for k in [1usize, 3] {
            let conv = Conv2d::<f64>::new(4, 3, k, &mut rng);
            track(&tag(&format!("conv2d_k{k}")), grad_check(|t| conv.forward(t), &x, H).unwrap());
        }
        track(&tag("avg_pool2d"), grad_check(|t| avg_pool2d(t, 2, 2), &x, H).unwrap());
        track(&tag("avg_pool_smooth"), grad_check(|t| avg_pool_smooth(t, 3), &x, H).unwrap());
        track(&tag("global_avg_pool"), grad_check(|t| global_avg_pool(t), &x, H).unwrap());
        track(
            &tag("resize_nearest"),
            grad_check(|t| resize(t, 11, 13, ResizeMode::Nearest), &x, H).unwrap(),
        );
        track(
            &tag("resize_bilinear"),
            grad_check(|t| resize(t, 11, 13, ResizeMode::Bilinear), &x, H).unwrap(),
        );
        track(&tag("resize_bicubic"), grad_check(|t| resize_bicubic(t, 13, 11), &x, H).unwrap());
        track(&tag("pixel_shuffle"), grad_check(|t| pixel_shuffle(t, 2), &x, H).unwrap());
        track(&tag("pixel_unshuffle"), grad_check(|t| pixel_unshuffle(t, 2), &x, H).unwrap());
        track(&tag("blur121"), grad_check(|t| Ok(blur121(t)), &x, H).unwrap());
        track(&tag("downsample2"), grad_check(|t| downsample2(t), &x, H).unwrap());
        track(&tag("window"), grad_check(
            |t| window_merge(&window_partition(t, 4)?, 4, 8, 8),
            &x,
            H,
        ).unwrap());
        track(&tag("transpose_hw"), grad_check(|t| Ok(transpose_hw(t)), &x, H).unwrap());
        track(
            &tag("reshape"),
            grad_check(|t| reshape(t, Shape::new(1, 2, 8, 16)), &x, H).unwrap(),
        );
        track(&tag("sigmoid"), grad_check(|t| Ok(activation(t, Activation::Sigmoid)), &x, H).unwrap());
        // relu/leaky checked away from the kink at zero
        let positive = Tensor::<f64>::rand(Shape::new(1, 2, 6, 6), 0.5, 1.5, &mut rng);
        track(
            &tag("relu"),
            grad_check(|t| Ok(activation(t, Activation::Relu)), &positive, H).unwrap(),
        );
        track(
            &tag("leaky_relu"),
            grad_check(|t| Ok(activation(t, Activation::LeakyRelu)), &positive, H).unwrap(),
        );
        track(&tag("abs"), grad_check(|t| Ok(abs(t)), &positive, H).unwrap());
        track(&tag("affine"), grad_check(|t| Ok(affine(t, 1.7, -0.3)), &x, H).unwrap());
        track(&tag("softmax_w"), grad_check(|t| Ok(softmax_w(t)), &x, H).unwrap());
        track(&tag("sum_all"), grad_check(|t| Ok(sum_all(t)), &x, H).unwrap());

        let other = Tensor::<f64>::rand(x.shape(), -1.0, 1.0, &mut rng);
        track(&tag("add"), grad_check(|t| add(t, &other), &x, H).unwrap());
        track(&tag("sub"), grad_check(|t| sub(t, &other), &x, H).unwrap());
        track(&tag("mul"), grad_check(|t| mul(t, &other), &x, H).unwrap());
        let factors = Tensor::<f64>::rand(Shape::new(1, 4, 1, 1), -1.0, 1.0, &mut rng);
        track(&tag("mul_channels"), grad_check(|t| mul_channels(t, &factors), &x, H).unwrap());
        track(&tag("concat_split"), grad_check(
            |t| {
                let cat = concat_channels(&[t, &other])?;
                Ok(split_channels(&cat, &[4, 4])?.swap_remove(0))
            },
            &x,
            H,
        ).unwrap());
        let w = Tensor::<f64>::rand(Shape::new(3, 4 * 8 * 8, 1, 1), -0.5, 0.5, &mut rng);
        let b = Tensor::<f64>::rand(Shape::new(1, 3, 1, 1), -0.5, 0.5, &mut rng);
        track(&tag("linear"), grad_check(|t| linear(t, &w, &b), &x, H).unwrap());
        let rhs = Tensor::<f64>::rand(Shape::new(1, 4, 8, 5), -1.0, 1.0, &mut rng);
        track(&tag("matmul"), grad_check(|t| matmul(t, &rhs), &x, H).unwrap());
        track(&tag("broadcast_batch"), grad_check(
            |t| broadcast_batch(t, 3),
            &Tensor::<f64>::rand(Shape::new(1, 4, 2, 2), -1.0, 1.0, &mut rng),
            H,
        ).unwrap());
        let plan = DctPlan::new(8, 16).unwrap();
        track(
            &tag("spectral_component"),
            grad_check(|t| spectral_component(t, 1, 2, &plan), &x, H).unwrap(),
        );
    }

    // Full tiny-preset model: d(total loss)/d(theta) on >= 200 sampled
    // parameters (32x32 HR, s = 4, window 4).
    let mut rng = Rng::new(4242);
    let mut model = GuidedDsr::<f64>::new(ModelConfig::tiny(), &mut rng).unwrap();
    let d_lr = Tensor::<f64>::rand(Shape::new(1, 1, 8, 8), 0.3, 0.7, &mut rng);
    let i_hr = Tensor::<f64>::rand(Shape::new(1, 3, 32, 32), 0.0, 1.0, &mut rng);
    let d_gt = Tensor::<f64>::rand(Shape::new(1, 1, 32, 32), 0.3, 0.7, &mut rng);
    let mask = Tensor::<f64>::full(Shape::new(1, 1, 32, 32), 1.0);
    let e_gt = Tensor::<f64>::zeros(Shape::new(1, 1, 32, 32));
    let loss_cfg = LossConfig::default();
    let cell = std::cell::RefCell::new(&mut model);
    let err = check_param_gradients(
        || {
            let out = cell.borrow().forward(&d_lr, &i_hr)?;
            let l_d = depth_loss(&out, &d_gt, &mask, &loss_cfg)?;
            let l_g = gradient_loss(&out.e_pred, &e_gt)?;
            total_loss(&l_d, &l_g, &loss_cfg)
        },
        |f| cell.borrow_mut().for_each_param(f),
        Some((200, 7)),
        H,
    )
    .unwrap();
    assert!(err <= TOL, "full model: rel err {err}");
    if err > worst.0 {
        worst = (err, "full_model".to_string());
    }

    let elapsed = start.elapsed();
    report(
        "1 (gradient suite)",
        elapsed < Duration::from_secs(300),
        &format!(
            "all ops x3 seeds and 200 full-model params <= 1e-3 (worst {:.2e} at {}), {:.1?} < 5 min",
            worst.0, worst.1, elapsed
        ),
    );
}

// ---------------------------------------------------------------------------
// Criterion 2: structural identities, exact.
// ---------------------------------------------------------------------------

#[test]
fn criterion_2_structural_identities() {
    let mut rng = Rng::new(21);

    // DSP residual identity
    let mut dsp = DspBlock::<f64>::new(8, &mut rng).unwrap();
    dsp.out_proj.zero();
    let x = Tensor::<f64>::rand(Shape::new(1, 8, 8, 8), -1.0, 1.0, &mut rng);
    assert_eq!(dsp.forward(&x).unwrap().data(), x.data(), "dsp identity");

    // CAB residual identity
    let mut cab = Cab::<f64>::new(8, 4, &mut rng);
    cab.conv2.zero();
    assert_eq!(cab.forward(&x).unwrap().data(), x.data(), "cab identity");

    // SAM residual identity
    let mut sam = SamHead::<f64>::new(8, 1, &mut rng);
    sam.img_proj.zero();
    sam.feat_proj.zero();
    let img = Tensor::<f64>::rand(Shape::new(1, 1, 8, 8), 0.0, 1.0, &mut rng);
    let (f_out, img_out) = sam.forward(&x, &img).unwrap();
    assert_eq!(f_out.data(), x.data(), "sam features identity");
    assert_eq!(img_out.data(), img.data(), "sam image identity");

    // Attention residual identity
    let mut att = LightAttention::<f64>::new(8, 4, 2, 4, &mut rng).unwrap();
    att.proj.zero();
    assert_eq!(att.forward(&x).unwrap().data(), x.data(), "attention identity");

    // Full model: all parameters zero -> bicubic baseline, bit-exact.
    let mut model = GuidedDsr::<f64>::new(ModelConfig::tiny(), &mut rng).unwrap();
    model.zero_all_params();
    let d_lr = Tensor::<f64>::rand(Shape::new(1, 1, 8, 8), 0.2, 0.8, &mut rng);
    let i_hr = Tensor::<f64>::rand(Shape::new(1, 3, 32, 32), 0.0, 1.0, &mut rng);
    let out = model.forward(&d_lr, &i_hr).unwrap();
    let baseline = resize_bicubic(&d_lr, 32, 32).unwrap();
    assert_eq!(out.d_sr.data(), baseline.data(), "zero model = bicubic");
    for stage in &out.stage_depths {
        assert_eq!(stage.data(), baseline.data(), "zero stage = bicubic");
    }

    // LCF decomposition identity, bit-exact in f32.
    let lcf = Lcf::<f32>::new(3, 16, 16, &mut rng).unwrap();
    for seed in 0..10u64 {
        let img = Tensor::<f32>::rand(Shape::new(2, 3, 16, 16), -4.0, 4.0, &mut Rng::new(seed));
        let parts = lcf.forward(&img).unwrap();
        for ((l, h), f) in parts
            .low
            .data()
            .iter()
            .zip(parts.high.data())
            .zip(parts.features.data())
        {
            assert_eq!(*l + *h, *f, "lcf decomposition");
        }
    }

    // DCT orthonormality to 1e-10.
    for n in [2usize, 4, 8, 16] {
        let b = dct_basis(n).unwrap();
        for r1 in 0..n {
            for r2 in 0..n {
                let dot: f64 = (0..n).map(|i| b[r1 * n + i] * b[r2 * n + i]).sum();
                let expected = if r1 == r2 { 1.0 } else { 0.0 };
                assert!((dot - expected).abs() < 1e-10, "dct N={n}");
            }
        }
    }

    report(
        "2 (structural identities)",
        true,
        "DSP/CAB/SAM/attention/full-model residual identities exact; LCF decomposition bit-exact; DCT orthonormal to 1e-10 for N in {2,4,8,16}",
    );
}

// ---------------------------------------------------------------------------
// Criterion 3: loss arithmetic with the default weights.
// ---------------------------------------------------------------------------

#[test]
fn criterion_3_loss_arithmetic() {
    let cfg = LossConfig::default();
    assert_eq!(cfg.lambda_d, 0.2);
    assert_eq!(cfg.lambda_g, 0.01);

    // 16x16 maps: the masked means are exactly 1, so the depth loss is the
    // plain sum 1 + 0.2 + 0.2 = 1.4, exactly as f64 computes it.
    let shape = Shape::new(1, 1, 16, 16);
    let gt = Tensor::<f64>::full(shape, 0.5);
    let off = Tensor::<f64>::full(shape, 1.5);
    let mask = Tensor::<f64>::full(shape, 1.0);
    let out = ModelOutput {
        d_sr: off.clone(),
        stage_depths: vec![off.clone(), off.clone()],
        e_pred: gt.clone(),
    };
    let l = depth_loss(&out, &gt, &mask, &cfg).unwrap().item();
    assert_eq!(l, (1.0 + 0.2) + 0.2, "depth loss 1.4 case");
    assert!((l - 1.4).abs() < 1e-12);

    // total = l_d + 0.01 * l_g with l_d = 1, l_g = 2 -> 1.02 exactly.
    let t = total_loss(&Tensor::scalar(1.0f64), &Tensor::scalar(2.0f64), &cfg)
        .unwrap()
        .item();
    assert_eq!(t, 1.0 + 0.01 * 2.0, "total loss 1.02 case");
    assert!((t - 1.02).abs() < 1e-12);

    // Schedule endpoints under the published defaults.
    let tc = TrainConfig {
        total_epochs: 105,
        ..TrainConfig::default()
    };
    assert_eq!(lr_at(5.0, &tc).unwrap(), 1e-4, "warm-up reaches base lr");
    assert!((lr_at(105.0, &tc).unwrap() - 1e-6).abs() < 1e-18);

    report(
        "3 (loss arithmetic)",
        true,
        "lambda_d = 0.2, lambda_g = 0.01 defaults reproduce 1.4 and 1.02 exactly",
    );
}

// ---------------------------------------------------------------------------
// Criteria 4 and 8 share one artifact: the 500-step overfit run, executed
// twice with the same seed.
// ---------------------------------------------------------------------------

struct OverfitArtifacts {
    initial_loss: f64,
    final_loss: f64,
    model_mae: f64,
    bicubic_mae: f64,
    single_run_time: Duration,
    checkpoint_a: (Vec<u8>, Vec<u8>),
    checkpoint_b: (Vec<u8>, Vec<u8>),
    log_a: String,
    log_b: String,
}

fn overfit_artifacts() -> &'static OverfitArtifacts {
    static CELL: OnceLock<OverfitArtifacts> = OnceLock::new();
    CELL.get_or_init(|| {
        let scene = synth_scene(&mut Rng::new(11), 64, 6, 4, (60.0, 360.0)).unwrap();
        // Desk-scale optimization envelope measured before freezing: higher
        // base rate and floor than the full-data protocol, short warm-up,
        // the global-norm clip, and no augmentation (an overfit probe fits
        // one view, not its dihedral orbit).
        let cfg = TrainConfig {
            batch_size: 4,
            base_lr: 3e-3,
            min_lr: 1e-4,
            warmup_epochs: 2,
            total_epochs: 500,
            seed: 2,
            crop: 64,
            max_depth_cm: 400.0,
            augment: false,
            ..TrainConfig::default()
        };
        let loss_cfg = LossConfig::default();

        let run = |tag: &str| -> (GuidedDsr<f32>, String, f64, f64, Duration) {
            let start = Instant::now();
            let mut model =
                GuidedDsr::<f32>::new(ModelConfig::tiny(), &mut Rng::new(cfg.seed ^ 0x6d6f64656c))
                    .unwrap();
            let mut adam = Adam::new();
            let mut rng = Rng::new(cfg.seed);
            let mut log = String::from("epoch,lr,loss_depth,loss_gradient,loss_total\n");
            let mut first = None;
            let mut last = 0.0;
            for epoch in 0..cfg.total_epochs {
                let stats = train_epoch(
                    &mut model,
                    std::slice::from_ref(&scene),
                    &loss_cfg,
                    &cfg,
                    epoch,
                    &mut adam,
                    &mut rng,
                )
                .unwrap();
                log.push_str(&format!(
                    "{},{:.6e},{:.9e},{:.9e},{:.9e}\n",
                    epoch, stats.lr, stats.depth_loss, stats.gradient_loss, stats.total_loss
                ));
                first.get_or_insert(stats.total_loss);
                last = stats.total_loss;
            }
            let _ = tag;
            (model, log, first.unwrap(), last, start.elapsed())
        };

        let (mut model_a, log_a, initial_loss, final_loss, single_run_time) = run("a");
        let (mut model_b, log_b, _, _, _) = run("b");

        let dir = std::env::temp_dir().join("gdsr_acceptance_ckpt");
        std::fs::create_dir_all(&dir).unwrap();
        let read_pair = |model: &mut GuidedDsr<f32>, name: &str| -> (Vec<u8>, Vec<u8>) {
            let path = dir.join(name);
            save_checkpoint(model, &path).unwrap();
            let blob = std::fs::read(&path).unwrap();
            let manifest = std::fs::read(path.with_extension("ckpt.manifest")).unwrap_or_else(
                |_| std::fs::read(format!("{}.manifest", path.display())).unwrap(),
            );
            (blob, manifest)
        };
        let checkpoint_a = read_pair(&mut model_a, "a.ckpt");
        let checkpoint_b = read_pair(&mut model_b, "b.ckpt");

        // Final model quality vs the bicubic baseline on the same sample.
        let norm = Normalizer::new(cfg.max_depth_cm).unwrap();
        let lr_n = norm.normalize_map(&scene.d_lr);
        let pred = no_grad(|| model_a.forward(&lr_n, &scene.i_hr)).unwrap();
        let pred_cm = norm.denormalize_map(&pred.d_sr);
        let model_mae = metrics(&pred_cm, &scene.d_gt, &scene.mask).unwrap().mae;
        let bicubic = bicubic_baseline(&scene).unwrap();
        let bicubic_mae = metrics(&bicubic, &scene.d_gt, &scene.mask).unwrap().mae;

        std::fs::remove_dir_all(&dir).ok();
        OverfitArtifacts {
            initial_loss,
            final_loss,
            model_mae,
            bicubic_mae,
            single_run_time,
            checkpoint_a,
            checkpoint_b,
            log_a,
            log_b,
        }
    })
}

#[test]
fn criterion_4_overfit_smoke() {
    let art = overfit_artifacts();
    let ratio = art.final_loss / art.initial_loss;
    let pass = ratio < 0.10
        && art.model_mae < art.bicubic_mae
        && art.single_run_time < Duration::from_secs(600);
    report(
        "4 (overfit smoke)",
        pass,
        &format!(
            "500 steps: loss {:.4} -> {:.4} ({:.1}% of initial, < 10%); MAE {:.2} cm beats bicubic {:.2} cm; {:.0?} < 10 min",
            art.initial_loss,
            art.final_loss,
            100.0 * ratio,
            art.model_mae,
            art.bicubic_mae,
            art.single_run_time
        ),
    );
}

#[test]
fn criterion_8_determinism() {
    let art = overfit_artifacts();
    let pass = art.checkpoint_a == art.checkpoint_b && art.log_a == art.log_b;
    report(
        "8 (determinism)",
        pass,
        "same-seed reruns produce bit-identical checkpoints (archive + manifest) and logs",
    );
}

// ---------------------------------------------------------------------------
// Criterion 5: learning sanity on 20 synthetic scenes with 5 held out.
// ---------------------------------------------------------------------------

#[test]
fn criterion_5_learning_sanity() {
    let start = Instant::now();
    let mut scene_rng = Rng::new(11);
    let all: Vec<SamplePair> = (0..25)
        .map(|_| synth_scene(&mut scene_rng, 64, 6, 4, (60.0, 360.0)).unwrap())
        .collect();
    let (train_set, holdout) = all.split_at(20);

    let cfg = TrainConfig {
        batch_size: 4,
        base_lr: 2e-3,
        min_lr: 1e-6,
        warmup_epochs: 5,
        total_epochs: 30,
        seed: 1,
        crop: 64,
        max_depth_cm: 400.0,
        ..TrainConfig::default()
    };
    let loss_cfg = LossConfig::default();
    let mut model =
        GuidedDsr::<f32>::new(ModelConfig::tiny(), &mut Rng::new(cfg.seed ^ 0x6d6f64656c)).unwrap();
    let mut adam = Adam::new();
    let mut rng = Rng::new(cfg.seed);
    for epoch in 0..cfg.total_epochs {
        train_epoch(&mut model, train_set, &loss_cfg, &cfg, epoch, &mut adam, &mut rng).unwrap();
    }

    let norm = Normalizer::new(cfg.max_depth_cm).unwrap();
    let mut wins = 0;
    let mut lines = Vec::new();
    for (i, scene) in holdout.iter().enumerate() {
        let lr_n = norm.normalize_map(&scene.d_lr);
        let pred = no_grad(|| model.forward(&lr_n, &scene.i_hr)).unwrap();
        let pred_cm = norm.denormalize_map(&pred.d_sr);
        let model_m = metrics(&pred_cm, &scene.d_gt, &scene.mask).unwrap();
        let bicubic = bicubic_baseline(scene).unwrap();
        let base_m = metrics(&bicubic, &scene.d_gt, &scene.mask).unwrap();
        if model_m.mae < base_m.mae {
            wins += 1;
        }
        lines.push(format!("scene {i}: {:.2} vs {:.2}", model_m.mae, base_m.mae));
    }
    let elapsed = start.elapsed();
    report(
        "5 (learning sanity)",
        wins >= 4 && elapsed < Duration::from_secs(1800),
        &format!(
            "held-out MAE below bicubic on {wins}/5 scenes ({}); {:.0?} < 30 min",
            lines.join(", "),
            elapsed
        ),
    );
}

// ---------------------------------------------------------------------------
// Criterion 6: parameter-count calibration.
// ---------------------------------------------------------------------------

#[test]
fn criterion_6_calibration() {
    let default = GuidedDsr::<f32>::new(ModelConfig::default_preset(), &mut Rng::new(0)).unwrap();
    let edge_params = default.edge.param_count() as f64 / 1e6;
    let paper = GuidedDsr::<f32>::new(ModelConfig::paper_preset(), &mut Rng::new(0)).unwrap();
    let total = paper.param_count() as f64 / 1e6;

    let edge_ok = (0.1..=0.6).contains(&edge_params);
    let total_ok = (25.0 * 0.7..=25.0 * 1.3).contains(&total);
    report(
        "6 (calibration)",
        edge_ok && total_ok,
        &format!(
            "edge branch {:.3} M in [0.1, 0.6]; paper preset {:.2} M within 25.0 M +- 30%",
            edge_params, total
        ),
    );
}

// ---------------------------------------------------------------------------
// Criterion 7: oracle equivalence for metrics and the spectral squeeze.
// ---------------------------------------------------------------------------

#[test]
fn criterion_7_oracle_equivalence() {
    // Metrics against a brute-force double loop with row-wise partial sums,
    // 100 random masked maps, 1e-12 relative.
    let mut rng = Rng::new(77);
    for trial in 0..100 {
        let h = 4 + rng.below(12);
        let w = 4 + rng.below(12);
        let shape = Shape::new(1, 1, h, w);
        let pred = Tensor::<f32>::rand(shape, 0.0, 500.0, &mut rng);
        let gt = Tensor::<f32>::rand(shape, 0.0, 500.0, &mut rng);
        let mut mask = Tensor::<f32>::from_fn(shape, |_, _, _, _| {
            if rng.coin() {
                1.0
            } else {
                0.0
            }
        });
        mask.data_mut()[0] = 1.0; // at least one valid pixel

        let got = metrics(&pred, &gt, &mask).unwrap();
        let want = metrics_oracle(&pred, &gt, &mask);
        let rel = |a: f64, b: f64| (a - b).abs() / b.abs().max(1e-300);
        assert!(rel(got.mse, want.mse) < 1e-12, "trial {trial} mse");
        assert!(rel(got.mae, want.mae) < 1e-12, "trial {trial} mae");
        assert!(rel(got.rmse, want.rmse) < 1e-12, "trial {trial} rmse");
        assert!(
            (got.rmse * got.rmse - got.mse).abs() <= 1e-9 * got.mse.max(1e-300),
            "rmse^2 == mse"
        );
    }

    // Spectral squeeze against direct double summation on random 8x8 tiles.
    let plan = DctPlan::new(8, 16).unwrap();
    let mut worst = 0.0f64;
    for trial in 0..20 {
        let x = Tensor::<f64>::rand(Shape::new(1, 2, 8, 8), -2.0, 2.0, &mut Rng::new(500 + trial));
        for &(u, v) in &plan.frequencies {
            let got = spectral_component(&x, u, v, &plan).unwrap();
            for c in 0..2 {
                let mut acc = 0.0;
                for i in 0..8 {
                    for j in 0..8 {
                        acc += x.at(0, c, i, j) * plan.basis_at(u, i) * plan.basis_at(v, j);
                    }
                }
                let err = (got.at(0, c, 0, 0) - acc).abs();
                worst = worst.max(err);
                assert!(err < 1e-10, "trial {trial} ({u},{v})");
            }
        }
    }

    report(
        "7 (oracle equivalence)",
        true,
        &format!(
            "metrics match the double-loop oracle to 1e-12 on 100 maps; spectral coefficients match direct summation to 1e-10 (worst {worst:.2e})"
        ),
    );
}

/// Independent metrics computation: explicit double loop, per-row partial
/// sums, no shared code with `data::metrics`.
fn metrics_oracle(pred: &Tensor<f32>, gt: &Tensor<f32>, mask: &Tensor<f32>) -> Metrics {
    let s = pred.shape();
    let mut sq = 0.0f64;
    let mut ab = 0.0f64;
    let mut count = 0u64;
    for y in 0..s.h {
        let mut row_sq = 0.0f64;
        let mut row_ab = 0.0f64;
        for x in 0..s.w {
            if mask.at(0, 0, y, x) != 0.0 {
                let d = pred.at(0, 0, y, x) as f64 - gt.at(0, 0, y, x) as f64;
                row_sq += d * d;
                row_ab += d.abs();
                count += 1;
            }
        }
        sq += row_sq;
        ab += row_ab;
    }
    let mse = sq / count as f64;
    Metrics {
        mse,
        mae: ab / count as f64,
        rmse: mse.sqrt(),
    }
}

// ---------------------------------------------------------------------------
// Extra surface checks tied to the external interfaces: the gradient target
// is part of the training contract, so pin its basic fixed points here too.
// ---------------------------------------------------------------------------

#[test]
fn gradient_target_fixed_points() {
    let flat = Tensor::<f64>::full(Shape::new(1, 1, 8, 8), 2.0);
    assert!(extract_gradient_gt(&flat).data().iter().all(|v| *v == 0.0));
    let ramp = Tensor::from_fn(Shape::new(1, 1, 8, 8), |_, _, _, x| x as f64);
    let g = extract_gradient_gt(&ramp);
    for y in 0..8 {
        for x in 1..7 {
            assert!((g.at(0, 0, y, x) - 1.0).abs() < 1e-12);
        }
    }
}
