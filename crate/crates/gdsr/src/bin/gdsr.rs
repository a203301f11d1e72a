//! Command-line surface: train, eval, infer, grad-check, export-gradmap,
//! synth. Exit code 2 flags usage/config errors, 1 runtime failures.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use gdsr::data::{
    bicubic_baseline, evaluate_dataset, load_color_png, load_dataset, load_depth, make_lr,
    metrics, parse_kv, save_gray_png8, save_pfm, save_scene, synth_scene, tiled_inference,
    EvalReport, Metrics, Normalizer, SamplePair,
};
use gdsr::model::{load_checkpoint, save_checkpoint, GuidedDsr, ModelConfig};
use gdsr::rng::Rng;
use gdsr::tensor::{
    activation, avg_pool2d, blur121, check_param_gradients, global_avg_pool, grad_check, linear,
    no_grad, resize, resize_bicubic, softmax_w, Activation, Conv2d, ResizeMode, Shape, Tensor,
};
use gdsr::train::{
    depth_loss, gradient_loss, total_loss, train_epoch, Adam, HfTarget, LossConfig, TrainConfig,
};
use gdsr::{Error, Result};

const USAGE: &str = "usage: gdsr <command> [options]

commands:
  train --config <file>                      train a model from a key=value config
  eval --data <dir> --scale <s> --out <csv>  evaluate a checkpoint (or --model bicubic)
       [--model <ckpt>] [--preset <p>] [--max-depth <cm>] [--tile <px>]
  infer --model <ckpt> --depth <file> --color <png> --scale <s> --out <base>
       [--preset <p>] [--max-depth <cm>] [--tile <px>]
  grad-check [--coords <n>] [--inject-fault]
  export-gradmap --model <ckpt> --depth <file> --color <png> --scale <s> --out <png>
       [--preset <p>] [--max-depth <cm>]
  synth --out <dir> [--count <n>] [--size <px>] [--scale <s>] [--seed <k>] [--shapes <n>]";

fn main() {
    let args: Vec<String> = std::env::args().skip(1).collect();
    std::process::exit(run(&args));
}

fn run(args: &[String]) -> i32 {
    let Some(command) = args.first() else {
        eprintln!("{USAGE}");
        return 2;
    };
    let rest = &args[1..];
    let outcome = match command.as_str() {
        "train" => cmd_train(rest),
        "eval" => cmd_eval(rest),
        "infer" => cmd_infer(rest),
        "grad-check" => cmd_grad_check(rest),
        "export-gradmap" => cmd_export_gradmap(rest),
        "synth" => cmd_synth(rest),
        "--help" | "-h" | "help" => {
            println!("{USAGE}");
            return 0;
        }
        other => {
            eprintln!("unknown command '{other}'\n{USAGE}");
            return 2;
        }
    };
    match outcome {
        Ok(()) => 0,
        Err(e @ (Error::InvalidConfig(_) | Error::InvalidParameter(_))) => {
            eprintln!("error: {e}");
            2
        }
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

/// Flag parser: every option except `--inject-fault` takes one value;
/// unknown flags are usage errors.
fn parse_flags(args: &[String], allowed: &[&str]) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    let mut it = args.iter();
    while let Some(flag) = it.next() {
        let Some(name) = flag.strip_prefix("--") else {
            return Err(Error::InvalidConfig(format!("unexpected argument '{flag}'")));
        };
        if !allowed.contains(&name) {
            return Err(Error::InvalidConfig(format!("unknown option '--{name}'")));
        }
        if name == "inject-fault" {
            out.insert(name.to_string(), "true".to_string());
            continue;
        }
        let value = it
            .next()
            .ok_or_else(|| Error::InvalidConfig(format!("option '--{name}' needs a value")))?;
        out.insert(name.to_string(), value.clone());
    }
    Ok(out)
}

fn get_parsed<T: std::str::FromStr>(
    flags: &BTreeMap<String, String>,
    key: &str,
    default: T,
) -> Result<T> {
    match flags.get(key) {
        None => Ok(default),
        Some(raw) => raw
            .parse()
            .map_err(|_| Error::InvalidConfig(format!("cannot parse --{key} value '{raw}'"))),
    }
}

fn require<'a>(flags: &'a BTreeMap<String, String>, key: &str) -> Result<&'a String> {
    flags
        .get(key)
        .ok_or_else(|| Error::InvalidConfig(format!("missing required option '--{key}'")))
}

fn build_model(preset: &str, checkpoint: Option<&Path>) -> Result<GuidedDsr<f32>> {
    let cfg = ModelConfig::from_preset(preset)?;
    let mut model = GuidedDsr::new(cfg, &mut Rng::new(0))?;
    if let Some(path) = checkpoint {
        load_checkpoint(&mut model, path)?;
    }
    Ok(model)
}

// -------------------------------------------------------------------- train

struct TrainRun {
    data_dir: PathBuf,
    val_dir: PathBuf,
    out_dir: PathBuf,
    preset: String,
    scale: usize,
    tile: usize,
    cfg: TrainConfig,
    loss: LossConfig,
}

impl TrainRun {
    /// Key = value lines; unknown keys are rejected.
    fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::InvalidConfig(format!("cannot read {}: {e}", path.display())))?;
        let mut cfg = TrainConfig::default();
        let mut loss = LossConfig::default();
        let mut data_dir = None;
        let mut val_dir = None;
        let mut out_dir = None;
        let mut preset = "tiny".to_string();
        let mut scale = 4usize;
        let mut tile = 256usize;
        for (key, value) in parse_kv(&text)? {
            let bad = |e: String| Error::InvalidConfig(format!("key '{key}': {e}"));
            match key.as_str() {
                "data_dir" => data_dir = Some(PathBuf::from(&value)),
                "val_dir" => val_dir = Some(PathBuf::from(&value)),
                "out_dir" => out_dir = Some(PathBuf::from(&value)),
                "preset" => preset = value,
                "scale" => scale = value.parse().map_err(|e| bad(format!("{e}")))?,
                "tile" => tile = value.parse().map_err(|e| bad(format!("{e}")))?,
                "epochs" => cfg.total_epochs = value.parse().map_err(|e| bad(format!("{e}")))?,
                "warmup_epochs" => {
                    cfg.warmup_epochs = value.parse().map_err(|e| bad(format!("{e}")))?
                }
                "batch_size" => cfg.batch_size = value.parse().map_err(|e| bad(format!("{e}")))?,
                "base_lr" => cfg.base_lr = value.parse().map_err(|e| bad(format!("{e}")))?,
                "min_lr" => cfg.min_lr = value.parse().map_err(|e| bad(format!("{e}")))?,
                "seed" => cfg.seed = value.parse().map_err(|e| bad(format!("{e}")))?,
                "crop" => cfg.crop = value.parse().map_err(|e| bad(format!("{e}")))?,
                "max_depth_cm" => {
                    cfg.max_depth_cm = value.parse().map_err(|e| bad(format!("{e}")))?
                }
                "hf_target" => cfg.hf_target = HfTarget::parse(&value)?,
                "augment" => {
                    cfg.augment = value.parse().map_err(|e| bad(format!("{e}")))?
                }
                "clip_grad_norm" => {
                    let v: f64 = value.parse().map_err(|e| bad(format!("{e}")))?;
                    cfg.clip_grad_norm = (v > 0.0).then_some(v);
                }
                "lambda_d" => loss.lambda_d = value.parse().map_err(|e| bad(format!("{e}")))?,
                "lambda_g" => loss.lambda_g = value.parse().map_err(|e| bad(format!("{e}")))?,
                other => {
                    return Err(Error::InvalidConfig(format!("unknown config key '{other}'")))
                }
            }
        }
        let data_dir =
            data_dir.ok_or_else(|| Error::InvalidConfig("missing key 'data_dir'".to_string()))?;
        let out_dir =
            out_dir.ok_or_else(|| Error::InvalidConfig("missing key 'out_dir'".to_string()))?;
        Ok(TrainRun {
            val_dir: val_dir.unwrap_or_else(|| data_dir.clone()),
            data_dir,
            out_dir,
            preset,
            scale,
            tile,
            cfg,
            loss,
        })
    }
}

fn cmd_train(args: &[String]) -> Result<()> {
    let flags = parse_flags(args, &["config"])?;
    let run = TrainRun::from_file(Path::new(require(&flags, "config")?))?;

    let train_set: Vec<SamplePair> = load_dataset(&run.data_dir, run.scale)?
        .into_iter()
        .map(|(_, s)| s)
        .collect();
    if train_set.is_empty() {
        return Err(Error::InvalidConfig(format!(
            "no samples found in {}",
            run.data_dir.display()
        )));
    }
    let val_set = load_dataset(&run.val_dir, run.scale)?;
    let norm = Normalizer::new(run.cfg.max_depth_cm)?;

    std::fs::create_dir_all(&run.out_dir)?;
    let mut model = GuidedDsr::new(
        ModelConfig::from_preset(&run.preset)?,
        &mut Rng::new(run.cfg.seed ^ 0x6d6f64656c),
    )?;
    let mut rng = Rng::new(run.cfg.seed);
    let mut adam = Adam::new();

    let mut log = String::from("epoch,lr,loss_depth,loss_gradient,loss_total,val_mse,val_mae\n");
    for epoch in 0..run.cfg.total_epochs {
        let stats = train_epoch(
            &mut model,
            &train_set,
            &run.loss,
            &run.cfg,
            epoch,
            &mut adam,
            &mut rng,
        )?;
        let report = evaluate_dataset(&model, &val_set, &norm, run.tile)?;
        println!(
            "epoch {:>4}  lr {:.3e}  L_d {:.5}  L_g {:.5}  L {:.5}  val MSE {:.3} cm^2  MAE {:.3} cm",
            epoch,
            stats.lr,
            stats.depth_loss,
            stats.gradient_loss,
            stats.total_loss,
            report.aggregate.mse,
            report.aggregate.mae
        );
        log.push_str(&format!(
            "{},{:.6e},{:.6},{:.6},{:.6},{:.6},{:.6}\n",
            epoch,
            stats.lr,
            stats.depth_loss,
            stats.gradient_loss,
            stats.total_loss,
            report.aggregate.mse,
            report.aggregate.mae
        ));
        save_checkpoint(&mut model, &run.out_dir.join("model.ckpt"))?;
        std::fs::write(run.out_dir.join("train_log.csv"), &log)?;
    }
    println!(
        "done; checkpoint and log written to {}",
        run.out_dir.display()
    );
    Ok(())
}

// --------------------------------------------------------------------- eval

fn cmd_eval(args: &[String]) -> Result<()> {
    let flags = parse_flags(
        args,
        &["model", "data", "scale", "out", "preset", "max-depth", "tile"],
    )?;
    let data_dir = PathBuf::from(require(&flags, "data")?);
    let scale: usize = get_parsed(&flags, "scale", 4)?;
    let out = PathBuf::from(require(&flags, "out")?);
    let tile: usize = get_parsed(&flags, "tile", 256)?;
    let preset = get_parsed(&flags, "preset", "tiny".to_string())?;
    let norm = Normalizer::new(get_parsed(&flags, "max-depth", 1000.0)?)?;

    let samples = load_dataset(&data_dir, scale)?;
    if samples.is_empty() {
        return Err(Error::InvalidConfig(format!(
            "no samples found in {}",
            data_dir.display()
        )));
    }

    let model_arg = flags.get("model").map(String::as_str).unwrap_or("bicubic");
    let report = if model_arg == "bicubic" {
        bicubic_report(&samples)?
    } else {
        let model = build_model(&preset, Some(Path::new(model_arg)))?;
        evaluate_dataset(&model, &samples, &norm, tile)?
    };

    std::fs::write(&out, report.to_csv())?;
    println!(
        "evaluated {} samples: MSE {:.4} cm^2, MAE {:.4} cm, RMSE {:.4} cm -> {}",
        report.rows.len(),
        report.aggregate.mse,
        report.aggregate.mae,
        report.aggregate.rmse,
        out.display()
    );
    Ok(())
}

/// Baseline report from bicubic upsampling of the LR depth.
fn bicubic_report(samples: &[(String, SamplePair)]) -> Result<EvalReport> {
    let mut rows = Vec::new();
    let (mut sq, mut ab, mut count) = (0.0f64, 0.0f64, 0u64);
    for (name, sample) in samples {
        let pred = bicubic_baseline(sample)?;
        rows.push((name.clone(), metrics(&pred, &sample.d_gt, &sample.mask)?));
        for ((p, g), m) in pred
            .data()
            .iter()
            .zip(sample.d_gt.data())
            .zip(sample.mask.data())
        {
            if *m != 0.0 {
                let d = (*p as f64) - (*g as f64);
                sq += d * d;
                ab += d.abs();
                count += 1;
            }
        }
    }
    if count == 0 {
        return Err(Error::DegenerateInput);
    }
    let mse = sq / count as f64;
    Ok(EvalReport {
        rows,
        aggregate: Metrics {
            mse,
            mae: ab / count as f64,
            rmse: mse.sqrt(),
        },
    })
}

// -------------------------------------------------------------------- infer

fn load_pair(flags: &BTreeMap<String, String>, scale: usize) -> Result<SamplePair> {
    let (d_gt, mask) = load_depth(Path::new(require(flags, "depth")?))?;
    let i_hr = load_color_png(Path::new(require(flags, "color")?))?;
    let d_lr = make_lr(&d_gt, scale)?;
    let sample = SamplePair {
        d_gt,
        i_hr,
        d_lr,
        mask,
        scale,
    };
    sample.validate()?;
    Ok(sample)
}

fn cmd_infer(args: &[String]) -> Result<()> {
    let flags = parse_flags(
        args,
        &[
            "model", "depth", "color", "scale", "out", "preset", "max-depth", "tile",
        ],
    )?;
    let scale: usize = get_parsed(&flags, "scale", 4)?;
    let tile: usize = get_parsed(&flags, "tile", 256)?;
    let preset = get_parsed(&flags, "preset", "tiny".to_string())?;
    let norm = Normalizer::new(get_parsed(&flags, "max-depth", 1000.0)?)?;
    let out_base = PathBuf::from(require(&flags, "out")?);
    let model = build_model(&preset, Some(Path::new(require(&flags, "model")?)))?;

    let sample = load_pair(&flags, scale)?;
    let lr_n = norm.normalize_map(&sample.d_lr);
    let pred_n = tiled_inference(&model, &lr_n, &sample.i_hr, tile)?;
    let pred = norm.denormalize_map(&pred_n);

    let pfm = out_base.with_extension("pfm");
    save_pfm(&pfm, &pred)?;
    let err_map = Tensor::from_vec(
        pred.shape(),
        pred.data()
            .iter()
            .zip(sample.d_gt.data())
            .zip(sample.mask.data())
            .map(|((p, g), m)| if *m != 0.0 { (p - g).abs() } else { 0.0 })
            .collect(),
    )?;
    let err_png = out_base.with_extension("error.png");
    save_gray_png8(&err_png, &err_map)?;
    let m = metrics(&pred, &sample.d_gt, &sample.mask)?;
    println!(
        "wrote {} and {} (MSE {:.4} cm^2, MAE {:.4} cm)",
        pfm.display(),
        err_png.display(),
        m.mse,
        m.mae
    );
    Ok(())
}

// --------------------------------------------------------------- grad-check

fn cmd_grad_check(args: &[String]) -> Result<()> {
    let flags = parse_flags(args, &["coords", "inject-fault"])?;
    let coords: usize = get_parsed(&flags, "coords", 64)?;
    // Fault injection biases every measured error; the command must then
    // report failures and exit nonzero, demonstrating the harness contract.
    let bias = if flags.contains_key("inject-fault") {
        0.01
    } else {
        0.0
    };

    const H: f64 = 1e-4;
    const TOL: f64 = 1e-3;
    let mut failures = 0;
    let mut check = |name: &str, err: f64| {
        let err = err + bias;
        let ok = err <= TOL;
        println!("{} {name}: rel err {err:.3e}", if ok { "PASS" } else { "FAIL" });
        if !ok {
            failures += 1;
        }
    };

    for seed in 0..3u64 {
        let mut rng = Rng::new(1000 + seed);
        let x = Tensor::<f64>::rand(Shape::new(1, 2, 8, 8), -1.0, 1.0, &mut rng);
        let conv = Conv2d::<f64>::new(2, 3, 3, &mut rng);
        check(
            &format!("conv2d[seed {seed}]"),
            grad_check(|t| conv.forward(t), &x, H)?,
        );
        check(
            &format!("avg_pool2d[seed {seed}]"),
            grad_check(|t| avg_pool2d(t, 2, 2), &x, H)?,
        );
        check(
            &format!("global_avg_pool[seed {seed}]"),
            grad_check(|t| global_avg_pool(t), &x, H)?,
        );
        check(
            &format!("bilinear[seed {seed}]"),
            grad_check(|t| resize(t, 11, 13, ResizeMode::Bilinear), &x, H)?,
        );
        check(
            &format!("bicubic[seed {seed}]"),
            grad_check(|t| resize_bicubic(t, 12, 12), &x, H)?,
        );
        check(
            &format!("blur121[seed {seed}]"),
            grad_check(|t| Ok(blur121(t)), &x, H)?,
        );
        check(
            &format!("sigmoid[seed {seed}]"),
            grad_check(|t| Ok(activation(t, Activation::Sigmoid)), &x, H)?,
        );
        check(
            &format!("softmax[seed {seed}]"),
            grad_check(|t| Ok(softmax_w(t)), &x, H)?,
        );
        let w = Tensor::<f64>::rand(Shape::new(3, 2 * 8 * 8, 1, 1), -0.5, 0.5, &mut rng);
        let b = Tensor::<f64>::rand(Shape::new(1, 3, 1, 1), -0.5, 0.5, &mut rng);
        check(
            &format!("linear[seed {seed}]"),
            grad_check(|t| linear(t, &w, &b), &x, H)?,
        );
    }

    // Full tiny model: total loss gradient w.r.t. sampled parameters.
    let mut rng = Rng::new(4242);
    let mut model = GuidedDsr::<f64>::new(ModelConfig::tiny(), &mut rng)?;
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
        Some((coords, 7)),
        H,
    )?;
    check(&format!("full model[{coords} params]"), err);

    if failures > 0 {
        Err(Error::Harness(format!("{failures} gradient checks failed")))
    } else {
        println!("all gradient checks passed");
        Ok(())
    }
}

// ----------------------------------------------------------- export-gradmap

fn cmd_export_gradmap(args: &[String]) -> Result<()> {
    let flags = parse_flags(
        args,
        &["model", "depth", "color", "scale", "out", "preset", "max-depth"],
    )?;
    let scale: usize = get_parsed(&flags, "scale", 4)?;
    let preset = get_parsed(&flags, "preset", "tiny".to_string())?;
    let norm = Normalizer::new(get_parsed(&flags, "max-depth", 1000.0)?)?;
    let out = PathBuf::from(require(&flags, "out")?);
    let model = build_model(&preset, Some(Path::new(require(&flags, "model")?)))?;

    let sample = load_pair(&flags, scale)?;
    let lr_n = norm.normalize_map(&sample.d_lr);
    let hr = sample.i_hr.shape();
    let edge = no_grad(|| -> Result<_> {
        let d_up = resize_bicubic(&lr_n, hr.h, hr.w)?;
        model.edge.forward(&d_up, &sample.i_hr)
    })?;
    save_gray_png8(&out, &edge.grad_map)?;
    println!("wrote gradient map to {}", out.display());
    Ok(())
}

// -------------------------------------------------------------------- synth

fn cmd_synth(args: &[String]) -> Result<()> {
    let flags = parse_flags(args, &["out", "count", "size", "scale", "seed", "shapes"])?;
    let out = PathBuf::from(require(&flags, "out")?);
    let count: usize = get_parsed(&flags, "count", 20)?;
    let size: usize = get_parsed(&flags, "size", 64)?;
    let scale: usize = get_parsed(&flags, "scale", 4)?;
    let seed: u64 = get_parsed(&flags, "seed", 0)?;
    let shapes: usize = get_parsed(&flags, "shapes", 6)?;

    let mut rng = Rng::new(seed);
    for i in 0..count {
        let scene = synth_scene(&mut rng, size, shapes, scale, (60.0, 360.0))?;
        save_scene(&out, &format!("scene_{i:03}"), &scene)?;
    }
    println!("wrote {count} scenes of {size}x{size} to {}", out.display());
    Ok(())
}
