//! Losses, gradient ground truth, the optimizer schedule, augmentation and
//! the training loop.

use crate::data::{crop_sample, stack_batch, Normalizer, SamplePair};
use crate::error::{Error, Result};
use crate::freq::dct_basis;
use crate::model::{GuidedDsr, ModelOutput};
use crate::rng::Rng;
use crate::tensor::{abs, add, mul, scale, sub, sum_all, Elem, Shape, Tensor};

/// Loss weighting: the two intermediate depth terms carry `lambda_d`, the
/// gradient term `lambda_g`. Masked terms average over valid pixels.
#[derive(Clone, Copy, Debug)]
pub struct LossConfig {
    pub lambda_d: f64,
    pub lambda_g: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            lambda_d: 0.2,
            lambda_g: 0.01,
        }
    }
}

/// Which high-frequency map supervises the edge branch.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum HfTarget {
    /// Sobel gradient magnitude (the default).
    Gradient,
    /// Binary Canny edges, hysteresis thresholds at 0.1/0.2 of the peak.
    Canny,
    /// |x - gaussian_blur(x, sigma = 2)|.
    Gaussian,
    /// Block-8 DCT with the lowest frequencies removed, magnitude.
    Dct,
    /// Single-level Haar detail magnitude, upsampled back to full size.
    Wavelet,
}

impl HfTarget {
    pub fn parse(name: &str) -> Result<Self> {
        match name {
            "gradient" => Ok(HfTarget::Gradient),
            "canny" => Ok(HfTarget::Canny),
            "gaussian" => Ok(HfTarget::Gaussian),
            "dct" => Ok(HfTarget::Dct),
            "wavelet" => Ok(HfTarget::Wavelet),
            other => Err(Error::InvalidConfig(format!("unknown hf target '{other}'"))),
        }
    }
}

/// Training protocol knobs; the defaults follow the published recipe
/// (batch 4, base LR 1e-4, 5-epoch warm-up with cosine annealing, 256 crops).
#[derive(Clone, Debug)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub base_lr: f64,
    pub min_lr: f64,
    pub warmup_epochs: usize,
    pub total_epochs: usize,
    pub seed: u64,
    pub crop: usize,
    pub hf_target: HfTarget,
    /// Dataset normalization constant (centimeters).
    pub max_depth_cm: f64,
    /// Random flip/rotation augmentation; switched off for overfit probes.
    pub augment: bool,
    /// Global L2 gradient-norm clip applied before each optimizer step.
    pub clip_grad_norm: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 4,
            base_lr: 1e-4,
            min_lr: 1e-6,
            warmup_epochs: 5,
            total_epochs: 100,
            seed: 0,
            crop: 256,
            hf_target: HfTarget::Gradient,
            max_depth_cm: 1000.0,
            augment: true,
            clip_grad_norm: Some(1.0),
        }
    }
}

// ------------------------------------------------------- gradient targets

/// Sobel gradient magnitude with replicate borders; kernels are scaled by
/// 1/8 so a unit ramp maps to gradient 1.
pub fn extract_gradient_gt<E: Elem>(d: &Tensor<E>) -> Tensor<E> {
    let s = d.shape();
    let mut out = Tensor::zeros(s);
    let shape = s;
    let data = out.data_mut();
    let clamp = |v: isize, hi: usize| v.clamp(0, hi as isize - 1) as usize;
    for n in 0..s.n {
        for c in 0..s.c {
            for y in 0..s.h {
                for x in 0..s.w {
                    let mut gx = 0.0f64;
                    let mut gy = 0.0f64;
                    for dy in -1isize..=1 {
                        for dx in -1isize..=1 {
                            let v = d
                                .at(n, c, clamp(y as isize + dy, s.h), clamp(x as isize + dx, s.w))
                                .to_f64();
                            let wx = dx as f64 * (2 - dy.abs()) as f64; // [-1 0 1; -2 0 2; -1 0 1]
                            let wy = dy as f64 * (2 - dx.abs()) as f64;
                            gx += v * wx / 8.0;
                            gy += v * wy / 8.0;
                        }
                    }
                    data[shape.index(n, c, y, x)] = E::from_f64((gx * gx + gy * gy).sqrt());
                }
            }
        }
    }
    out
}

fn gaussian_blur_plane(src: &[f64], h: usize, w: usize, sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil() as isize;
    let mut kernel = Vec::with_capacity((2 * radius + 1) as usize);
    for i in -radius..=radius {
        kernel.push((-((i * i) as f64) / (2.0 * sigma * sigma)).exp());
    }
    let norm: f64 = kernel.iter().sum();
    for k in &mut kernel {
        *k /= norm;
    }
    let clamp = |v: isize, hi: usize| v.clamp(0, hi as isize - 1) as usize;
    let mut tmp = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (i, k) in kernel.iter().enumerate() {
                acc += k * src[y * w + clamp(x as isize + i as isize - radius, w)];
            }
            tmp[y * w + x] = acc;
        }
    }
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (i, k) in kernel.iter().enumerate() {
                acc += k * tmp[clamp(y as isize + i as isize - radius, h) * w + x];
            }
            out[y * w + x] = acc;
        }
    }
    out
}

fn canny_plane(src: &[f64], h: usize, w: usize) -> Vec<f64> {
    let smooth = gaussian_blur_plane(src, h, w, 1.4);
    let clamp = |v: isize, hi: usize| v.clamp(0, hi as isize - 1) as usize;
    let mut mag = vec![0.0f64; h * w];
    let mut dir = vec![0u8; h * w];
    for y in 0..h {
        for x in 0..w {
            let mut gx = 0.0;
            let mut gy = 0.0;
            for dy in -1isize..=1 {
                for dx in -1isize..=1 {
                    let v = smooth[clamp(y as isize + dy, h) * w + clamp(x as isize + dx, w)];
                    gx += v * dx as f64 * (2 - dy.abs()) as f64 / 8.0;
                    gy += v * dy as f64 * (2 - dx.abs()) as f64 / 8.0;
                }
            }
            mag[y * w + x] = (gx * gx + gy * gy).sqrt();
            let angle = gy.atan2(gx).to_degrees();
            let a = ((angle + 180.0) / 45.0).round() as i32 % 4;
            dir[y * w + x] = a as u8; // 0: E-W, 1: NE-SW, 2: N-S, 3: NW-SE
        }
    }
    // non-maximum suppression
    let offsets = [(0isize, 1isize), (-1, 1), (-1, 0), (-1, -1)];
    let mut nms = vec![0.0f64; h * w];
    for y in 0..h {
        for x in 0..w {
            let (dy, dx) = offsets[dir[y * w + x] as usize];
            let a = mag[clamp(y as isize + dy, h) * w + clamp(x as isize + dx, w)];
            let b = mag[clamp(y as isize - dy, h) * w + clamp(x as isize - dx, w)];
            let m = mag[y * w + x];
            if m >= a && m >= b {
                nms[y * w + x] = m;
            }
        }
    }
    let peak = nms.iter().cloned().fold(0.0, f64::max);
    if peak == 0.0 {
        return vec![0.0; h * w];
    }
    let (low, high) = (0.1 * peak, 0.2 * peak);
    // hysteresis: strong pixels seed a flood fill through weak neighbours
    let mut out = vec![0.0f64; h * w];
    let mut stack: Vec<usize> = Vec::new();
    for (i, v) in nms.iter().enumerate() {
        if *v >= high {
            out[i] = 1.0;
            stack.push(i);
        }
    }
    while let Some(i) = stack.pop() {
        let (y, x) = (i / w, i % w);
        for dy in -1isize..=1 {
            for dx in -1isize..=1 {
                let ny = y as isize + dy;
                let nx = x as isize + dx;
                if ny < 0 || nx < 0 || ny >= h as isize || nx >= w as isize {
                    continue;
                }
                let j = ny as usize * w + nx as usize;
                if out[j] == 0.0 && nms[j] >= low {
                    out[j] = 1.0;
                    stack.push(j);
                }
            }
        }
    }
    out
}

fn dct_highpass_plane(src: &[f64], h: usize, w: usize) -> Result<Vec<f64>> {
    const N: usize = 8;
    if h % N != 0 || w % N != 0 {
        return Err(Error::InvalidShape(format!(
            "dct high-pass needs dims divisible by {N}, got {h}x{w}"
        )));
    }
    let basis = dct_basis(N)?;
    let b = |k: usize, i: usize| basis[k * N + i];
    let mut out = vec![0.0f64; h * w];
    for ty in (0..h).step_by(N) {
        for tx in (0..w).step_by(N) {
            let mut coeff = [[0.0f64; N]; N];
            for (u, row) in coeff.iter_mut().enumerate() {
                for (v, cell) in row.iter_mut().enumerate() {
                    let mut acc = 0.0;
                    for i in 0..N {
                        for j in 0..N {
                            acc += src[(ty + i) * w + tx + j] * b(u, i) * b(v, j);
                        }
                    }
                    // low-cut: drop the lowest anti-diagonals
                    *cell = if u + v <= 2 { 0.0 } else { acc };
                }
            }
            for i in 0..N {
                for j in 0..N {
                    let mut acc = 0.0;
                    for (u, row) in coeff.iter().enumerate() {
                        for (v, cell) in row.iter().enumerate() {
                            acc += cell * b(u, i) * b(v, j);
                        }
                    }
                    out[(ty + i) * w + tx + j] = acc.abs();
                }
            }
        }
    }
    Ok(out)
}

fn haar_detail_plane(src: &[f64], h: usize, w: usize) -> Result<Vec<f64>> {
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::InvalidShape(format!(
            "haar detail needs even dims, got {h}x{w}"
        )));
    }
    let mut out = vec![0.0f64; h * w];
    for y in (0..h).step_by(2) {
        for x in (0..w).step_by(2) {
            let a = src[y * w + x];
            let b = src[y * w + x + 1];
            let c = src[(y + 1) * w + x];
            let d = src[(y + 1) * w + x + 1];
            let lh = (a - b + c - d) / 2.0;
            let hl = (a + b - c - d) / 2.0;
            let hh = (a - b - c + d) / 2.0;
            let m = (lh * lh + hl * hl + hh * hh).sqrt();
            out[y * w + x] = m;
            out[y * w + x + 1] = m;
            out[(y + 1) * w + x] = m;
            out[(y + 1) * w + x + 1] = m;
        }
    }
    Ok(out)
}

/// High-frequency supervision target of the requested kind; always
/// non-negative and the same shape as the input.
pub fn extract_hf_target<E: Elem>(d: &Tensor<E>, kind: HfTarget) -> Result<Tensor<E>> {
    if kind == HfTarget::Gradient {
        return Ok(extract_gradient_gt(d));
    }
    let s = d.shape();
    let mut out = Tensor::zeros(s);
    let shape = s;
    for n in 0..s.n {
        for c in 0..s.c {
            let plane: Vec<f64> = (0..s.h * s.w)
                .map(|i| d.at(n, c, i / s.w, i % s.w).to_f64())
                .collect();
            let result = match kind {
                HfTarget::Canny => canny_plane(&plane, s.h, s.w),
                HfTarget::Gaussian => {
                    let blurred = gaussian_blur_plane(&plane, s.h, s.w, 2.0);
                    plane
                        .iter()
                        .zip(&blurred)
                        .map(|(a, b)| (a - b).abs())
                        .collect()
                }
                HfTarget::Dct => dct_highpass_plane(&plane, s.h, s.w)?,
                HfTarget::Wavelet => haar_detail_plane(&plane, s.h, s.w)?,
                HfTarget::Gradient => unreachable!(),
            };
            let data = out.data_mut();
            for (i, v) in result.iter().enumerate() {
                data[shape.index(n, c, i / s.w, i % s.w)] = E::from_f64(*v);
            }
        }
    }
    Ok(out)
}

// ------------------------------------------------------------------ losses

/// Mean absolute error over valid pixels; the mask must select at least one.
pub fn masked_mean_abs<E: Elem>(
    pred: &Tensor<E>,
    gt: &Tensor<E>,
    mask: &Tensor<E>,
) -> Result<Tensor<E>> {
    let valid = mask.data().iter().filter(|v| **v != E::ZERO).count();
    if valid == 0 {
        return Err(Error::DegenerateBatch);
    }
    let diff = sub(pred, gt)?;
    let masked = mul(&diff, mask)?;
    Ok(scale(&sum_all(&abs(&masked)), E::from_f64(1.0 / valid as f64)))
}

/// Depth loss: masked L1 of the final estimate plus `lambda_d`-weighted
/// masked L1 of every intermediate stage estimate.
pub fn depth_loss<E: Elem>(
    out: &ModelOutput<E>,
    d_gt: &Tensor<E>,
    mask: &Tensor<E>,
    cfg: &LossConfig,
) -> Result<Tensor<E>> {
    let mut total = masked_mean_abs(&out.d_sr, d_gt, mask)?;
    let lambda = E::from_f64(cfg.lambda_d);
    for stage in &out.stage_depths {
        let term = masked_mean_abs(stage, d_gt, mask)?;
        total = add(&total, &scale(&term, lambda))?;
    }
    Ok(total)
}

/// Gradient loss: plain mean absolute difference over all sites.
pub fn gradient_loss<E: Elem>(e_pred: &Tensor<E>, e_gt: &Tensor<E>) -> Result<Tensor<E>> {
    let diff = sub(e_pred, e_gt)?;
    Ok(scale(
        &sum_all(&abs(&diff)),
        E::from_f64(1.0 / e_pred.numel() as f64),
    ))
}

/// total = depth + lambda_g * gradient.
pub fn total_loss<E: Elem>(l_d: &Tensor<E>, l_g: &Tensor<E>, cfg: &LossConfig) -> Result<Tensor<E>> {
    add(l_d, &scale(l_g, E::from_f64(cfg.lambda_g)))
}

// ---------------------------------------------------------------- schedule

/// Learning rate at a (fractional) epoch: linear warm-up from `min_lr` to
/// `base_lr`, then cosine annealing back down to `min_lr`.
pub fn lr_at(epoch: f64, cfg: &TrainConfig) -> Result<f64> {
    let total = cfg.total_epochs as f64;
    if !(0.0..=total).contains(&epoch) {
        return Err(Error::InvalidParameter(format!(
            "epoch {epoch} outside [0, {total}]"
        )));
    }
    let warmup = cfg.warmup_epochs as f64;
    if epoch < warmup {
        return Ok(cfg.min_lr + (cfg.base_lr - cfg.min_lr) * epoch / warmup);
    }
    if total <= warmup {
        return Ok(cfg.base_lr);
    }
    let t = (epoch - warmup) / (total - warmup);
    Ok(cfg.min_lr + 0.5 * (cfg.base_lr - cfg.min_lr) * (1.0 + (std::f64::consts::PI * t).cos()))
}

// ------------------------------------------------------------------- adam

/// Adam with bias correction, beta = (0.9, 0.999), eps = 1e-8. Moment
/// buffers are keyed by visitation order, which is stable for a model.
pub struct Adam<E: Elem> {
    step: u64,
    moments: Vec<(Vec<E>, Vec<E>)>,
}

impl<E: Elem> Default for Adam<E> {
    fn default() -> Self {
        Self::new()
    }
}

impl<E: Elem> Adam<E> {
    pub fn new() -> Self {
        Adam {
            step: 0,
            moments: Vec::new(),
        }
    }

    /// Applies one update at the given rate. If any gradient is non-finite
    /// the step is skipped entirely and reported as an error; parameters and
    /// moments stay untouched.
    pub fn step<V>(&mut self, mut visit: V, lr: f64) -> Result<()>
    where
        V: FnMut(&mut dyn FnMut(&mut Tensor<E>)),
    {
        // First pass: gather gradients and refuse the step on any NaN/Inf.
        let mut grads: Vec<Vec<E>> = Vec::new();
        let mut poisoned = false;
        visit(&mut |t| {
            let g = t.grad().unwrap_or_else(|| vec![E::ZERO; t.numel()]);
            if g.iter().any(|v| !v.is_finite()) {
                poisoned = true;
            }
            grads.push(g);
        });
        if poisoned {
            return Err(Error::AbortStep(
                "non-finite gradient encountered".to_string(),
            ));
        }
        if self.moments.is_empty() {
            self.moments = grads
                .iter()
                .map(|g| (vec![E::ZERO; g.len()], vec![E::ZERO; g.len()]))
                .collect();
        }
        if self.moments.len() != grads.len() {
            return Err(Error::InvalidConfig(
                "optimizer state does not match the parameter set".to_string(),
            ));
        }

        self.step += 1;
        let b1 = E::from_f64(0.9);
        let b2 = E::from_f64(0.999);
        let eps = E::from_f64(1e-8);
        let c1 = E::from_f64(1.0 / (1.0 - 0.9f64.powi(self.step as i32)));
        let c2 = E::from_f64(1.0 / (1.0 - 0.999f64.powi(self.step as i32)));
        let lr = E::from_f64(lr);

        let mut index = 0;
        visit(&mut |t| {
            let g = &grads[index];
            let (m, v) = &mut self.moments[index];
            let data = t.data_mut();
            for i in 0..g.len() {
                m[i] = b1 * m[i] + (E::ONE - b1) * g[i];
                v[i] = b2 * v[i] + (E::ONE - b2) * g[i] * g[i];
                let m_hat = m[i] * c1;
                let v_hat = v[i] * c2;
                data[i] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
            index += 1;
        });
        Ok(())
    }
}

// ------------------------------------------------------------ augmentation

/// Independently sampled horizontal flip, vertical flip and quarter-turn
/// rotation (square crops only), applied consistently to every map.
pub fn augment(sample: &SamplePair, rng: &mut Rng) -> SamplePair {
    let flip_h = rng.coin();
    let flip_v = rng.coin();
    let g = sample.d_gt.shape();
    let quarter = if g.h == g.w { rng.below(4) } else { 0 };
    transform_sample(sample, flip_h, flip_v, quarter)
}

fn transform_sample(sample: &SamplePair, fh: bool, fv: bool, quarter: usize) -> SamplePair {
    SamplePair {
        d_gt: transform_map(&sample.d_gt, fh, fv, quarter),
        i_hr: transform_map(&sample.i_hr, fh, fv, quarter),
        mask: transform_map(&sample.mask, fh, fv, quarter),
        d_lr: transform_map(&sample.d_lr, fh, fv, quarter),
        scale: sample.scale,
    }
}

/// Flips then rotates counter-clockwise by `quarter` * 90 degrees.
pub fn transform_map(t: &Tensor<f32>, fh: bool, fv: bool, quarter: usize) -> Tensor<f32> {
    let s = t.shape();
    let (oh, ow) = if quarter % 2 == 1 { (s.w, s.h) } else { (s.h, s.w) };
    Tensor::from_fn(Shape::new(s.n, s.c, oh, ow), |n, c, y, x| {
        // invert the rotation to find the source site
        let (mut sy, mut sx) = match quarter % 4 {
            0 => (y, x),
            1 => (x, s.w - 1 - y),
            2 => (s.h - 1 - y, s.w - 1 - x),
            _ => (s.h - 1 - x, y),
        };
        if fh {
            sx = s.w - 1 - sx;
        }
        if fv {
            sy = s.h - 1 - sy;
        }
        t.at(n, c, sy, sx)
    })
}

// ------------------------------------------------------------ training loop

#[derive(Clone, Copy, Debug, Default)]
pub struct EpochStats {
    pub depth_loss: f64,
    pub gradient_loss: f64,
    pub total_loss: f64,
    pub lr: f64,
    pub steps: usize,
    pub skipped: usize,
}

/// One pass over the dataset: shuffled square crops in batches, loss,
/// backprop, Adam at the scheduled rate. Degenerate batches (empty masks)
/// and non-finite gradients are skipped with a warning.
pub fn train_epoch(
    model: &mut GuidedDsr<f32>,
    dataset: &[SamplePair],
    loss_cfg: &LossConfig,
    cfg: &TrainConfig,
    epoch: usize,
    adam: &mut Adam<f32>,
    rng: &mut Rng,
) -> Result<EpochStats> {
    if dataset.is_empty() {
        return Err(Error::InvalidConfig("empty training dataset".to_string()));
    }
    let norm = Normalizer::new(cfg.max_depth_cm)?;
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    rng.shuffle(&mut order);

    let steps = order.len().div_ceil(cfg.batch_size);
    let mut stats = EpochStats::default();
    for (step, chunk) in order.chunks(cfg.batch_size).enumerate() {
        let lr = lr_at(
            (epoch as f64 + step as f64 / steps as f64).min(cfg.total_epochs as f64),
            cfg,
        )?;

        let mut gts = Vec::with_capacity(chunk.len());
        let mut colors = Vec::with_capacity(chunk.len());
        let mut lrs = Vec::with_capacity(chunk.len());
        let mut masks = Vec::with_capacity(chunk.len());
        let mut edges = Vec::with_capacity(chunk.len());
        for &idx in chunk {
            let sample = &dataset[idx];
            let cropped = random_crop(sample, cfg.crop, rng)?;
            let augmented = if cfg.augment {
                augment(&cropped, rng)
            } else {
                cropped
            };
            let unit = norm.normalize(&augmented);
            edges.push(extract_hf_target(&unit.d_gt, cfg.hf_target)?);
            gts.push(unit.d_gt);
            colors.push(unit.i_hr);
            lrs.push(unit.d_lr);
            masks.push(unit.mask);
        }
        let d_gt = stack_batch(&gts.iter().collect::<Vec<_>>())?;
        let i_hr = stack_batch(&colors.iter().collect::<Vec<_>>())?;
        let d_lr = stack_batch(&lrs.iter().collect::<Vec<_>>())?;
        let mask = stack_batch(&masks.iter().collect::<Vec<_>>())?;
        let e_gt = stack_batch(&edges.iter().collect::<Vec<_>>())?;

        model.for_each_param(&mut |_, t| t.clear_grad());
        let out = model.forward(&d_lr, &i_hr)?;
        let l_d = match depth_loss(&out, &d_gt, &mask, loss_cfg) {
            Ok(l) => l,
            Err(Error::DegenerateBatch) => {
                eprintln!("warning: skipping batch {step}: no valid pixels");
                stats.skipped += 1;
                continue;
            }
            Err(e) => return Err(e),
        };
        let l_g = gradient_loss(&out.e_pred, &e_gt)?;
        let l_total = total_loss(&l_d, &l_g, loss_cfg)?;
        l_total.backward()?;
        if let Some(limit) = cfg.clip_grad_norm {
            clip_gradients(model, limit);
        }

        match adam.step(|f| model.for_each_param(&mut |_, t| f(t)), lr) {
            Ok(()) => {}
            Err(Error::AbortStep(msg)) => {
                eprintln!("warning: skipping step {step}: {msg}");
                stats.skipped += 1;
                continue;
            }
            Err(e) => return Err(e),
        }

        stats.depth_loss += l_d.item() as f64;
        stats.gradient_loss += l_g.item() as f64;
        stats.total_loss += l_total.item() as f64;
        stats.lr = lr;
        stats.steps += 1;
    }
    if stats.steps > 0 {
        stats.depth_loss /= stats.steps as f64;
        stats.gradient_loss /= stats.steps as f64;
        stats.total_loss /= stats.steps as f64;
    }
    Ok(stats)
}

/// Rescales all parameter gradients so their global L2 norm is at most
/// `limit`.
pub fn clip_gradients(model: &mut GuidedDsr<f32>, limit: f64) {
    let mut sq = 0.0f64;
    model.for_each_param(&mut |_, t| {
        if let Some(g) = t.grad() {
            for v in g {
                sq += (v as f64) * (v as f64);
            }
        }
    });
    let norm = sq.sqrt();
    if norm > limit && norm.is_finite() {
        let factor = (limit / norm) as f32;
        model.for_each_param(&mut |_, t| t.scale_grad(factor));
    }
}

/// Square crop of the largest usable size up to `crop`, aligned so the LR
/// window is exact; falls back to the full sample when it is small.
fn random_crop(sample: &SamplePair, crop: usize, rng: &mut Rng) -> Result<SamplePair> {
    let g = sample.d_gt.shape();
    let s = sample.scale;
    let limit = crop.min(g.h).min(g.w);
    let size = (limit / 16) * 16;
    if size < 16 {
        return Err(Error::InvalidConfig(format!(
            "sample {}x{} too small for a 16-aligned crop",
            g.h, g.w
        )));
    }
    if size == g.h && size == g.w {
        return Ok(sample.clone());
    }
    let draw = |extent: usize, rng: &mut Rng| -> usize {
        let slots = (extent - size) / s + 1;
        s * rng.below(slots)
    };
    let y0 = draw(g.h, rng);
    let x0 = draw(g.w, rng);
    crop_sample(sample, y0, x0, size)
}
