//! Dataset ingestion, depth/color file formats, LR synthesis, metrics,
//! tiled inference and the synthetic scene generator used for CI.
//!
//! On-disk conventions:
//! - depth PNG: 16-bit grayscale, value = millimeters, 0 = invalid;
//! - depth PFM: standard little-endian single-channel float map, meters;
//! - color PNG: 8-bit RGB;
//! - in memory, depth is always centimeters.

use std::io::{BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::model::GuidedDsr;
use crate::rng::Rng;
use crate::tensor::{no_grad, resize_bicubic, Shape, Tensor};

/// One training or evaluation unit. Depth maps are in centimeters, color in
/// [0, 1]; the mask marks pixels with trustworthy ground truth.
#[derive(Clone)]
pub struct SamplePair {
    pub d_gt: Tensor<f32>,
    pub i_hr: Tensor<f32>,
    pub d_lr: Tensor<f32>,
    pub mask: Tensor<f32>,
    pub scale: usize,
}

impl SamplePair {
    pub fn validate(&self) -> Result<()> {
        let (g, c, l, m) = (
            self.d_gt.shape(),
            self.i_hr.shape(),
            self.d_lr.shape(),
            self.mask.shape(),
        );
        if g != m || g.h != c.h || g.w != c.w || g.c != 1 || c.c != 3 {
            return Err(Error::InvalidShape(format!(
                "sample maps disagree: gt {g}, color {c}, mask {m}"
            )));
        }
        if g.h != self.scale * l.h || g.w != self.scale * l.w {
            return Err(Error::InvalidShape(format!(
                "LR size {l} is not HR {g} over scale {}",
                self.scale
            )));
        }
        for (mv, dv) in self.mask.data().iter().zip(self.d_gt.data()) {
            if *mv != 0.0 && *dv <= 0.0 {
                return Err(Error::InvalidParameter(
                    "mask marks a pixel with non-positive depth as valid".to_string(),
                ));
            }
        }
        Ok(())
    }
}

// ---------------------------------------------------------------- formats

/// Reads a depth map (PNG-16 millimeters or PFM meters, by extension) into
/// centimeters plus a validity mask (raw zeros are invalid).
pub fn load_depth(path: &Path) -> Result<(Tensor<f32>, Tensor<f32>)> {
    let ext = path
        .extension()
        .and_then(|e| e.to_str())
        .unwrap_or("")
        .to_ascii_lowercase();
    let cm = match ext.as_str() {
        "png" => {
            let (w, h, values) = read_png16(path)?;
            Tensor::from_vec(
                Shape::new(1, 1, h, w),
                values.iter().map(|v| *v as f32 / 10.0).collect(),
            )?
        }
        "pfm" => {
            let (w, h, values) = read_pfm(path)?;
            Tensor::from_vec(
                Shape::new(1, 1, h, w),
                values.iter().map(|v| v * 100.0).collect(),
            )?
        }
        other => {
            return Err(Error::Io(format!(
                "unsupported depth format '.{other}' for {}",
                path.display()
            )))
        }
    };
    let mask = Tensor::from_vec(
        cm.shape(),
        cm.data()
            .iter()
            .map(|v| if *v > 0.0 { 1.0 } else { 0.0 })
            .collect(),
    )?;
    Ok((cm, mask))
}

fn read_png16(path: &Path) -> Result<(usize, usize, Vec<u16>)> {
    let file = std::fs::File::open(path)?;
    let mut decoder = png::Decoder::new(file);
    decoder.set_transformations(png::Transformations::IDENTITY);
    let mut reader = decoder.read_info()?;
    let info = reader.info();
    if info.bit_depth != png::BitDepth::Sixteen || info.color_type != png::ColorType::Grayscale {
        return Err(Error::Io(format!(
            "{}: expected 16-bit grayscale PNG, got {:?} {:?}",
            path.display(),
            info.bit_depth,
            info.color_type
        )));
    }
    let mut buf = vec![0; reader.output_buffer_size()];
    let frame = reader.next_frame(&mut buf)?;
    let (w, h) = (frame.width as usize, frame.height as usize);
    let mut values = Vec::with_capacity(w * h);
    for px in buf[..w * h * 2].chunks_exact(2) {
        values.push(u16::from_be_bytes([px[0], px[1]]));
    }
    Ok((w, h, values))
}

/// Writes centimeters as a 16-bit millimeter PNG (clamped to u16 range).
pub fn save_depth_png16(path: &Path, cm: &Tensor<f32>) -> Result<()> {
    let s = cm.shape();
    let file = std::fs::File::create(path)?;
    let mut encoder = png::Encoder::new(BufWriter::new(file), s.w as u32, s.h as u32);
    encoder.set_color(png::ColorType::Grayscale);
    encoder.set_depth(png::BitDepth::Sixteen);
    let mut writer = encoder.write_header()?;
    let mut bytes = Vec::with_capacity(s.h * s.w * 2);
    for v in cm.data() {
        let mm = (v * 10.0).round().clamp(0.0, 65535.0) as u16;
        bytes.extend_from_slice(&mm.to_be_bytes());
    }
    writer.write_image_data(&bytes)?;
    Ok(())
}

/// Reads a single-channel PFM (meters). Negative scale means little-endian;
/// rows are stored bottom-up per the format.
pub fn read_pfm(path: &Path) -> Result<(usize, usize, Vec<f32>)> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    let mut pos = 0;
    let mut token = |bytes: &[u8]| -> Result<String> {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::Io(format!("{}: truncated PFM header", path.display())));
        }
        let t = String::from_utf8_lossy(&bytes[start..pos]).into_owned();
        pos += 1; // the single whitespace after the token
        Ok(t)
    };
    let magic = token(&bytes)?;
    if magic != "Pf" {
        return Err(Error::Io(format!(
            "{}: not a single-channel PFM (magic '{magic}')",
            path.display()
        )));
    }
    let w: usize = token(&bytes)?
        .parse()
        .map_err(|e| Error::Io(format!("pfm width: {e}")))?;
    let h: usize = token(&bytes)?
        .parse()
        .map_err(|e| Error::Io(format!("pfm height: {e}")))?;
    let scale: f32 = token(&bytes)?
        .parse()
        .map_err(|e| Error::Io(format!("pfm scale: {e}")))?;
    let little_endian = scale < 0.0;
    let need = w * h * 4;
    if bytes.len() < pos + need {
        return Err(Error::Io(format!("{}: truncated PFM data", path.display())));
    }
    let mut values = vec![0.0f32; w * h];
    for y in 0..h {
        for x in 0..w {
            let at = pos + ((h - 1 - y) * w + x) * 4; // bottom-up rows
            let raw = [bytes[at], bytes[at + 1], bytes[at + 2], bytes[at + 3]];
            values[y * w + x] = if little_endian {
                f32::from_le_bytes(raw)
            } else {
                f32::from_be_bytes(raw)
            };
        }
    }
    Ok((w, h, values))
}

/// Writes centimeters as a little-endian PFM in meters.
pub fn save_pfm(path: &Path, cm: &Tensor<f32>) -> Result<()> {
    let s = cm.shape();
    let mut out = BufWriter::new(std::fs::File::create(path)?);
    write!(out, "Pf\n{} {}\n-1.0\n", s.w, s.h)?;
    for y in (0..s.h).rev() {
        for x in 0..s.w {
            let meters = cm.at(0, 0, y, x) / 100.0;
            out.write_all(&meters.to_le_bytes())?;
        }
    }
    Ok(())
}

/// Reads an 8-bit RGB PNG into (1, 3, h, w) values in [0, 1].
pub fn load_color_png(path: &Path) -> Result<Tensor<f32>> {
    let file = std::fs::File::open(path)?;
    let decoder = png::Decoder::new(file);
    let mut reader = decoder.read_info()?;
    let mut buf = vec![0; reader.output_buffer_size()];
    let frame = reader.next_frame(&mut buf)?;
    let (w, h) = (frame.width as usize, frame.height as usize);
    let channels = match frame.color_type {
        png::ColorType::Rgb => 3,
        png::ColorType::Rgba => 4,
        other => {
            return Err(Error::Io(format!(
                "{}: expected RGB color PNG, got {other:?}",
                path.display()
            )))
        }
    };
    let mut t = Tensor::zeros(Shape::new(1, 3, h, w));
    let shape = t.shape();
    let data = t.data_mut();
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                data[shape.index(0, c, y, x)] =
                    buf[(y * w + x) * channels + c] as f32 / 255.0;
            }
        }
    }
    Ok(t)
}

pub fn save_color_png(path: &Path, t: &Tensor<f32>) -> Result<()> {
    let s = t.shape();
    let file = std::fs::File::create(path)?;
    let mut encoder = png::Encoder::new(BufWriter::new(file), s.w as u32, s.h as u32);
    encoder.set_color(png::ColorType::Rgb);
    encoder.set_depth(png::BitDepth::Eight);
    let mut writer = encoder.write_header()?;
    let mut bytes = Vec::with_capacity(s.h * s.w * 3);
    for y in 0..s.h {
        for x in 0..s.w {
            for c in 0..3 {
                bytes.push((t.at(0, c, y, x).clamp(0.0, 1.0) * 255.0).round() as u8);
            }
        }
    }
    writer.write_image_data(&bytes)?;
    Ok(())
}

/// Writes a map as an 8-bit grayscale PNG, scaling [0, max] to [0, 255].
pub fn save_gray_png8(path: &Path, t: &Tensor<f32>) -> Result<()> {
    let s = t.shape();
    let peak = t.data().iter().cloned().fold(0.0f32, f32::max).max(1e-12);
    let file = std::fs::File::create(path)?;
    let mut encoder = png::Encoder::new(BufWriter::new(file), s.w as u32, s.h as u32);
    encoder.set_color(png::ColorType::Grayscale);
    encoder.set_depth(png::BitDepth::Eight);
    let mut writer = encoder.write_header()?;
    let bytes: Vec<u8> = t
        .data()
        .iter()
        .map(|v| ((v / peak).clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    writer.write_image_data(&bytes)?;
    Ok(())
}

// ------------------------------------------------------------ LR synthesis

/// Bicubic downsampling by the integer factor `s` (the LR generation
/// protocol for both training and evaluation).
pub fn make_lr(d_gt: &Tensor<f32>, s: usize) -> Result<Tensor<f32>> {
    let shape = d_gt.shape();
    if s == 0 || shape.h % s != 0 || shape.w % s != 0 {
        return Err(Error::InvalidShape(format!(
            "make_lr: {}x{} not divisible by factor {s}",
            shape.h, shape.w
        )));
    }
    no_grad(|| resize_bicubic(d_gt, shape.h / s, shape.w / s))
}

// ------------------------------------------------------------ normalization

/// Maps depth to [0, 1] by a per-dataset maximum (centimeters) and back.
#[derive(Clone, Copy, Debug)]
pub struct Normalizer {
    pub max_depth_cm: f64,
}

impl Normalizer {
    pub fn new(max_depth_cm: f64) -> Result<Self> {
        if max_depth_cm <= 0.0 {
            return Err(Error::InvalidConfig(format!(
                "max depth must be positive, got {max_depth_cm}"
            )));
        }
        Ok(Normalizer { max_depth_cm })
    }

    pub fn normalize_map(&self, cm: &Tensor<f32>) -> Tensor<f32> {
        let m = self.max_depth_cm as f32;
        Tensor::from_vec(
            cm.shape(),
            cm.data().iter().map(|v| (v / m).clamp(0.0, 1.0)).collect(),
        )
        .expect("same shape")
    }

    /// Exact inverse for values that were inside [0, max].
    pub fn denormalize_map(&self, unit: &Tensor<f32>) -> Tensor<f32> {
        let m = self.max_depth_cm as f32;
        Tensor::from_vec(
            unit.shape(),
            unit.data().iter().map(|v| v * m).collect(),
        )
        .expect("same shape")
    }

    /// Normalized copy of a sample (depth fields only).
    pub fn normalize(&self, sample: &SamplePair) -> SamplePair {
        SamplePair {
            d_gt: self.normalize_map(&sample.d_gt),
            i_hr: sample.i_hr.clone(),
            d_lr: self.normalize_map(&sample.d_lr),
            mask: sample.mask.clone(),
            scale: sample.scale,
        }
    }
}

// ----------------------------------------------------------------- metrics

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Metrics {
    /// Mean square error, cm^2.
    pub mse: f64,
    /// Mean absolute error, cm.
    pub mae: f64,
    /// Root mean square error, cm.
    pub rmse: f64,
}

/// Means over valid pixels, accumulated in f64.
pub fn metrics(pred: &Tensor<f32>, gt: &Tensor<f32>, mask: &Tensor<f32>) -> Result<Metrics> {
    if pred.shape() != gt.shape() || pred.shape() != mask.shape() {
        return Err(Error::InvalidShape(format!(
            "metrics: shapes {} / {} / {} differ",
            pred.shape(),
            gt.shape(),
            mask.shape()
        )));
    }
    let mut count = 0u64;
    let mut sq = 0.0f64;
    let mut ab = 0.0f64;
    for ((p, g), m) in pred.data().iter().zip(gt.data()).zip(mask.data()) {
        if *m != 0.0 {
            let d = (*p as f64) - (*g as f64);
            sq += d * d;
            ab += d.abs();
            count += 1;
        }
    }
    if count == 0 {
        return Err(Error::DegenerateInput);
    }
    let mse = sq / count as f64;
    Ok(Metrics {
        mse,
        mae: ab / count as f64,
        rmse: mse.sqrt(),
    })
}

// ---------------------------------------------------------------- cropping

/// Axis-aligned crop of all maps; origin and size must be multiples of the
/// sample's scale factor so the LR crop stays exact.
pub fn crop_sample(sample: &SamplePair, y0: usize, x0: usize, size: usize) -> Result<SamplePair> {
    let s = sample.scale;
    let g = sample.d_gt.shape();
    if y0 % s != 0 || x0 % s != 0 || size % s != 0 {
        return Err(Error::InvalidParameter(format!(
            "crop origin/size must be multiples of the scale {s}"
        )));
    }
    if y0 + size > g.h || x0 + size > g.w {
        return Err(Error::InvalidShape(format!(
            "crop {size} at ({y0}, {x0}) exceeds {g}"
        )));
    }
    let cut = |t: &Tensor<f32>, y0: usize, x0: usize, size: usize| -> Tensor<f32> {
        let ts = t.shape();
        Tensor::from_fn(Shape::new(1, ts.c, size, size), |_, c, y, x| {
            t.at(0, c, y0 + y, x0 + x)
        })
    };
    Ok(SamplePair {
        d_gt: cut(&sample.d_gt, y0, x0, size),
        i_hr: cut(&sample.i_hr, y0, x0, size),
        mask: cut(&sample.mask, y0, x0, size),
        d_lr: cut(&sample.d_lr, y0 / s, x0 / s, size / s),
        scale: s,
    })
}

/// Concatenates single-batch samples of identical shape along the batch axis.
pub fn stack_batch(maps: &[&Tensor<f32>]) -> Result<Tensor<f32>> {
    let first = maps
        .first()
        .ok_or_else(|| Error::InvalidShape("stack of zero tensors".to_string()))?
        .shape();
    let mut data = Vec::with_capacity(first.numel() * maps.len());
    for m in maps {
        if m.shape() != first {
            return Err(Error::InvalidShape(format!(
                "stack_batch: {} vs {}",
                m.shape(),
                first
            )));
        }
        data.extend_from_slice(m.data());
    }
    Tensor::from_vec(
        Shape::new(maps.len() * first.n, first.c, first.h, first.w),
        data,
    )
}

// ---------------------------------------------------------- tiled inference

/// Runs the model over non-overlapping HR tiles (default 256), padding
/// ragged borders by mirror reflection and cropping the output back.
/// Depth inputs/outputs are in the normalized [0, 1] domain.
pub fn tiled_inference(
    model: &GuidedDsr<f32>,
    d_lr: &Tensor<f32>,
    i_hr: &Tensor<f32>,
    tile: usize,
) -> Result<Tensor<f32>> {
    if tile < 16 || tile % 16 != 0 {
        return Err(Error::InvalidParameter(format!(
            "tile must be a multiple of 16 and at least 16, got {tile}"
        )));
    }
    let (sl, sh) = (d_lr.shape(), i_hr.shape());
    if sh.h % sl.h != 0 || sh.h / sl.h != sh.w / sl.w {
        return Err(Error::InvalidShape(format!(
            "tiled inference: color {} vs depth {}",
            sh, sl
        )));
    }
    let scale = sh.h / sl.h;
    if tile % scale != 0 {
        return Err(Error::InvalidParameter(format!(
            "tile {tile} must be divisible by the scale factor {scale}"
        )));
    }
    // Images smaller than the requested tile shrink it to the largest
    // 16-aligned size that fits (16-multiples divide evenly by any
    // supported scale factor).
    let fit = (sh.h.min(sh.w) / 16) * 16;
    let tile = tile.min(fit.max(16));
    let padded_h = sh.h.div_ceil(tile) * tile;
    let padded_w = sh.w.div_ceil(tile) * tile;
    let hr = reflect_pad(i_hr, padded_h, padded_w)?;
    let lr = reflect_pad(d_lr, padded_h / scale, padded_w / scale)?;

    let mut out = Tensor::zeros(Shape::new(sh.n, 1, padded_h, padded_w));
    let lr_tile = tile / scale;
    for ty in 0..padded_h / tile {
        for tx in 0..padded_w / tile {
            let hr_tile = crop_plane(&hr, ty * tile, tx * tile, tile, tile);
            let lr_tile_t = crop_plane(&lr, ty * lr_tile, tx * lr_tile, lr_tile, lr_tile);
            let pred = no_grad(|| model.forward(&lr_tile_t, &hr_tile))?;
            let shape = out.shape();
            let data = out.data_mut();
            for n in 0..sh.n {
                for y in 0..tile {
                    for x in 0..tile {
                        data[shape.index(n, 0, ty * tile + y, tx * tile + x)] =
                            pred.d_sr.at(n, 0, y, x);
                    }
                }
            }
        }
    }
    Ok(crop_plane(&out, 0, 0, sh.h, sh.w))
}

fn crop_plane(t: &Tensor<f32>, y0: usize, x0: usize, h: usize, w: usize) -> Tensor<f32> {
    let s = t.shape();
    Tensor::from_fn(Shape::new(s.n, s.c, h, w), |n, c, y, x| {
        t.at(n, c, y0 + y, x0 + x)
    })
}

/// Pads to (out_h, out_w) on the bottom/right by mirroring (edge included);
/// the pad amount may not exceed the source extent.
fn reflect_pad(t: &Tensor<f32>, out_h: usize, out_w: usize) -> Result<Tensor<f32>> {
    let s = t.shape();
    if out_h < s.h || out_w < s.w {
        return Err(Error::InvalidShape("reflect_pad cannot shrink".to_string()));
    }
    if out_h - s.h > s.h || out_w - s.w > s.w {
        return Err(Error::InvalidShape(format!(
            "reflect_pad: pad exceeds source size ({} -> {}x{})",
            s, out_h, out_w
        )));
    }
    let mirror = |i: usize, len: usize| -> usize {
        if i < len {
            i
        } else {
            2 * len - 1 - i
        }
    };
    Ok(Tensor::from_fn(
        Shape::new(s.n, s.c, out_h, out_w),
        |n, c, y, x| t.at(n, c, mirror(y, s.h), mirror(x, s.w)),
    ))
}

// ------------------------------------------------------------- evaluation

/// Per-sample rows plus a pixel-pooled aggregate.
pub struct EvalReport {
    pub rows: Vec<(String, Metrics)>,
    pub aggregate: Metrics,
}

impl EvalReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("sample,mse_cm2,mae_cm,rmse_cm\n");
        for (name, m) in &self.rows {
            out.push_str(&format!("{name},{:.6},{:.6},{:.6}\n", m.mse, m.mae, m.rmse));
        }
        out.push_str(&format!(
            "aggregate,{:.6},{:.6},{:.6}\n",
            self.aggregate.mse, self.aggregate.mae, self.aggregate.rmse
        ));
        out
    }
}

/// Evaluates a model over samples with tiled inference; depth is normalized
/// for the network and denormalized before computing centimeter metrics.
pub fn evaluate_dataset(
    model: &GuidedDsr<f32>,
    samples: &[(String, SamplePair)],
    norm: &Normalizer,
    tile: usize,
) -> Result<EvalReport> {
    let mut rows = Vec::with_capacity(samples.len());
    let mut sq = 0.0f64;
    let mut ab = 0.0f64;
    let mut count = 0u64;
    for (name, sample) in samples {
        let lr_n = norm.normalize_map(&sample.d_lr);
        let pred_n = tiled_inference(model, &lr_n, &sample.i_hr, tile)?;
        let pred = norm.denormalize_map(&pred_n);
        let m = metrics(&pred, &sample.d_gt, &sample.mask)?;
        // Pool pixel sums for the aggregate (order independent).
        for ((p, g), msk) in pred.data().iter().zip(sample.d_gt.data()).zip(sample.mask.data()) {
            if *msk != 0.0 {
                let d = (*p as f64) - (*g as f64);
                sq += d * d;
                ab += d.abs();
                count += 1;
            }
        }
        rows.push((name.clone(), m));
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

/// Bicubic-upsampled LR depth, the reference baseline (centimeters).
pub fn bicubic_baseline(sample: &SamplePair) -> Result<Tensor<f32>> {
    let g = sample.d_gt.shape();
    no_grad(|| resize_bicubic(&sample.d_lr, g.h, g.w))
}

// -------------------------------------------------------- synthetic scenes

/// Piecewise-constant depth from random rectangles and ellipses, with
/// depth-correlated shading plus independent texture noise in the color
/// image. The mask is all-valid, LR comes from bicubic downsampling.
pub fn synth_scene(
    rng: &mut Rng,
    size: usize,
    n_shapes: usize,
    scale: usize,
    depth_range: (f64, f64),
) -> Result<SamplePair> {
    if size % 16 != 0 {
        return Err(Error::InvalidParameter(format!(
            "scene size {size} must be a multiple of 16"
        )));
    }
    let (lo, hi) = depth_range;
    if !(lo > 0.0 && hi > lo) {
        return Err(Error::InvalidParameter(format!(
            "depth range [{lo}, {hi}] is not a positive interval"
        )));
    }

    let mut depth = vec![hi as f32; size * size];
    let mut albedo = vec![[0.55f32, 0.55, 0.55]; size * size];
    for _ in 0..n_shapes {
        let d = rng.range(lo, hi) as f32;
        let col = [
            rng.range(0.15, 0.95) as f32,
            rng.range(0.15, 0.95) as f32,
            rng.range(0.15, 0.95) as f32,
        ];
        let cy = rng.below(size) as isize;
        let cx = rng.below(size) as isize;
        let ry = rng.range(size as f64 * 0.06, size as f64 * 0.3) as isize;
        let rx = rng.range(size as f64 * 0.06, size as f64 * 0.3) as isize;
        let ellipse = rng.coin();
        for y in (cy - ry).max(0)..(cy + ry).min(size as isize) {
            for x in (cx - rx).max(0)..(cx + rx).min(size as isize) {
                let inside = if ellipse {
                    let fy = (y - cy) as f64 / ry as f64;
                    let fx = (x - cx) as f64 / rx as f64;
                    fy * fy + fx * fx <= 1.0
                } else {
                    true
                };
                if inside {
                    let at = y as usize * size + x as usize;
                    depth[at] = d;
                    albedo[at] = col;
                }
            }
        }
    }

    let d_gt = Tensor::from_vec(Shape::new(1, 1, size, size), depth.clone())?;
    let mut color = Tensor::zeros(Shape::new(1, 3, size, size));
    let shape = color.shape();
    let data = color.data_mut();
    for y in 0..size {
        for x in 0..size {
            let at = y * size + x;
            let shade = 1.0 - 0.5 * ((depth[at] as f64 - lo) / (hi - lo)) as f32;
            for c in 0..3 {
                let noise = rng.range(-0.02, 0.02) as f32;
                data[shape.index(0, c, y, x)] = (albedo[at][c] * shade + noise).clamp(0.0, 1.0);
            }
        }
    }

    let mask = Tensor::full(Shape::new(1, 1, size, size), 1.0);
    let d_lr = make_lr(&d_gt, scale)?;
    Ok(SamplePair {
        d_gt,
        i_hr: color,
        d_lr,
        mask,
        scale,
    })
}

// ------------------------------------------------------------- disk layout

/// Writes a sample as `<name>_depth.png` + `<name>_color.png` in `dir`.
pub fn save_scene(dir: &Path, name: &str, sample: &SamplePair) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    save_depth_png16(&dir.join(format!("{name}_depth.png")), &sample.d_gt)?;
    save_color_png(&dir.join(format!("{name}_color.png")), &sample.i_hr)?;
    Ok(())
}

/// Loads every `<name>_depth.png|pfm` + `<name>_color.png` pair from a
/// directory (sorted by name for determinism); LR depth is synthesized at
/// the given factor.
pub fn load_dataset(dir: &Path, scale: usize) -> Result<Vec<(String, SamplePair)>> {
    let mut names: Vec<(String, PathBuf)> = Vec::new();
    for entry in std::fs::read_dir(dir)? {
        let path = entry?.path();
        let Some(fname) = path.file_name().and_then(|f| f.to_str()) else {
            continue;
        };
        for suffix in ["_depth.png", "_depth.pfm"] {
            if let Some(stem) = fname.strip_suffix(suffix) {
                names.push((stem.to_string(), path.clone()));
            }
        }
    }
    names.sort();
    let mut out = Vec::with_capacity(names.len());
    for (name, depth_path) in names {
        let color_path = dir.join(format!("{name}_color.png"));
        if !color_path.exists() {
            return Err(Error::Io(format!(
                "missing color image for sample '{name}' in {}",
                dir.display()
            )));
        }
        let (d_gt, mask) = load_depth(&depth_path)?;
        let i_hr = load_color_png(&color_path)?;
        let d_lr = make_lr(&d_gt, scale)?;
        let sample = SamplePair {
            d_gt,
            i_hr,
            d_lr,
            mask,
            scale,
        };
        sample.validate()?;
        out.push((name, sample));
    }
    Ok(out)
}

// ------------------------------------------------------------ config files

/// Parses `key = value` lines; `#` starts a comment, blank lines are
/// ignored. Duplicate keys are rejected.
pub fn parse_kv(text: &str) -> Result<Vec<(String, String)>> {
    let mut out: Vec<(String, String)> = Vec::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            return Err(Error::InvalidConfig(format!(
                "line {}: expected 'key = value', got '{raw}'",
                lineno + 1
            )));
        };
        let key = key.trim().to_string();
        let value = value.trim().to_string();
        if out.iter().any(|(k, _)| *k == key) {
            return Err(Error::InvalidConfig(format!("duplicate key '{key}'")));
        }
        out.push((key, value));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tmp_dir(tag: &str) -> PathBuf {
        let dir = std::env::temp_dir().join(format!("gdsr_data_{tag}"));
        std::fs::create_dir_all(&dir).unwrap();
        dir
    }

    #[test]
    fn depth_png_round_trip_and_units() {
        let dir = tmp_dir("png");
        let path = dir.join("d.png");
        // 1500 mm stored value must read back as 150 cm with mask 1;
        // raw zero must be masked out.
        let cm = Tensor::from_vec(
            Shape::new(1, 1, 2, 2),
            vec![150.0, 0.0, 42.5, 6553.5],
        )
        .unwrap();
        save_depth_png16(&path, &cm).unwrap();
        let (back, mask) = load_depth(&path).unwrap();
        assert_eq!(back.data(), cm.data());
        assert_eq!(mask.data(), &[1.0, 0.0, 1.0, 1.0]);
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn pfm_round_trip_and_units() {
        let dir = tmp_dir("pfm");
        let path = dir.join("d.pfm");
        let cm = Tensor::from_vec(
            Shape::new(1, 1, 2, 3),
            vec![150.0, 10.0, 0.25, 99.5, 1234.5, 0.0],
        )
        .unwrap();
        save_pfm(&path, &cm).unwrap();
        let (w, h, values) = read_pfm(&path).unwrap();
        assert_eq!((w, h), (3, 2));
        // 1.5 m -> 150 cm
        assert_eq!(values[0] * 100.0, 150.0);
        let (back, _) = load_depth(&path).unwrap();
        for (a, b) in back.data().iter().zip(cm.data()) {
            assert!((a - b).abs() < 1e-3, "{a} vs {b}");
        }
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn make_lr_divides_and_preserves_constants() {
        let c = Tensor::full(Shape::new(1, 1, 256, 256), 123.0);
        let lr = make_lr(&c, 4).unwrap();
        assert_eq!(lr.shape(), Shape::new(1, 1, 64, 64));
        for v in lr.data() {
            assert!((v - 123.0).abs() < 1e-3);
        }
        assert!(make_lr(&c, 3).is_err());
    }

    #[test]
    fn normalizer_contract() {
        let norm = Normalizer::new(1000.0).unwrap();
        let cm = Tensor::from_vec(Shape::new(1, 1, 1, 3), vec![500.0, 1500.0, 0.0]).unwrap();
        let unit = norm.normalize_map(&cm);
        assert_eq!(unit.data(), &[0.5, 1.0, 0.0]); // clamp above max
        let back = norm.denormalize_map(&unit);
        assert_eq!(back.data()[0], 500.0);
        assert!(Normalizer::new(0.0).is_err());
    }

    #[test]
    fn metrics_forced_values_and_permutation_invariance() {
        // errors {0, 0, 3, 4} over 4 valid pixels.
        let pred = Tensor::from_vec(Shape::new(1, 1, 1, 5), vec![1.0, 2.0, 6.0, 9.0, 50.0]).unwrap();
        let gt = Tensor::from_vec(Shape::new(1, 1, 1, 5), vec![1.0, 2.0, 3.0, 5.0, 0.0]).unwrap();
        let mask = Tensor::from_vec(Shape::new(1, 1, 1, 5), vec![1.0, 1.0, 1.0, 1.0, 0.0]).unwrap();
        let m = metrics(&pred, &gt, &mask).unwrap();
        assert_eq!(m.mse, 6.25);
        assert_eq!(m.mae, 1.75);
        assert_eq!(m.rmse, 2.5);
        // identical permutation of all three maps leaves the numbers alone.
        let perm = [4usize, 2, 0, 3, 1];
        let apply = |t: &Tensor<f32>| {
            Tensor::from_vec(
                t.shape(),
                perm.iter().map(|i| t.data()[*i]).collect(),
            )
            .unwrap()
        };
        let m2 = metrics(&apply(&pred), &apply(&gt), &apply(&mask)).unwrap();
        assert_eq!(m, m2);
        // empty mask is degenerate.
        let zero = Tensor::zeros(Shape::new(1, 1, 1, 5));
        assert!(matches!(
            metrics(&pred, &gt, &zero),
            Err(Error::DegenerateInput)
        ));
        // identical maps give zeros.
        let z = metrics(&gt, &gt, &mask).unwrap();
        assert_eq!((z.mse, z.mae, z.rmse), (0.0, 0.0, 0.0));
    }

    #[test]
    fn synth_scene_respects_its_envelope() {
        let mut rng = Rng::new(3);
        let scene = synth_scene(&mut rng, 64, 5, 4, (60.0, 360.0)).unwrap();
        scene.validate().unwrap();
        for v in scene.d_gt.data() {
            assert!(*v >= 60.0 && *v <= 360.0);
        }
        // no shapes: constant depth
        let flat = synth_scene(&mut rng, 32, 0, 4, (60.0, 360.0)).unwrap();
        let first = flat.d_gt.data()[0];
        assert!(flat.d_gt.data().iter().all(|v| *v == first));
        // determinism
        let a = synth_scene(&mut Rng::new(7), 64, 4, 4, (60.0, 360.0)).unwrap();
        let b = synth_scene(&mut Rng::new(7), 64, 4, 4, (60.0, 360.0)).unwrap();
        assert_eq!(a.d_gt.data(), b.d_gt.data());
        assert_eq!(a.i_hr.data(), b.i_hr.data());
    }

    #[test]
    fn scene_files_round_trip_through_the_loader() {
        let dir = tmp_dir("scene");
        let mut rng = Rng::new(4);
        let scene = synth_scene(&mut rng, 64, 3, 4, (60.0, 360.0)).unwrap();
        save_scene(&dir, "scene_000", &scene).unwrap();
        let loaded = load_dataset(&dir, 4).unwrap();
        assert_eq!(loaded.len(), 1);
        assert_eq!(loaded[0].0, "scene_000");
        // Depth survives the millimeter quantization exactly (values are
        // synthesized in cm with one decimal of mm precision).
        for (a, b) in loaded[0].1.d_gt.data().iter().zip(scene.d_gt.data()) {
            assert!((a - b).abs() <= 0.05 + 1e-6, "{a} vs {b}");
        }
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn crop_sample_respects_alignment() {
        let mut rng = Rng::new(5);
        let scene = synth_scene(&mut rng, 64, 3, 4, (60.0, 360.0)).unwrap();
        let crop = crop_sample(&scene, 16, 32, 32).unwrap();
        crop.validate().unwrap();
        assert_eq!(crop.d_gt.shape(), Shape::new(1, 1, 32, 32));
        assert_eq!(crop.d_lr.shape(), Shape::new(1, 1, 8, 8));
        assert_eq!(crop.d_gt.at(0, 0, 0, 0), scene.d_gt.at(0, 0, 16, 32));
        assert!(crop_sample(&scene, 2, 0, 32).is_err());
    }

    #[test]
    fn parse_kv_contract() {
        let parsed = parse_kv("a = 1\n# comment\n b=two # tail\n\n").unwrap();
        assert_eq!(
            parsed,
            vec![
                ("a".to_string(), "1".to_string()),
                ("b".to_string(), "two".to_string())
            ]
        );
        assert!(parse_kv("oops").is_err());
        assert!(parse_kv("a=1\na=2").is_err());
    }
}
