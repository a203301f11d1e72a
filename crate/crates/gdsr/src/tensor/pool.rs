//! Pooling and fixed smoothing kernels.

use crate::error::{Error, Result};

use super::{trace_inputs, Elem, Shape, Tensor};

/// Arithmetic mean over non-overlapping (or strided) k x k windows.
pub fn avg_pool2d<E: Elem>(x: &Tensor<E>, k: usize, stride: usize) -> Result<Tensor<E>> {
    let xs = x.shape();
    if k == 0 || stride == 0 {
        return Err(Error::InvalidParameter(
            "avg_pool2d: k and stride must be positive".to_string(),
        ));
    }
    if xs.h < k || xs.w < k {
        return Err(Error::InvalidShape(format!(
            "avg_pool2d: window {k} larger than input {}x{}",
            xs.h, xs.w
        )));
    }
    let oh = (xs.h - k) / stride + 1;
    let ow = (xs.w - k) / stride + 1;
    let out_shape = Shape::new(xs.n, xs.c, oh, ow);
    let inv = E::from_f64(1.0 / (k * k) as f64);
    let mut data = vec![E::ZERO; out_shape.numel()];
    let xd = x.data();
    for nc in 0..xs.n * xs.c {
        let src = nc * xs.h * xs.w;
        let dst = nc * oh * ow;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = E::ZERO;
                for ky in 0..k {
                    let row = src + (oy * stride + ky) * xs.w + ox * stride;
                    for v in &xd[row..row + k] {
                        acc += *v;
                    }
                }
                data[dst + oy * ow + ox] = acc * inv;
            }
        }
    }
    let (nodes, _) = trace_inputs(&[x]);
    Ok(Tensor::op_output(out_shape, data, nodes, move |g| {
        let mut gx = vec![E::ZERO; xs.numel()];
        for nc in 0..xs.n * xs.c {
            let src = nc * xs.h * xs.w;
            let dst = nc * oh * ow;
            for oy in 0..oh {
                for ox in 0..ow {
                    let gv = g[dst + oy * ow + ox] * inv;
                    for ky in 0..k {
                        let row = src + (oy * stride + ky) * xs.w + ox * stride;
                        for t in &mut gx[row..row + k] {
                            *t += gv;
                        }
                    }
                }
            }
        }
        vec![gx]
    }))
}

/// Stride-1 k x k mean filter with replicate borders; k odd. Keeps the
/// spatial size, so the result can gate a same-sized feature map.
pub fn avg_pool_smooth<E: Elem>(x: &Tensor<E>, k: usize) -> Result<Tensor<E>> {
    if k % 2 == 0 || k == 0 {
        return Err(Error::InvalidParameter(format!(
            "avg_pool_smooth: window must be odd, got {k}"
        )));
    }
    let xs = x.shape();
    let r = (k / 2) as isize;
    let inv = E::from_f64(1.0 / (k * k) as f64);
    let clamp = |v: isize, hi: usize| v.clamp(0, hi as isize - 1) as usize;
    let xd = x.data();
    let mut data = vec![E::ZERO; xs.numel()];
    for nc in 0..xs.n * xs.c {
        let base = nc * xs.h * xs.w;
        for y in 0..xs.h {
            for xx in 0..xs.w {
                let mut acc = E::ZERO;
                for dy in -r..=r {
                    let sy = clamp(y as isize + dy, xs.h);
                    for dx in -r..=r {
                        let sx = clamp(xx as isize + dx, xs.w);
                        acc += xd[base + sy * xs.w + sx];
                    }
                }
                data[base + y * xs.w + xx] = acc * inv;
            }
        }
    }
    let (nodes, _) = trace_inputs(&[x]);
    Ok(Tensor::op_output(xs, data, nodes, move |g| {
        let mut gx = vec![E::ZERO; xs.numel()];
        for nc in 0..xs.n * xs.c {
            let base = nc * xs.h * xs.w;
            for y in 0..xs.h {
                for xx in 0..xs.w {
                    let gv = g[base + y * xs.w + xx] * inv;
                    for dy in -r..=r {
                        let sy = clamp(y as isize + dy, xs.h);
                        for dx in -r..=r {
                            let sx = clamp(xx as isize + dx, xs.w);
                            gx[base + sy * xs.w + sx] += gv;
                        }
                    }
                }
            }
        }
        vec![gx]
    }))
}

/// Mean over the full spatial extent; output is (n, c, 1, 1).
pub fn global_avg_pool<E: Elem>(x: &Tensor<E>) -> Result<Tensor<E>> {
    let xs = x.shape();
    if xs.h == 0 || xs.w == 0 {
        return Err(Error::InvalidShape("global_avg_pool on empty map".to_string()));
    }
    let plane = xs.h * xs.w;
    let inv = E::from_f64(1.0 / plane as f64);
    let mut data = vec![E::ZERO; xs.n * xs.c];
    for (nc, out) in data.iter_mut().enumerate() {
        let mut acc = E::ZERO;
        for v in &x.data()[nc * plane..(nc + 1) * plane] {
            acc += *v;
        }
        *out = acc * inv;
    }
    let (nodes, _) = trace_inputs(&[x]);
    let out_shape = Shape::new(xs.n, xs.c, 1, 1);
    Ok(Tensor::op_output(out_shape, data, nodes, move |g| {
        let mut gx = vec![E::ZERO; xs.numel()];
        for (nc, gv) in g.iter().enumerate() {
            let s = *gv * inv;
            for t in &mut gx[nc * plane..(nc + 1) * plane] {
                *t += s;
            }
        }
        vec![gx]
    }))
}

/// Separable binomial blur [1, 2, 1]/4 applied along both axes, borders
/// clamped. Zero response at the Nyquist frequency, so it is the
/// anti-aliasing stage in front of any stride-2 subsampling.
pub fn blur121<E: Elem>(x: &Tensor<E>) -> Tensor<E> {
    let xs = x.shape();
    let forward = |src: &[E]| -> Vec<E> {
        let mut tmp = vec![E::ZERO; xs.numel()]; // horizontal pass
        let q = E::from_f64(0.25);
        let h2 = E::from_f64(0.5);
        for nc in 0..xs.n * xs.c {
            let base = nc * xs.h * xs.w;
            for y in 0..xs.h {
                let row = base + y * xs.w;
                for xx in 0..xs.w {
                    let l = src[row + xx.saturating_sub(1)];
                    let c = src[row + xx];
                    let r = src[row + (xx + 1).min(xs.w - 1)];
                    tmp[row + xx] = l * q + c * h2 + r * q;
                }
            }
        }
        let mut out = vec![E::ZERO; xs.numel()]; // vertical pass
        for nc in 0..xs.n * xs.c {
            let base = nc * xs.h * xs.w;
            for y in 0..xs.h {
                let up = base + y.saturating_sub(1) * xs.w;
                let mid = base + y * xs.w;
                let dn = base + (y + 1).min(xs.h - 1) * xs.w;
                for xx in 0..xs.w {
                    out[mid + xx] = tmp[up + xx] * q + tmp[mid + xx] * h2 + tmp[dn + xx] * q;
                }
            }
        }
        out
    };
    let data = forward(x.data());
    let (nodes, _) = trace_inputs(&[x]);
    Tensor::op_output(xs, data, nodes, move |g| {
        // Transpose of a clamped separable blur: scatter through the same taps.
        let q = E::from_f64(0.25);
        let h2 = E::from_f64(0.5);
        let mut tmp = vec![E::ZERO; xs.numel()];
        for nc in 0..xs.n * xs.c {
            let base = nc * xs.h * xs.w;
            for y in 0..xs.h {
                let up = base + y.saturating_sub(1) * xs.w;
                let mid = base + y * xs.w;
                let dn = base + (y + 1).min(xs.h - 1) * xs.w;
                for xx in 0..xs.w {
                    let gv = g[mid + xx];
                    tmp[up + xx] += gv * q;
                    tmp[mid + xx] += gv * h2;
                    tmp[dn + xx] += gv * q;
                }
            }
        }
        let mut gx = vec![E::ZERO; xs.numel()];
        for nc in 0..xs.n * xs.c {
            let base = nc * xs.h * xs.w;
            for y in 0..xs.h {
                let row = base + y * xs.w;
                for xx in 0..xs.w {
                    let gv = tmp[row + xx];
                    gx[row + xx.saturating_sub(1)] += gv * q;
                    gx[row + xx] += gv * h2;
                    gx[row + (xx + 1).min(xs.w - 1)] += gv * q;
                }
            }
        }
        vec![gx]
    })
}

/// Keeps every second row and column; requires even spatial dims.
pub fn downsample2<E: Elem>(x: &Tensor<E>) -> Result<Tensor<E>> {
    let xs = x.shape();
    if xs.h % 2 != 0 || xs.w % 2 != 0 {
        return Err(Error::InvalidShape(format!(
            "downsample2: odd spatial dims {}x{}",
            xs.h, xs.w
        )));
    }
    let out_shape = Shape::new(xs.n, xs.c, xs.h / 2, xs.w / 2);
    let mut data = vec![E::ZERO; out_shape.numel()];
    for nc in 0..xs.n * xs.c {
        let src = nc * xs.h * xs.w;
        let dst = nc * out_shape.h * out_shape.w;
        for y in 0..out_shape.h {
            for xx in 0..out_shape.w {
                data[dst + y * out_shape.w + xx] = x.data()[src + 2 * y * xs.w + 2 * xx];
            }
        }
    }
    let (nodes, _) = trace_inputs(&[x]);
    Ok(Tensor::op_output(out_shape, data, nodes, move |g| {
        let mut gx = vec![E::ZERO; xs.numel()];
        for nc in 0..xs.n * xs.c {
            let src = nc * xs.h * xs.w;
            let dst = nc * out_shape.h * out_shape.w;
            for y in 0..out_shape.h {
                for xx in 0..out_shape.w {
                    gx[src + 2 * y * xs.w + 2 * xx] = g[dst + y * out_shape.w + xx];
                }
            }
        }
        vec![gx]
    }))
}
