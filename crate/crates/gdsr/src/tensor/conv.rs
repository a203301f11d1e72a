//! Direct 2-D convolution with zero padding, plus the layer wrapper.

use crate::error::{Error, Result};
use crate::rng::Rng;

use super::{trace_inputs, Elem, Shape, Tensor};

/// Convolution parameters: weight (out_c, in_c, kh, kw), bias (out_c), and
/// the stride/zero-padding pair.
pub struct Conv2d<E: Elem> {
    pub weight: Tensor<E>,
    pub bias: Tensor<E>,
    pub stride: usize,
    pub padding: usize,
}

impl<E: Elem> Conv2d<E> {
    /// Stride-1 convolution with shape-preserving padding for odd kernels,
    /// He-uniform weights and zero bias.
    pub fn new(in_c: usize, out_c: usize, k: usize, rng: &mut Rng) -> Self {
        Self::with(in_c, out_c, k, 1, (k - 1) / 2, rng)
    }

    /// Like [`Conv2d::new`] but with the He bound shrunk by `gain`.
    pub fn with_gain(in_c: usize, out_c: usize, k: usize, gain: f64, rng: &mut Rng) -> Self {
        let mut conv = Self::with(in_c, out_c, k, 1, (k - 1) / 2, rng);
        let damp = E::from_f64(gain);
        for w in conv.weight.data_mut() {
            *w *= damp;
        }
        conv
    }

    /// Damped init (0.1 x He) for convolutions whose output is added onto a
    /// residual trunk: without normalization layers the residual stack
    /// otherwise amplifies activations multiplicatively at init.
    pub fn new_residual(in_c: usize, out_c: usize, k: usize, rng: &mut Rng) -> Self {
        Self::with_gain(in_c, out_c, k, 0.1, rng)
    }

    /// Near-zero init (1e-3 x He) for image-space prediction heads, so a
    /// freshly built network starts at its interpolation baseline.
    pub fn new_head(in_c: usize, out_c: usize, k: usize, rng: &mut Rng) -> Self {
        Self::with_gain(in_c, out_c, k, 1e-3, rng)
    }

    pub fn with(
        in_c: usize,
        out_c: usize,
        k: usize,
        stride: usize,
        padding: usize,
        rng: &mut Rng,
    ) -> Self {
        let fan_in = (in_c * k * k) as f64;
        let bound = (6.0 / fan_in).sqrt();
        let weight = Tensor::rand(Shape::new(out_c, in_c, k, k), -bound, bound, rng).traced();
        let bias = Tensor::zeros(Shape::new(1, out_c, 1, 1)).traced();
        Conv2d {
            weight,
            bias,
            stride,
            padding,
        }
    }

    pub fn out_channels(&self) -> usize {
        self.weight.shape().n
    }

    pub fn in_channels(&self) -> usize {
        self.weight.shape().c
    }

    pub fn forward(&self, x: &Tensor<E>) -> Result<Tensor<E>> {
        conv2d(x, self)
    }

    /// Zeroes weight and bias; used to close residual paths.
    pub fn zero(&mut self) {
        self.weight.fill(E::ZERO);
        self.bias.fill(E::ZERO);
    }

    /// Sets the kernel to the identity map (requires in_c == out_c, odd k).
    pub fn set_identity(&mut self) {
        let s = self.weight.shape();
        assert_eq!(s.n, s.c, "identity kernel needs matching channel counts");
        let mid = s.h / 2;
        self.weight.fill(E::ZERO);
        let shape = s;
        let data = self.weight.data_mut();
        for c in 0..s.n {
            data[shape.index(c, c, mid, mid)] = E::ONE;
        }
        self.bias.fill(E::ZERO);
    }

    pub fn param_count(&self) -> usize {
        self.weight.numel() + self.bias.shape().c
    }

    pub fn for_each_param(
        &mut self,
        prefix: &str,
        f: &mut dyn FnMut(String, &mut Tensor<E>),
    ) {
        f(format!("{prefix}.weight"), &mut self.weight);
        f(format!("{prefix}.bias"), &mut self.bias);
    }
}

/// y[n, oc, oy, ox] = bias[oc] + sum over (ic, ky, kx) of
/// w[oc, ic, ky, kx] * x[n, ic, oy*stride + ky - padding, ox*stride + kx - padding]
/// with out-of-range taps reading zero.
pub fn conv2d<E: Elem>(x: &Tensor<E>, p: &Conv2d<E>) -> Result<Tensor<E>> {
    let xs = x.shape();
    let ws = p.weight.shape();
    let (out_c, in_c, kh, kw) = (ws.n, ws.c, ws.h, ws.w);
    if xs.c != in_c {
        return Err(Error::InvalidShape(format!(
            "conv2d: input has {} channels, kernel expects {}",
            xs.c, in_c
        )));
    }
    if xs.h + 2 * p.padding < kh || xs.w + 2 * p.padding < kw {
        return Err(Error::InvalidShape(format!(
            "conv2d: padded input {}x{} smaller than kernel {}x{}",
            xs.h + 2 * p.padding,
            xs.w + 2 * p.padding,
            kh,
            kw
        )));
    }
    if !p.weight.all_finite() || !p.bias.all_finite() {
        return Err(Error::InvalidParameter(
            "conv2d: non-finite values in weight or bias".to_string(),
        ));
    }
    let stride = p.stride.max(1);
    let oh = (xs.h + 2 * p.padding - kh) / stride + 1;
    let ow = (xs.w + 2 * p.padding - kw) / stride + 1;
    let out_shape = Shape::new(xs.n, out_c, oh, ow);

    let data = conv_forward(
        x.data(),
        xs,
        p.weight.data(),
        ws,
        p.bias.data(),
        stride,
        p.padding,
        out_shape,
    );

    let (nodes, traced) = trace_inputs(&[x, &p.weight, &p.bias]);
    let x_data = x.data_arc();
    let w_data = p.weight.data_arc();
    let padding = p.padding;
    Ok(Tensor::op_output(out_shape, data, nodes, move |g| {
        let mut out = Vec::new();
        if traced[0] {
            out.push(conv_backward_input(
                g, out_shape, &w_data, ws, xs, stride, padding,
            ));
        }
        if traced[1] {
            out.push(conv_backward_weight(
                g, out_shape, &x_data, xs, ws, stride, padding,
            ));
        }
        if traced[2] {
            let mut gb = vec![E::ZERO; out_c];
            let plane = oh * ow;
            for n in 0..out_shape.n {
                for (oc, gbv) in gb.iter_mut().enumerate() {
                    let base = (n * out_c + oc) * plane;
                    for v in &g[base..base + plane] {
                        *gbv += *v;
                    }
                }
            }
            out.push(gb);
        }
        out
    }))
}

#[allow(clippy::too_many_arguments)]
fn conv_forward<E: Elem>(
    x: &[E],
    xs: Shape,
    w: &[E],
    ws: Shape,
    bias: &[E],
    stride: usize,
    padding: usize,
    out_shape: Shape,
) -> Vec<E> {
    let (oh, ow) = (out_shape.h, out_shape.w);
    let mut out = vec![E::ZERO; out_shape.numel()];
    for n in 0..xs.n {
        for oc in 0..ws.n {
            let dst_base = out_shape.index(n, oc, 0, 0);
            let b = bias[oc];
            for v in &mut out[dst_base..dst_base + oh * ow] {
                *v = b;
            }
            for ic in 0..ws.c {
                for ky in 0..ws.h {
                    for kx in 0..ws.w {
                        let wv = w[ws.index(oc, ic, ky, kx)];
                        if wv == E::ZERO {
                            continue;
                        }
                        for oy in 0..oh {
                            let iy = (oy * stride + ky) as isize - padding as isize;
                            if iy < 0 || iy >= xs.h as isize {
                                continue;
                            }
                            let src_row = xs.index(n, ic, iy as usize, 0);
                            let dst_row = dst_base + oy * ow;
                            if stride == 1 {
                                // Valid ox range so that ix = ox + kx - padding
                                // stays in bounds; slice zips vectorize.
                                let ox_lo = padding.saturating_sub(kx);
                                let ox_hi = (xs.w + padding - kx).min(ow);
                                if ox_lo >= ox_hi {
                                    continue;
                                }
                                let ix_lo = ox_lo + kx - padding;
                                let len = ox_hi - ox_lo;
                                let dst = &mut out[dst_row + ox_lo..dst_row + ox_lo + len];
                                let src = &x[src_row + ix_lo..src_row + ix_lo + len];
                                for (o, xv) in dst.iter_mut().zip(src) {
                                    *o += wv * *xv;
                                }
                            } else {
                                for ox in 0..ow {
                                    let ix = (ox * stride + kx) as isize - padding as isize;
                                    if ix < 0 || ix >= xs.w as isize {
                                        continue;
                                    }
                                    out[dst_row + ox] += wv * x[src_row + ix as usize];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

fn conv_backward_input<E: Elem>(
    g: &[E],
    gs: Shape,
    w: &[E],
    ws: Shape,
    xs: Shape,
    stride: usize,
    padding: usize,
) -> Vec<E> {
    let mut gx = vec![E::ZERO; xs.numel()];
    for n in 0..xs.n {
        for oc in 0..ws.n {
            for ic in 0..ws.c {
                for ky in 0..ws.h {
                    for kx in 0..ws.w {
                        let wv = w[ws.index(oc, ic, ky, kx)];
                        if wv == E::ZERO {
                            continue;
                        }
                        for oy in 0..gs.h {
                            let iy = (oy * stride + ky) as isize - padding as isize;
                            if iy < 0 || iy >= xs.h as isize {
                                continue;
                            }
                            let g_row = gs.index(n, oc, oy, 0);
                            let x_row = xs.index(n, ic, iy as usize, 0);
                            if stride == 1 {
                                let ox_lo = padding.saturating_sub(kx);
                                let ox_hi = (xs.w + padding - kx).min(gs.w);
                                if ox_lo >= ox_hi {
                                    continue;
                                }
                                let ix_lo = ox_lo + kx - padding;
                                let len = ox_hi - ox_lo;
                                let dst = &mut gx[x_row + ix_lo..x_row + ix_lo + len];
                                let src = &g[g_row + ox_lo..g_row + ox_lo + len];
                                for (t, gv) in dst.iter_mut().zip(src) {
                                    *t += wv * *gv;
                                }
                            } else {
                                for ox in 0..gs.w {
                                    let ix = (ox * stride + kx) as isize - padding as isize;
                                    if ix < 0 || ix >= xs.w as isize {
                                        continue;
                                    }
                                    gx[x_row + ix as usize] += wv * g[g_row + ox];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    gx
}

fn conv_backward_weight<E: Elem>(
    g: &[E],
    gs: Shape,
    x: &[E],
    xs: Shape,
    ws: Shape,
    stride: usize,
    padding: usize,
) -> Vec<E> {
    let mut gw = vec![E::ZERO; ws.numel()];
    for n in 0..xs.n {
        for oc in 0..ws.n {
            for ic in 0..ws.c {
                for ky in 0..ws.h {
                    for kx in 0..ws.w {
                        let mut acc = E::ZERO;
                        for oy in 0..gs.h {
                            let iy = (oy * stride + ky) as isize - padding as isize;
                            if iy < 0 || iy >= xs.h as isize {
                                continue;
                            }
                            let g_row = gs.index(n, oc, oy, 0);
                            let x_row = xs.index(n, ic, iy as usize, 0);
                            if stride == 1 {
                                let ox_lo = padding.saturating_sub(kx);
                                let ox_hi = (xs.w + padding - kx).min(gs.w);
                                if ox_lo >= ox_hi {
                                    continue;
                                }
                                let ix_lo = ox_lo + kx - padding;
                                let len = ox_hi - ox_lo;
                                let gr = &g[g_row + ox_lo..g_row + ox_lo + len];
                                let xr = &x[x_row + ix_lo..x_row + ix_lo + len];
                                for (gv, xv) in gr.iter().zip(xr) {
                                    acc += *gv * *xv;
                                }
                            } else {
                                for ox in 0..gs.w {
                                    let ix = (ox * stride + kx) as isize - padding as isize;
                                    if ix < 0 || ix >= xs.w as isize {
                                        continue;
                                    }
                                    acc += g[g_row + ox] * x[x_row + ix as usize];
                                }
                            }
                        }
                        gw[ws.index(oc, ic, ky, kx)] += acc;
                    }
                }
            }
        }
    }
    gw
}
