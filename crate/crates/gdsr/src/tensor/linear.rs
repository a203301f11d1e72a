//! Fully connected layer, batched matmul and softmax.

use crate::error::{Error, Result};
use crate::rng::Rng;

use super::{trace_inputs, Elem, Shape, Tensor};

/// Affine map y = x W^T + b over flattened features. Weight is (out_f, in_f),
/// bias (out_f); the input is read as (batch, c*h*w).
pub struct Linear<E: Elem> {
    pub weight: Tensor<E>,
    pub bias: Tensor<E>,
}

impl<E: Elem> Linear<E> {
    pub fn new(in_f: usize, out_f: usize, rng: &mut Rng) -> Self {
        let bound = (6.0 / in_f as f64).sqrt();
        Linear {
            weight: Tensor::rand(Shape::new(out_f, in_f, 1, 1), -bound, bound, rng).traced(),
            bias: Tensor::zeros(Shape::new(1, out_f, 1, 1)).traced(),
        }
    }

    pub fn forward(&self, x: &Tensor<E>) -> Result<Tensor<E>> {
        linear(x, &self.weight, &self.bias)
    }

    pub fn param_count(&self) -> usize {
        self.weight.numel() + self.bias.shape().c
    }

    pub fn for_each_param(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<E>)) {
        f(format!("{prefix}.weight"), &mut self.weight);
        f(format!("{prefix}.bias"), &mut self.bias);
    }
}

pub fn linear<E: Elem>(x: &Tensor<E>, weight: &Tensor<E>, bias: &Tensor<E>) -> Result<Tensor<E>> {
    let xs = x.shape();
    let ws = weight.shape();
    let (out_f, in_f) = (ws.n, ws.c * ws.h * ws.w);
    let feat = xs.c * xs.h * xs.w;
    if feat != in_f {
        return Err(Error::InvalidShape(format!(
            "linear: input features {feat} != weight features {in_f}"
        )));
    }
    if bias.numel() != out_f {
        return Err(Error::InvalidShape(format!(
            "linear: bias has {} entries, expected {out_f}",
            bias.numel()
        )));
    }
    let batch = xs.n;
    let out_shape = Shape::new(batch, out_f, 1, 1);
    let xd = x.data();
    let wd = weight.data();
    let bd = bias.data();
    let mut data = vec![E::ZERO; batch * out_f];
    for n in 0..batch {
        let xrow = &xd[n * feat..(n + 1) * feat];
        for o in 0..out_f {
            let wrow = &wd[o * in_f..(o + 1) * in_f];
            let mut acc = bd[o];
            for (xv, wv) in xrow.iter().zip(wrow) {
                acc += *xv * *wv;
            }
            data[n * out_f + o] = acc;
        }
    }
    let (nodes, traced) = trace_inputs(&[x, weight, bias]);
    let xd = x.data_arc();
    let wd = weight.data_arc();
    Ok(Tensor::op_output(out_shape, data, nodes, move |g| {
        let mut out = Vec::new();
        if traced[0] {
            let mut gx = vec![E::ZERO; batch * feat];
            for n in 0..batch {
                for o in 0..out_f {
                    let gv = g[n * out_f + o];
                    let wrow = &wd[o * in_f..(o + 1) * in_f];
                    for (t, wv) in gx[n * feat..(n + 1) * feat].iter_mut().zip(wrow) {
                        *t += gv * *wv;
                    }
                }
            }
            out.push(gx);
        }
        if traced[1] {
            let mut gw = vec![E::ZERO; out_f * in_f];
            for n in 0..batch {
                let xrow = &xd[n * feat..(n + 1) * feat];
                for o in 0..out_f {
                    let gv = g[n * out_f + o];
                    for (t, xv) in gw[o * in_f..(o + 1) * in_f].iter_mut().zip(xrow) {
                        *t += gv * *xv;
                    }
                }
            }
            out.push(gw);
        }
        if traced[2] {
            let mut gb = vec![E::ZERO; out_f];
            for n in 0..batch {
                for (o, t) in gb.iter_mut().enumerate() {
                    *t += g[n * out_f + o];
                }
            }
            out.push(gb);
        }
        out
    }))
}

/// Batched matrix product over the leading (n, c) axes:
/// (n, c, h, k) x (n, c, k, w) -> (n, c, h, w).
pub fn matmul<E: Elem>(a: &Tensor<E>, b: &Tensor<E>) -> Result<Tensor<E>> {
    let sa = a.shape();
    let sb = b.shape();
    if sa.n != sb.n || sa.c != sb.c || sa.w != sb.h {
        return Err(Error::InvalidShape(format!(
            "matmul: {} incompatible with {}",
            sa, sb
        )));
    }
    let (m, k, w) = (sa.h, sa.w, sb.w);
    let out_shape = Shape::new(sa.n, sa.c, m, w);
    let batches = sa.n * sa.c;
    let ad = a.data();
    let bd = b.data();
    let mut data = vec![E::ZERO; out_shape.numel()];
    for nc in 0..batches {
        let abase = nc * m * k;
        let bbase = nc * k * w;
        let obase = nc * m * w;
        for i in 0..m {
            for kk in 0..k {
                let av = ad[abase + i * k + kk];
                if av == E::ZERO {
                    continue;
                }
                let brow = &bd[bbase + kk * w..bbase + (kk + 1) * w];
                for (t, bv) in data[obase + i * w..obase + (i + 1) * w].iter_mut().zip(brow) {
                    *t += av * *bv;
                }
            }
        }
    }
    let (nodes, traced) = trace_inputs(&[a, b]);
    let ad = a.data_arc();
    let bd = b.data_arc();
    Ok(Tensor::op_output(out_shape, data, nodes, move |g| {
        let mut out = Vec::new();
        if traced[0] {
            // ga = g b^T
            let mut ga = vec![E::ZERO; batches * m * k];
            for nc in 0..batches {
                let gbase = nc * m * w;
                let bbase = nc * k * w;
                let abase = nc * m * k;
                for i in 0..m {
                    for kk in 0..k {
                        let mut acc = E::ZERO;
                        let grow = &g[gbase + i * w..gbase + (i + 1) * w];
                        let brow = &bd[bbase + kk * w..bbase + (kk + 1) * w];
                        for (gv, bv) in grow.iter().zip(brow) {
                            acc += *gv * *bv;
                        }
                        ga[abase + i * k + kk] = acc;
                    }
                }
            }
            out.push(ga);
        }
        if traced[1] {
            // gb = a^T g
            let mut gb = vec![E::ZERO; batches * k * w];
            for nc in 0..batches {
                let gbase = nc * m * w;
                let bbase = nc * k * w;
                let abase = nc * m * k;
                for kk in 0..k {
                    for i in 0..m {
                        let av = ad[abase + i * k + kk];
                        if av == E::ZERO {
                            continue;
                        }
                        let grow = &g[gbase + i * w..gbase + (i + 1) * w];
                        for (t, gv) in gb[bbase + kk * w..bbase + (kk + 1) * w]
                            .iter_mut()
                            .zip(grow)
                        {
                            *t += av * *gv;
                        }
                    }
                }
            }
            out.push(gb);
        }
        out
    }))
}

/// Numerically stable softmax over the last (w) axis.
pub fn softmax_w<E: Elem>(x: &Tensor<E>) -> Tensor<E> {
    let xs = x.shape();
    let rows = xs.n * xs.c * xs.h;
    let w = xs.w;
    let mut data = vec![E::ZERO; xs.numel()];
    for r in 0..rows {
        let src = &x.data()[r * w..(r + 1) * w];
        let mut mx = src[0];
        for v in src {
            mx = mx.max(*v);
        }
        let mut sum = E::ZERO;
        for (t, v) in data[r * w..(r + 1) * w].iter_mut().zip(src) {
            let e = (*v - mx).exp();
            *t = e;
            sum += e;
        }
        let inv = E::ONE / sum;
        for t in &mut data[r * w..(r + 1) * w] {
            *t *= inv;
        }
    }
    let (nodes, _) = trace_inputs(&[x]);
    let soft = data.clone();
    Tensor::op_output(xs, data, nodes, move |g| {
        let mut gx = vec![E::ZERO; soft.len()];
        for r in 0..rows {
            let s = &soft[r * w..(r + 1) * w];
            let gr = &g[r * w..(r + 1) * w];
            let mut dot = E::ZERO;
            for (gv, sv) in gr.iter().zip(s) {
                dot += *gv * *sv;
            }
            for ((t, gv), sv) in gx[r * w..(r + 1) * w].iter_mut().zip(gr).zip(s) {
                *t = *sv * (*gv - dot);
            }
        }
        vec![gx]
    })
}
