//! Separable resampling: nearest, bilinear and Keys bicubic (a = -0.5).
//!
//! All modes share the half-pixel-center convention: output sample i reads
//! source coordinate (i + 0.5) * (in / out) - 0.5. Out-of-range taps are
//! clamped to the border sample, which keeps every kernel a partition of
//! unity and therefore exact on constants.

use crate::error::Result;

use super::{trace_inputs, Elem, Shape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ResizeMode {
    Nearest,
    Bilinear,
}

/// One output position along one axis: clamped source indices and weights.
struct Taps {
    idx: Vec<usize>,
    w: Vec<f64>,
}

fn axis_taps(in_len: usize, out_len: usize, kind: Kind) -> Vec<Taps> {
    let scale = in_len as f64 / out_len as f64;
    let clamp = |v: isize| v.clamp(0, in_len as isize - 1) as usize;
    (0..out_len)
        .map(|i| {
            let src = (i as f64 + 0.5) * scale - 0.5;
            match kind {
                Kind::Nearest => Taps {
                    idx: vec![clamp(src.floor() as isize)],
                    w: vec![1.0],
                },
                Kind::Bilinear => {
                    let i0 = src.floor();
                    let f = src - i0;
                    Taps {
                        idx: vec![clamp(i0 as isize), clamp(i0 as isize + 1)],
                        w: vec![1.0 - f, f],
                    }
                }
                Kind::Cubic => {
                    let i0 = src.floor() as isize;
                    let idx: Vec<usize> = (-1..=2).map(|d| clamp(i0 + d)).collect();
                    let w: Vec<f64> = (-1..=2)
                        .map(|d| keys_kernel(src - (i0 + d) as f64))
                        .collect();
                    Taps { idx, w }
                }
            }
        })
        .collect()
}

#[derive(Clone, Copy)]
enum Kind {
    Nearest,
    Bilinear,
    Cubic,
}

/// Keys cubic convolution kernel with a = -0.5 (Catmull-Rom).
pub fn keys_kernel(t: f64) -> f64 {
    let a = -0.5;
    let t = t.abs();
    if t <= 1.0 {
        (a + 2.0) * t * t * t - (a + 3.0) * t * t + 1.0
    } else if t < 2.0 {
        a * (t * t * t - 5.0 * t * t + 8.0 * t - 4.0)
    } else {
        0.0
    }
}

fn resample<E: Elem>(x: &Tensor<E>, out_h: usize, out_w: usize, kind: Kind) -> Tensor<E> {
    let xs = x.shape();
    let ty = axis_taps(xs.h, out_h, kind);
    let tx = axis_taps(xs.w, out_w, kind);
    let out_shape = Shape::new(xs.n, xs.c, out_h, out_w);
    let xd = x.data();
    let mut data = vec![E::ZERO; out_shape.numel()];
    for nc in 0..xs.n * xs.c {
        let src = nc * xs.h * xs.w;
        let dst = nc * out_h * out_w;
        for (oy, tapy) in ty.iter().enumerate() {
            for (ox, tapx) in tx.iter().enumerate() {
                let mut acc = 0.0;
                for (sy, wy) in tapy.idx.iter().zip(&tapy.w) {
                    let row = src + sy * xs.w;
                    for (sx, wx) in tapx.idx.iter().zip(&tapx.w) {
                        acc += wy * wx * xd[row + sx].to_f64();
                    }
                }
                data[dst + oy * out_w + ox] = E::from_f64(acc);
            }
        }
    }
    let (nodes, _) = trace_inputs(&[x]);
    Tensor::op_output(out_shape, data, nodes, move |g| {
        let mut gx = vec![E::ZERO; xs.numel()];
        for nc in 0..xs.n * xs.c {
            let src = nc * xs.h * xs.w;
            let dst = nc * out_h * out_w;
            for (oy, tapy) in ty.iter().enumerate() {
                for (ox, tapx) in tx.iter().enumerate() {
                    let gv = g[dst + oy * out_w + ox];
                    for (sy, wy) in tapy.idx.iter().zip(&tapy.w) {
                        let row = src + sy * xs.w;
                        for (sx, wx) in tapx.idx.iter().zip(&tapx.w) {
                            gx[row + sx] += gv * E::from_f64(wy * wx);
                        }
                    }
                }
            }
        }
        vec![gx]
    })
}

/// Nearest or bilinear resize to (out_h, out_w).
pub fn resize<E: Elem>(
    x: &Tensor<E>,
    out_h: usize,
    out_w: usize,
    mode: ResizeMode,
) -> Result<Tensor<E>> {
    let kind = match mode {
        ResizeMode::Nearest => Kind::Nearest,
        ResizeMode::Bilinear => Kind::Bilinear,
    };
    Ok(resample(x, out_h.max(1), out_w.max(1), kind))
}

/// Bicubic resize with the Keys a = -0.5 kernel and clamped borders; the
/// reference up/downsampler for depth maps in this crate.
pub fn resize_bicubic<E: Elem>(x: &Tensor<E>, out_h: usize, out_w: usize) -> Result<Tensor<E>> {
    Ok(resample(x, out_h.max(1), out_w.max(1), Kind::Cubic))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_maps_stay_constant_in_all_modes() {
        let x = Tensor::<f64>::full(Shape::new(1, 2, 3, 4), 1.75);
        for (oh, ow) in [(6, 8), (2, 3), (5, 5)] {
            for mode in [ResizeMode::Nearest, ResizeMode::Bilinear] {
                let y = resize(&x, oh, ow, mode).unwrap();
                for v in y.data() {
                    assert!((v - 1.75).abs() < 1e-12);
                }
            }
            let y = resize_bicubic(&x, oh, ow).unwrap();
            for v in y.data() {
                assert!((v - 1.75).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn bilinear_two_sample_row_matches_closed_form() {
        // Direct evaluation of the sampling formula on [[0, 2]].
        let x = Tensor::from_vec(Shape::new(1, 1, 1, 2), vec![0.0, 2.0]).unwrap();
        let y = resize(&x, 1, 4, ResizeMode::Bilinear).unwrap();
        assert_eq!(y.data(), &[0.0, 0.5, 1.5, 2.0]);
    }

    #[test]
    fn bilinear_preserves_linear_ramps_in_the_interior() {
        let x = Tensor::from_fn(Shape::new(1, 1, 1, 8), |_, _, _, xx| xx as f64);
        let y = resize(&x, 1, 16, ResizeMode::Bilinear).unwrap();
        // Interior samples of a 2x upsampling sit at x = i/2 - 0.25.
        for i in 1..15 {
            let expected = i as f64 / 2.0 - 0.25;
            assert!((y.at(0, 0, 0, i) - expected).abs() < 1e-12);
        }
    }

    #[test]
    fn bicubic_reproduces_affine_ramps_in_the_interior() {
        let x = Tensor::from_fn(Shape::new(1, 1, 8, 8), |_, _, y, xx| {
            3.0 + 2.0 * y as f64 - 0.5 * xx as f64
        });
        let y = resize_bicubic(&x, 16, 16).unwrap();
        for oy in 4..12 {
            for ox in 4..12 {
                let sy = (oy as f64 + 0.5) * 0.5 - 0.5;
                let sx = (ox as f64 + 0.5) * 0.5 - 0.5;
                let expected = 3.0 + 2.0 * sy - 0.5 * sx;
                assert!((y.at(0, 0, oy, ox) - expected).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn bicubic_impulse_exposes_keys_taps() {
        // A unit impulse away from the borders: each 2x output sample reads
        // the analytic kernel value at its source offset.
        let mut x = Tensor::<f64>::zeros(Shape::new(1, 1, 1, 16));
        let shape = x.shape();
        x.data_mut()[shape.index(0, 0, 0, 8)] = 1.0;
        let y = resize_bicubic(&x, 1, 32).unwrap();
        for i in 8..24 {
            let src = (i as f64 + 0.5) * 0.5 - 0.5;
            let expected = keys_kernel(src - 8.0);
            assert!(
                (y.at(0, 0, 0, i) - expected).abs() < 1e-12,
                "tap {i}: {} vs {expected}",
                y.at(0, 0, 0, i)
            );
        }
    }

    #[test]
    fn nearest_floors_the_source_coordinate() {
        let x = Tensor::from_vec(Shape::new(1, 1, 1, 2), vec![5.0, 9.0]).unwrap();
        let y = resize(&x, 1, 4, ResizeMode::Nearest).unwrap();
        // Source coords: -0.25, 0.25, 0.75, 1.25 -> floors -1(clamp 0), 0, 0, 1.
        assert_eq!(y.data(), &[5.0, 5.0, 5.0, 9.0]);
    }
}
