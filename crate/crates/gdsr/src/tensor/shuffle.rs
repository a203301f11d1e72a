//! Lossless layout rearrangements: pixel shuffle, windowing, reshape.

use crate::error::{Error, Result};

use super::{trace_inputs, Elem, Shape, Tensor};

/// Pure index permutation/bijection: data[o] = x[map(o)]. The backward pass
/// scatters through the same mapping.
fn permutation_op<E: Elem>(
    x: &Tensor<E>,
    out_shape: Shape,
    map: impl Fn(usize) -> usize + 'static,
) -> Tensor<E> {
    debug_assert_eq!(out_shape.numel(), x.numel());
    let xd = x.data();
    let mut data = vec![E::ZERO; out_shape.numel()];
    for (o, slot) in data.iter_mut().enumerate() {
        *slot = xd[map(o)];
    }
    let (nodes, _) = trace_inputs(&[x]);
    let in_numel = x.numel();
    Tensor::op_output(out_shape, data, nodes, move |g| {
        let mut gx = vec![E::ZERO; in_numel];
        for (o, gv) in g.iter().enumerate() {
            gx[map(o)] += *gv;
        }
        vec![gx]
    })
}

/// (n, c*r*r, h, w) -> (n, c, h*r, w*r) with the standard sub-pixel layout:
/// source channel c*r*r + dy*r + dx lands at output offset (dy, dx).
pub fn pixel_shuffle<E: Elem>(x: &Tensor<E>, r: usize) -> Result<Tensor<E>> {
    let xs = x.shape();
    if r == 0 || xs.c % (r * r) != 0 {
        return Err(Error::InvalidShape(format!(
            "pixel_shuffle: {} channels not divisible by r^2 = {}",
            xs.c,
            r * r
        )));
    }
    let out_shape = Shape::new(xs.n, xs.c / (r * r), xs.h * r, xs.w * r);
    let os = out_shape;
    Ok(permutation_op(x, out_shape, move |o| {
        let xw = o % os.w;
        let rest = o / os.w;
        let yw = rest % os.h;
        let rest = rest / os.h;
        let c = rest % os.c;
        let n = rest / os.c;
        let (y, dy) = (yw / r, yw % r);
        let (xx, dx) = (xw / r, xw % r);
        let src_c = c * r * r + dy * r + dx;
        xs.index(n, src_c, y, xx)
    }))
}

/// Exact inverse of [`pixel_shuffle`]: (n, c, h*r, w*r) -> (n, c*r*r, h, w).
pub fn pixel_unshuffle<E: Elem>(x: &Tensor<E>, r: usize) -> Result<Tensor<E>> {
    let xs = x.shape();
    if r == 0 || xs.h % r != 0 || xs.w % r != 0 {
        return Err(Error::InvalidShape(format!(
            "pixel_unshuffle: spatial dims {}x{} not divisible by r = {r}",
            xs.h, xs.w
        )));
    }
    let out_shape = Shape::new(xs.n, xs.c * r * r, xs.h / r, xs.w / r);
    let os = out_shape;
    Ok(permutation_op(x, out_shape, move |o| {
        let xx = o % os.w;
        let rest = o / os.w;
        let y = rest % os.h;
        let rest = rest / os.h;
        let cc = rest % os.c;
        let n = rest / os.c;
        let c = cc / (r * r);
        let dy = (cc / r) % r;
        let dx = cc % r;
        xs.index(n, c, y * r + dy, xx * r + dx)
    }))
}

/// Relabels the shape; the row-major element order is unchanged.
pub fn reshape<E: Elem>(x: &Tensor<E>, new_shape: Shape) -> Result<Tensor<E>> {
    if new_shape.numel() != x.numel() {
        return Err(Error::InvalidShape(format!(
            "reshape: {} has {} elements, target {} has {}",
            x.shape(),
            x.numel(),
            new_shape,
            new_shape.numel()
        )));
    }
    let data = x.data().to_vec();
    let (nodes, _) = trace_inputs(&[x]);
    Ok(Tensor::op_output(new_shape, data, nodes, move |g| {
        vec![g.to_vec()]
    }))
}

/// Swaps the two spatial axes: (n, c, h, w) -> (n, c, w, h).
pub fn transpose_hw<E: Elem>(x: &Tensor<E>) -> Tensor<E> {
    let xs = x.shape();
    let out_shape = Shape::new(xs.n, xs.c, xs.w, xs.h);
    let os = out_shape;
    permutation_op(x, out_shape, move |o| {
        let xx = o % os.w;
        let rest = o / os.w;
        let y = rest % os.h;
        let rest = rest / os.h;
        let c = rest % os.c;
        let n = rest / os.c;
        xs.index(n, c, xx, y)
    })
}

/// Cuts (n, c, H, W) into non-overlapping win x win patches:
/// (n * (H/win) * (W/win), c, win, win), windows in row-major order.
pub fn window_partition<E: Elem>(x: &Tensor<E>, win: usize) -> Result<Tensor<E>> {
    let xs = x.shape();
    if win == 0 || xs.h % win != 0 || xs.w % win != 0 {
        return Err(Error::InvalidShape(format!(
            "window_partition: {}x{} not divisible by window {win}",
            xs.h, xs.w
        )));
    }
    let (nwh, nww) = (xs.h / win, xs.w / win);
    let out_shape = Shape::new(xs.n * nwh * nww, xs.c, win, win);
    let os = out_shape;
    Ok(permutation_op(x, out_shape, move |o| {
        let xx = o % os.w;
        let rest = o / os.w;
        let y = rest % os.h;
        let rest = rest / os.h;
        let c = rest % os.c;
        let b = rest / os.c;
        let wx = b % nww;
        let rest = b / nww;
        let wy = rest % nwh;
        let n = rest / nwh;
        xs.index(n, c, wy * win + y, wx * win + xx)
    }))
}

/// Inverse of [`window_partition`] for a full map of size (h, w).
pub fn window_merge<E: Elem>(x: &Tensor<E>, win: usize, h: usize, w: usize) -> Result<Tensor<E>> {
    let xs = x.shape();
    if win == 0 || h % win != 0 || w % win != 0 {
        return Err(Error::InvalidShape(format!(
            "window_merge: {h}x{w} not divisible by window {win}"
        )));
    }
    let (nwh, nww) = (h / win, w / win);
    if xs.h != win || xs.w != win || xs.n % (nwh * nww) != 0 {
        return Err(Error::InvalidShape(format!(
            "window_merge: {} windows do not tile a {h}x{w} map",
            xs.n
        )));
    }
    let n = xs.n / (nwh * nww);
    let out_shape = Shape::new(n, xs.c, h, w);
    let os = out_shape;
    Ok(permutation_op(x, out_shape, move |o| {
        let xx = o % os.w;
        let rest = o / os.w;
        let y = rest % os.h;
        let rest = rest / os.h;
        let c = rest % os.c;
        let nn = rest / os.c;
        let (wy, py) = (y / win, y % win);
        let (wx, px) = (xx / win, xx % win);
        let b = (nn * nwh + wy) * nww + wx;
        xs.index(b, c, py, px)
    }))
}

/// Repeats a single-batch tensor n times; the backward pass sums over the
/// batch copies.
pub fn broadcast_batch<E: Elem>(x: &Tensor<E>, n: usize) -> Result<Tensor<E>> {
    let xs = x.shape();
    if xs.n != 1 {
        return Err(Error::InvalidShape(format!(
            "broadcast_batch expects batch 1, got {}",
            xs
        )));
    }
    let out_shape = Shape::new(n, xs.c, xs.h, xs.w);
    let per = xs.numel();
    let mut data = Vec::with_capacity(per * n);
    for _ in 0..n {
        data.extend_from_slice(x.data());
    }
    let (nodes, _) = trace_inputs(&[x]);
    Ok(Tensor::op_output(out_shape, data, nodes, move |g| {
        let mut gx = vec![E::ZERO; per];
        for chunk in g.chunks_exact(per) {
            for (t, v) in gx.iter_mut().zip(chunk) {
                *t += *v;
            }
        }
        vec![gx]
    }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    #[test]
    fn shuffle_unshuffle_round_trip_is_bit_exact() {
        let mut rng = Rng::new(1);
        let x = Tensor::<f64>::rand(Shape::new(2, 8, 3, 5), -1.0, 1.0, &mut rng);
        let y = pixel_shuffle(&x, 2).unwrap();
        assert_eq!(y.shape(), Shape::new(2, 2, 6, 10));
        let back = pixel_unshuffle(&y, 2).unwrap();
        assert_eq!(back.data(), x.data());
    }

    #[test]
    fn shuffle_layout_is_the_expected_permutation() {
        // Brute-force enumeration on a 1x4x1x1 tensor: channels (a, b, c, d)
        // must land as [[a, b], [c, d]].
        let x = Tensor::from_vec(Shape::new(1, 4, 1, 1), vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let y = pixel_shuffle(&x, 2).unwrap();
        assert_eq!(y.shape(), Shape::new(1, 1, 2, 2));
        assert_eq!(y.data(), &[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(y.at(0, 0, 0, 1), 2.0);
        assert_eq!(y.at(0, 0, 1, 0), 3.0);
    }

    #[test]
    fn shuffle_shape_algebra() {
        let x = Tensor::<f64>::zeros(Shape::new(1, 4, 2, 2));
        assert_eq!(
            pixel_shuffle(&x, 2).unwrap().shape(),
            Shape::new(1, 1, 4, 4)
        );
        assert!(pixel_shuffle(&x, 3).is_err());
        assert!(pixel_unshuffle(&Tensor::<f64>::zeros(Shape::new(1, 1, 3, 4)), 2).is_err());
    }

    #[test]
    fn window_partition_round_trip() {
        let mut rng = Rng::new(2);
        let x = Tensor::<f64>::rand(Shape::new(2, 3, 8, 4), -1.0, 1.0, &mut rng);
        let wins = window_partition(&x, 4).unwrap();
        assert_eq!(wins.shape(), Shape::new(2 * 2 * 1, 3, 4, 4));
        let back = window_merge(&wins, 4, 8, 4).unwrap();
        assert_eq!(back.data(), x.data());
    }

    #[test]
    fn transpose_is_involutive() {
        let mut rng = Rng::new(3);
        let x = Tensor::<f64>::rand(Shape::new(1, 2, 3, 5), -1.0, 1.0, &mut rng);
        let t = transpose_hw(&x);
        assert_eq!(t.shape(), Shape::new(1, 2, 5, 3));
        assert_eq!(t.at(0, 1, 4, 2), x.at(0, 1, 2, 4));
        assert_eq!(transpose_hw(&t).data(), x.data());
    }

    #[test]
    fn broadcast_batch_backward_sums() {
        let x = Tensor::from_vec(Shape::new(1, 1, 1, 2), vec![1.0, 2.0])
            .unwrap()
            .traced();
        let y = broadcast_batch(&x, 3).unwrap();
        assert_eq!(y.shape(), Shape::new(3, 1, 1, 2));
        crate::tensor::sum_all(&y).backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![3.0, 3.0]);
    }
}
