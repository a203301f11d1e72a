//! Elementwise arithmetic, activations, reductions and channel stacking.

use crate::error::{Error, Result};

use super::{trace_inputs, Elem, Shape, Tensor};

fn check_same_shape<E: Elem>(a: &Tensor<E>, b: &Tensor<E>, op: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::InvalidShape(format!(
            "{op}: shapes {} and {} differ",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

pub fn add<E: Elem>(a: &Tensor<E>, b: &Tensor<E>) -> Result<Tensor<E>> {
    check_same_shape(a, b, "add")?;
    let data = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| *x + *y)
        .collect();
    let (nodes, traced) = trace_inputs(&[a, b]);
    Ok(Tensor::op_output(a.shape(), data, nodes, move |g| {
        let mut out = Vec::new();
        if traced[0] {
            out.push(g.to_vec());
        }
        if traced[1] {
            out.push(g.to_vec());
        }
        out
    }))
}

pub fn sub<E: Elem>(a: &Tensor<E>, b: &Tensor<E>) -> Result<Tensor<E>> {
    check_same_shape(a, b, "sub")?;
    let data = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| *x - *y)
        .collect();
    let (nodes, traced) = trace_inputs(&[a, b]);
    Ok(Tensor::op_output(a.shape(), data, nodes, move |g| {
        let mut out = Vec::new();
        if traced[0] {
            out.push(g.to_vec());
        }
        if traced[1] {
            out.push(g.iter().map(|v| -*v).collect());
        }
        out
    }))
}

pub fn mul<E: Elem>(a: &Tensor<E>, b: &Tensor<E>) -> Result<Tensor<E>> {
    check_same_shape(a, b, "mul")?;
    let data = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| *x * *y)
        .collect();
    let (nodes, traced) = trace_inputs(&[a, b]);
    let da = a.data_arc();
    let db = b.data_arc();
    Ok(Tensor::op_output(a.shape(), data, nodes, move |g| {
        let mut out = Vec::new();
        if traced[0] {
            out.push(g.iter().zip(db.iter()).map(|(g, y)| *g * *y).collect());
        }
        if traced[1] {
            out.push(g.iter().zip(da.iter()).map(|(g, x)| *g * *x).collect());
        }
        out
    }))
}

/// Multiplies `a` (n, c, h, w) by per-channel factors `s` (n, c, 1, 1),
/// broadcast over the spatial axes.
pub fn mul_channels<E: Elem>(a: &Tensor<E>, s: &Tensor<E>) -> Result<Tensor<E>> {
    let sa = a.shape();
    let ss = s.shape();
    if ss.n != sa.n || ss.c != sa.c || ss.h != 1 || ss.w != 1 {
        return Err(Error::InvalidShape(format!(
            "mul_channels: factors {} incompatible with input {}",
            ss, sa
        )));
    }
    let plane = sa.h * sa.w;
    let mut data = Vec::with_capacity(sa.numel());
    for nc in 0..sa.n * sa.c {
        let f = s.data()[nc];
        for v in &a.data()[nc * plane..(nc + 1) * plane] {
            data.push(*v * f);
        }
    }
    let (nodes, traced) = trace_inputs(&[a, s]);
    let da = a.data_arc();
    let ds = s.data_arc();
    Ok(Tensor::op_output(sa, data, nodes, move |g| {
        let mut out = Vec::new();
        if traced[0] {
            let mut ga = Vec::with_capacity(g.len());
            for nc in 0..sa.n * sa.c {
                let f = ds[nc];
                for gv in &g[nc * plane..(nc + 1) * plane] {
                    ga.push(*gv * f);
                }
            }
            out.push(ga);
        }
        if traced[1] {
            let mut gs = vec![E::ZERO; sa.n * sa.c];
            for nc in 0..sa.n * sa.c {
                let mut acc = E::ZERO;
                for (gv, xv) in g[nc * plane..(nc + 1) * plane]
                    .iter()
                    .zip(&da[nc * plane..(nc + 1) * plane])
                {
                    acc += *gv * *xv;
                }
                gs[nc] = acc;
            }
            out.push(gs);
        }
        out
    }))
}

/// y = k * x (elementwise scalar multiply).
pub fn scale<E: Elem>(x: &Tensor<E>, k: E) -> Tensor<E> {
    affine(x, k, E::ZERO)
}

/// y = k * x + b (elementwise scalar affine map).
pub fn affine<E: Elem>(x: &Tensor<E>, k: E, b: E) -> Tensor<E> {
    let data = x.data().iter().map(|v| k * *v + b).collect();
    let (nodes, _) = trace_inputs(&[x]);
    Tensor::op_output(x.shape(), data, nodes, move |g| {
        vec![g.iter().map(|v| *v * k).collect()]
    })
}

pub fn abs<E: Elem>(x: &Tensor<E>) -> Tensor<E> {
    let data = x.data().iter().map(|v| v.abs()).collect();
    let (nodes, _) = trace_inputs(&[x]);
    let dx = x.data_arc();
    Tensor::op_output(x.shape(), data, nodes, move |g| {
        vec![g
            .iter()
            .zip(dx.iter())
            .map(|(g, x)| {
                if *x > E::ZERO {
                    *g
                } else if *x < E::ZERO {
                    -*g
                } else {
                    E::ZERO
                }
            })
            .collect()]
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Sigmoid,
    Relu,
    /// Negative slope 0.2.
    LeakyRelu,
}

pub fn activation<E: Elem>(x: &Tensor<E>, kind: Activation) -> Tensor<E> {
    let slope = E::from_f64(0.2);
    let data: Vec<E> = x
        .data()
        .iter()
        .map(|v| match kind {
            Activation::Sigmoid => sigmoid_scalar(*v),
            Activation::Relu => (*v).max(E::ZERO),
            Activation::LeakyRelu => {
                if *v >= E::ZERO {
                    *v
                } else {
                    *v * slope
                }
            }
        })
        .collect();
    let (nodes, _) = trace_inputs(&[x]);
    let dx = x.data_arc();
    let dy = data.clone();
    Tensor::op_output(x.shape(), data, nodes, move |g| {
        vec![g
            .iter()
            .enumerate()
            .map(|(i, g)| match kind {
                Activation::Sigmoid => {
                    let s = dy[i];
                    *g * s * (E::ONE - s)
                }
                Activation::Relu => {
                    if dx[i] > E::ZERO {
                        *g
                    } else {
                        E::ZERO
                    }
                }
                Activation::LeakyRelu => {
                    if dx[i] >= E::ZERO {
                        *g
                    } else {
                        *g * slope
                    }
                }
            })
            .collect()]
    })
}

fn sigmoid_scalar<E: Elem>(v: E) -> E {
    // Split on sign so the exponential never overflows, and pin the result
    // inside the open unit interval: the contract guarantees strict bounds
    // even where the exact value would round to 0 or 1.
    let s = if v >= E::ZERO {
        E::ONE / (E::ONE + (-v).exp())
    } else {
        let e = v.exp();
        e / (E::ONE + e)
    };
    s.max(E::TINY).min(E::BELOW_ONE)
}

/// Sum of all elements, as a (1, 1, 1, 1) tensor.
pub fn sum_all<E: Elem>(x: &Tensor<E>) -> Tensor<E> {
    let mut acc = E::ZERO;
    for v in x.data() {
        acc += *v;
    }
    let (nodes, _) = trace_inputs(&[x]);
    let numel = x.numel();
    Tensor::op_output(Shape::new(1, 1, 1, 1), vec![acc], nodes, move |g| {
        vec![vec![g[0]; numel]]
    })
}

/// Stacks tensors along the channel axis; all inputs share (n, h, w).
pub fn concat_channels<E: Elem>(xs: &[&Tensor<E>]) -> Result<Tensor<E>> {
    if xs.is_empty() {
        return Err(Error::InvalidShape("concat of zero tensors".to_string()));
    }
    let first = xs[0].shape();
    let mut total_c = 0;
    for t in xs {
        let s = t.shape();
        if s.n != first.n || s.h != first.h || s.w != first.w {
            return Err(Error::InvalidShape(format!(
                "concat_channels: {} incompatible with {}",
                s, first
            )));
        }
        total_c += s.c;
    }
    let out_shape = Shape::new(first.n, total_c, first.h, first.w);
    let plane = first.h * first.w;
    let mut data = vec![E::ZERO; out_shape.numel()];
    let mut c_off = 0;
    for t in xs {
        let s = t.shape();
        for n in 0..s.n {
            let dst = out_shape.index(n, c_off, 0, 0);
            let src = n * s.c * plane;
            data[dst..dst + s.c * plane].copy_from_slice(&t.data()[src..src + s.c * plane]);
        }
        c_off += s.c;
    }
    let (nodes, traced) = trace_inputs(xs);
    let sizes: Vec<usize> = xs.iter().map(|t| t.shape().c).collect();
    Ok(Tensor::op_output(out_shape, data, nodes, move |g| {
        let mut out = Vec::new();
        let mut c_off = 0;
        for (i, &ci) in sizes.iter().enumerate() {
            if traced[i] {
                let mut gi = vec![E::ZERO; out_shape.n * ci * plane];
                for n in 0..out_shape.n {
                    let src = out_shape.index(n, c_off, 0, 0);
                    let dst = n * ci * plane;
                    gi[dst..dst + ci * plane].copy_from_slice(&g[src..src + ci * plane]);
                }
                out.push(gi);
            }
            c_off += ci;
        }
        out
    }))
}

/// Splits along the channel axis into pieces of the given widths; exact
/// inverse of [`concat_channels`].
pub fn split_channels<E: Elem>(x: &Tensor<E>, sizes: &[usize]) -> Result<Vec<Tensor<E>>> {
    let s = x.shape();
    let total: usize = sizes.iter().sum();
    if total != s.c {
        return Err(Error::InvalidShape(format!(
            "split_channels: sizes sum to {total}, tensor has {} channels",
            s.c
        )));
    }
    let plane = s.h * s.w;
    let mut out = Vec::with_capacity(sizes.len());
    let mut c_off = 0;
    for &ci in sizes {
        let piece_shape = Shape::new(s.n, ci, s.h, s.w);
        let mut data = vec![E::ZERO; piece_shape.numel()];
        for n in 0..s.n {
            let src = s.index(n, c_off, 0, 0);
            let dst = n * ci * plane;
            data[dst..dst + ci * plane].copy_from_slice(&x.data()[src..src + ci * plane]);
        }
        let (nodes, _) = trace_inputs(&[x]);
        let start_c = c_off;
        out.push(Tensor::op_output(piece_shape, data, nodes, move |g| {
            let mut gx = vec![E::ZERO; s.numel()];
            for n in 0..s.n {
                let dst = s.index(n, start_c, 0, 0);
                let src = n * ci * plane;
                gx[dst..dst + ci * plane].copy_from_slice(&g[src..src + ci * plane]);
            }
            vec![gx]
        }));
        c_off += ci;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: Shape, v: &[f64]) -> Tensor<f64> {
        Tensor::from_vec(shape, v.to_vec()).unwrap()
    }

    #[test]
    fn sigmoid_at_zero_is_half() {
        let x = Tensor::<f64>::zeros(Shape::new(1, 1, 2, 2));
        let y = activation(&x, Activation::Sigmoid);
        for v in y.data() {
            assert_eq!(*v, 0.5);
        }
    }

    #[test]
    fn sigmoid_symmetry() {
        let x = t(Shape::new(1, 1, 1, 5), &[-3.0, -0.7, 0.0, 1.3, 8.0]);
        let nx = scale(&x, -1.0);
        let a = activation(&x, Activation::Sigmoid);
        let b = activation(&nx, Activation::Sigmoid);
        for (u, v) in a.data().iter().zip(b.data()) {
            assert!((u + v - 1.0).abs() < 1e-15);
        }
    }

    #[test]
    fn sigmoid_strictly_inside_unit_interval() {
        let x = t(Shape::new(1, 1, 1, 4), &[-100.0, -1.0, 1.0, 100.0]);
        let y = activation(&x, Activation::Sigmoid);
        for v in y.data() {
            assert!(*v > 0.0 && *v < 1.0);
        }
    }

    #[test]
    fn concat_split_round_trip_is_exact() {
        let a = t(Shape::new(1, 1, 2, 2), &[1.0, 2.0, 3.0, 4.0]);
        let b = Tensor::<f64>::rand(Shape::new(1, 3, 2, 2), -1.0, 1.0, &mut crate::rng::Rng::new(5));
        let cat = concat_channels(&[&a, &b]).unwrap();
        assert_eq!(cat.shape(), Shape::new(1, 4, 2, 2));
        let parts = split_channels(&cat, &[1, 3]).unwrap();
        assert_eq!(parts[0].data(), a.data());
        assert_eq!(parts[1].data(), b.data());
    }

    #[test]
    fn concat_rejects_spatial_mismatch() {
        let a = Tensor::<f64>::zeros(Shape::new(1, 1, 2, 2));
        let b = Tensor::<f64>::zeros(Shape::new(1, 1, 3, 2));
        assert!(matches!(
            concat_channels(&[&a, &b]),
            Err(Error::InvalidShape(_))
        ));
    }

    #[test]
    fn concat_routes_gradient_to_the_right_input() {
        let a = t(Shape::new(1, 1, 1, 2), &[1.0, 2.0]).traced();
        let b = t(Shape::new(1, 2, 1, 2), &[3.0, 4.0, 5.0, 6.0]).traced();
        let cat = concat_channels(&[&a, &b]).unwrap();
        // Select only the first channel: gradient must reach `a` alone.
        let parts = split_channels(&cat, &[1, 2]).unwrap();
        let s = sum_all(&parts[0]);
        s.backward().unwrap();
        assert_eq!(a.grad().unwrap(), vec![1.0, 1.0]);
        assert_eq!(b.grad().unwrap(), vec![0.0; 4]);
    }

    #[test]
    fn mul_channels_broadcasts_and_backprops() {
        let x = t(Shape::new(1, 2, 1, 2), &[1.0, 2.0, 3.0, 4.0]).traced();
        let s = t(Shape::new(1, 2, 1, 1), &[10.0, 100.0]).traced();
        let y = mul_channels(&x, &s).unwrap();
        assert_eq!(y.data(), &[10.0, 20.0, 300.0, 400.0]);
        sum_all(&y).backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![10.0, 10.0, 100.0, 100.0]);
        assert_eq!(s.grad().unwrap(), vec![3.0, 7.0]);
    }

    #[test]
    fn fan_out_gradients_accumulate() {
        let x = t(Shape::new(1, 1, 1, 1), &[3.0]).traced();
        let y = add(&x, &x).unwrap(); // y = 2x
        let z = mul(&y, &x).unwrap(); // z = 2x^2, dz/dx = 4x = 12
        z.backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![12.0]);
    }
}
