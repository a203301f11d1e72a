//! Implicit high-frequency extraction in the DCT domain.
//!
//! A fixed orthonormal DCT-II squeezes each channel group down to one
//! assigned frequency coefficient; a fully connected layer plus sigmoid turns
//! the descriptor into per-channel attention. The low-cut filter subtracts
//! the attention-weighted (low-frequency) component from the features so
//! that only the complementary high-frequency content flows on. The channel
//! attention block (CAB) is the companion residual block used on both input
//! stems.

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::{
    activation, add, concat_channels, global_avg_pool, mul_channels, resize, split_channels, sub,
    Activation, Conv2d, Elem, Linear, ResizeMode, Shape, Tensor,
};

/// Orthonormal DCT-II basis, row-major (N, N):
/// B[k, i] = a_k * cos(pi * (2i + 1) * k / (2N)), a_0 = sqrt(1/N), a_k = sqrt(2/N).
pub fn dct_basis(n: usize) -> Result<Vec<f64>> {
    if n < 1 {
        return Err(Error::InvalidParameter(format!("dct_basis: N = {n}")));
    }
    let mut basis = vec![0.0; n * n];
    for k in 0..n {
        let alpha = if k == 0 {
            (1.0 / n as f64).sqrt()
        } else {
            (2.0 / n as f64).sqrt()
        };
        for i in 0..n {
            basis[k * n + i] = alpha
                * (std::f64::consts::PI * (2 * i + 1) as f64 * k as f64 / (2 * n) as f64).cos();
        }
    }
    Ok(basis)
}

/// Zigzag traversal of the (u, v) grid starting at (0, 0), anti-diagonal by
/// anti-diagonal, so earlier entries are lower frequencies.
pub fn zigzag(n: usize, count: usize) -> Vec<(usize, usize)> {
    let mut out = Vec::with_capacity(count);
    for d in 0..2 * n - 1 {
        let lo = d.saturating_sub(n - 1);
        let hi = d.min(n - 1);
        let cells: Vec<(usize, usize)> = if d % 2 == 0 {
            (lo..=hi).rev().map(|u| (u, d - u)).collect()
        } else {
            (lo..=hi).map(|u| (u, d - u)).collect()
        };
        for cell in cells {
            if out.len() == count {
                return out;
            }
            out.push(cell);
        }
    }
    out
}

/// Block size, basis and per-group frequency assignment for the spectral
/// squeeze. The list always starts at (0, 0) so the DC component passes
/// through the low branch.
#[derive(Clone)]
pub struct DctPlan {
    pub n: usize,
    pub basis: Vec<f64>,
    pub frequencies: Vec<(usize, usize)>,
}

impl DctPlan {
    pub fn new(n: usize, groups: usize) -> Result<Self> {
        if groups == 0 || groups > n * n {
            return Err(Error::InvalidConfig(format!(
                "DctPlan: {groups} groups do not fit an {n}x{n} spectrum"
            )));
        }
        Ok(DctPlan {
            n,
            basis: dct_basis(n)?,
            frequencies: zigzag(n, groups),
        })
    }

    pub fn basis_at(&self, k: usize, i: usize) -> f64 {
        self.basis[k * self.n + i]
    }
}

/// Per-channel (u, v) DCT coefficient, averaged over N x N tiles. Inputs
/// whose sides are not multiples of N are first resized bilinearly to the
/// nearest multiple (at least one tile).
pub fn spectral_component<E: Elem>(
    x: &Tensor<E>,
    u: usize,
    v: usize,
    plan: &DctPlan,
) -> Result<Tensor<E>> {
    let n = plan.n;
    if u >= n || v >= n {
        return Err(Error::InvalidParameter(format!(
            "spectral_component: frequency ({u}, {v}) outside [0, {n})^2"
        )));
    }
    let xs = x.shape();
    let rounded = |len: usize| -> usize {
        let m = ((len as f64 / n as f64).round() as usize).max(1);
        m * n
    };
    let (th, tw) = (rounded(xs.h), rounded(xs.w));
    let resized;
    let input = if (th, tw) == (xs.h, xs.w) {
        x
    } else {
        resized = resize(x, th, tw, ResizeMode::Bilinear)?;
        &resized
    };

    let s = input.shape();
    let tiles = (s.h / n) * (s.w / n);
    let inv_tiles = 1.0 / tiles as f64;
    let row_u: Vec<f64> = (0..n).map(|i| plan.basis_at(u, i)).collect();
    let row_v: Vec<f64> = (0..n).map(|j| plan.basis_at(v, j)).collect();

    let mut data = vec![E::ZERO; s.n * s.c];
    for nc in 0..s.n * s.c {
        let base = nc * s.h * s.w;
        let mut acc = 0.0;
        for ty in (0..s.h).step_by(n) {
            for tx in (0..s.w).step_by(n) {
                for (i, wu) in row_u.iter().enumerate() {
                    let row = base + (ty + i) * s.w + tx;
                    for (j, wv) in row_v.iter().enumerate() {
                        acc += input.data()[row + j].to_f64() * wu * wv;
                    }
                }
            }
        }
        data[nc] = E::from_f64(acc * inv_tiles);
    }

    let (nodes, _) = crate::tensor::trace_inputs(&[input]);
    let out_shape = Shape::new(s.n, s.c, 1, 1);
    Ok(Tensor::op_output(out_shape, data, nodes, move |g| {
        let mut gx = vec![E::ZERO; s.numel()];
        for nc in 0..s.n * s.c {
            let base = nc * s.h * s.w;
            let gv = g[nc].to_f64() * inv_tiles;
            for ty in (0..s.h).step_by(n) {
                for tx in (0..s.w).step_by(n) {
                    for (i, wu) in row_u.iter().enumerate() {
                        let row = base + (ty + i) * s.w + tx;
                        for (j, wv) in row_v.iter().enumerate() {
                            gx[row + j] += E::from_f64(gv * wu * wv);
                        }
                    }
                }
            }
        }
        vec![gx]
    }))
}

/// Multi-spectral channel attention: channel groups are squeezed at their
/// assigned frequencies, then a fully connected layer and sigmoid produce
/// per-channel weights in (0, 1).
pub struct MultiSpectralAttention<E: Elem> {
    pub plan: DctPlan,
    pub fc: Linear<E>,
}

impl<E: Elem> MultiSpectralAttention<E> {
    pub fn new(channels: usize, groups: usize, block: usize, rng: &mut Rng) -> Result<Self> {
        if groups == 0 || channels % groups != 0 {
            return Err(Error::InvalidConfig(format!(
                "multispectral attention: {channels} channels not divisible into {groups} groups"
            )));
        }
        Ok(MultiSpectralAttention {
            plan: DctPlan::new(block, groups)?,
            fc: Linear::new(channels, channels, rng),
        })
    }

    pub fn forward(&self, x: &Tensor<E>) -> Result<Tensor<E>> {
        let groups = self.plan.frequencies.len();
        let per = x.shape().c / groups;
        let parts = split_channels(x, &vec![per; groups])?;
        let mut descriptors = Vec::with_capacity(groups);
        for (part, &(u, v)) in parts.iter().zip(&self.plan.frequencies) {
            descriptors.push(spectral_component(part, u, v, &self.plan)?);
        }
        let refs: Vec<&Tensor<E>> = descriptors.iter().collect();
        let descriptor = concat_channels(&refs)?;
        Ok(activation(
            &self.fc.forward(&descriptor)?,
            Activation::Sigmoid,
        ))
    }

    pub fn param_count(&self) -> usize {
        self.fc.param_count()
    }

    pub fn for_each_param(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<E>)) {
        self.fc.for_each_param(&format!("{prefix}.fc"), f);
    }
}

/// Low-cut filter output. `features == low + high` holds bit-exactly: `high`
/// is the rounded subtraction and `low` is re-derived as `features - high`,
/// which is exact because `|features * att| <= |features|`.
pub struct LcfOutput<E: Elem> {
    pub features: Tensor<E>,
    pub low: Tensor<E>,
    pub high: Tensor<E>,
}

/// Low-cut filtering: embed the image, estimate per-channel low-frequency
/// attention, and keep only the complementary high-frequency part.
pub struct Lcf<E: Elem> {
    pub embed: Conv2d<E>,
    pub attention: MultiSpectralAttention<E>,
}

impl<E: Elem> Lcf<E> {
    pub fn new(in_c: usize, channels: usize, groups: usize, rng: &mut Rng) -> Result<Self> {
        Ok(Lcf {
            embed: Conv2d::new(in_c, channels, 1, rng),
            attention: MultiSpectralAttention::new(channels, groups, 8, rng)?,
        })
    }

    pub fn forward(&self, x: &Tensor<E>) -> Result<LcfOutput<E>> {
        let features = self.embed.forward(x)?;
        let att = self.attention.forward(&features)?;
        Self::decompose(&features, &att)
    }

    /// Splits features into an attention-weighted low band and its exact
    /// complement.
    pub fn decompose(features: &Tensor<E>, att: &Tensor<E>) -> Result<LcfOutput<E>> {
        let weighted = mul_channels(features, att)?;
        let high = sub(features, &weighted)?;
        let low = sub(features, &high)?;
        Ok(LcfOutput {
            features: features.clone(),
            low,
            high,
        })
    }

    pub fn param_count(&self) -> usize {
        self.embed.param_count() + self.attention.param_count()
    }

    pub fn for_each_param(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<E>)) {
        self.embed.for_each_param(&format!("{prefix}.embed"), f);
        self.attention
            .for_each_param(&format!("{prefix}.attention"), f);
    }
}

/// Channel attention block: two 3x3 convolutions with a squeeze-excitation
/// rescale, in residual form.
pub struct Cab<E: Elem> {
    pub conv1: Conv2d<E>,
    pub conv2: Conv2d<E>,
    pub squeeze: Linear<E>,
    pub excite: Linear<E>,
}

impl<E: Elem> Cab<E> {
    pub fn new(channels: usize, reduction: usize, rng: &mut Rng) -> Self {
        let hidden = (channels / reduction).max(1);
        Cab {
            conv1: Conv2d::new(channels, channels, 3, rng),
            conv2: Conv2d::new_residual(channels, channels, 3, rng),
            squeeze: Linear::new(channels, hidden, rng),
            excite: Linear::new(hidden, channels, rng),
        }
    }

    pub fn forward(&self, x: &Tensor<E>) -> Result<Tensor<E>> {
        let y = self
            .conv2
            .forward(&activation(&self.conv1.forward(x)?, Activation::Relu))?;
        let scale = self.channel_scale(&y)?;
        add(x, &mul_channels(&y, &scale)?)
    }

    /// Squeeze-excitation weights in (0, 1), shape (n, c, 1, 1).
    pub fn channel_scale(&self, y: &Tensor<E>) -> Result<Tensor<E>> {
        let pooled = global_avg_pool(y)?;
        let hidden = activation(&self.squeeze.forward(&pooled)?, Activation::Relu);
        Ok(activation(
            &self.excite.forward(&hidden)?,
            Activation::Sigmoid,
        ))
    }

    pub fn param_count(&self) -> usize {
        self.conv1.param_count()
            + self.conv2.param_count()
            + self.squeeze.param_count()
            + self.excite.param_count()
    }

    pub fn for_each_param(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<E>)) {
        self.conv1.for_each_param(&format!("{prefix}.conv1"), f);
        self.conv2.for_each_param(&format!("{prefix}.conv2"), f);
        self.squeeze.for_each_param(&format!("{prefix}.squeeze"), f);
        self.excite.for_each_param(&format!("{prefix}.excite"), f);
    }
}
