//! Explicit high-frequency extraction branch.
//!
//! A stem merges the upsampled depth map with the color image, a stack of
//! dynamic self-calibrated convolution blocks with pixel attention (DSP)
//! extracts edge structure at two receptive-field scales, a windowed
//! local-global attention block aggregates context, and a supervised
//! attention head emits the predicted gradient map together with the edge
//! features handed to the restoration branch.

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::{
    activation, add, avg_pool2d, broadcast_batch, concat_channels, matmul, mul, pixel_shuffle,
    reshape, resize, scale, softmax_w, transpose_hw, window_merge, window_partition, Activation,
    Conv2d, Elem, ResizeMode, Shape, Tensor,
};

/// Three-branch residual block: a dynamic-scale branch working on 2x
/// downsampled features, a flat convolution branch, and a pixel-attention
/// branch carrying half the channels. The channel split is (C/4, C/4, C/2).
pub struct DspBlock<E: Elem> {
    pub split_dyn: Conv2d<E>,
    pub split_flat: Conv2d<E>,
    pub split_pa: Conv2d<E>,
    pub dyn_conv3: Conv2d<E>,
    pub dyn_proj: Conv2d<E>,
    pub flat_conv3: Conv2d<E>,
    pub flat_proj: Conv2d<E>,
    pub pa_conv3: Conv2d<E>,
    pub pa_gate: Conv2d<E>,
    pub pa_fuse: Conv2d<E>,
    pub sum_conv3: Conv2d<E>,
    pub out_proj: Conv2d<E>,
    channels: usize,
}

impl<E: Elem> DspBlock<E> {
    pub fn new(channels: usize, rng: &mut Rng) -> Result<Self> {
        if channels % 4 != 0 {
            return Err(Error::InvalidConfig(format!(
                "dsp block: {channels} channels not divisible by 4"
            )));
        }
        let quarter = channels / 4;
        let half = channels / 2;
        Ok(DspBlock {
            split_dyn: Conv2d::new(channels, quarter, 1, rng),
            split_flat: Conv2d::new(channels, quarter, 1, rng),
            split_pa: Conv2d::new(channels, half, 1, rng),
            dyn_conv3: Conv2d::new(quarter, quarter, 3, rng),
            dyn_proj: Conv2d::new(quarter, half, 1, rng),
            flat_conv3: Conv2d::new(quarter, quarter, 3, rng),
            flat_proj: Conv2d::new(quarter, half, 1, rng),
            pa_conv3: Conv2d::new(half, half, 3, rng),
            pa_gate: Conv2d::new(half, half, 1, rng),
            pa_fuse: Conv2d::new(half, half, 3, rng),
            sum_conv3: Conv2d::new(half, half, 3, rng),
            out_proj: Conv2d::new_residual(channels, channels, 1, rng),
            channels,
        })
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn forward(&self, x: &Tensor<E>) -> Result<Tensor<E>> {
        let s = x.shape();
        if s.c != self.channels {
            return Err(Error::InvalidConfig(format!(
                "dsp block: input has {} channels, block expects {}",
                s.c, self.channels
            )));
        }
        if s.h < 2 || s.w < 2 {
            return Err(Error::InvalidShape(format!(
                "dsp block: spatial dims {}x{} too small for the dynamic branch",
                s.h, s.w
            )));
        }

        // Dynamic-scale branch: pool, split, 3x3, widen, upsample back.
        let pooled = avg_pool2d(x, 2, 2)?;
        let dyn_feat = self.split_dyn.forward(&pooled)?;
        let dyn_feat = self.dyn_conv3.forward(&dyn_feat)?;
        let dyn_feat = self.dyn_proj.forward(&dyn_feat)?;
        let dyn_feat = resize(&dyn_feat, s.h, s.w, ResizeMode::Bilinear)?;

        // Flat branch at full resolution.
        let flat = self.split_flat.forward(x)?;
        let flat = self.flat_conv3.forward(&flat)?;
        let flat = self.flat_proj.forward(&flat)?;

        // Pixel attention branch on the wide half.
        let pa_in = self.split_pa.forward(x)?;
        let gate = activation(&self.pa_gate.forward(&pa_in)?, Activation::Sigmoid);
        let gated = mul(&self.pa_conv3.forward(&pa_in)?, &gate)?;
        let phi_prime = self.pa_fuse.forward(&gated)?;

        let phi_second = self.sum_conv3.forward(&add(&dyn_feat, &flat)?)?;

        let merged = concat_channels(&[&phi_prime, &phi_second])?;
        add(&self.out_proj.forward(&merged)?, x)
    }

    pub fn param_count(&self) -> usize {
        self.convs().iter().map(|c| c.param_count()).sum()
    }

    fn convs(&self) -> [&Conv2d<E>; 12] {
        [
            &self.split_dyn,
            &self.split_flat,
            &self.split_pa,
            &self.dyn_conv3,
            &self.dyn_proj,
            &self.flat_conv3,
            &self.flat_proj,
            &self.pa_conv3,
            &self.pa_gate,
            &self.pa_fuse,
            &self.sum_conv3,
            &self.out_proj,
        ]
    }

    pub fn for_each_param(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<E>)) {
        self.split_dyn.for_each_param(&format!("{prefix}.split_dyn"), f);
        self.split_flat.for_each_param(&format!("{prefix}.split_flat"), f);
        self.split_pa.for_each_param(&format!("{prefix}.split_pa"), f);
        self.dyn_conv3.for_each_param(&format!("{prefix}.dyn_conv3"), f);
        self.dyn_proj.for_each_param(&format!("{prefix}.dyn_proj"), f);
        self.flat_conv3.for_each_param(&format!("{prefix}.flat_conv3"), f);
        self.flat_proj.for_each_param(&format!("{prefix}.flat_proj"), f);
        self.pa_conv3.for_each_param(&format!("{prefix}.pa_conv3"), f);
        self.pa_gate.for_each_param(&format!("{prefix}.pa_gate"), f);
        self.pa_fuse.for_each_param(&format!("{prefix}.pa_fuse"), f);
        self.sum_conv3.for_each_param(&format!("{prefix}.sum_conv3"), f);
        self.out_proj.for_each_param(&format!("{prefix}.out_proj"), f);
    }
}

/// Sequential composition of DSP blocks; an empty stack is the identity.
pub fn stack_dsp<E: Elem>(x: &Tensor<E>, blocks: &[DspBlock<E>]) -> Result<Tensor<E>> {
    if let Some(first) = blocks.first() {
        for b in blocks {
            if b.channels() != first.channels() {
                return Err(Error::InvalidConfig(format!(
                    "dsp stack: blocks disagree on channels ({} vs {})",
                    b.channels(),
                    first.channels()
                )));
            }
        }
    }
    let mut out = x.clone();
    for block in blocks {
        out = block.forward(&out)?;
    }
    Ok(out)
}

/// Windowed multi-head self-attention followed by a small set of learnable
/// global tokens that first gather from all local tokens and then broadcast
/// back, with a residual output projection.
pub struct LightAttention<E: Elem> {
    pub window: usize,
    pub heads: usize,
    pub n_global: usize,
    pub q: Conv2d<E>,
    pub k: Conv2d<E>,
    pub v: Conv2d<E>,
    pub global_tokens: Tensor<E>,
    pub gq: Conv2d<E>,
    pub gk: Conv2d<E>,
    pub gv: Conv2d<E>,
    pub bq: Conv2d<E>,
    pub bk: Conv2d<E>,
    pub bv: Conv2d<E>,
    pub proj: Conv2d<E>,
    channels: usize,
}

impl<E: Elem> LightAttention<E> {
    pub fn new(
        channels: usize,
        window: usize,
        heads: usize,
        n_global: usize,
        rng: &mut Rng,
    ) -> Result<Self> {
        if heads == 0 || channels % heads != 0 {
            return Err(Error::InvalidConfig(format!(
                "attention: {channels} channels not divisible into {heads} heads"
            )));
        }
        if window == 0 || n_global == 0 {
            return Err(Error::InvalidConfig(
                "attention: window and global token count must be positive".to_string(),
            ));
        }
        Ok(LightAttention {
            window,
            heads,
            n_global,
            q: Conv2d::new(channels, channels, 1, rng),
            k: Conv2d::new(channels, channels, 1, rng),
            v: Conv2d::new(channels, channels, 1, rng),
            global_tokens: Tensor::rand(Shape::new(1, channels, n_global, 1), -0.02, 0.02, rng)
                .traced(),
            gq: Conv2d::new(channels, channels, 1, rng),
            gk: Conv2d::new(channels, channels, 1, rng),
            gv: Conv2d::new(channels, channels, 1, rng),
            bq: Conv2d::new(channels, channels, 1, rng),
            bk: Conv2d::new(channels, channels, 1, rng),
            bv: Conv2d::new(channels, channels, 1, rng),
            proj: Conv2d::new_residual(channels, channels, 1, rng),
            channels,
        })
    }

    /// Scaled dot-product attention over the last axis of (.., heads, d, T)
    /// tensors; returns the attended values and the weight matrix.
    fn attend(
        q: &Tensor<E>,
        k: &Tensor<E>,
        v: &Tensor<E>,
        head_dim: usize,
    ) -> Result<(Tensor<E>, Tensor<E>)> {
        let scores = matmul(&transpose_hw(q), k)?;
        let scaled = scale(&scores, E::from_f64(1.0 / (head_dim as f64).sqrt()));
        let weights = softmax_w(&scaled);
        let out = matmul(v, &transpose_hw(&weights))?;
        Ok((out, weights))
    }

    /// Windowed self-attention stage; windows do not interact.
    pub fn local_stage(&self, x: &Tensor<E>) -> Result<Tensor<E>> {
        Ok(self.local_stage_with_weights(x)?.0)
    }

    pub fn local_stage_with_weights(&self, x: &Tensor<E>) -> Result<(Tensor<E>, Tensor<E>)> {
        let s = x.shape();
        if s.h % self.window != 0 || s.w % self.window != 0 {
            return Err(Error::InvalidShape(format!(
                "attention: {}x{} not divisible by window {}",
                s.h, s.w, self.window
            )));
        }
        let t = self.window * self.window;
        let dh = self.channels / self.heads;
        let as_tokens = |y: &Tensor<E>| -> Result<Tensor<E>> {
            let wins = window_partition(y, self.window)?;
            reshape(&wins, Shape::new(wins.shape().n, self.heads, dh, t))
        };
        let q = as_tokens(&self.q.forward(x)?)?;
        let k = as_tokens(&self.k.forward(x)?)?;
        let v = as_tokens(&self.v.forward(x)?)?;
        let (out, weights) = Self::attend(&q, &k, &v, dh)?;
        let wins = reshape(
            &out,
            Shape::new(out.shape().n, self.channels, self.window, self.window),
        )?;
        Ok((window_merge(&wins, self.window, s.h, s.w)?, weights))
    }

    /// Global tokens gather from every local token, then local tokens attend
    /// back to the globals; residual on the token features.
    pub fn global_stage(&self, x: &Tensor<E>) -> Result<Tensor<E>> {
        let s = x.shape();
        let t_all = s.h * s.w;
        let dh = self.channels / self.heads;
        let flat = |y: &Tensor<E>, len: usize| reshape(y, Shape::new(s.n, self.heads, dh, len));

        let globals = broadcast_batch(&self.global_tokens, s.n)?;
        let q_g = flat(&self.gq.forward(&globals)?, self.n_global)?;
        let k_l = flat(&self.gk.forward(x)?, t_all)?;
        let v_l = flat(&self.gv.forward(x)?, t_all)?;
        let (gathered, _) = Self::attend(&q_g, &k_l, &v_l, dh)?;
        let gathered = reshape(&gathered, Shape::new(s.n, self.channels, self.n_global, 1))?;

        let q_l = flat(&self.bq.forward(x)?, t_all)?;
        let k_g = flat(&self.bk.forward(&gathered)?, self.n_global)?;
        let v_g = flat(&self.bv.forward(&gathered)?, self.n_global)?;
        let (update, _) = Self::attend(&q_l, &k_g, &v_g, dh)?;
        let update = reshape(&update, s)?;
        add(x, &update)
    }

    pub fn forward(&self, x: &Tensor<E>) -> Result<Tensor<E>> {
        let local = self.local_stage(x)?;
        let tokens = self.global_stage(&local)?;
        add(x, &self.proj.forward(&tokens)?)
    }

    pub fn param_count(&self) -> usize {
        let convs = [
            &self.q, &self.k, &self.v, &self.gq, &self.gk, &self.gv, &self.bq, &self.bk, &self.bv,
            &self.proj,
        ];
        convs.iter().map(|c| c.param_count()).sum::<usize>() + self.global_tokens.numel()
    }

    pub fn for_each_param(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<E>)) {
        self.q.for_each_param(&format!("{prefix}.q"), f);
        self.k.for_each_param(&format!("{prefix}.k"), f);
        self.v.for_each_param(&format!("{prefix}.v"), f);
        f(format!("{prefix}.global_tokens"), &mut self.global_tokens);
        self.gq.for_each_param(&format!("{prefix}.gq"), f);
        self.gk.for_each_param(&format!("{prefix}.gk"), f);
        self.gv.for_each_param(&format!("{prefix}.gv"), f);
        self.bq.for_each_param(&format!("{prefix}.bq"), f);
        self.bk.for_each_param(&format!("{prefix}.bk"), f);
        self.bv.for_each_param(&format!("{prefix}.bv"), f);
        self.proj.for_each_param(&format!("{prefix}.proj"), f);
    }
}

/// Supervised attention head: emits an image-space estimate and re-weights
/// the features by attention derived from it before passing them onward.
pub struct SamHead<E: Elem> {
    pub img_proj: Conv2d<E>,
    pub att_proj: Conv2d<E>,
    pub feat_proj: Conv2d<E>,
}

impl<E: Elem> SamHead<E> {
    pub fn new(channels: usize, img_channels: usize, rng: &mut Rng) -> Self {
        SamHead {
            img_proj: Conv2d::with_gain(channels, img_channels, 1, 0.03, rng),
            att_proj: Conv2d::new(img_channels, channels, 1, rng),
            feat_proj: Conv2d::new_residual(channels, channels, 1, rng),
        }
    }

    /// Returns (features_out, img_out):
    /// img_out = conv(f) + img, a = sigmoid(conv(img_out)),
    /// features_out = f + conv(f) * a.
    pub fn forward(&self, f: &Tensor<E>, img: &Tensor<E>) -> Result<(Tensor<E>, Tensor<E>)> {
        let img_out = add(&self.img_proj.forward(f)?, img)?;
        let att = activation(&self.att_proj.forward(&img_out)?, Activation::Sigmoid);
        let f_out = add(f, &mul(&self.feat_proj.forward(f)?, &att)?)?;
        Ok((f_out, img_out))
    }

    /// The sigmoid attention map, exposed for range checks.
    pub fn attention(&self, f: &Tensor<E>, img: &Tensor<E>) -> Result<Tensor<E>> {
        let img_out = add(&self.img_proj.forward(f)?, img)?;
        Ok(activation(
            &self.att_proj.forward(&img_out)?,
            Activation::Sigmoid,
        ))
    }

    pub fn param_count(&self) -> usize {
        self.img_proj.param_count() + self.att_proj.param_count() + self.feat_proj.param_count()
    }

    pub fn for_each_param(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<E>)) {
        self.img_proj.for_each_param(&format!("{prefix}.img_proj"), f);
        self.att_proj.for_each_param(&format!("{prefix}.att_proj"), f);
        self.feat_proj.for_each_param(&format!("{prefix}.feat_proj"), f);
    }
}

/// Gradient map plus edge features at the color image's resolution.
pub struct EdgeOutput<E: Elem> {
    pub grad_map: Tensor<E>,
    pub features: Tensor<E>,
}

/// The full extraction branch: stem, DSP stack, attention tail, SAM head.
pub struct EdgeExtractor<E: Elem> {
    pub stem: Conv2d<E>,
    pub blocks: Vec<DspBlock<E>>,
    pub attention: LightAttention<E>,
    pub sam: SamHead<E>,
}

impl<E: Elem> EdgeExtractor<E> {
    pub fn new(
        channels: usize,
        depth: usize,
        window: usize,
        heads: usize,
        n_global: usize,
        rng: &mut Rng,
    ) -> Result<Self> {
        let mut blocks = Vec::with_capacity(depth);
        for _ in 0..depth {
            blocks.push(DspBlock::new(channels, rng)?);
        }
        Ok(EdgeExtractor {
            stem: Conv2d::new(4, channels, 3, rng),
            blocks,
            attention: LightAttention::new(channels, window, heads, n_global, rng)?,
            sam: SamHead::new(channels, 1, rng),
        })
    }

    /// `d_up` is the bicubic-upsampled depth (n, 1, H, W); `i_hr` the color
    /// image (n, 3, H, W).
    pub fn forward(&self, d_up: &Tensor<E>, i_hr: &Tensor<E>) -> Result<EdgeOutput<E>> {
        let (sd, si) = (d_up.shape(), i_hr.shape());
        if sd.h != si.h || sd.w != si.w || sd.n != si.n {
            return Err(Error::InvalidShape(format!(
                "edge branch: depth {} and color {} disagree",
                sd, si
            )));
        }
        let x = self.stem.forward(&concat_channels(&[d_up, i_hr])?)?;
        let x = stack_dsp(&x, &self.blocks)?;
        let x = self.attention.forward(&x)?;
        let (features, grad_map) = self.sam.forward(&x, d_up)?;
        Ok(EdgeOutput { grad_map, features })
    }

    pub fn channels(&self) -> usize {
        self.stem.out_channels()
    }

    pub fn param_count(&self) -> usize {
        self.stem.param_count()
            + self.blocks.iter().map(|b| b.param_count()).sum::<usize>()
            + self.attention.param_count()
            + self.sam.param_count()
    }

    pub fn for_each_param(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<E>)) {
        self.stem.for_each_param(&format!("{prefix}.stem"), f);
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.for_each_param(&format!("{prefix}.dsp{i}"), f);
        }
        self.attention.for_each_param(&format!("{prefix}.attention"), f);
        self.sam.for_each_param(&format!("{prefix}.sam"), f);
    }
}

/// Depth estimates produced at reduced resolution come back to full size
/// through sub-pixel rearrangement; this helper keeps the call sites tidy.
pub fn shuffle_to_full<E: Elem>(img: &Tensor<E>, factor: usize) -> Result<Tensor<E>> {
    if factor <= 1 {
        Ok(img.clone())
    } else {
        pixel_shuffle(img, factor)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{check_param_gradients, numeric_gradient, sub, sum_all};

    #[test]
    fn dsp_zeroed_projection_is_identity() {
        let mut rng = Rng::new(1);
        let mut block = DspBlock::<f64>::new(8, &mut rng).unwrap();
        block.out_proj.zero();
        let x = Tensor::<f64>::rand(Shape::new(1, 8, 6, 6), -1.0, 1.0, &mut rng);
        let y = block.forward(&x).unwrap();
        assert_eq!(y.data(), x.data());
    }

    #[test]
    fn dsp_preserves_shape_and_validates_input() {
        let mut rng = Rng::new(2);
        let block = DspBlock::<f64>::new(8, &mut rng).unwrap();
        let x = Tensor::<f64>::rand(Shape::new(2, 8, 7, 5), -1.0, 1.0, &mut rng);
        assert_eq!(block.forward(&x).unwrap().shape(), x.shape());
        assert!(matches!(
            DspBlock::<f64>::new(6, &mut rng),
            Err(Error::InvalidConfig(_))
        ));
        let tiny = Tensor::<f64>::zeros(Shape::new(1, 8, 1, 4));
        assert!(matches!(
            block.forward(&tiny),
            Err(Error::InvalidShape(_))
        ));
    }

    #[test]
    fn dsp_receptive_field_grows_through_the_dynamic_branch() {
        // Numerical Jacobian of the center output w.r.t. an 8x8 input: with
        // the dynamic branch projected to zero, the support must stay within
        // 11x11 (it is 5x5 in fact); enabling the branch widens it.
        let mut rng = Rng::new(3);
        let mut block = DspBlock::<f64>::new(4, &mut rng).unwrap();
        let x = Tensor::<f64>::rand(Shape::new(1, 4, 8, 8), -1.0, 1.0, &mut rng);

        let support = |block: &DspBlock<f64>, x: &Tensor<f64>| -> Vec<(usize, usize)> {
            let probe = |t: &Tensor<f64>| -> crate::error::Result<Tensor<f64>> {
                let y = block.forward(t)?;
                // center site of channel 0
                let mut mask = Tensor::<f64>::zeros(y.shape());
                let shape = mask.shape();
                mask.data_mut()[shape.index(0, 0, 4, 4)] = 1.0;
                mul(&y, &mask)
            };
            let g = numeric_gradient(&probe, x, 1e-5).unwrap();
            let mut sites = Vec::new();
            let s = x.shape();
            for c in 0..s.c {
                for yy in 0..s.h {
                    for xx in 0..s.w {
                        if g[s.index(0, c, yy, xx)].abs() > 1e-9 {
                            sites.push((yy, xx));
                        }
                    }
                }
            }
            sites
        };

        let saved = block.dyn_proj.weight.clone();
        block.dyn_proj.zero();
        let narrow = support(&block, &x);
        assert!(!narrow.is_empty());
        for (yy, xx) in &narrow {
            assert!(
                yy.abs_diff(4) <= 5 && xx.abs_diff(4) <= 5,
                "non-dynamic path leaked outside 11x11 at ({yy}, {xx})"
            );
        }
        block.dyn_proj.weight = saved;
        let wide = support(&block, &x);
        let max_reach_narrow = narrow
            .iter()
            .map(|(y, x)| y.abs_diff(4).max(x.abs_diff(4)))
            .max()
            .unwrap();
        let max_reach_wide = wide
            .iter()
            .map(|(y, x)| y.abs_diff(4).max(x.abs_diff(4)))
            .max()
            .unwrap();
        assert!(
            max_reach_wide > max_reach_narrow,
            "dynamic branch did not widen the receptive field ({max_reach_wide} vs {max_reach_narrow})"
        );
    }

    #[test]
    fn dsp_stack_composition() {
        let mut rng = Rng::new(4);
        let x = Tensor::<f64>::rand(Shape::new(1, 8, 8, 8), -1.0, 1.0, &mut rng);
        // Empty stack is the identity.
        let y = stack_dsp(&x, &[]).unwrap();
        assert_eq!(y.data(), x.data());
        // Two blocks with zeroed projections compose to the identity.
        let mut blocks = vec![
            DspBlock::<f64>::new(8, &mut rng).unwrap(),
            DspBlock::<f64>::new(8, &mut rng).unwrap(),
        ];
        for b in &mut blocks {
            b.out_proj.zero();
        }
        assert_eq!(stack_dsp(&x, &blocks).unwrap().data(), x.data());
        // Deeper stacks actually change the output.
        let mut four: Vec<DspBlock<f64>> = Vec::new();
        for _ in 0..4 {
            four.push(DspBlock::new(8, &mut rng).unwrap());
        }
        let one = stack_dsp(&x, &four[..1]).unwrap();
        let deep = stack_dsp(&x, &four).unwrap();
        assert_ne!(one.data(), deep.data());
        // Mixed channel counts are rejected.
        let mixed = vec![
            DspBlock::<f64>::new(8, &mut rng).unwrap(),
            DspBlock::<f64>::new(4, &mut rng).unwrap(),
        ];
        assert!(stack_dsp(&x, &mixed).is_err());
    }

    #[test]
    fn attention_zeroed_projection_is_identity() {
        let mut rng = Rng::new(5);
        let mut att = LightAttention::<f64>::new(8, 4, 2, 4, &mut rng).unwrap();
        att.proj.zero();
        let x = Tensor::<f64>::rand(Shape::new(1, 8, 8, 8), -1.0, 1.0, &mut rng);
        let y = att.forward(&x).unwrap();
        assert_eq!(y.data(), x.data());
    }

    #[test]
    fn attention_weights_normalize_along_keys() {
        let mut rng = Rng::new(6);
        let att = LightAttention::<f64>::new(8, 4, 2, 4, &mut rng).unwrap();
        let x = Tensor::<f64>::rand(Shape::new(1, 8, 8, 8), -1.0, 1.0, &mut rng);
        let (_, weights) = att.local_stage_with_weights(&x).unwrap();
        let s = weights.shape();
        for row in weights.data().chunks_exact(s.w) {
            let sum: f64 = row.iter().sum();
            assert!((sum - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn local_stage_commutes_with_window_permutation() {
        let mut rng = Rng::new(7);
        let att = LightAttention::<f64>::new(8, 4, 2, 4, &mut rng).unwrap();
        let x = Tensor::<f64>::rand(Shape::new(1, 8, 8, 8), -1.0, 1.0, &mut rng);
        let swap_windows = |t: &Tensor<f64>| -> Tensor<f64> {
            // Swap the two top windows (4x4 each) in place.
            let mut out = t.detached();
            let s = out.shape();
            let data = out.data_mut();
            for c in 0..s.c {
                for y in 0..4 {
                    for xx in 0..4 {
                        let a = s.index(0, c, y, xx);
                        let b = s.index(0, c, y, xx + 4);
                        data.swap(a, b);
                    }
                }
            }
            out
        };
        let direct = att.local_stage(&swap_windows(&x)).unwrap();
        let permuted = swap_windows(&att.local_stage(&x).unwrap());
        assert_eq!(direct.data(), permuted.data());
    }

    #[test]
    fn sam_residual_identity_and_attention_range() {
        let mut rng = Rng::new(8);
        let mut sam = SamHead::<f64>::new(8, 1, &mut rng);
        let f = Tensor::<f64>::rand(Shape::new(1, 8, 6, 6), -1.0, 1.0, &mut rng);
        let img = Tensor::<f64>::rand(Shape::new(1, 1, 6, 6), 0.0, 1.0, &mut rng);
        let att = sam.attention(&f, &img).unwrap();
        for v in att.data() {
            assert!(*v > 0.0 && *v < 1.0);
        }
        sam.img_proj.zero();
        sam.att_proj.zero();
        sam.feat_proj.zero();
        let (f_out, img_out) = sam.forward(&f, &img).unwrap();
        assert_eq!(img_out.data(), img.data());
        assert_eq!(f_out.data(), f.data());
    }

    #[test]
    fn sam_gradient_reaches_both_inputs() {
        let mut rng = Rng::new(9);
        let sam = SamHead::<f64>::new(4, 1, &mut rng);
        let f = Tensor::<f64>::rand(Shape::new(1, 4, 4, 4), -1.0, 1.0, &mut rng).traced();
        let img = Tensor::<f64>::rand(Shape::new(1, 1, 4, 4), 0.0, 1.0, &mut rng).traced();
        let (f_out, img_out) = sam.forward(&f, &img).unwrap();
        let total = add(&sum_all(&f_out), &sum_all(&img_out)).unwrap();
        total.backward().unwrap();
        assert!(f.grad().unwrap().iter().any(|g| g.abs() > 1e-9));
        assert!(img.grad().unwrap().iter().any(|g| g.abs() > 1e-9));
    }

    #[test]
    fn extractor_output_shapes_and_residual_baseline() {
        let mut rng = Rng::new(10);
        let mut hfeb = EdgeExtractor::<f64>::new(8, 1, 4, 2, 4, &mut rng).unwrap();
        let d_up = Tensor::<f64>::rand(Shape::new(1, 1, 16, 16), 0.0, 1.0, &mut rng);
        let i_hr = Tensor::<f64>::rand(Shape::new(1, 3, 16, 16), 0.0, 1.0, &mut rng);
        let out = hfeb.forward(&d_up, &i_hr).unwrap();
        assert_eq!(out.grad_map.shape(), Shape::new(1, 1, 16, 16));
        assert_eq!(out.features.shape(), Shape::new(1, 8, 16, 16));
        // With the SAM image head zeroed, the gradient-map output falls back
        // to the upsampled depth input.
        hfeb.sam.img_proj.zero();
        let out = hfeb.forward(&d_up, &i_hr).unwrap();
        assert_eq!(out.grad_map.data(), d_up.data());
    }

    #[test]
    fn extractor_gradients_match_finite_differences_for_every_parameter() {
        let mut rng = Rng::new(11);
        let mut hfeb = EdgeExtractor::<f64>::new(4, 1, 4, 2, 2, &mut rng).unwrap();
        // Depth well above the (zero) target keeps every |diff| away from the
        // L1 kink, so central differences see a smooth function.
        let d_up = Tensor::<f64>::rand(Shape::new(1, 1, 8, 8), 1.0, 2.0, &mut rng);
        let i_hr = Tensor::<f64>::rand(Shape::new(1, 3, 8, 8), 0.0, 1.0, &mut rng);
        let target = Tensor::<f64>::zeros(Shape::new(1, 1, 8, 8));
        let hfeb_cell = std::cell::RefCell::new(&mut hfeb);
        let err = check_param_gradients(
            || {
                let out = hfeb_cell.borrow().forward(&d_up, &i_hr)?;
                let diff = sub(&out.grad_map, &target)?;
                Ok(scale(&sum_all(&crate::tensor::abs(&diff)), 1.0 / 64.0))
            },
            |f| hfeb_cell.borrow_mut().for_each_param("hfeb", f),
            None,
            1e-4,
        )
        .unwrap();
        assert!(err <= 1e-3, "hfeb param grad err {err}");
    }
}
