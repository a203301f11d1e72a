//! Guided depth restoration: multi-stage, three-scale encoder/decoder with
//! adaptive multi-scale fusion, anti-aliased downsampling, cross-stage
//! feature fusion and supervised-attention handoff, wrapped into the full
//! super-resolution network.

use std::io::{Read, Write};
use std::path::Path;

use crate::edge::{EdgeExtractor, SamHead};
use crate::error::{Error, Result};
use crate::freq::{Cab, Lcf};
use crate::rng::Rng;
use crate::tensor::{
    activation, add, avg_pool2d, avg_pool_smooth, blur121, concat_channels, downsample2,
    global_avg_pool, mul, mul_channels, pixel_shuffle, pixel_unshuffle, resize, resize_bicubic,
    split_channels, Activation, Conv2d, Elem, ResizeMode, Shape, Tensor,
};

/// Structural hyper-parameters; fully determines the parameter count.
#[derive(Clone, Debug)]
pub struct ModelConfig {
    /// Edge-branch width (divisible by 4 and by `heads`).
    pub edge_channels: usize,
    /// Number of stacked DSP blocks.
    pub dsp_depth: usize,
    /// Restoration-branch base width (divisible by 4 and `freq_groups`).
    pub channels: usize,
    /// Number of restoration stages (1, 2 or 3).
    pub stages: usize,
    /// Scales per stage; the architecture is built for 3.
    pub scales: usize,
    /// Attention window of the edge branch.
    pub window: usize,
    pub heads: usize,
    pub n_global: usize,
    /// Channel groups of the spectral squeeze.
    pub freq_groups: usize,
    /// Squeeze-excitation reduction in the CAB.
    pub cab_reduction: usize,
    /// Scales (0 = finest) that get adaptive fusion skips.
    pub affm_scales: Vec<usize>,
}

impl ModelConfig {
    /// Smallest config that exercises every code path; used by tests and CI.
    pub fn tiny() -> Self {
        ModelConfig {
            edge_channels: 8,
            dsp_depth: 1,
            channels: 8,
            stages: 2,
            scales: 3,
            window: 4,
            heads: 2,
            n_global: 4,
            freq_groups: 8,
            cab_reduction: 4,
            affm_scales: vec![0, 1],
        }
    }

    /// Desk-scale working config.
    pub fn default_preset() -> Self {
        ModelConfig {
            edge_channels: 64,
            dsp_depth: 5,
            channels: 32,
            stages: 2,
            scales: 3,
            window: 8,
            heads: 2,
            n_global: 8,
            freq_groups: 16,
            cab_reduction: 4,
            affm_scales: vec![0, 1],
        }
    }

    /// Full-size configuration matching the published parameter budget.
    pub fn paper_preset() -> Self {
        ModelConfig {
            edge_channels: 64,
            dsp_depth: 5,
            channels: 80,
            stages: 2,
            scales: 3,
            window: 8,
            heads: 2,
            n_global: 8,
            freq_groups: 16,
            cab_reduction: 4,
            affm_scales: vec![0, 1],
        }
    }

    pub fn from_preset(name: &str) -> Result<Self> {
        match name {
            "tiny" => Ok(Self::tiny()),
            "default" => Ok(Self::default_preset()),
            "paper" => Ok(Self::paper_preset()),
            other => Err(Error::InvalidConfig(format!("unknown preset '{other}'"))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(1..=3).contains(&self.stages) {
            return Err(Error::InvalidConfig(format!(
                "stages must be 1, 2 or 3, got {}",
                self.stages
            )));
        }
        if self.scales != 3 {
            return Err(Error::InvalidConfig(
                "the restoration stage is built for exactly 3 scales".to_string(),
            ));
        }
        if self.channels % 4 != 0 || self.channels % self.freq_groups != 0 {
            return Err(Error::InvalidConfig(format!(
                "channels {} must be divisible by 4 and by freq_groups {}",
                self.channels, self.freq_groups
            )));
        }
        if self.edge_channels % 4 != 0 || self.edge_channels % self.heads != 0 {
            return Err(Error::InvalidConfig(format!(
                "edge_channels {} must be divisible by 4 and by heads {}",
                self.edge_channels, self.heads
            )));
        }
        if self.affm_scales.iter().any(|s| *s >= self.scales) {
            return Err(Error::InvalidConfig(
                "affm_scales entries must be valid scale indices".to_string(),
            ));
        }
        Ok(())
    }
}

/// Final and intermediate depth estimates plus the predicted gradient map;
/// every map shares the color image's spatial size.
pub struct ModelOutput<E: Elem> {
    pub d_sr: Tensor<E>,
    /// One estimate per stage (coarse stages come back through pixel shuffle).
    pub stage_depths: Vec<Tensor<E>>,
    pub e_pred: Tensor<E>,
}

impl<E: Elem> ModelOutput<E> {
    /// First-stage estimate (two-stage models).
    pub fn d_sr_s1(&self) -> &Tensor<E> {
        &self.stage_depths[0]
    }

    /// Second-stage estimate (two-stage models).
    pub fn d_sr_s2(&self) -> &Tensor<E> {
        &self.stage_depths[1]
    }
}

/// Anti-aliased 2x downsampling: binomial blur, stride-2 subsample, then a
/// 3x3 convolution that doubles the channel count.
pub struct AntiAliasDown<E: Elem> {
    pub proj: Conv2d<E>,
}

impl<E: Elem> AntiAliasDown<E> {
    pub fn new(in_c: usize, rng: &mut Rng) -> Self {
        AntiAliasDown {
            proj: Conv2d::new(in_c, in_c * 2, 3, rng),
        }
    }

    pub fn forward(&self, x: &Tensor<E>) -> Result<Tensor<E>> {
        self.proj.forward(&antialiased_half(x)?)
    }

    pub fn param_count(&self) -> usize {
        self.proj.param_count()
    }

    pub fn for_each_param(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<E>)) {
        self.proj.for_each_param(&format!("{prefix}.proj"), f);
    }
}

/// The parameter-free part of the anti-aliased downsampler: [1,2,1]/4 blur
/// along both axes, then stride-2 subsampling. Requires even spatial dims.
pub fn antialiased_half<E: Elem>(x: &Tensor<E>) -> Result<Tensor<E>> {
    downsample2(&blur121(x))
}

/// Adaptive feature fusion at one target scale: sigmoid-gated multi-scale
/// blending followed by edge-guided per-pixel attention.
pub struct Affm<E: Elem> {
    pub cat_proj: Conv2d<E>,
    pub cat_conv: Conv2d<E>,
    pub edge_conv: Conv2d<E>,
    pub res_conv1: Conv2d<E>,
    pub res_conv2: Conv2d<E>,
    pub res_skip: Conv2d<E>,
    pub out_proj: Conv2d<E>,
}

impl<E: Elem> Affm<E> {
    pub fn new(width: usize, edge_channels: usize, rng: &mut Rng) -> Self {
        Affm {
            cat_proj: Conv2d::new(3 * width, 3 * width, 1, rng),
            cat_conv: Conv2d::new(3 * width, 3 * width, 3, rng),
            edge_conv: Conv2d::new(edge_channels, width, 3, rng),
            res_conv1: Conv2d::new(2 * width, width, 3, rng),
            res_conv2: Conv2d::new(width, width, 3, rng),
            res_skip: Conv2d::new(2 * width, width, 1, rng),
            out_proj: Conv2d::new(width, width, 1, rng),
        }
    }

    /// Brings a feature map from `from` scale to `to` scale: average pooling
    /// downwards, bilinear upwards.
    fn resample(x: &Tensor<E>, from: usize, to: usize) -> Result<Tensor<E>> {
        use std::cmp::Ordering;
        match from.cmp(&to) {
            Ordering::Equal => Ok(x.clone()),
            Ordering::Less => {
                let k = 1 << (to - from);
                avg_pool2d(x, k, k)
            }
            Ordering::Greater => {
                let s = x.shape();
                let f = 1 << (from - to);
                resize(x, s.h * f, s.w * f, ResizeMode::Bilinear)
            }
        }
    }

    fn check_pyramid(f0: &Tensor<E>, f1: &Tensor<E>, f2: &Tensor<E>) -> Result<()> {
        let (s0, s1, s2) = (f0.shape(), f1.shape(), f2.shape());
        let ratio_ok = s0.h == 2 * s1.h && s0.w == 2 * s1.w && s1.h == 2 * s2.h && s1.w == 2 * s2.w;
        if !ratio_ok {
            return Err(Error::InvalidShape(format!(
                "affm: scales must be 1 : 1/2 : 1/4, got {s0}, {s1}, {s2}"
            )));
        }
        if s0.c != s1.c || s1.c != s2.c {
            return Err(Error::InvalidShape(format!(
                "affm: channel counts differ ({}, {}, {})",
                s0.c, s1.c, s2.c
            )));
        }
        Ok(())
    }

    /// Per-batch, per-channel gating weights for the three scales, derived
    /// from the concatenated pyramid at the target resolution.
    pub fn fusion_weights(
        &self,
        f0: &Tensor<E>,
        f1: &Tensor<E>,
        f2: &Tensor<E>,
        target: usize,
    ) -> Result<[Tensor<E>; 3]> {
        Self::check_pyramid(f0, f1, f2)?;
        let r0 = Self::resample(f0, 0, target)?;
        let r1 = Self::resample(f1, 1, target)?;
        let r2 = Self::resample(f2, 2, target)?;
        let cat = concat_channels(&[&r0, &r1, &r2])?;
        let cat = self.cat_conv.forward(&self.cat_proj.forward(&cat)?)?;
        let weights = activation(&global_avg_pool(&cat)?, Activation::Sigmoid);
        let width = f0.shape().c;
        let mut parts = split_channels(&weights, &[width, width, width])?;
        let p2 = parts.pop().unwrap();
        let p1 = parts.pop().unwrap();
        let p0 = parts.pop().unwrap();
        Ok([p0, p1, p2])
    }

    /// Step one: resample the three scales to the target and blend them with
    /// the sigmoid gates.
    pub fn scale_fusion(
        &self,
        f0: &Tensor<E>,
        f1: &Tensor<E>,
        f2: &Tensor<E>,
        target: usize,
    ) -> Result<Tensor<E>> {
        let [p0, p1, p2] = self.fusion_weights(f0, f1, f2, target)?;
        let r0 = Self::resample(f0, 0, target)?;
        let r1 = Self::resample(f1, 1, target)?;
        let r2 = Self::resample(f2, 2, target)?;
        let blended = add(
            &add(&mul_channels(&r0, &p0)?, &mul_channels(&r1, &p1)?)?,
            &mul_channels(&r2, &p2)?,
        )?;
        Ok(blended)
    }

    /// Per-pixel attention derived from the edge features: a projection
    /// ResBlock on the concatenation, locally averaged, through a sigmoid.
    pub fn attention_map(&self, f_prime: &Tensor<E>, f_edge: &Tensor<E>) -> Result<Tensor<E>> {
        let fs = f_prime.shape();
        let es = f_edge.shape();
        if es.h % fs.h != 0 || es.w % fs.w != 0 || es.h / fs.h != es.w / fs.w {
            return Err(Error::InvalidShape(format!(
                "affm: edge map {} does not pool onto features {}",
                es, fs
            )));
        }
        let ratio = es.h / fs.h;
        let mut edge = self.edge_conv.forward(f_edge)?;
        if ratio > 1 {
            edge = avg_pool2d(&edge, ratio, ratio)?;
        }
        let cat = concat_channels(&[&edge, f_prime])?;
        let res = add(
            &self
                .res_conv2
                .forward(&activation(&self.res_conv1.forward(&cat)?, Activation::Relu))?,
            &self.res_skip.forward(&cat)?,
        )?;
        Ok(activation(&avg_pool_smooth(&res, 3)?, Activation::Sigmoid))
    }

    /// Gated output: 1x1 projection of the attention-weighted features.
    pub fn gated_output(&self, f_prime: &Tensor<E>, f_att: &Tensor<E>) -> Result<Tensor<E>> {
        self.out_proj.forward(&mul(f_prime, f_att)?)
    }

    /// Step two: edge-guided per-pixel attention over the blended features.
    pub fn edge_attention(&self, f_prime: &Tensor<E>, f_edge: &Tensor<E>) -> Result<Tensor<E>> {
        let att = self.attention_map(f_prime, f_edge)?;
        self.gated_output(f_prime, &att)
    }

    pub fn forward(
        &self,
        f0: &Tensor<E>,
        f1: &Tensor<E>,
        f2: &Tensor<E>,
        target: usize,
        f_edge: &Tensor<E>,
    ) -> Result<Tensor<E>> {
        let fused = self.scale_fusion(f0, f1, f2, target)?;
        self.edge_attention(&fused, f_edge)
    }

    pub fn param_count(&self) -> usize {
        [
            &self.cat_proj,
            &self.cat_conv,
            &self.edge_conv,
            &self.res_conv1,
            &self.res_conv2,
            &self.res_skip,
            &self.out_proj,
        ]
        .iter()
        .map(|c| c.param_count())
        .sum()
    }

    pub fn for_each_param(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<E>)) {
        self.cat_proj.for_each_param(&format!("{prefix}.cat_proj"), f);
        self.cat_conv.for_each_param(&format!("{prefix}.cat_conv"), f);
        self.edge_conv.for_each_param(&format!("{prefix}.edge_conv"), f);
        self.res_conv1.for_each_param(&format!("{prefix}.res_conv1"), f);
        self.res_conv2.for_each_param(&format!("{prefix}.res_conv2"), f);
        self.res_skip.for_each_param(&format!("{prefix}.res_skip"), f);
        self.out_proj.for_each_param(&format!("{prefix}.out_proj"), f);
    }
}

/// Channel aligners plus the fusion module for one skip connection.
pub struct AffmSite<E: Elem> {
    pub align: [Conv2d<E>; 3],
    pub affm: Affm<E>,
    pub target: usize,
}

impl<E: Elem> AffmSite<E> {
    pub fn new(base: usize, target: usize, edge_channels: usize, rng: &mut Rng) -> Self {
        let width = base << target;
        AffmSite {
            align: [
                Conv2d::new(base, width, 1, rng),
                Conv2d::new(base * 2, width, 1, rng),
                Conv2d::new(base * 4, width, 1, rng),
            ],
            affm: Affm::new(width, edge_channels, rng),
            target,
        }
    }

    pub fn forward(&self, enc: &[Tensor<E>; 3], f_edge: &Tensor<E>) -> Result<Tensor<E>> {
        let a0 = self.align[0].forward(&enc[0])?;
        let a1 = self.align[1].forward(&enc[1])?;
        let a2 = self.align[2].forward(&enc[2])?;
        self.affm.forward(&a0, &a1, &a2, self.target, f_edge)
    }

    pub fn param_count(&self) -> usize {
        self.align.iter().map(|c| c.param_count()).sum::<usize>() + self.affm.param_count()
    }

    pub fn for_each_param(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<E>)) {
        for (i, a) in self.align.iter_mut().enumerate() {
            a.for_each_param(&format!("{prefix}.align{i}"), f);
        }
        self.affm.for_each_param(&format!("{prefix}.affm"), f);
    }
}

/// 1x1 projections that inject the previous stage's encoder and decoder
/// features into the matching scale of the next stage's encoder.
pub struct CrossStageFusion<E: Elem> {
    pub enc_proj: Vec<Conv2d<E>>,
    pub dec_proj: Vec<Conv2d<E>>,
}

impl<E: Elem> CrossStageFusion<E> {
    pub fn new(base: usize, scales: usize, rng: &mut Rng) -> Self {
        let mut enc_proj = Vec::with_capacity(scales);
        let mut dec_proj = Vec::with_capacity(scales);
        for s in 0..scales {
            let w = base << s;
            enc_proj.push(Conv2d::new_residual(w, w, 1, rng));
            dec_proj.push(Conv2d::new_residual(w, w, 1, rng));
        }
        CrossStageFusion { enc_proj, dec_proj }
    }

    /// enc_out = enc_in + conv(enc_prev) + conv(dec_prev), at scale `s`.
    pub fn fuse(
        &self,
        s: usize,
        enc_prev: &Tensor<E>,
        dec_prev: &Tensor<E>,
        enc_in: &Tensor<E>,
    ) -> Result<Tensor<E>> {
        if enc_prev.shape() != enc_in.shape() || dec_prev.shape() != enc_in.shape() {
            return Err(Error::InvalidShape(format!(
                "cross-stage fusion at scale {s}: {} vs {} vs {}",
                enc_prev.shape(),
                dec_prev.shape(),
                enc_in.shape()
            )));
        }
        add(
            &add(enc_in, &self.enc_proj[s].forward(enc_prev)?)?,
            &self.dec_proj[s].forward(dec_prev)?,
        )
    }

    pub fn param_count(&self) -> usize {
        self.enc_proj
            .iter()
            .chain(&self.dec_proj)
            .map(|c| c.param_count())
            .sum()
    }

    pub fn for_each_param(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<E>)) {
        for (i, c) in self.enc_proj.iter_mut().enumerate() {
            c.for_each_param(&format!("{prefix}.enc{i}"), f);
        }
        for (i, c) in self.dec_proj.iter_mut().enumerate() {
            c.for_each_param(&format!("{prefix}.dec{i}"), f);
        }
    }
}

/// Inputs to one restoration stage, everything at the stage's resolution
/// except the full-resolution edge features.
pub struct StageInputs<'a, E: Elem> {
    pub depth_features: &'a Tensor<E>,
    pub guidance: &'a Tensor<E>,
    pub edge_features: &'a Tensor<E>,
    /// Depth image the SAM residual anchors to; channel count is the stage's
    /// pixel-unshuffle factor squared.
    pub img: &'a Tensor<E>,
    pub fusion: Option<(&'a CrossStageFusion<E>, &'a [Tensor<E>; 3], &'a [Tensor<E>; 3])>,
}

pub struct StageOutput<E: Elem> {
    pub enc: [Tensor<E>; 3],
    pub dec: [Tensor<E>; 3],
    pub sam_features: Tensor<E>,
    /// Stage depth estimate at stage resolution (pre pixel-shuffle).
    pub depth_img: Tensor<E>,
}

/// One U-shaped restoration stage: three encoder scales with anti-aliased
/// downsampling, adaptive-fusion skips, bilinear-up decoder, SAM tail.
pub struct UnetStage<E: Elem> {
    pub enc: Vec<[Conv2d<E>; 2]>,
    pub down: Vec<AntiAliasDown<E>>,
    pub guide_down: Vec<AntiAliasDown<E>>,
    pub affm: Vec<Option<AffmSite<E>>>,
    pub dec: Vec<[Conv2d<E>; 2]>,
    pub up: Vec<Conv2d<E>>,
    pub sam: SamHead<E>,
}

impl<E: Elem> UnetStage<E> {
    pub fn new(cfg: &ModelConfig, img_channels: usize, rng: &mut Rng) -> Self {
        let base = cfg.channels;
        let width = |s: usize| base << s;
        let block = |w: usize, rng: &mut Rng| [Conv2d::new(w, w, 3, rng), Conv2d::new(w, w, 3, rng)];
        let enc = (0..cfg.scales).map(|s| block(width(s), rng)).collect();
        let down = (0..cfg.scales - 1)
            .map(|s| AntiAliasDown::new(width(s), rng))
            .collect();
        let guide_down = (0..cfg.scales - 1)
            .map(|s| AntiAliasDown::new(width(s), rng))
            .collect();
        let affm = (0..cfg.scales)
            .map(|s| {
                cfg.affm_scales
                    .contains(&s)
                    .then(|| AffmSite::new(base, s, cfg.edge_channels, rng))
            })
            .collect();
        let dec = (0..cfg.scales).map(|s| block(width(s), rng)).collect();
        let up = (0..cfg.scales - 1)
            .map(|s| Conv2d::new(width(s + 1), width(s), 3, rng))
            .collect();
        UnetStage {
            enc,
            down,
            guide_down,
            affm,
            dec,
            up,
            sam: SamHead::new(base, img_channels, rng),
        }
    }

    fn conv_block(pair: &[Conv2d<E>; 2], x: &Tensor<E>) -> Result<Tensor<E>> {
        let y = activation(&pair[0].forward(x)?, Activation::LeakyRelu);
        Ok(activation(&pair[1].forward(&y)?, Activation::LeakyRelu))
    }

    pub fn forward(&self, inputs: StageInputs<'_, E>) -> Result<StageOutput<E>> {
        // Guidance pyramid from the stage-resolution color features.
        let g0 = inputs.guidance.clone();
        let g1 = self.guide_down[0].forward(&g0)?;
        let g2 = self.guide_down[1].forward(&g1)?;
        let guidance = [g0, g1, g2];

        // Encoder with per-scale guidance injection and optional fusion from
        // the previous stage.
        let mut enc: Vec<Tensor<E>> = Vec::with_capacity(3);
        let mut trunk = inputs.depth_features.clone();
        for s in 0..3 {
            if s > 0 {
                trunk = self.down[s - 1].forward(&enc[s - 1])?;
            }
            let mut x = add(&trunk, &guidance[s])?;
            if let Some((fusion, enc_prev, dec_prev)) = &inputs.fusion {
                x = fusion.fuse(s, &enc_prev[s], &dec_prev[s], &x)?;
            }
            enc.push(Self::conv_block(&self.enc[s], &x)?);
        }
        let enc: [Tensor<E>; 3] = [enc[0].clone(), enc[1].clone(), enc[2].clone()];

        // Skip connections: adaptive fusion where configured, identity
        // otherwise.
        let mut skips: Vec<Tensor<E>> = Vec::with_capacity(3);
        for s in 0..3 {
            let skip = match &self.affm[s] {
                Some(site) => site.forward(&enc, inputs.edge_features)?,
                None => enc[s].clone(),
            };
            skips.push(skip);
        }

        // Decoder from the bottom scale upwards.
        let d2 = Self::conv_block(&self.dec[2], &skips[2])?;
        let u1 = {
            let s = d2.shape();
            let up = resize(&d2, s.h * 2, s.w * 2, ResizeMode::Bilinear)?;
            self.up[1].forward(&up)?
        };
        let d1 = Self::conv_block(&self.dec[1], &add(&u1, &skips[1])?)?;
        let u0 = {
            let s = d1.shape();
            let up = resize(&d1, s.h * 2, s.w * 2, ResizeMode::Bilinear)?;
            self.up[0].forward(&up)?
        };
        let d0 = Self::conv_block(&self.dec[0], &add(&u0, &skips[0])?)?;

        let (sam_features, depth_img) = self.sam.forward(&d0, inputs.img)?;
        Ok(StageOutput {
            enc,
            dec: [d0, d1, d2],
            sam_features,
            depth_img,
        })
    }

    pub fn param_count(&self) -> usize {
        let pairs = |v: &Vec<[Conv2d<E>; 2]>| -> usize {
            v.iter()
                .map(|p| p[0].param_count() + p[1].param_count())
                .sum()
        };
        pairs(&self.enc)
            + pairs(&self.dec)
            + self.down.iter().map(|d| d.param_count()).sum::<usize>()
            + self.guide_down.iter().map(|d| d.param_count()).sum::<usize>()
            + self
                .affm
                .iter()
                .flatten()
                .map(|a| a.param_count())
                .sum::<usize>()
            + self.up.iter().map(|c| c.param_count()).sum::<usize>()
            + self.sam.param_count()
    }

    pub fn for_each_param(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<E>)) {
        for (s, pair) in self.enc.iter_mut().enumerate() {
            pair[0].for_each_param(&format!("{prefix}.enc{s}a"), f);
            pair[1].for_each_param(&format!("{prefix}.enc{s}b"), f);
        }
        for (s, d) in self.down.iter_mut().enumerate() {
            d.for_each_param(&format!("{prefix}.down{s}"), f);
        }
        for (s, d) in self.guide_down.iter_mut().enumerate() {
            d.for_each_param(&format!("{prefix}.guide_down{s}"), f);
        }
        for (s, site) in self.affm.iter_mut().enumerate() {
            if let Some(site) = site {
                site.for_each_param(&format!("{prefix}.affm{s}"), f);
            }
        }
        for (s, pair) in self.dec.iter_mut().enumerate() {
            pair[0].for_each_param(&format!("{prefix}.dec{s}a"), f);
            pair[1].for_each_param(&format!("{prefix}.dec{s}b"), f);
        }
        for (s, c) in self.up.iter_mut().enumerate() {
            c.for_each_param(&format!("{prefix}.up{s}"), f);
        }
        self.sam.for_each_param(&format!("{prefix}.sam"), f);
    }
}

/// One restoration stage plus its resolution adapters.
pub struct StageModule<E: Elem> {
    /// Pixel-unshuffle factor of this stage (1 = full resolution).
    pub factor: usize,
    pub depth_in: Option<Conv2d<E>>,
    pub color_in: Option<Conv2d<E>>,
    /// Projects the previous stage's (pixel-shuffled) SAM features in.
    pub sam_bridge: Option<Conv2d<E>>,
    pub fusion: Option<CrossStageFusion<E>>,
    pub unet: UnetStage<E>,
}

impl<E: Elem> StageModule<E> {
    fn new(cfg: &ModelConfig, factor: usize, first: bool, rng: &mut Rng) -> Self {
        let c = cfg.channels;
        let shrink = factor * factor;
        StageModule {
            factor,
            depth_in: (factor > 1).then(|| Conv2d::new(c * shrink, c, 1, rng)),
            color_in: (factor > 1).then(|| Conv2d::new(c * shrink, c, 1, rng)),
            sam_bridge: (!first).then(|| Conv2d::new_residual(c / 4, c, 1, rng)),
            fusion: (!first).then(|| CrossStageFusion::new(c, cfg.scales, rng)),
            unet: UnetStage::new(cfg, shrink, rng),
        }
    }

    pub fn param_count(&self) -> usize {
        self.depth_in.as_ref().map_or(0, |c| c.param_count())
            + self.color_in.as_ref().map_or(0, |c| c.param_count())
            + self.sam_bridge.as_ref().map_or(0, |c| c.param_count())
            + self.fusion.as_ref().map_or(0, |f| f.param_count())
            + self.unet.param_count()
    }

    pub fn for_each_param(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<E>)) {
        if let Some(c) = &mut self.depth_in {
            c.for_each_param(&format!("{prefix}.depth_in"), f);
        }
        if let Some(c) = &mut self.color_in {
            c.for_each_param(&format!("{prefix}.color_in"), f);
        }
        if let Some(c) = &mut self.sam_bridge {
            c.for_each_param(&format!("{prefix}.sam_bridge"), f);
        }
        if let Some(fu) = &mut self.fusion {
            fu.for_each_param(&format!("{prefix}.fusion"), f);
        }
        self.unet.for_each_param(&format!("{prefix}.unet"), f);
    }
}

/// The full guided super-resolution network.
pub struct GuidedDsr<E: Elem> {
    pub cfg: ModelConfig,
    pub edge: EdgeExtractor<E>,
    pub depth_stem: Conv2d<E>,
    pub color_stem: Conv2d<E>,
    pub depth_cab: Cab<E>,
    pub color_cab: Cab<E>,
    pub depth_lcf: Lcf<E>,
    pub color_lcf: Lcf<E>,
    pub stages: Vec<StageModule<E>>,
    pub final_head: Conv2d<E>,
}

impl<E: Elem> GuidedDsr<E> {
    pub fn new(cfg: ModelConfig, rng: &mut Rng) -> Result<Self> {
        cfg.validate()?;
        let c = cfg.channels;
        let edge = EdgeExtractor::new(
            cfg.edge_channels,
            cfg.dsp_depth,
            cfg.window,
            cfg.heads,
            cfg.n_global,
            rng,
        )?;
        let mut stages = Vec::with_capacity(cfg.stages);
        for i in 0..cfg.stages {
            let factor = 1 << (cfg.stages - 1 - i);
            stages.push(StageModule::new(&cfg, factor, i == 0, rng));
        }
        Ok(GuidedDsr {
            edge,
            depth_stem: Conv2d::new(1, c, 3, rng),
            color_stem: Conv2d::new(3, c, 3, rng),
            depth_cab: Cab::new(c, cfg.cab_reduction, rng),
            color_cab: Cab::new(c, cfg.cab_reduction, rng),
            depth_lcf: Lcf::new(1, c, cfg.freq_groups, rng)?,
            color_lcf: Lcf::new(3, c, cfg.freq_groups, rng)?,
            stages,
            final_head: Conv2d::new_head(c, 1, 3, rng),
            cfg,
        })
    }

    /// d_lr: (n, 1, h, w); i_hr: (n, 3, H, W) with H = s*h, W = s*w.
    pub fn forward(&self, d_lr: &Tensor<E>, i_hr: &Tensor<E>) -> Result<ModelOutput<E>> {
        let (sl, sh) = (d_lr.shape(), i_hr.shape());
        if sl.n != sh.n || sl.c != 1 || sh.c != 3 {
            return Err(Error::InvalidShape(format!(
                "expected depth (n,1,h,w) and color (n,3,H,W), got {} and {}",
                sl, sh
            )));
        }
        if sh.h % sl.h != 0 || sh.w % sl.w != 0 || sh.h / sl.h != sh.w / sl.w {
            return Err(Error::InvalidShape(format!(
                "color size {} is not an integer multiple of depth size {}",
                sh, sl
            )));
        }
        let scale = sh.h / sl.h;
        if !matches!(scale, 4 | 8 | 16) {
            return Err(Error::InvalidShape(format!(
                "upsampling factor {scale} not in {{4, 8, 16}}"
            )));
        }
        if sh.h % 16 != 0 || sh.w % 16 != 0 {
            return Err(Error::InvalidShape(format!(
                "color dims {}x{} must be multiples of 16",
                sh.h, sh.w
            )));
        }

        let d_up = resize_bicubic(d_lr, sh.h, sh.w)?;
        let edge_out = self.edge.forward(&d_up, i_hr)?;

        let depth_base = add(
            &self.depth_cab.forward(&self.depth_stem.forward(&d_up)?)?,
            &self.depth_lcf.forward(&d_up)?.high,
        )?;
        let color_base = add(
            &self.color_cab.forward(&self.color_stem.forward(i_hr)?)?,
            &self.color_lcf.forward(i_hr)?.high,
        )?;

        let mut stage_depths = Vec::with_capacity(self.stages.len());
        let mut prev: Option<StageOutput<E>> = None;
        for stage in &self.stages {
            let f = stage.factor;
            let mut depth_feat = match &stage.depth_in {
                Some(conv) => conv.forward(&pixel_unshuffle(&depth_base, f)?)?,
                None => depth_base.clone(),
            };
            let guidance = match &stage.color_in {
                Some(conv) => conv.forward(&pixel_unshuffle(&color_base, f)?)?,
                None => color_base.clone(),
            };
            let img = if f > 1 {
                pixel_unshuffle(&d_up, f)?
            } else {
                d_up.clone()
            };

            let mut fused_prev: Option<([Tensor<E>; 3], [Tensor<E>; 3])> = None;
            if let (Some(prev_out), Some(bridge)) = (&prev, &stage.sam_bridge) {
                let carried = bridge.forward(&pixel_shuffle(&prev_out.sam_features, 2)?)?;
                depth_feat = add(&depth_feat, &carried)?;
                let up2 = |t: &Tensor<E>| -> Result<Tensor<E>> {
                    let s = t.shape();
                    resize(t, s.h * 2, s.w * 2, ResizeMode::Bilinear)
                };
                fused_prev = Some((
                    [
                        up2(&prev_out.enc[0])?,
                        up2(&prev_out.enc[1])?,
                        up2(&prev_out.enc[2])?,
                    ],
                    [
                        up2(&prev_out.dec[0])?,
                        up2(&prev_out.dec[1])?,
                        up2(&prev_out.dec[2])?,
                    ],
                ));
            }

            let out = stage.unet.forward(StageInputs {
                depth_features: &depth_feat,
                guidance: &guidance,
                edge_features: &edge_out.features,
                img: &img,
                fusion: match (&stage.fusion, &fused_prev) {
                    (Some(fu), Some((enc_prev, dec_prev))) => Some((fu, enc_prev, dec_prev)),
                    _ => None,
                },
            })?;

            let estimate = if f > 1 {
                pixel_shuffle(&out.depth_img, f)?
            } else {
                out.depth_img.clone()
            };
            stage_depths.push(estimate);
            prev = Some(out);
        }

        let last = prev.expect("at least one stage");
        let d_sr = add(&self.final_head.forward(&last.sam_features)?, &d_up)?;
        Ok(ModelOutput {
            d_sr,
            stage_depths,
            e_pred: edge_out.grad_map,
        })
    }

    pub fn param_count(&self) -> usize {
        self.edge.param_count()
            + self.depth_stem.param_count()
            + self.color_stem.param_count()
            + self.depth_cab.param_count()
            + self.color_cab.param_count()
            + self.depth_lcf.param_count()
            + self.color_lcf.param_count()
            + self.stages.iter().map(|s| s.param_count()).sum::<usize>()
            + self.final_head.param_count()
    }

    pub fn for_each_param(&mut self, f: &mut dyn FnMut(String, &mut Tensor<E>)) {
        self.edge.for_each_param("edge", f);
        self.depth_stem.for_each_param("depth_stem", f);
        self.color_stem.for_each_param("color_stem", f);
        self.depth_cab.for_each_param("depth_cab", f);
        self.color_cab.for_each_param("color_cab", f);
        self.depth_lcf.for_each_param("depth_lcf", f);
        self.color_lcf.for_each_param("color_lcf", f);
        for (i, s) in self.stages.iter_mut().enumerate() {
            s.for_each_param(&format!("stage{i}"), f);
        }
        self.final_head.for_each_param("final_head", f);
    }

    /// Zeroes every parameter; the network then reproduces the bicubic
    /// baseline exactly.
    pub fn zero_all_params(&mut self) {
        self.for_each_param(&mut |_, t| t.fill(E::ZERO));
    }
}

/// Writes parameters as a flat little-endian f32 archive at `path` plus a
/// plain-text manifest `<path>.manifest` with one `name n c h w offset` line
/// per tensor.
pub fn save_checkpoint<E: Elem>(model: &mut GuidedDsr<E>, path: &Path) -> Result<()> {
    let mut blob: Vec<u8> = Vec::new();
    let mut manifest = String::new();
    model.for_each_param(&mut |name, t| {
        let s = t.shape();
        manifest.push_str(&format!(
            "{name} {} {} {} {} {}\n",
            s.n,
            s.c,
            s.h,
            s.w,
            blob.len()
        ));
        for v in t.data() {
            blob.extend_from_slice(&(v.to_f64() as f32).to_le_bytes());
        }
    });
    std::fs::File::create(path)?.write_all(&blob)?;
    std::fs::write(manifest_path(path), manifest)?;
    Ok(())
}

/// Loads a checkpoint written by [`save_checkpoint`]; names and shapes must
/// match the model exactly.
pub fn load_checkpoint<E: Elem>(model: &mut GuidedDsr<E>, path: &Path) -> Result<()> {
    let mut blob = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut blob)?;
    let manifest = std::fs::read_to_string(manifest_path(path))?;
    let mut entries = std::collections::BTreeMap::new();
    for line in manifest.lines() {
        let parts: Vec<&str> = line.split_whitespace().collect();
        if parts.len() != 6 {
            return Err(Error::Io(format!("malformed manifest line '{line}'")));
        }
        let nums: Vec<usize> = parts[1..]
            .iter()
            .map(|p| p.parse::<usize>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::Io(format!("manifest parse: {e}")))?;
        entries.insert(
            parts[0].to_string(),
            (Shape::new(nums[0], nums[1], nums[2], nums[3]), nums[4]),
        );
    }
    let mut failure: Option<Error> = None;
    model.for_each_param(&mut |name, t| {
        if failure.is_some() {
            return;
        }
        let Some((shape, offset)) = entries.get(&name) else {
            failure = Some(Error::Io(format!("checkpoint missing parameter '{name}'")));
            return;
        };
        if *shape != t.shape() {
            failure = Some(Error::Io(format!(
                "shape mismatch for '{name}': checkpoint {shape}, model {}",
                t.shape()
            )));
            return;
        }
        let need = offset + 4 * t.numel();
        if blob.len() < need {
            failure = Some(Error::Io(format!("checkpoint truncated at '{name}'")));
            return;
        }
        for (i, slot) in t.data_mut().iter_mut().enumerate() {
            let at = offset + 4 * i;
            let bits = [blob[at], blob[at + 1], blob[at + 2], blob[at + 3]];
            *slot = E::from_f64(f32::from_le_bytes(bits) as f64);
        }
    });
    match failure {
        Some(e) => Err(e),
        None => Ok(()),
    }
}

fn manifest_path(path: &Path) -> std::path::PathBuf {
    let mut os = path.as_os_str().to_os_string();
    os.push(".manifest");
    std::path::PathBuf::from(os)
}
