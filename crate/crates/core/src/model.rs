//! Model architectures and checkpoint plumbing.
//!
//! Two encoder towers (one per sensor), projection heads for contrastive
//! pre-training, and an atrous-pyramid segmentation network for transfer.
//! Both encoder profiles open with two 3x3 stem convolutions in place of a
//! single 7x7, and normalize with per-sample groups so batch size never
//! affects outputs.
//!
//! Batches are NCHW f64 with values in [0, 1] (normalized tiles divided by
//! 255). Checkpoints store named parameter groups with architecture
//! fingerprints; an encoder group moves between models only when the
//! fingerprints agree, with the first convolution optionally re-averaged
//! across input channels when the sensor changes.

use std::collections::HashMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use ndarray::{concatenate, s, Array2, Array4, ArrayD, Axis};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::nn::{
    resize_bilinear, resize_bilinear_backward, Conv2d, GlobalAvgPool, GroupNorm, L2Normalize,
    Linear, MaxPool2d, Param, Relu2, Relu4,
};
use crate::rng::RngSnapshot;
use crate::{Error, Result};

/// Contrastive embedding width.
pub const EMBED_DIM: usize = 128;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Profile {
    /// Four plain conv stages at widths 32/64/128/256; the desk default.
    Tiny,
    /// Bottleneck-residual tower with the two-conv stem swap.
    Resnet50Mod,
}

impl fmt::Display for Profile {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Profile::Tiny => "tiny",
            Profile::Resnet50Mod => "resnet50_mod",
        })
    }
}

impl FromStr for Profile {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tiny" => Ok(Profile::Tiny),
            "resnet50_mod" => Ok(Profile::Resnet50Mod),
            other => Err(Error::Config(format!("unknown encoder profile {other:?}"))),
        }
    }
}

/// Architecture identity of one encoder tower.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EncoderSpec {
    pub profile: Profile,
    pub input_channels: usize,
}

const TINY_WIDTHS: [usize; 4] = [32, 64, 128, 256];
const RES_OUT: [usize; 4] = [256, 512, 1024, 2048];
const RES_MID: [usize; 4] = [64, 128, 256, 512];
const RES_DEPTH: [usize; 4] = [3, 4, 6, 3];

impl EncoderSpec {
    pub fn validate(&self) -> Result<()> {
        if self.input_channels != 2 && self.input_channels != 3 {
            return Err(Error::Config(format!(
                "encoder input_channels {} not in {{2, 3}}",
                self.input_channels
            )));
        }
        Ok(())
    }

    /// Width of the final feature map.
    pub fn feature_dim(&self) -> usize {
        match self.profile {
            Profile::Tiny => TINY_WIDTHS[3],
            Profile::Resnet50Mod => RES_OUT[3],
        }
    }

    /// Width of the low-level activation exposed for decoder skips.
    pub fn skip_channels(&self) -> usize {
        match self.profile {
            Profile::Tiny => TINY_WIDTHS[0],
            Profile::Resnet50Mod => RES_OUT[0],
        }
    }

    /// Stable hash of everything that fixes parameter names and shapes
    /// except the input channel count, which transfer handles separately.
    pub fn core_fingerprint(&self) -> String {
        let desc = match self.profile {
            Profile::Tiny => format!("tiny;stem=3x3s2,3x3s2;widths={TINY_WIDTHS:?};convs=1"),
            Profile::Resnet50Mod => format!(
                "resnet50_mod;stem=3x3s2,3x3s1,max3x3s2;out={RES_OUT:?};mid={RES_MID:?};depth={RES_DEPTH:?}"
            ),
        };
        let mut h = Sha256::new();
        h.update(desc.as_bytes());
        format!("{:x}", h.finalize())
    }
}

/// Spatial reduction from input to final feature map.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OutputStride {
    /// Full stride 32; classification and contrastive pre-training.
    Classification,
    /// Stride 16 with the last stage dilated; dense prediction.
    Segmentation,
}

// ---- building blocks ----

struct ConvBlock {
    conv: Conv2d,
    gn: GroupNorm,
    relu: Relu4,
}

impl ConvBlock {
    #[allow(clippy::too_many_arguments)]
    fn new(
        name: &str,
        in_c: usize,
        out_c: usize,
        k: usize,
        stride: usize,
        padding: usize,
        dilation: usize,
    ) -> Self {
        ConvBlock {
            conv: Conv2d::new(&format!("{name}.conv"), in_c, out_c, k, stride, padding, dilation, false),
            gn: GroupNorm::new(&format!("{name}.gn"), out_c),
            relu: Relu4::new(),
        }
    }

    fn forward(&mut self, x: &Array4<f64>) -> Array4<f64> {
        let y = self.conv.forward(x);
        let y = self.gn.forward(&y);
        self.relu.forward(&y)
    }

    fn backward(&mut self, dy: &Array4<f64>) -> Array4<f64> {
        let d = self.relu.backward(dy);
        let d = self.gn.backward(&d);
        self.conv.backward(&d)
    }

    fn for_each_param(&mut self, f: &mut dyn FnMut(&mut Param)) {
        self.conv.for_each_param(f);
        self.gn.for_each_param(f);
    }
}

struct Bottleneck {
    conv1: Conv2d,
    gn1: GroupNorm,
    r1: Relu4,
    conv2: Conv2d,
    gn2: GroupNorm,
    r2: Relu4,
    conv3: Conv2d,
    gn3: GroupNorm,
    short: Option<(Conv2d, GroupNorm)>,
    r_out: Relu4,
}

impl Bottleneck {
    fn new(
        name: &str,
        in_c: usize,
        mid_c: usize,
        out_c: usize,
        stride: usize,
        dilation: usize,
    ) -> Self {
        let short = (stride != 1 || in_c != out_c).then(|| {
            (
                Conv2d::new(&format!("{name}.short.conv"), in_c, out_c, 1, stride, 0, 1, false),
                GroupNorm::new(&format!("{name}.short.gn"), out_c),
            )
        });
        Bottleneck {
            conv1: Conv2d::new(&format!("{name}.conv1"), in_c, mid_c, 1, 1, 0, 1, false),
            gn1: GroupNorm::new(&format!("{name}.gn1"), mid_c),
            r1: Relu4::new(),
            conv2: Conv2d::new(
                &format!("{name}.conv2"),
                mid_c,
                mid_c,
                3,
                stride,
                dilation,
                dilation,
                false,
            ),
            gn2: GroupNorm::new(&format!("{name}.gn2"), mid_c),
            r2: Relu4::new(),
            conv3: Conv2d::new(&format!("{name}.conv3"), mid_c, out_c, 1, 1, 0, 1, false),
            gn3: GroupNorm::new(&format!("{name}.gn3"), out_c),
            short,
            r_out: Relu4::new(),
        }
    }

    fn forward(&mut self, x: &Array4<f64>) -> Array4<f64> {
        let h = self.conv1.forward(x);
        let h = self.gn1.forward(&h);
        let h = self.r1.forward(&h);
        let h = self.conv2.forward(&h);
        let h = self.gn2.forward(&h);
        let h = self.r2.forward(&h);
        let h = self.conv3.forward(&h);
        let h = self.gn3.forward(&h);
        let s = match &mut self.short {
            Some((conv, gn)) => {
                let t = conv.forward(x);
                gn.forward(&t)
            }
            None => x.clone(),
        };
        self.r_out.forward(&(h + s))
    }

    fn backward(&mut self, dy: &Array4<f64>) -> Array4<f64> {
        let d = self.r_out.backward(dy);
        let dh = self.gn3.backward(&d);
        let dh = self.conv3.backward(&dh);
        let dh = self.r2.backward(&dh);
        let dh = self.gn2.backward(&dh);
        let dh = self.conv2.backward(&dh);
        let dh = self.r1.backward(&dh);
        let dh = self.gn1.backward(&dh);
        let dx_main = self.conv1.backward(&dh);
        let dx_short = match &mut self.short {
            Some((conv, gn)) => {
                let t = gn.backward(&d);
                conv.backward(&t)
            }
            None => d,
        };
        dx_main + dx_short
    }

    fn for_each_param(&mut self, f: &mut dyn FnMut(&mut Param)) {
        self.conv1.for_each_param(f);
        self.gn1.for_each_param(f);
        self.conv2.for_each_param(f);
        self.gn2.for_each_param(f);
        self.conv3.for_each_param(f);
        self.gn3.for_each_param(f);
        if let Some((conv, gn)) = &mut self.short {
            conv.for_each_param(f);
            gn.for_each_param(f);
        }
    }
}

enum Body {
    Tiny {
        stem1: ConvBlock,
        stem2: ConvBlock,
        stages: Vec<ConvBlock>,
    },
    Res {
        stem1: ConvBlock,
        stem2: ConvBlock,
        pool: MaxPool2d,
        stages: Vec<Vec<Bottleneck>>,
    },
}

/// Final feature map plus the low-level activation decoders skip from.
pub struct EncoderOut {
    pub features: Array4<f64>,
    pub skip: Array4<f64>,
}

/// One encoder tower.
pub struct Encoder {
    pub spec: EncoderSpec,
    pub output_stride: OutputStride,
    body: Body,
}

impl Encoder {
    pub fn new(spec: EncoderSpec, output_stride: OutputStride) -> Result<Self> {
        spec.validate()?;
        let cin = spec.input_channels;
        let seg = output_stride == OutputStride::Segmentation;
        let body = match spec.profile {
            Profile::Tiny => {
                let w = TINY_WIDTHS;
                // Per-stage stride plan; segmentation holds the last stage
                // at stride 1 and dilates it instead.
                let strides = if seg { [1, 2, 2, 1] } else { [1, 2, 2, 2] };
                let dil4 = if seg { 2 } else { 1 };
                let stages = vec![
                    ConvBlock::new("stage1", w[0], w[0], 3, strides[0], 1, 1),
                    ConvBlock::new("stage2", w[0], w[1], 3, strides[1], 1, 1),
                    ConvBlock::new("stage3", w[1], w[2], 3, strides[2], 1, 1),
                    ConvBlock::new("stage4", w[2], w[3], 3, strides[3], dil4, dil4),
                ];
                Body::Tiny {
                    stem1: ConvBlock::new("stem1", cin, w[0], 3, 2, 1, 1),
                    stem2: ConvBlock::new("stem2", w[0], w[0], 3, 2, 1, 1),
                    stages,
                }
            }
            Profile::Resnet50Mod => {
                let mut stages = Vec::new();
                let mut in_c = 64;
                for si in 0..4 {
                    let (out_c, mid_c, depth) = (RES_OUT[si], RES_MID[si], RES_DEPTH[si]);
                    let stage_stride = if si == 0 || (si == 3 && seg) { 1 } else { 2 };
                    let dilation = if si == 3 && seg { 2 } else { 1 };
                    let mut blocks = Vec::new();
                    for bi in 0..depth {
                        let stride = if bi == 0 { stage_stride } else { 1 };
                        let name = format!("stage{}.b{bi}", si + 1);
                        blocks.push(Bottleneck::new(&name, in_c, mid_c, out_c, stride, dilation));
                        in_c = out_c;
                    }
                    stages.push(blocks);
                }
                Body::Res {
                    stem1: ConvBlock::new("stem1", cin, 32, 3, 2, 1, 1),
                    stem2: ConvBlock::new("stem2", 32, 64, 3, 1, 1, 1),
                    pool: MaxPool2d::new(3, 2, 1),
                    stages,
                }
            }
        };
        Ok(Encoder { spec, output_stride, body })
    }

    pub fn forward(&mut self, x: &Array4<f64>) -> Result<EncoderOut> {
        let (_, c, _, _) = x.dim();
        if c != self.spec.input_channels {
            return Err(Error::Shape(format!(
                "encoder expects {} channels, got {c}",
                self.spec.input_channels
            )));
        }
        // Inputs are normalized tiles over 255; a small slack covers
        // finite-difference probes.
        for &v in x.iter() {
            if !v.is_finite() || !(-1e-3..=1.0 + 1e-3).contains(&v) {
                return Err(Error::Validation(format!(
                    "encoder input value {v} outside [0, 1]"
                )));
            }
        }
        match &mut self.body {
            Body::Tiny { stem1, stem2, stages } => {
                let h = stem1.forward(x);
                let h = stem2.forward(&h);
                let skip = stages[0].forward(&h);
                let h = stages[1].forward(&skip);
                let h = stages[2].forward(&h);
                let features = stages[3].forward(&h);
                Ok(EncoderOut { features, skip })
            }
            Body::Res { stem1, stem2, pool, stages } => {
                let h = stem1.forward(x);
                let h = stem2.forward(&h);
                let mut h = pool.forward(&h);
                for b in stages[0].iter_mut() {
                    h = b.forward(&h);
                }
                let skip = h;
                let mut h = skip.clone();
                for stage in stages[1..].iter_mut() {
                    for b in stage.iter_mut() {
                        h = b.forward(&h);
                    }
                }
                Ok(EncoderOut { features: h, skip })
            }
        }
    }

    /// Backward from the feature-map gradient, plus the skip-path gradient
    /// when a decoder consumed the low-level activation.
    pub fn backward(&mut self, dfeat: &Array4<f64>, dskip: Option<&Array4<f64>>) -> Array4<f64> {
        match &mut self.body {
            Body::Tiny { stem1, stem2, stages } => {
                let d = stages[3].backward(dfeat);
                let d = stages[2].backward(&d);
                let mut d = stages[1].backward(&d);
                if let Some(ds) = dskip {
                    d += ds;
                }
                let d = stages[0].backward(&d);
                let d = stem2.backward(&d);
                stem1.backward(&d)
            }
            Body::Res { stem1, stem2, pool, stages } => {
                let mut d = dfeat.clone();
                for stage in stages[1..].iter_mut().rev() {
                    for b in stage.iter_mut().rev() {
                        d = b.backward(&d);
                    }
                }
                if let Some(ds) = dskip {
                    d += ds;
                }
                for b in stages[0].iter_mut().rev() {
                    d = b.backward(&d);
                }
                let d = pool.backward(&d);
                let d = stem2.backward(&d);
                stem1.backward(&d)
            }
        }
    }

    pub fn for_each_param(&mut self, f: &mut dyn FnMut(&mut Param)) {
        match &mut self.body {
            Body::Tiny { stem1, stem2, stages } => {
                stem1.for_each_param(f);
                stem2.for_each_param(f);
                for st in stages {
                    st.for_each_param(f);
                }
            }
            Body::Res { stem1, stem2, stages, .. } => {
                stem1.for_each_param(f);
                stem2.for_each_param(f);
                for stage in stages {
                    for b in stage {
                        b.for_each_param(f);
                    }
                }
            }
        }
    }

    pub fn init(&mut self, seed: u64) {
        self.for_each_param(&mut |p| p.init(seed));
    }

    pub fn zero_grads(&mut self) {
        self.for_each_param(&mut |p| p.zero_grad());
    }
}

// ---- projection head ----

/// Two-layer head mapping pooled features to unit-norm embeddings.
pub struct ProjectionHead {
    fc1: Linear,
    relu: Relu2,
    fc2: Linear,
    l2: L2Normalize,
    pub in_dim: usize,
    pub hidden_dim: usize,
    pub out_dim: usize,
}

impl ProjectionHead {
    pub fn new(feature_dim: usize) -> Self {
        Self::with_dims(feature_dim, feature_dim, EMBED_DIM)
    }

    pub fn with_dims(in_dim: usize, hidden_dim: usize, out_dim: usize) -> Self {
        ProjectionHead {
            fc1: Linear::new("proj.fc1", in_dim, hidden_dim),
            relu: Relu2::new(),
            fc2: Linear::new("proj.fc2", hidden_dim, out_dim),
            l2: L2Normalize::new(),
            in_dim,
            hidden_dim,
            out_dim,
        }
    }

    pub fn core_fingerprint(&self) -> String {
        let mut h = Sha256::new();
        h.update(format!("proj;{}-{}-{};l2", self.in_dim, self.hidden_dim, self.out_dim));
        format!("{:x}", h.finalize())
    }

    pub fn forward(&mut self, x: &Array2<f64>) -> Array2<f64> {
        let h = self.fc1.forward(x);
        let h = self.relu.forward(&h);
        let h = self.fc2.forward(&h);
        self.l2.forward(&h)
    }

    pub fn backward(&mut self, dy: &Array2<f64>) -> Array2<f64> {
        let d = self.l2.backward(dy);
        let d = self.fc2.backward(&d);
        let d = self.relu.backward(&d);
        self.fc1.backward(&d)
    }

    pub fn for_each_param(&mut self, f: &mut dyn FnMut(&mut Param)) {
        self.fc1.for_each_param(f);
        self.fc2.for_each_param(f);
    }

    pub fn init(&mut self, seed: u64) {
        self.for_each_param(&mut |p| p.init(seed));
    }
}

// ---- pre-training tower ----

/// Encoder plus pooling plus projection: tiles in, embeddings out.
pub struct PretrainTower {
    pub encoder: Encoder,
    gap: GlobalAvgPool,
    pub proj: ProjectionHead,
}

impl PretrainTower {
    pub fn new(spec: EncoderSpec) -> Result<Self> {
        let encoder = Encoder::new(spec, OutputStride::Classification)?;
        let proj = ProjectionHead::new(spec.feature_dim());
        Ok(PretrainTower { encoder, gap: GlobalAvgPool::new(), proj })
    }

    pub fn forward(&mut self, x: &Array4<f64>) -> Result<Array2<f64>> {
        let out = self.encoder.forward(x)?;
        let pooled = self.gap.forward(&out.features);
        Ok(self.proj.forward(&pooled))
    }

    pub fn backward(&mut self, demb: &Array2<f64>) {
        let d = self.proj.backward(demb);
        let d = self.gap.backward(&d);
        self.encoder.backward(&d, None);
    }

    pub fn for_each_param(&mut self, f: &mut dyn FnMut(&mut Param)) {
        self.encoder.for_each_param(f);
        self.proj.for_each_param(f);
    }

    pub fn init(&mut self, seed: u64) {
        self.for_each_param(&mut |p| p.init(seed));
    }

    pub fn zero_grads(&mut self) {
        self.for_each_param(&mut |p| p.zero_grad());
    }
}

// ---- segmentation network ----

const ASPP_RATES: [usize; 3] = [3, 6, 9];
const ASPP_WIDTH: usize = 32;
const SKIP_WIDTH: usize = 8;
const DECODER_WIDTH: usize = 32;

struct SegHead {
    aspp0: ConvBlock,
    aspp1: ConvBlock,
    aspp2: ConvBlock,
    aspp3: ConvBlock,
    pool_conv: Conv2d,
    pool_relu: Relu4,
    fuse: ConvBlock,
    skip_proj: ConvBlock,
    dec: ConvBlock,
    cls: Conv2d,
    feat_hw: (usize, usize),
    skip_hw: (usize, usize),
    out_hw: (usize, usize),
    num_classes: usize,
}

impl SegHead {
    fn new(feature_dim: usize, skip_channels: usize, num_classes: usize) -> Self {
        let r = ASPP_RATES;
        SegHead {
            aspp0: ConvBlock::new("head.aspp0", feature_dim, ASPP_WIDTH, 1, 1, 0, 1),
            aspp1: ConvBlock::new("head.aspp1", feature_dim, ASPP_WIDTH, 3, 1, r[0], r[0]),
            aspp2: ConvBlock::new("head.aspp2", feature_dim, ASPP_WIDTH, 3, 1, r[1], r[1]),
            aspp3: ConvBlock::new("head.aspp3", feature_dim, ASPP_WIDTH, 3, 1, r[2], r[2]),
            // The pooled branch sees 1x1 maps where group statistics
            // degenerate, so it uses a biased conv without normalization.
            pool_conv: Conv2d::new("head.pool.conv", feature_dim, ASPP_WIDTH, 1, 1, 0, 1, true),
            pool_relu: Relu4::new(),
            fuse: ConvBlock::new("head.fuse", 5 * ASPP_WIDTH, ASPP_WIDTH, 1, 1, 0, 1),
            skip_proj: ConvBlock::new("head.skip", skip_channels, SKIP_WIDTH, 1, 1, 0, 1),
            dec: ConvBlock::new("head.dec", ASPP_WIDTH + SKIP_WIDTH, DECODER_WIDTH, 3, 1, 1, 1),
            cls: Conv2d::new("head.cls", DECODER_WIDTH, num_classes, 1, 1, 0, 1, true),
            feat_hw: (0, 0),
            skip_hw: (0, 0),
            out_hw: (0, 0),
            num_classes,
        }
    }

    fn forward(
        &mut self,
        feat: &Array4<f64>,
        skip: &Array4<f64>,
        out_hw: (usize, usize),
    ) -> Array4<f64> {
        let (_b, _c, fh, fw) = feat.dim();
        let (_, _, sh, sw) = skip.dim();
        self.feat_hw = (fh, fw);
        self.skip_hw = (sh, sw);
        self.out_hw = out_hw;
        let a0 = self.aspp0.forward(feat);
        let a1 = self.aspp1.forward(feat);
        let a2 = self.aspp2.forward(feat);
        let a3 = self.aspp3.forward(feat);
        let m = (fh * fw) as f64;
        let pooled =
            (feat.sum_axis(Axis(3)).sum_axis(Axis(2)) / m).insert_axis(Axis(2)).insert_axis(Axis(3));
        let p = self.pool_conv.forward(&pooled);
        let p = self.pool_relu.forward(&p);
        let p_up = resize_bilinear(&p, (fh, fw));
        let cat = concatenate(
            Axis(1),
            &[a0.view(), a1.view(), a2.view(), a3.view(), p_up.view()],
        )
        .expect("aspp widths agree");
        let fused = self.fuse.forward(&cat);
        let up = resize_bilinear(&fused, (sh, sw));
        let sp = self.skip_proj.forward(skip);
        let cat2 = concatenate(Axis(1), &[up.view(), sp.view()]).expect("decoder widths agree");
        let d = self.dec.forward(&cat2);
        let logits_low = self.cls.forward(&d);
        resize_bilinear(&logits_low, out_hw)
    }

    /// Returns gradients for (features, skip).
    fn backward(&mut self, dlogits: &Array4<f64>) -> (Array4<f64>, Array4<f64>) {
        let (fh, fw) = self.feat_hw;
        let (sh, sw) = self.skip_hw;
        let d = resize_bilinear_backward(dlogits, (sh, sw));
        let d = self.cls.backward(&d);
        let d = self.dec.backward(&d);
        let d_up = d.slice(s![.., ..ASPP_WIDTH, .., ..]).to_owned();
        let d_sp = d.slice(s![.., ASPP_WIDTH.., .., ..]).to_owned();
        let dskip = self.skip_proj.backward(&d_sp);
        let d_fused = resize_bilinear_backward(&d_up, (fh, fw));
        let d_cat = self.fuse.backward(&d_fused);
        let w = ASPP_WIDTH;
        let d0 = d_cat.slice(s![.., ..w, .., ..]).to_owned();
        let d1 = d_cat.slice(s![.., w..2 * w, .., ..]).to_owned();
        let d2 = d_cat.slice(s![.., 2 * w..3 * w, .., ..]).to_owned();
        let d3 = d_cat.slice(s![.., 3 * w..4 * w, .., ..]).to_owned();
        let dp_up = d_cat.slice(s![.., 4 * w.., .., ..]).to_owned();
        let mut dfeat = self.aspp0.backward(&d0);
        dfeat += &self.aspp1.backward(&d1);
        dfeat += &self.aspp2.backward(&d2);
        dfeat += &self.aspp3.backward(&d3);
        let dp = resize_bilinear_backward(&dp_up, (1, 1));
        let dp = self.pool_relu.backward(&dp);
        let dpooled = self.pool_conv.backward(&dp);
        // Mean-pool adjoint: spread each channel gradient evenly.
        let m = (fh * fw) as f64;
        let (bsz, c, _, _) = dfeat.dim();
        for b in 0..bsz {
            for ci in 0..c {
                let g = dpooled[(b, ci, 0, 0)] / m;
                dfeat.slice_mut(s![b, ci, .., ..]).mapv_inplace(|v| v + g);
            }
        }
        (dfeat, dskip)
    }

    fn for_each_param(&mut self, f: &mut dyn FnMut(&mut Param)) {
        self.aspp0.for_each_param(f);
        self.aspp1.for_each_param(f);
        self.aspp2.for_each_param(f);
        self.aspp3.for_each_param(f);
        self.pool_conv.for_each_param(f);
        self.fuse.for_each_param(f);
        self.skip_proj.for_each_param(f);
        self.dec.for_each_param(f);
        self.cls.for_each_param(f);
    }

    fn core_fingerprint(&self) -> String {
        let mut h = Sha256::new();
        h.update(format!(
            "seghead;rates={ASPP_RATES:?};w={ASPP_WIDTH};skip={SKIP_WIDTH};dec={DECODER_WIDTH};k={}",
            self.num_classes
        ));
        format!("{:x}", h.finalize())
    }
}

/// Encoder at stride 16 plus atrous pyramid and skip decoder; logits come
/// back at input resolution, unactivated.
pub struct SegmentationNet {
    pub encoder: Encoder,
    head: SegHead,
    pub num_classes: usize,
}

impl SegmentationNet {
    pub fn new(spec: EncoderSpec, num_classes: usize) -> Result<Self> {
        if num_classes == 0 {
            return Err(Error::Config("num_classes must be positive".into()));
        }
        let encoder = Encoder::new(spec, OutputStride::Segmentation)?;
        let head = SegHead::new(spec.feature_dim(), spec.skip_channels(), num_classes);
        Ok(SegmentationNet { encoder, head, num_classes })
    }

    pub fn forward(&mut self, x: &Array4<f64>) -> Result<Array4<f64>> {
        let (_, _, h, w) = x.dim();
        let out = self.encoder.forward(x)?;
        Ok(self.head.forward(&out.features, &out.skip, (h, w)))
    }

    pub fn backward(&mut self, dlogits: &Array4<f64>) {
        let (dfeat, dskip) = self.head.backward(dlogits);
        self.encoder.backward(&dfeat, Some(&dskip));
    }

    pub fn for_each_param(&mut self, f: &mut dyn FnMut(&mut Param)) {
        self.encoder.for_each_param(f);
        self.head.for_each_param(f);
    }

    pub fn init(&mut self, seed: u64) {
        self.for_each_param(&mut |p| p.init(seed));
    }

    pub fn zero_grads(&mut self) {
        self.for_each_param(&mut |p| p.zero_grad());
    }

    pub fn decoder_fingerprint(&self) -> String {
        self.head.core_fingerprint()
    }

    /// Snapshot as checkpoint groups: encoder plus decoder head.
    pub fn snapshot_groups(&mut self) -> Vec<CheckpointGroup> {
        let enc_fp = self.encoder.spec.core_fingerprint();
        let enc_ch = self.encoder.spec.input_channels;
        let mut groups = Vec::new();
        let mut enc = CheckpointGroup {
            name: "encoder".into(),
            role: GroupRole::Encoder,
            core_fingerprint: enc_fp,
            input_channels: enc_ch,
            params: Vec::new(),
        };
        self.encoder.for_each_param(&mut |p| enc.params.push(NamedTensor::of(p)));
        enc.sort();
        groups.push(enc);
        let mut dec = CheckpointGroup {
            name: "decoder".into(),
            role: GroupRole::Decoder,
            core_fingerprint: self.head.core_fingerprint(),
            input_channels: 0,
            params: Vec::new(),
        };
        self.head.for_each_param(&mut |p| dec.params.push(NamedTensor::of(p)));
        dec.sort();
        groups.push(dec);
        groups
    }

    /// Restore both groups from a checkpoint of this same architecture.
    pub fn restore_groups(&mut self, ckpt: &Checkpoint) -> Result<()> {
        let enc = ckpt
            .group("encoder")
            .ok_or_else(|| Error::Validation("checkpoint has no encoder group".into()))?;
        if enc.core_fingerprint != self.encoder.spec.core_fingerprint()
            || enc.input_channels != self.encoder.spec.input_channels
        {
            return Err(Error::Validation("encoder fingerprint mismatch on restore".into()));
        }
        let dec = ckpt
            .group("decoder")
            .ok_or_else(|| Error::Validation("checkpoint has no decoder group".into()))?;
        if dec.core_fingerprint != self.head.core_fingerprint() {
            return Err(Error::Validation("decoder fingerprint mismatch on restore".into()));
        }
        copy_group_exact(enc, &mut |f| self.encoder.for_each_param(f))?;
        copy_group_exact(dec, &mut |f| self.head.for_each_param(f))?;
        Ok(())
    }
}

// ---- channel adaptation ----

/// Average a 3-channel first-layer weight into `target_c` identical input
/// channels: new[:, c] = mean(old[:, 0..3]) for every c.
pub fn adapt_input_channels(w: &ArrayD<f64>, target_c: usize) -> Result<ArrayD<f64>> {
    let sh = w.shape().to_vec();
    if sh.len() != 4 || sh[1] != 3 {
        return Err(Error::Shape(format!(
            "adapter needs [out, 3, k, k] weights, got {sh:?}"
        )));
    }
    if target_c == 0 {
        return Err(Error::Config("target channel count must be positive".into()));
    }
    let (out_c, kh, kw) = (sh[0], sh[2], sh[3]);
    let mut new = ArrayD::<f64>::zeros(vec![out_c, target_c, kh, kw]);
    for o in 0..out_c {
        for y in 0..kh {
            for x in 0..kw {
                let mean =
                    (w[[o, 0, y, x]] + w[[o, 1, y, x]] + w[[o, 2, y, x]]) / 3.0;
                for c in 0..target_c {
                    new[[o, c, y, x]] = mean;
                }
            }
        }
    }
    Ok(new)
}

// ---- checkpoints ----

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GroupRole {
    Encoder,
    Projection,
    Decoder,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl NamedTensor {
    fn of(p: &Param) -> Self {
        NamedTensor {
            name: p.name.clone(),
            shape: p.value.shape().to_vec(),
            data: p.value.iter().copied().collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CheckpointGroup {
    pub name: String,
    pub role: GroupRole,
    pub core_fingerprint: String,
    /// Encoder groups record their sensor channel count; 0 elsewhere.
    pub input_channels: usize,
    pub params: Vec<NamedTensor>,
}

impl CheckpointGroup {
    fn sort(&mut self) {
        self.params.sort_by(|a, b| a.name.cmp(&b.name));
    }

    /// Hash of names, shapes, and exact parameter bytes; equal fingerprints
    /// mean bitwise-equal weights.
    pub fn value_fingerprint(&self) -> String {
        let mut h = Sha256::new();
        for p in &self.params {
            h.update(p.name.as_bytes());
            h.update([0u8]);
            for &d in &p.shape {
                h.update((d as u64).to_le_bytes());
            }
            for &v in &p.data {
                h.update(v.to_le_bytes());
            }
        }
        format!("{:x}", h.finalize())
    }
}

/// Snapshot an encoder tower into a named group.
pub fn snapshot_encoder(enc: &mut Encoder, name: &str) -> CheckpointGroup {
    let mut g = CheckpointGroup {
        name: name.to_string(),
        role: GroupRole::Encoder,
        core_fingerprint: enc.spec.core_fingerprint(),
        input_channels: enc.spec.input_channels,
        params: Vec::new(),
    };
    enc.for_each_param(&mut |p| g.params.push(NamedTensor::of(p)));
    g.sort();
    g
}

/// Snapshot a projection head into a named group.
pub fn snapshot_projection(proj: &mut ProjectionHead, name: &str) -> CheckpointGroup {
    let mut g = CheckpointGroup {
        name: name.to_string(),
        role: GroupRole::Projection,
        core_fingerprint: proj.core_fingerprint(),
        input_channels: 0,
        params: Vec::new(),
    };
    proj.for_each_param(&mut |p| g.params.push(NamedTensor::of(p)));
    g.sort();
    g
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub step: u64,
    pub groups: Vec<CheckpointGroup>,
    pub rng: Vec<(String, RngSnapshot)>,
}

#[derive(Serialize, Deserialize)]
struct ParamMeta {
    name: String,
    shape: Vec<usize>,
    offset: usize,
    len: usize,
}

#[derive(Serialize, Deserialize)]
struct GroupMeta {
    name: String,
    role: GroupRole,
    core_fingerprint: String,
    input_channels: usize,
    params: Vec<ParamMeta>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    magic: String,
    version: u32,
    step: u64,
    groups: Vec<GroupMeta>,
    rng: Vec<(String, RngSnapshot)>,
    payload_f64: usize,
}

const CKPT_MAGIC: &str = "twinsat-checkpoint";
const CKPT_VERSION: u32 = 1;

impl Checkpoint {
    pub fn group(&self, name: &str) -> Option<&CheckpointGroup> {
        self.groups.iter().find(|g| g.name == name)
    }

    /// Write as a one-line JSON header plus a little-endian f64 payload.
    /// The write lands atomically via a same-directory rename.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut total = 0usize;
        let mut groups = Vec::new();
        for g in &self.groups {
            let mut params = Vec::new();
            for p in &g.params {
                let expect: usize = p.shape.iter().product();
                if expect != p.data.len() {
                    return Err(Error::Shape(format!(
                        "tensor {} shape {:?} does not match {} values",
                        p.name,
                        p.shape,
                        p.data.len()
                    )));
                }
                params.push(ParamMeta {
                    name: p.name.clone(),
                    shape: p.shape.clone(),
                    offset: total,
                    len: p.data.len(),
                });
                total += p.data.len();
            }
            groups.push(GroupMeta {
                name: g.name.clone(),
                role: g.role,
                core_fingerprint: g.core_fingerprint.clone(),
                input_channels: g.input_channels,
                params,
            });
        }
        let header = Header {
            magic: CKPT_MAGIC.into(),
            version: CKPT_VERSION,
            step: self.step,
            groups,
            rng: self.rng.clone(),
            payload_f64: total,
        };
        let mut bytes = serde_json::to_vec(&header)
            .map_err(|e| Error::Parse { path: path.into(), msg: e.to_string() })?;
        bytes.push(b'\n');
        bytes.reserve(total * 8);
        for g in &self.groups {
            for p in &g.params {
                for &v in &p.data {
                    bytes.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, &bytes).map_err(|e| Error::io(&tmp, e))?;
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let nl = bytes
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| Error::parse(path, "missing header line"))?;
        let header: Header = serde_json::from_slice(&bytes[..nl])
            .map_err(|e| Error::parse(path, format!("bad header: {e}")))?;
        if header.magic != CKPT_MAGIC {
            return Err(Error::parse(path, format!("unexpected magic {:?}", header.magic)));
        }
        if header.version != CKPT_VERSION {
            return Err(Error::parse(path, format!("unsupported version {}", header.version)));
        }
        let payload = &bytes[nl + 1..];
        if payload.len() != header.payload_f64 * 8 {
            return Err(Error::parse(
                path,
                format!(
                    "payload is {} bytes, header declares {}",
                    payload.len(),
                    header.payload_f64 * 8
                ),
            ));
        }
        let mut groups = Vec::new();
        for gm in header.groups {
            let mut params = Vec::new();
            for pm in gm.params {
                let expect: usize = pm.shape.iter().product();
                if expect != pm.len {
                    return Err(Error::parse(
                        path,
                        format!("tensor {} shape/len mismatch", pm.name),
                    ));
                }
                let start = pm.offset * 8;
                let end = start + pm.len * 8;
                if end > payload.len() {
                    return Err(Error::parse(path, format!("tensor {} out of bounds", pm.name)));
                }
                let data: Vec<f64> = payload[start..end]
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                    .collect();
                params.push(NamedTensor { name: pm.name, shape: pm.shape, data });
            }
            groups.push(CheckpointGroup {
                name: gm.name,
                role: gm.role,
                core_fingerprint: gm.core_fingerprint,
                input_channels: gm.input_channels,
                params,
            });
        }
        Ok(Checkpoint { step: header.step, groups, rng: header.rng })
    }
}

// ---- transfer ----

/// What a transfer touched, by parameter name.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TransferReport {
    pub copied: Vec<String>,
    pub adapted: Vec<String>,
    /// Checkpoint parameters deliberately not carried over, as
    /// "group/param" paths: projection heads, other towers, decoders.
    pub discarded: Vec<String>,
}

/// Copy a group's tensors onto a model part whose parameter set must match
/// exactly. Validates everything before the first write.
fn copy_group_exact(
    group: &CheckpointGroup,
    for_each: &mut dyn FnMut(&mut dyn FnMut(&mut Param)),
) -> Result<Vec<String>> {
    let staged: HashMap<&str, &NamedTensor> =
        group.params.iter().map(|p| (p.name.as_str(), p)).collect();
    let mut target_names: Vec<(String, Vec<usize>)> = Vec::new();
    for_each(&mut |p: &mut Param| target_names.push((p.name.clone(), p.value.shape().to_vec())));
    if target_names.len() != group.params.len() {
        return Err(Error::Validation(format!(
            "group {} has {} tensors, target has {}",
            group.name,
            group.params.len(),
            target_names.len()
        )));
    }
    for (name, shape) in &target_names {
        match staged.get(name.as_str()) {
            None => {
                return Err(Error::Validation(format!(
                    "target parameter {name} missing from group {}",
                    group.name
                )))
            }
            Some(t) if &t.shape != shape => {
                return Err(Error::Validation(format!(
                    "parameter {name}: checkpoint shape {:?} vs target {:?}",
                    t.shape, shape
                )))
            }
            Some(_) => {}
        }
    }
    let mut copied = Vec::new();
    for_each(&mut |p: &mut Param| {
        let t = staged[p.name.as_str()];
        for (dst, &src) in p.value.iter_mut().zip(t.data.iter()) {
            *dst = src;
        }
        copied.push(p.name.clone());
    });
    Ok(copied)
}

/// Move one encoder group from a checkpoint into a target tower.
///
/// Fingerprints must match. When the stored tower saw 3 input channels and
/// the target wants a different count, the first convolution is channel
/// averaged; any other channel difference is an error. The target is
/// untouched unless the whole copy can proceed.
pub fn transfer_encoder(
    ckpt: &Checkpoint,
    group_name: &str,
    target: &mut Encoder,
) -> Result<TransferReport> {
    let group = ckpt
        .group(group_name)
        .ok_or_else(|| Error::Validation(format!("checkpoint has no group {group_name:?}")))?;
    if group.role != GroupRole::Encoder {
        return Err(Error::Validation(format!("group {group_name:?} is not an encoder")));
    }
    if group.core_fingerprint != target.spec.core_fingerprint() {
        return Err(Error::Validation(format!(
            "architecture fingerprint mismatch for group {group_name:?}"
        )));
    }
    let needs_adapter = group.input_channels != target.spec.input_channels;
    let mut effective: Vec<NamedTensor>;
    let mut adapted_names = Vec::new();
    let params: &[NamedTensor] = if needs_adapter {
        if group.input_channels != 3 {
            return Err(Error::Validation(format!(
                "cannot adapt a {}-channel encoder to {} channels; only 3-channel sources average",
                group.input_channels, target.spec.input_channels
            )));
        }
        effective = group.params.clone();
        let first = effective
            .iter_mut()
            .find(|p| p.name == "stem1.conv.w")
            .ok_or_else(|| Error::Validation("group lacks the stem convolution".into()))?;
        let arr = ArrayD::from_shape_vec(first.shape.clone(), first.data.clone())
            .map_err(|e| Error::Shape(e.to_string()))?;
        let new = adapt_input_channels(&arr, target.spec.input_channels)?;
        first.shape = new.shape().to_vec();
        first.data = new.iter().copied().collect();
        adapted_names.push(first.name.clone());
        &effective
    } else {
        &group.params
    };
    let staged_group = CheckpointGroup {
        name: group.name.clone(),
        role: group.role,
        core_fingerprint: group.core_fingerprint.clone(),
        input_channels: target.spec.input_channels,
        params: params.to_vec(),
    };
    let mut copied = copy_group_exact(&staged_group, &mut |f| target.for_each_param(f))?;
    copied.retain(|n| !adapted_names.contains(n));
    let mut discarded = Vec::new();
    for g in &ckpt.groups {
        if g.name != group_name {
            for p in &g.params {
                discarded.push(format!("{}/{}", g.name, p.name));
            }
        }
    }
    Ok(TransferReport { copied, adapted: adapted_names, discarded })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datamodel::IGNORE_INDEX;
    use crate::nn::softmax_cross_entropy;
    use crate::rng::{derive_seed, derive_stream, snapshot};
    use ndarray::Array3;
    use rand::Rng;

    fn input(b: usize, c: usize, hw: usize, seed: u64) -> Array4<f64> {
        let mut rng = derive_stream(seed, "test/model_input");
        Array4::from_shape_fn((b, c, hw, hw), |_| rng.random::<f64>())
    }

    fn tiny_spec(c: usize) -> EncoderSpec {
        EncoderSpec { profile: Profile::Tiny, input_channels: c }
    }

    #[test]
    fn tiny_encoder_shapes_and_determinism() {
        let mut enc = Encoder::new(tiny_spec(3), OutputStride::Classification).unwrap();
        enc.init(1);
        let x = input(2, 3, 64, 1);
        let out = enc.forward(&x).unwrap();
        assert_eq!(out.features.dim(), (2, 256, 2, 2));
        assert_eq!(out.skip.dim(), (2, 32, 16, 16));
        let again = enc.forward(&x).unwrap();
        assert_eq!(out.features, again.features);

        let mut tower = PretrainTower::new(tiny_spec(3)).unwrap();
        tower.init(1);
        let emb = tower.forward(&x).unwrap();
        assert_eq!(emb.dim(), (2, EMBED_DIM));
        for i in 0..2 {
            let n: f64 = emb.row(i).iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((n - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn segmentation_stride_shrinks_less() {
        let mut enc = Encoder::new(tiny_spec(2), OutputStride::Segmentation).unwrap();
        enc.init(2);
        let x = input(1, 2, 64, 2);
        let out = enc.forward(&x).unwrap();
        assert_eq!(out.features.dim(), (1, 256, 4, 4));
    }

    #[test]
    fn encoder_outputs_are_batch_independent() {
        let mut enc = Encoder::new(tiny_spec(2), OutputStride::Classification).unwrap();
        enc.init(3);
        let a = input(2, 2, 32, 3);
        let b = input(3, 2, 32, 4);
        let solo = enc.forward(&a).unwrap();
        let both = concatenate(Axis(0), &[a.view(), b.view()]).unwrap();
        let joint = enc.forward(&both).unwrap();
        let first = joint.features.slice(s![..2, .., .., ..]);
        for (x, y) in solo.features.iter().zip(first.iter()) {
            assert!((x - y).abs() < 1e-6);
        }
    }

    #[test]
    fn encoder_rejects_bad_inputs() {
        let mut enc = Encoder::new(tiny_spec(2), OutputStride::Classification).unwrap();
        enc.init(4);
        let wrong_c = input(1, 3, 32, 5);
        assert!(enc.forward(&wrong_c).is_err());
        let mut out_of_range = input(1, 2, 32, 5);
        out_of_range[(0, 0, 0, 0)] = 7.0;
        assert!(enc.forward(&out_of_range).is_err());
        assert!(EncoderSpec { profile: Profile::Tiny, input_channels: 4 }.validate().is_err());
    }

    #[test]
    fn projection_matches_scalar_oracle() {
        let mut proj = ProjectionHead::with_dims(5, 7, 4);
        proj.init(6);
        let x = {
            let mut rng = derive_stream(6, "test/proj_in");
            Array2::from_shape_fn((3, 5), |_| rng.random::<f64>() - 0.5)
        };
        let got = proj.forward(&x);
        // Hand-rolled: w1 x + b1, relu, w2 h + b2, row normalize.
        let w1 = proj.fc1.w.value.clone();
        let b1 = proj.fc1.b.value.clone();
        let w2 = proj.fc2.w.value.clone();
        let b2 = proj.fc2.b.value.clone();
        for i in 0..3 {
            let mut h = vec![0.0; 7];
            for o in 0..7 {
                let mut acc = b1[[o]];
                for j in 0..5 {
                    acc += w1[[o, j]] * x[(i, j)];
                }
                h[o] = acc.max(0.0);
            }
            let mut z = vec![0.0; 4];
            for o in 0..4 {
                let mut acc = b2[[o]];
                for (j, hv) in h.iter().enumerate() {
                    acc += w2[[o, j]] * hv;
                }
                z[o] = acc;
            }
            let norm = z.iter().map(|v| v * v).sum::<f64>().sqrt() + 1e-12;
            for o in 0..4 {
                assert!((got[(i, o)] - z[o] / norm).abs() < 1e-12, "row {i} col {o}");
            }
        }
        // Empty batch passes through.
        let empty = Array2::<f64>::zeros((0, 5));
        assert_eq!(proj.forward(&empty).dim(), (0, 4));
    }

    #[test]
    fn segmentation_shapes_and_finiteness() {
        let mut net = SegmentationNet::new(tiny_spec(2), 9).unwrap();
        net.init(7);
        let x = input(1, 2, 64, 7);
        let logits = net.forward(&x).unwrap();
        assert_eq!(logits.dim(), (1, 9, 64, 64));
        let flat = Array4::<f64>::from_elem((1, 2, 32, 32), 0.4);
        let logits = net.forward(&flat).unwrap();
        assert!(logits.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn segmentation_weight_gradients_match_finite_differences() {
        let mut net = SegmentationNet::new(tiny_spec(2), 4).unwrap();
        net.init(8);
        let x = input(2, 2, 16, 8);
        let mut rng = derive_stream(8, "test/seg_labels");
        let labels = Array3::<u8>::from_shape_fn((2, 16, 16), |_| {
            if rng.random::<f64>() < 0.1 {
                IGNORE_INDEX
            } else {
                rng.random_range(0..4)
            }
        });
        let loss_of = |net: &mut SegmentationNet, x: &Array4<f64>| {
            let logits = net.forward(x).unwrap();
            softmax_cross_entropy(&logits, &labels, IGNORE_INDEX).unwrap().0
        };
        net.zero_grads();
        let logits = net.forward(&x).unwrap();
        let (_, dlogits) = softmax_cross_entropy(&logits, &labels, IGNORE_INDEX).unwrap();
        net.backward(&dlogits);
        // Sample a handful of weights across depths, compare to central
        // differences through the full network.
        let mut picks: Vec<(String, usize, f64)> = Vec::new();
        net.for_each_param(&mut |p| {
            if ["stage3.conv.w", "head.dec.conv.w", "head.cls.w", "stem1.conv.w"]
                .contains(&p.name.as_str())
            {
                let flat = p.value.len() / 2;
                picks.push((p.name.clone(), flat, p.grad.as_slice().unwrap()[flat]));
            }
        });
        assert_eq!(picks.len(), 4);
        let eps = 1e-5;
        for (name, flat, analytic) in picks {
            let set = |net: &mut SegmentationNet, v: f64| {
                net.for_each_param(&mut |p| {
                    if p.name == name {
                        p.value.as_slice_mut().unwrap()[flat] = v;
                    }
                });
            };
            let mut keep = 0.0;
            net.for_each_param(&mut |p| {
                if p.name == name {
                    keep = p.value.as_slice().unwrap()[flat];
                }
            });
            set(&mut net, keep + eps);
            let up = loss_of(&mut net, &x);
            set(&mut net, keep - eps);
            let dn = loss_of(&mut net, &x);
            set(&mut net, keep);
            let fd = (up - dn) / (2.0 * eps);
            let rel = (fd - analytic).abs() / fd.abs().max(analytic.abs()).max(1e-6);
            assert!(rel < 1e-4, "{name}[{flat}]: fd {fd} vs analytic {analytic} (rel {rel})");
        }
    }

    #[test]
    fn adapter_reproduces_channel_mean() {
        // Channels valued 1, 2, 3 everywhere: mean is 2 in every slot.
        let mut w = ArrayD::<f64>::zeros(vec![4, 3, 3, 3]);
        for c in 0..3 {
            w.slice_mut(s![.., c, .., ..]).fill((c + 1) as f64);
        }
        let a = adapt_input_channels(&w, 2).unwrap();
        assert_eq!(a.shape(), &[4, 2, 3, 3]);
        assert!(a.iter().all(|&v| v == 2.0));
        // All channels equal: output equals any source channel.
        let mut w = ArrayD::<f64>::zeros(vec![2, 3, 1, 1]);
        w.fill(0.7);
        let a = adapt_input_channels(&w, 3).unwrap();
        assert!(a.iter().all(|&v| (v - 0.7).abs() < 1e-15));
        // Random weights vs scalar mean oracle.
        let mut rng = derive_stream(9, "test/adapter");
        let w = ArrayD::from_shape_fn(vec![3, 3, 2, 2], |_| rng.random::<f64>());
        let a = adapt_input_channels(&w, 2).unwrap();
        for o in 0..3 {
            for y in 0..2 {
                for x in 0..2 {
                    let want = (w[[o, 0, y, x]] + w[[o, 1, y, x]] + w[[o, 2, y, x]]) / 3.0;
                    for c in 0..2 {
                        assert!((a[[o, c, y, x]] - want).abs() < 1e-15);
                    }
                }
            }
        }
        let bad = ArrayD::<f64>::zeros(vec![4, 2, 3, 3]);
        assert!(adapt_input_channels(&bad, 3).is_err());
    }

    #[test]
    fn checkpoint_roundtrip_preserves_everything() {
        let dir = tempfile::tempdir().unwrap();
        let mut enc = Encoder::new(tiny_spec(2), OutputStride::Classification).unwrap();
        enc.init(10);
        let mut proj = ProjectionHead::new(enc.spec.feature_dim());
        proj.init(10);
        let rng_state = derive_stream(10, "train/loop");
        let ckpt = Checkpoint {
            step: 1234,
            groups: vec![
                snapshot_encoder(&mut enc, "encoder_s1"),
                snapshot_projection(&mut proj, "projection_s1"),
            ],
            rng: vec![("train/loop".into(), snapshot(&rng_state))],
        };
        let path = dir.path().join("model.ckpt");
        ckpt.save(&path).unwrap();
        let back = Checkpoint::load(&path).unwrap();
        assert_eq!(back, ckpt);
        assert_eq!(
            back.group("encoder_s1").unwrap().value_fingerprint(),
            ckpt.group("encoder_s1").unwrap().value_fingerprint()
        );
    }

    #[test]
    fn corrupt_checkpoints_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let mut enc = Encoder::new(tiny_spec(2), OutputStride::Classification).unwrap();
        enc.init(11);
        let ckpt = Checkpoint {
            step: 1,
            groups: vec![snapshot_encoder(&mut enc, "encoder_s1")],
            rng: vec![],
        };
        let path = dir.path().join("model.ckpt");
        ckpt.save(&path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes.truncate(bytes.len() - 16);
        std::fs::write(&path, &bytes).unwrap();
        assert!(Checkpoint::load(&path).is_err());
    }

    #[test]
    fn self_transfer_is_bitwise_identity() {
        let mut src = Encoder::new(tiny_spec(2), OutputStride::Classification).unwrap();
        src.init(12);
        let ckpt = Checkpoint {
            step: 5,
            groups: vec![snapshot_encoder(&mut src, "encoder_s1")],
            rng: vec![],
        };
        // Different output stride is fine: same parameters, same names.
        let mut dst = Encoder::new(tiny_spec(2), OutputStride::Segmentation).unwrap();
        dst.init(999);
        let report = transfer_encoder(&ckpt, "encoder_s1", &mut dst).unwrap();
        assert!(report.adapted.is_empty());
        assert!(!report.copied.is_empty());
        let dst_group = snapshot_encoder(&mut dst, "encoder_s1");
        assert_eq!(
            dst_group.value_fingerprint(),
            ckpt.group("encoder_s1").unwrap().value_fingerprint()
        );
    }

    #[test]
    fn cross_channel_transfer_averages_first_layer() {
        let mut src = Encoder::new(tiny_spec(3), OutputStride::Classification).unwrap();
        src.init(13);
        let mut proj = ProjectionHead::new(src.spec.feature_dim());
        proj.init(13);
        let ckpt = Checkpoint {
            step: 9,
            groups: vec![
                snapshot_encoder(&mut src, "encoder_s2"),
                snapshot_projection(&mut proj, "projection_s2"),
            ],
            rng: vec![],
        };
        let mut dst = Encoder::new(tiny_spec(2), OutputStride::Segmentation).unwrap();
        dst.init(77);
        let report = transfer_encoder(&ckpt, "encoder_s2", &mut dst).unwrap();
        assert_eq!(report.adapted, vec!["stem1.conv.w".to_string()]);
        assert!(report.discarded.iter().all(|n| n.starts_with("projection_s2/")));
        // First layer equals the channel average of the source weights.
        let src_w = &ckpt
            .group("encoder_s2")
            .unwrap()
            .params
            .iter()
            .find(|p| p.name == "stem1.conv.w")
            .unwrap()
            .data;
        let mut dst_w = Vec::new();
        dst.for_each_param(&mut |p| {
            if p.name == "stem1.conv.w" {
                dst_w = p.value.iter().copied().collect();
            }
        });
        // Source [32,3,3,3]; target [32,2,3,3].
        for o in 0..32 {
            for y in 0..3 {
                for x in 0..3 {
                    let mean = (0..3)
                        .map(|c| src_w[((o * 3 + c) * 3 + y) * 3 + x])
                        .sum::<f64>()
                        / 3.0;
                    for c in 0..2 {
                        let got = dst_w[((o * 2 + c) * 3 + y) * 3 + x];
                        assert!((got - mean).abs() < 1e-15);
                    }
                }
            }
        }
    }

    #[test]
    fn mismatched_transfer_leaves_target_untouched() {
        let mut src = Encoder::new(
            EncoderSpec { profile: Profile::Resnet50Mod, input_channels: 2 },
            OutputStride::Classification,
        )
        .unwrap();
        // No init: zeros are fine for a fingerprint test.
        let ckpt = Checkpoint {
            step: 0,
            groups: vec![snapshot_encoder(&mut src, "encoder_s1")],
            rng: vec![],
        };
        let mut dst = Encoder::new(tiny_spec(2), OutputStride::Classification).unwrap();
        dst.init(14);
        let before = snapshot_encoder(&mut dst, "x").value_fingerprint();
        assert!(transfer_encoder(&ckpt, "encoder_s1", &mut dst).is_err());
        assert!(transfer_encoder(&ckpt, "missing", &mut dst).is_err());
        let after = snapshot_encoder(&mut dst, "x").value_fingerprint();
        assert_eq!(before, after);
    }

    #[test]
    fn init_is_deterministic_per_seed_and_tower() {
        let mut a = Encoder::new(tiny_spec(2), OutputStride::Classification).unwrap();
        let mut b = Encoder::new(tiny_spec(2), OutputStride::Classification).unwrap();
        a.init(42);
        b.init(42);
        assert_eq!(
            snapshot_encoder(&mut a, "e").value_fingerprint(),
            snapshot_encoder(&mut b, "e").value_fingerprint()
        );
        let mut c = Encoder::new(tiny_spec(2), OutputStride::Classification).unwrap();
        c.init(43);
        assert_ne!(
            snapshot_encoder(&mut a, "e").value_fingerprint(),
            snapshot_encoder(&mut c, "e").value_fingerprint()
        );
        // Tower salts give the two sides distinct weights from one seed.
        assert_ne!(derive_seed(42, "tower/s1"), derive_seed(42, "tower/s2"));
    }

    #[test]
    fn resnet_profile_builds_and_runs() {
        let spec = EncoderSpec { profile: Profile::Resnet50Mod, input_channels: 3 };
        let mut enc = Encoder::new(spec, OutputStride::Classification).unwrap();
        enc.init(15);
        let x = input(1, 3, 32, 15);
        let out = enc.forward(&x).unwrap();
        assert_eq!(out.features.dim(), (1, 2048, 1, 1));
        assert_eq!(out.skip.dim(), (1, 256, 8, 8));
        // Stem is two 3x3 convolutions, never a 7x7.
        let mut stem_kernels = Vec::new();
        enc.for_each_param(&mut |p| {
            if p.name.starts_with("stem") && p.name.ends_with(".conv.w") {
                stem_kernels.push(p.value.shape().to_vec());
            }
        });
        assert_eq!(stem_kernels.len(), 2);
        for sh in stem_kernels {
            assert_eq!(&sh[2..], &[3, 3]);
        }
        let mut seg = Encoder::new(spec, OutputStride::Segmentation).unwrap();
        seg.init(15);
        let out = seg.forward(&x).unwrap();
        assert_eq!(out.features.dim(), (1, 2048, 2, 2));
    }

    #[test]
    fn segmentation_restore_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let mut net = SegmentationNet::new(tiny_spec(2), 6).unwrap();
        net.init(16);
        let ckpt =
            Checkpoint { step: 77, groups: net.snapshot_groups(), rng: vec![] };
        let path = dir.path().join("seg.ckpt");
        ckpt.save(&path).unwrap();
        let mut other = SegmentationNet::new(tiny_spec(2), 6).unwrap();
        other.init(900);
        other.restore_groups(&Checkpoint::load(&path).unwrap()).unwrap();
        let x = input(1, 2, 32, 16);
        let a = net.forward(&x).unwrap();
        let b = other.forward(&x).unwrap();
        assert_eq!(a, b);
        // Wrong class count: decoder fingerprint differs.
        let mut wrong = SegmentationNet::new(tiny_spec(2), 7).unwrap();
        wrong.init(1);
        assert!(wrong.restore_groups(&ckpt).is_err());
    }
}
