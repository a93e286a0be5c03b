//! Network definitions: residual conv encoder/decoder pairs, the patch
//! discriminator, and the frozen feature extractor.
//!
//! Everything is fully convolutional so transformed (smaller) latents and
//! reconstructions keep flowing through the same stacks.

use rand::Rng;

use crate::nn::layers::{Conv2d, GroupNorm};
use crate::nn::{Params, Tape, Var};

pub(crate) struct ResBlock {
    gn1: GroupNorm,
    conv1: Conv2d,
    gn2: GroupNorm,
    conv2: Conv2d,
}

impl ResBlock {
    fn new<R: Rng + ?Sized>(params: &mut Params, name: &str, channels: usize, rng: &mut R) -> Self {
        Self {
            gn1: GroupNorm::new(params, &format!("{name}.gn1"), channels),
            conv1: Conv2d::new(params, &format!("{name}.conv1"), channels, channels, 3, 1, 1, rng),
            gn2: GroupNorm::new(params, &format!("{name}.gn2"), channels),
            conv2: Conv2d::new(params, &format!("{name}.conv2"), channels, channels, 3, 1, 1, rng),
        }
    }

    fn forward(&self, tape: &mut Tape, params: &Params, x: Var) -> Var {
        let h = self.gn1.forward(tape, params, x);
        let h = tape.silu(h);
        let h = self.conv1.forward(tape, params, h);
        let h = self.gn2.forward(tape, params, h);
        let h = tape.silu(h);
        let h = self.conv2.forward(tape, params, h);
        tape.add(x, h)
    }
}

/// Channel plan: width doubles per level, capped at 4x the base.
fn channel_plan(base_width: usize, levels: usize) -> Vec<usize> {
    (0..=levels).map(|i| base_width * (1 << i.min(2))).collect()
}

pub(crate) struct EncoderNet {
    conv_in: Conv2d,
    stages: Vec<(ResBlock, Conv2d)>,
    mid: ResBlock,
    head_gn: GroupNorm,
    head: Conv2d,
}

impl EncoderNet {
    pub fn new<R: Rng + ?Sized>(
        params: &mut Params,
        base_width: usize,
        levels: usize,
        out_channels: usize,
        rng: &mut R,
    ) -> Self {
        let ch = channel_plan(base_width, levels);
        let conv_in = Conv2d::new(params, "enc.conv_in", 3, ch[0], 3, 1, 1, rng);
        let mut stages = Vec::new();
        for i in 0..levels {
            let res = ResBlock::new(params, &format!("enc.res{i}"), ch[i], rng);
            let down = Conv2d::new(params, &format!("enc.down{i}"), ch[i], ch[i + 1], 3, 2, 1, rng);
            stages.push((res, down));
        }
        let mid = ResBlock::new(params, "enc.mid", ch[levels], rng);
        let head_gn = GroupNorm::new(params, "enc.head_gn", ch[levels]);
        let head = Conv2d::new(params, "enc.head", ch[levels], out_channels, 3, 1, 1, rng);
        Self { conv_in, stages, mid, head_gn, head }
    }

    pub fn forward(&self, tape: &mut Tape, params: &Params, x: Var) -> Var {
        let mut h = self.conv_in.forward(tape, params, x);
        for (res, down) in &self.stages {
            h = res.forward(tape, params, h);
            h = down.forward(tape, params, h);
        }
        h = self.mid.forward(tape, params, h);
        h = self.head_gn.forward(tape, params, h);
        h = tape.silu(h);
        self.head.forward(tape, params, h)
    }
}

pub(crate) struct DecoderNet {
    conv_in: Conv2d,
    mid: ResBlock,
    stages: Vec<(Conv2d, ResBlock)>,
    head_gn: GroupNorm,
    head: Conv2d,
}

impl DecoderNet {
    pub fn new<R: Rng + ?Sized>(
        params: &mut Params,
        base_width: usize,
        levels: usize,
        latent_channels: usize,
        rng: &mut R,
    ) -> Self {
        let ch = channel_plan(base_width, levels);
        let conv_in = Conv2d::new(params, "dec.conv_in", latent_channels, ch[levels], 3, 1, 1, rng);
        let mid = ResBlock::new(params, "dec.mid", ch[levels], rng);
        let mut stages = Vec::new();
        for i in (0..levels).rev() {
            let up = Conv2d::new(params, &format!("dec.up{i}"), ch[i + 1], ch[i], 3, 1, 1, rng);
            let res = ResBlock::new(params, &format!("dec.res{i}"), ch[i], rng);
            stages.push((up, res));
        }
        let head_gn = GroupNorm::new(params, "dec.head_gn", ch[0]);
        let head = Conv2d::new(params, "dec.head", ch[0], 3, 3, 1, 1, rng);
        Self { conv_in, mid, stages, head_gn, head }
    }

    /// Latent `(c, h, w)` to image `(3, f*h, f*w)` in `[-1, 1]`.
    pub fn forward(&self, tape: &mut Tape, params: &Params, z: Var) -> Var {
        let mut h = self.conv_in.forward(tape, params, z);
        h = self.mid.forward(tape, params, h);
        for (up, res) in &self.stages {
            h = tape.upsample_nearest2(h);
            h = up.forward(tape, params, h);
            h = res.forward(tape, params, h);
        }
        h = self.head_gn.forward(tape, params, h);
        h = tape.silu(h);
        let h = self.head.forward(tape, params, h);
        tape.tanh(h)
    }
}

/// 3-layer patch discriminator: per-site realness logits over local
/// patches (receptive field 9 pixels).
pub(crate) struct DiscriminatorNet {
    conv1: Conv2d,
    conv2: Conv2d,
    gn: GroupNorm,
    conv3: Conv2d,
}

/// Smallest input the patch discriminator accepts on either axis.
pub const DISC_MIN_INPUT: usize = 4;

impl DiscriminatorNet {
    pub fn new<R: Rng + ?Sized>(params: &mut Params, width: usize, rng: &mut R) -> Self {
        Self {
            conv1: Conv2d::new(params, "disc.conv1", 3, width, 3, 1, 1, rng),
            conv2: Conv2d::new(params, "disc.conv2", width, 2 * width, 3, 2, 1, rng),
            gn: GroupNorm::new(params, "disc.gn", 2 * width),
            conv3: Conv2d::new(params, "disc.conv3", 2 * width, 1, 3, 1, 1, rng),
        }
    }

    pub fn forward(&self, tape: &mut Tape, params: &Params, x: Var) -> Var {
        let h = self.conv1.forward(tape, params, x);
        let h = tape.leaky_relu(h, 0.2);
        let h = self.conv2.forward(tape, params, h);
        let h = self.gn.forward(tape, params, h);
        let h = tape.leaky_relu(h, 0.2);
        self.conv3.forward(tape, params, h)
    }
}

/// Frozen random conv features standing in for a pretrained perceptual
/// network. The weights come from one fixed seed so every run, metric,
/// and loss in the lab sees the same feature space; tanh keeps the
/// responses bounded. Weights enter tapes as constants, so no gradient
/// work is spent on them.
pub(crate) struct FeatureNet {
    weights: Vec<(std::sync::Arc<ndarray::ArrayD<f64>>, std::sync::Arc<ndarray::ArrayD<f64>>, usize)>,
}

/// Output channels of the frozen extractor; pooled features have this
/// dimension.
pub const FEATURE_DIM: usize = 64;

impl FeatureNet {
    pub fn fixed() -> Self {
        let mut rng = crate::nn::rng::split(0x0fea_7e4e, "feature-extractor", 0);
        let plan = [(3usize, 16usize, 1usize), (16, 32, 2), (32, FEATURE_DIM, 2)];
        let weights = plan
            .iter()
            .map(|&(cin, cout, stride)| {
                let bound = 1.0 / ((cin * 9) as f64).sqrt();
                let w = crate::nn::rng::uniform_array(&mut rng, &[cout, cin, 3, 3], -bound, bound);
                let b = crate::nn::rng::uniform_array(&mut rng, &[cout], -bound, bound);
                (std::sync::Arc::new(w), std::sync::Arc::new(b), stride)
            })
            .collect();
        Self { weights }
    }

    /// Feature map `(64, H/4, W/4)` of an image.
    pub fn forward(&self, tape: &mut Tape, x: Var) -> Var {
        let mut h = x;
        for (w, b, stride) in &self.weights {
            let wv = tape.constant((**w).clone());
            let bv = tape.constant((**b).clone());
            h = tape.conv2d(h, wv, bv, *stride, 1);
            h = tape.tanh(h);
        }
        h
    }

    pub fn min_input(&self) -> usize {
        4
    }
}
