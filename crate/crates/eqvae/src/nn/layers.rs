//! Layer structs: parameter construction plus a taped forward.

use rand::Rng;

use super::params::{PRef, Params};
use super::rng::uniform_array;
use super::tape::{Tape, Var};

/// 3x3-style convolution layer.
pub struct Conv2d {
    pub w: PRef,
    pub b: PRef,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        params: &mut Params,
        name: &str,
        c_in: usize,
        c_out: usize,
        k: usize,
        stride: usize,
        pad: usize,
        rng: &mut R,
    ) -> Self {
        let fan_in = (c_in * k * k) as f64;
        let bound = 1.0 / fan_in.sqrt();
        let w = params.add(
            format!("{name}.w"),
            uniform_array(rng, &[c_out, c_in, k, k], -bound, bound),
        );
        let b = params.add(format!("{name}.b"), uniform_array(rng, &[c_out], -bound, bound));
        Self { w, b, stride, pad }
    }

    pub fn forward(&self, tape: &mut Tape, params: &Params, x: Var) -> Var {
        let w = tape.param(params, self.w);
        let b = tape.param(params, self.b);
        tape.conv2d(x, w, b, self.stride, self.pad)
    }
}

pub struct GroupNorm {
    pub gamma: PRef,
    pub beta: PRef,
    pub groups: usize,
}

impl GroupNorm {
    pub fn new(params: &mut Params, name: &str, channels: usize) -> Self {
        // Largest group count <= 8 that divides the channel count.
        let groups = (1..=8.min(channels)).rev().find(|g| channels % g == 0).unwrap_or(1);
        let gamma = params.add(format!("{name}.gamma"), ndarray::ArrayD::ones(ndarray::IxDyn(&[channels])));
        let beta = params.add(format!("{name}.beta"), ndarray::ArrayD::zeros(ndarray::IxDyn(&[channels])));
        Self { gamma, beta, groups }
    }

    pub fn forward(&self, tape: &mut Tape, params: &Params, x: Var) -> Var {
        let gamma = tape.param(params, self.gamma);
        let beta = tape.param(params, self.beta);
        tape.group_norm(x, gamma, beta, self.groups, 1e-6)
    }
}

pub struct Linear {
    pub w: PRef,
    pub b: PRef,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(
        params: &mut Params,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        rng: &mut R,
    ) -> Self {
        let bound = 1.0 / (in_dim as f64).sqrt();
        let w = params.add(format!("{name}.w"), uniform_array(rng, &[out_dim, in_dim], -bound, bound));
        let b = params.add(format!("{name}.b"), uniform_array(rng, &[out_dim], -bound, bound));
        Self { w, b }
    }

    pub fn forward(&self, tape: &mut Tape, params: &Params, x: Var) -> Var {
        let w = tape.param(params, self.w);
        let b = tape.param(params, self.b);
        tape.linear(x, w, b)
    }
}
