//! Spatial transformation algebra and its resampling action on grids.
//!
//! A [`Transform2D`] is the composition `S(s_x, s_y) * R(theta)` of an
//! axis-aligned down-scaling and a right-angle rotation, acting on grid
//! coordinates. Applying it to a [`FeatureGrid`] rotates by an exact index
//! permutation (right angles lose nothing to interpolation) and then
//! resamples with a Catmull-Rom bicubic kernel. The same resampler serves
//! pixel grids and latent grids so the two sides of a transformed
//! reconstruction objective never diverge.

use std::f64::consts::{FRAC_PI_2, PI};

use ndarray::Array3;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{config_err, Result};
use crate::grid::FeatureGrid;

/// Degenerate-case tag for a transformation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TransformKind {
    Identity,
    Rotation,
    Scale,
    Composed,
}

/// `S(s_x, s_y) * R(theta)` with `s_x, s_y` in `(0, 1]` and `theta` a
/// multiple of 90 degrees.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Transform2D {
    matrix: [[f64; 2]; 2],
    kind: TransformKind,
    s_x: f64,
    s_y: f64,
    /// Rotation in quarter turns, 0..=3.
    quarter_turns: u8,
}

const THETA_3PI_2: f64 = 3.0 * FRAC_PI_2;

impl Transform2D {
    /// Builds `S(s_x, s_y) * R(theta)`.
    ///
    /// Scales must lie in `(0, 1]` and `theta` must be exactly one of
    /// `0`, `PI/2`, `PI`, `3*PI/2`.
    pub fn new(s_x: f64, s_y: f64, theta: f64) -> Result<Self> {
        let quarter_turns = if theta == 0.0 {
            0
        } else if theta == FRAC_PI_2 {
            1
        } else if theta == PI {
            2
        } else if theta == THETA_3PI_2 {
            3
        } else {
            return config_err(format!(
                "theta must be one of {{0, PI/2, PI, 3PI/2}}, got {theta}"
            ));
        };
        Self::from_quarter_turns(s_x, s_y, quarter_turns)
    }

    /// Same as [`Transform2D::new`] with the rotation given in quarter
    /// turns (0..=3), which avoids any floating-point angle round-trip.
    pub fn from_quarter_turns(s_x: f64, s_y: f64, quarter_turns: u8) -> Result<Self> {
        if !(s_x > 0.0 && s_x <= 1.0 && s_y > 0.0 && s_y <= 1.0) {
            return config_err(format!("scales must lie in (0, 1], got ({s_x}, {s_y})"));
        }
        if quarter_turns > 3 {
            return config_err(format!("quarter turns must be 0..=3, got {quarter_turns}"));
        }
        // cos/sin of right angles are exact in {-1, 0, 1}.
        let (cos_t, sin_t) = match quarter_turns {
            0 => (1.0, 0.0),
            1 => (0.0, 1.0),
            2 => (-1.0, 0.0),
            _ => (0.0, -1.0),
        };
        let matrix = [[s_x * cos_t, -s_x * sin_t], [s_y * sin_t, s_y * cos_t]];
        let unit_scale = s_x == 1.0 && s_y == 1.0;
        let kind = match (unit_scale, quarter_turns == 0) {
            (true, true) => TransformKind::Identity,
            (true, false) => TransformKind::Rotation,
            (false, true) => TransformKind::Scale,
            (false, false) => TransformKind::Composed,
        };
        Ok(Self { matrix, kind, s_x, s_y, quarter_turns })
    }

    pub fn identity() -> Self {
        Self::from_quarter_turns(1.0, 1.0, 0).expect("identity is valid")
    }

    pub fn rotation(quarter_turns: u8) -> Result<Self> {
        Self::from_quarter_turns(1.0, 1.0, quarter_turns)
    }

    pub fn scaling(s_x: f64, s_y: f64) -> Result<Self> {
        Self::from_quarter_turns(s_x, s_y, 0)
    }

    pub fn matrix(&self) -> [[f64; 2]; 2] {
        self.matrix
    }

    pub fn kind(&self) -> TransformKind {
        self.kind
    }

    pub fn is_identity(&self) -> bool {
        self.kind == TransformKind::Identity
    }

    pub fn s_x(&self) -> f64 {
        self.s_x
    }

    pub fn s_y(&self) -> f64 {
        self.s_y
    }

    pub fn quarter_turns(&self) -> u8 {
        self.quarter_turns
    }

    pub fn theta(&self) -> f64 {
        match self.quarter_turns {
            0 => 0.0,
            1 => FRAC_PI_2,
            2 => PI,
            _ => THETA_3PI_2,
        }
    }

    /// Stable short name used as a map key in reports and CSV columns.
    pub fn descriptor(&self) -> String {
        let deg = self.quarter_turns as u32 * 90;
        match self.kind {
            TransformKind::Identity => "identity".to_string(),
            TransformKind::Rotation => format!("theta={deg}"),
            TransformKind::Scale => {
                if self.s_x == self.s_y {
                    format!("s={:.2}", self.s_x)
                } else {
                    format!("sx={:.2},sy={:.2}", self.s_x, self.s_y)
                }
            }
            TransformKind::Composed => {
                if self.s_x == self.s_y {
                    format!("theta={deg},s={:.2}", self.s_x)
                } else {
                    format!("theta={deg},sx={:.2},sy={:.2}", self.s_x, self.s_y)
                }
            }
        }
    }

    /// Spatial shape produced by applying this transform to an `h x w`
    /// grid: rotation swaps the axes for odd quarter turns, scaling then
    /// rounds half away from zero.
    ///
    /// Errors when a scaled dimension would round below 1.
    pub fn output_shape(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let (h_rot, w_rot) = if self.quarter_turns % 2 == 1 { (w, h) } else { (h, w) };
        let h_out = (self.s_y * h_rot as f64).round();
        let w_out = (self.s_x * w_rot as f64).round();
        if h_out < 1.0 || w_out < 1.0 {
            return config_err(format!(
                "transform {} on {h}x{w} grid yields degenerate output {h_out}x{w_out}",
                self.descriptor()
            ));
        }
        Ok((h_out as usize, w_out as usize))
    }
}

/// Configuration for the stochastic transformation sampler.
///
/// With probability `p_alpha` the sampler returns the identity; otherwise
/// it composes the enabled factors: a rotation angle uniform over
/// `{PI/2, PI, 3PI/2}` and scale factors uniform in
/// `(scale_min, scale_max)` (shared between axes when `isotropic`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransformSamplerConfig {
    pub p_alpha: f64,
    pub scale_min: f64,
    pub scale_max: f64,
    pub isotropic: bool,
    pub enable_rotation: bool,
    pub enable_scale: bool,
    pub seed: u64,
}

impl Default for TransformSamplerConfig {
    fn default() -> Self {
        Self {
            p_alpha: 0.5,
            scale_min: 0.25,
            scale_max: 1.0,
            isotropic: true,
            enable_rotation: true,
            enable_scale: true,
            seed: 0,
        }
    }
}

impl TransformSamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.p_alpha) {
            return config_err(format!("p_alpha must lie in [0, 1], got {}", self.p_alpha));
        }
        if !(self.scale_min > 0.0 && self.scale_min < self.scale_max && self.scale_max <= 1.0) {
            return config_err(format!(
                "scale bounds must satisfy 0 < min < max <= 1, got ({}, {})",
                self.scale_min, self.scale_max
            ));
        }
        if self.p_alpha < 1.0 && !self.enable_rotation && !self.enable_scale {
            return config_err("p_alpha < 1 requires at least one enabled factor");
        }
        Ok(())
    }
}

/// Draws one transformation. Deterministic given the rng state.
pub fn sample_transform<R: Rng + ?Sized>(
    rng: &mut R,
    cfg: &TransformSamplerConfig,
) -> Result<Transform2D> {
    cfg.validate()?;
    // The identity gate consumes a draw even at p_alpha in {0, 1} so the
    // stream advances identically for every configuration.
    let p: f64 = rng.random();
    if p < cfg.p_alpha {
        return Ok(Transform2D::identity());
    }
    let quarter_turns = if cfg.enable_rotation {
        *[1u8, 2, 3]
            .get(rng.random_range(0..3usize))
            .expect("index in range")
    } else {
        0
    };
    let (s_x, s_y) = if cfg.enable_scale {
        let s_x = rng.random_range(cfg.scale_min..cfg.scale_max);
        let s_y = if cfg.isotropic {
            s_x
        } else {
            rng.random_range(cfg.scale_min..cfg.scale_max)
        };
        (s_x, s_y)
    } else {
        (1.0, 1.0)
    };
    Transform2D::from_quarter_turns(s_x, s_y, quarter_turns)
}

/// Rotates by an exact index permutation. Quarter turns are counted
/// counter-clockwise in the usual image convention (row down, column
/// right).
pub(crate) fn rotate_exact(values: &Array3<f64>, quarter_turns: u8) -> Array3<f64> {
    let (c, h, w) = values.dim();
    match quarter_turns % 4 {
        0 => values.clone(),
        1 => {
            let mut out = Array3::zeros((c, w, h));
            for ch in 0..c {
                for r in 0..w {
                    for col in 0..h {
                        out[(ch, r, col)] = values[(ch, col, w - 1 - r)];
                    }
                }
            }
            out
        }
        2 => {
            let mut out = Array3::zeros((c, h, w));
            for ch in 0..c {
                for r in 0..h {
                    for col in 0..w {
                        out[(ch, r, col)] = values[(ch, h - 1 - r, w - 1 - col)];
                    }
                }
            }
            out
        }
        _ => {
            let mut out = Array3::zeros((c, w, h));
            for ch in 0..c {
                for r in 0..w {
                    for col in 0..h {
                        out[(ch, r, col)] = values[(ch, h - 1 - col, r)];
                    }
                }
            }
            out
        }
    }
}

/// Catmull-Rom cubic kernel (a = -0.5).
fn cubic_kernel(t: f64) -> f64 {
    let t = t.abs();
    if t <= 1.0 {
        (1.5 * t - 2.5) * t * t + 1.0
    } else if t < 2.0 {
        ((-0.5 * t + 2.5) * t - 4.0) * t + 2.0
    } else {
        0.0
    }
}

/// Per-output-index source taps for a separable bicubic resample along one
/// axis, half-pixel coordinate convention, edge-replicate boundary.
///
/// Shared by the plain grid resampler and the differentiable resample op,
/// whose backward pass scatters through the same taps.
pub(crate) fn bicubic_taps(src_len: usize, dst_len: usize) -> Vec<([usize; 4], [f64; 4])> {
    let scale = src_len as f64 / dst_len as f64;
    (0..dst_len)
        .map(|d| {
            let src = (d as f64 + 0.5) * scale - 0.5;
            let base = src.floor();
            let frac = src - base;
            let mut idx = [0usize; 4];
            let mut w = [0f64; 4];
            for k in 0..4 {
                let p = base as i64 + k as i64 - 1;
                idx[k] = p.clamp(0, src_len as i64 - 1) as usize;
                w[k] = cubic_kernel(frac - (k as f64 - 1.0));
            }
            // Kernel weights sum to 1 analytically; renormalize away the
            // last-ulp drift so constant fields stay exactly constant.
            let sum: f64 = w.iter().sum();
            for wk in &mut w {
                *wk /= sum;
            }
            (idx, w)
        })
        .collect()
}

/// Bicubic resample of a `(c, h, w)` array to `(c, h_out, w_out)`.
pub(crate) fn resample_bicubic(values: &Array3<f64>, h_out: usize, w_out: usize) -> Array3<f64> {
    let (c, h, w) = values.dim();
    if h == h_out && w == w_out {
        return values.clone();
    }
    let row_taps = bicubic_taps(h, h_out);
    let col_taps = bicubic_taps(w, w_out);

    // Rows first, then columns; the separable kernel commutes.
    let mut mid = Array3::zeros((c, h_out, w));
    for ch in 0..c {
        for (r, (idx, wt)) in row_taps.iter().enumerate() {
            for col in 0..w {
                let mut acc = 0.0;
                for k in 0..4 {
                    acc += wt[k] * values[(ch, idx[k], col)];
                }
                mid[(ch, r, col)] = acc;
            }
        }
    }
    let mut out = Array3::zeros((c, h_out, w_out));
    for ch in 0..c {
        for r in 0..h_out {
            for (col, (idx, wt)) in col_taps.iter().enumerate() {
                let mut acc = 0.0;
                for k in 0..4 {
                    acc += wt[k] * mid[(ch, r, idx[k])];
                }
                out[(ch, r, col)] = acc;
            }
        }
    }
    out
}

/// Applies `tau` to a grid: exact rotation first, then bicubic scaling to
/// the rounded output shape. The identity returns a value-identical grid.
pub fn apply_transform(grid: &FeatureGrid, tau: &Transform2D) -> Result<FeatureGrid> {
    if tau.is_identity() {
        return Ok(grid.clone());
    }
    let (h_out, w_out) = tau.output_shape(grid.height(), grid.width())?;
    apply_transform_to(grid, tau, (h_out, w_out))
}

/// Applies `tau` but resamples to a caller-chosen output shape instead of
/// the rounded one. Lets a consumer force two resolutions to agree, e.g.
/// generating a pixel-space target at an exact multiple of a transformed
/// latent's dimensions.
pub fn apply_transform_to(
    grid: &FeatureGrid,
    tau: &Transform2D,
    (h_out, w_out): (usize, usize),
) -> Result<FeatureGrid> {
    if h_out < 1 || w_out < 1 {
        return config_err(format!("degenerate target shape {h_out}x{w_out}"));
    }
    if tau.is_identity() && h_out == grid.height() && w_out == grid.width() {
        return Ok(grid.clone());
    }
    let rotated = rotate_exact(&grid.values().to_owned(), tau.quarter_turns());
    let scaled = resample_bicubic(&rotated, h_out, w_out);
    FeatureGrid::with_range(scaled, grid.value_range())
}
