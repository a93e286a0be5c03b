//! Convolutional autoencoders with continuous (KL) or discrete
//! (vector-quantized) latents, the patch discriminator, and the frozen
//! perceptual feature extractor.

mod checkpoint;
mod nets;

pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointMeta, TrainState, CKPT_FORMAT_TAG};
pub use nets::{DISC_MIN_INPUT, FEATURE_DIM};

use ndarray::{Array1, Array2, Array3};
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::sync::Arc;

use crate::error::{config_err, Result};
use crate::grid::FeatureGrid;
use crate::nn::rng::split;
use crate::nn::{PRef, Params, Tape, Var};
use nets::{DecoderNet, DiscriminatorNet, EncoderNet, FeatureNet};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LatentMode {
    Continuous,
    Discrete,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct AutoencoderConfig {
    /// Square training resolution.
    pub image_size: usize,
    /// Spatial compression ratio `f`; a power of two.
    pub compression: usize,
    /// Latent channels `c`.
    pub latent_channels: usize,
    /// Channel count of the first conv block.
    pub base_width: usize,
    pub latent_mode: LatentMode,
    /// Codebook entries in discrete mode.
    pub codebook_size: usize,
}

impl Default for AutoencoderConfig {
    fn default() -> Self {
        Self {
            image_size: 64,
            compression: 8,
            latent_channels: 4,
            base_width: 16,
            latent_mode: LatentMode::Continuous,
            codebook_size: 512,
        }
    }
}

impl AutoencoderConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.compression.is_power_of_two() || self.compression < 2 {
            return config_err(format!(
                "compression must be a power of two >= 2, got {}",
                self.compression
            ));
        }
        if self.image_size == 0 || self.image_size % self.compression != 0 {
            return config_err(format!(
                "image_size {} must be divisible by compression {}",
                self.image_size, self.compression
            ));
        }
        if self.latent_channels == 0 || self.base_width == 0 {
            return config_err("latent_channels and base_width must be positive");
        }
        if self.latent_mode == LatentMode::Discrete && self.codebook_size < 2 {
            return config_err(format!("codebook_size must be >= 2, got {}", self.codebook_size));
        }
        Ok(())
    }

    pub fn levels(&self) -> usize {
        self.compression.trailing_zeros() as usize
    }

    pub fn latent_hw(&self) -> usize {
        self.image_size / self.compression
    }
}

/// Diagonal Gaussian over a latent grid; `logvar` is clamped to
/// `[-30, 20]` at construction so downstream exponentials stay finite.
#[derive(Debug, Clone)]
pub struct GaussianPosterior {
    pub mean: FeatureGrid,
    pub logvar: FeatureGrid,
}

pub const LOGVAR_MIN: f64 = -30.0;
pub const LOGVAR_MAX: f64 = 20.0;

impl GaussianPosterior {
    pub fn new(mean: FeatureGrid, logvar: FeatureGrid) -> Result<Self> {
        if mean.shape() != logvar.shape() {
            return config_err(format!(
                "posterior mean {:?} and logvar {:?} shapes differ",
                mean.shape(),
                logvar.shape()
            ));
        }
        let clamped = logvar.values().mapv(|v| v.clamp(LOGVAR_MIN, LOGVAR_MAX));
        Ok(Self { mean, logvar: FeatureGrid::new(clamped)? })
    }
}

/// Draws `mean + exp(logvar / 2) * eps`, `eps` standard normal.
pub fn reparameterize<R: Rng + ?Sized>(post: &GaussianPosterior, rng: &mut R) -> FeatureGrid {
    let eps = crate::nn::rng::normal_array(
        rng,
        &[post.mean.channels(), post.mean.height(), post.mean.width()],
    );
    let eps3 = eps.into_dimensionality::<ndarray::Ix3>().expect("3d eps");
    let mut out = post.mean.values().to_owned();
    ndarray::Zip::from(&mut out)
        .and(&post.logvar.values())
        .and(&eps3)
        .for_each(|o, &lv, &e| *o += (0.5 * lv).exp() * e);
    FeatureGrid::new(out).expect("reparameterized sample is finite")
}

/// Learned embedding table for the discrete latent path.
#[derive(Debug, Clone)]
pub struct Codebook {
    pub entries: Array2<f64>,
    pub usage_counts: Vec<u64>,
}

impl Codebook {
    pub fn new(entries: Array2<f64>) -> Result<Self> {
        if entries.dim().0 < 2 {
            return config_err("codebook needs at least 2 entries");
        }
        if !entries.iter().all(|v| v.is_finite()) {
            return Err(crate::Error::Numerical("codebook contains non-finite entries".into()));
        }
        let n = entries.dim().0;
        Ok(Self { entries, usage_counts: vec![0; n] })
    }

    pub fn size(&self) -> usize {
        self.entries.dim().0
    }

    pub fn dim(&self) -> usize {
        self.entries.dim().1
    }
}

#[derive(Debug, Clone)]
pub struct QuantizerOutput {
    pub quantized: FeatureGrid,
    pub indices: Array2<usize>,
    /// Mean squared distance between the input features and their
    /// selected entries.
    pub commitment_loss: f64,
}

/// Nearest codebook entry per spatial site (ties to the lowest index).
pub fn quantize(z: &FeatureGrid, cb: &Codebook) -> Result<QuantizerOutput> {
    if cb.size() == 0 {
        return config_err("empty codebook");
    }
    if z.channels() != cb.dim() {
        return config_err(format!(
            "feature channels {} do not match codebook dim {}",
            z.channels(),
            cb.dim()
        ));
    }
    let (c, h, w) = z.shape();
    let zv = z.values();
    let mut indices = Array2::<usize>::zeros((h, w));
    let mut quantized = Array3::<f64>::zeros((c, h, w));
    let mut sq_sum = 0.0;
    for r in 0..h {
        for col in 0..w {
            let mut best = 0usize;
            let mut best_d = f64::INFINITY;
            for k in 0..cb.size() {
                let mut d = 0.0;
                for ch in 0..c {
                    let diff = zv[(ch, r, col)] - cb.entries[(k, ch)];
                    d += diff * diff;
                }
                if d < best_d {
                    best_d = d;
                    best = k;
                }
            }
            indices[(r, col)] = best;
            sq_sum += best_d;
            for ch in 0..c {
                quantized[(ch, r, col)] = cb.entries[(best, ch)];
            }
        }
    }
    Ok(QuantizerOutput {
        quantized: FeatureGrid::new(quantized)?,
        indices,
        commitment_loss: sq_sum / (c * h * w) as f64,
    })
}

/// Encoder output: a posterior in continuous mode, raw pre-quantization
/// features in discrete mode.
#[derive(Debug, Clone)]
pub enum EncodedLatent {
    Posterior(GaussianPosterior),
    Features(FeatureGrid),
}

impl EncodedLatent {
    /// Deterministic-eval latent: the posterior mean, or the features.
    pub fn deterministic(&self) -> &FeatureGrid {
        match self {
            EncodedLatent::Posterior(p) => &p.mean,
            EncodedLatent::Features(f) => f,
        }
    }
}

pub(crate) enum EncodedVar {
    Posterior { mean: Var, logvar: Var },
    Features(Var),
}

/// Encoder/decoder pair plus (in discrete mode) the codebook.
pub struct AutoencoderModel {
    pub cfg: AutoencoderConfig,
    pub params: Params,
    enc: EncoderNet,
    dec: DecoderNet,
    pub codebook_ref: Option<PRef>,
    pub usage_counts: Vec<u64>,
}

impl AutoencoderModel {
    pub fn new(cfg: AutoencoderConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut params = Params::new();
        let levels = cfg.levels();
        let enc_out = match cfg.latent_mode {
            LatentMode::Continuous => 2 * cfg.latent_channels,
            LatentMode::Discrete => cfg.latent_channels,
        };
        let mut rng_e = split(seed, "model.encoder", 0);
        let enc = EncoderNet::new(&mut params, cfg.base_width, levels, enc_out, &mut rng_e);
        let mut rng_d = split(seed, "model.decoder", 0);
        let dec = DecoderNet::new(&mut params, cfg.base_width, levels, cfg.latent_channels, &mut rng_d);
        let codebook_ref = match cfg.latent_mode {
            LatentMode::Discrete => {
                let mut rng_c = split(seed, "model.codebook", 0);
                let init = crate::nn::rng::uniform_array(
                    &mut rng_c,
                    &[cfg.codebook_size, cfg.latent_channels],
                    -0.5,
                    0.5,
                );
                Some(params.add("codebook", init))
            }
            LatentMode::Continuous => None,
        };
        let usage_counts = vec![0; if codebook_ref.is_some() { cfg.codebook_size } else { 0 }];
        Ok(Self { cfg, params, enc, dec, codebook_ref, usage_counts })
    }

    fn check_encoder_input(&self, x: &FeatureGrid) -> Result<()> {
        x.expect_image(None)?;
        let f = self.cfg.compression;
        if x.height() % f != 0 || x.width() % f != 0 || x.height() < f || x.width() < f {
            return config_err(format!(
                "encoder input {}x{} must be a positive multiple of compression {f}",
                x.height(),
                x.width()
            ));
        }
        Ok(())
    }

    /// Taped encoder forward. `x` may be any size divisible by `f`.
    pub(crate) fn encode_var(&self, tape: &mut Tape, x: Var) -> EncodedVar {
        let h = self.enc.forward(tape, &self.params, x);
        match self.cfg.latent_mode {
            LatentMode::Continuous => {
                let c = self.cfg.latent_channels;
                let mean = tape.slice_channels(h, 0, c);
                let logvar_raw = tape.slice_channels(h, c, 2 * c);
                let logvar = tape.clamp(logvar_raw, LOGVAR_MIN, LOGVAR_MAX);
                EncodedVar::Posterior { mean, logvar }
            }
            LatentMode::Discrete => EncodedVar::Features(h),
        }
    }

    pub(crate) fn decode_var(&self, tape: &mut Tape, z: Var) -> Var {
        self.dec.forward(tape, &self.params, z)
    }

    /// Encodes an image. Deterministic: returns posterior parameters or
    /// pre-quantization features, never a sample.
    pub fn encode(&self, x: &FeatureGrid) -> Result<EncodedLatent> {
        self.check_encoder_input(x)?;
        let mut tape = Tape::new();
        let xv = tape.constant(x.values().to_owned().into_dyn());
        match self.encode_var(&mut tape, xv) {
            EncodedVar::Posterior { mean, logvar } => {
                let mean = grid_from_var(&tape, mean)?;
                let logvar = grid_from_var(&tape, logvar)?;
                Ok(EncodedLatent::Posterior(GaussianPosterior::new(mean, logvar)?))
            }
            EncodedVar::Features(f) => Ok(EncodedLatent::Features(grid_from_var(&tape, f)?)),
        }
    }

    /// Deterministic-eval latent of an image (posterior mean in
    /// continuous mode, pre-quantization features in discrete mode).
    pub fn encode_latent(&self, x: &FeatureGrid) -> Result<FeatureGrid> {
        Ok(self.encode(x)?.deterministic().clone())
    }

    /// Decodes a latent of any spatial size to an image `f` times larger.
    pub fn decode(&self, z: &FeatureGrid) -> Result<FeatureGrid> {
        if z.channels() != self.cfg.latent_channels {
            return config_err(format!(
                "latent channels {} do not match config {}",
                z.channels(),
                self.cfg.latent_channels
            ));
        }
        let mut tape = Tape::new();
        let zv = tape.constant(z.values().to_owned().into_dyn());
        let out = self.decode_var(&mut tape, zv);
        let img = grid_from_var(&tape, out)?;
        FeatureGrid::with_range(img.into_values(), Some((-1.0, 1.0)))
    }

    pub fn codebook(&self) -> Result<Codebook> {
        let pref = self
            .codebook_ref
            .ok_or_else(|| crate::Error::Config("model has no codebook (continuous mode)".into()))?;
        let entries = self
            .params
            .value(pref)
            .view()
            .into_dimensionality::<ndarray::Ix2>()
            .expect("codebook 2d")
            .to_owned();
        let mut cb = Codebook::new(entries)?;
        cb.usage_counts = self.usage_counts.clone();
        Ok(cb)
    }

    /// Taped quantization with a straight-through decode path.
    ///
    /// Returns `(q_st, indices, vq_reg, commitment_value)`: the decoder
    /// consumes `q_st` (gradients flow to the features unchanged), the
    /// codebook learns from `||sg(z) - e||^2`, and the encoder takes the
    /// commitment pull `0.25 * ||z - sg(e)||^2`.
    pub(crate) fn quantize_var(
        &self,
        tape: &mut Tape,
        z: Var,
    ) -> Result<(Var, Vec<usize>, Var, f64)> {
        let pref = self
            .codebook_ref
            .ok_or_else(|| crate::Error::Config("quantize_var needs discrete mode".into()))?;
        let zval = tape.value(z).clone();
        let z3 = zval.view().into_dimensionality::<ndarray::Ix3>().expect("latent 3d");
        let (c, h, w) = z3.dim();
        let cb = self.params.value(pref);
        let cb2 = cb.view().into_dimensionality::<ndarray::Ix2>().expect("codebook 2d");
        let k = cb2.dim().0;
        let mut indices = Vec::with_capacity(h * w);
        let mut sq_sum = 0.0;
        for r in 0..h {
            for col in 0..w {
                let mut best = 0usize;
                let mut best_d = f64::INFINITY;
                for ki in 0..k {
                    let mut d = 0.0;
                    for ch in 0..c {
                        let diff = z3[(ch, r, col)] - cb2[(ki, ch)];
                        d += diff * diff;
                    }
                    if d < best_d {
                        best_d = d;
                        best = ki;
                    }
                }
                indices.push(best);
                sq_sum += best_d;
            }
        }
        let commitment_value = sq_sum / (c * h * w) as f64;
        let idx = Arc::new(indices);
        let cb_var = tape.param(&self.params, pref);
        let q_hard = tape.codebook_gather(cb_var, Arc::clone(&idx), h, w);
        let z_sg = tape.detach(z);
        let q_sg = tape.detach(q_hard);
        let codebook_loss = tape.mse_mean(q_hard, z_sg);
        let commitment = tape.mse_mean(z, q_sg);
        let commitment_w = tape.scale(commitment, 0.25);
        let vq_reg = tape.add(codebook_loss, commitment_w);
        let diff = tape.sub(q_hard, z);
        let diff_sg = tape.detach(diff);
        let q_st = tape.add(z, diff_sg);
        let indices = Arc::try_unwrap(idx).unwrap_or_else(|a| (*a).clone());
        Ok((q_st, indices, vq_reg, commitment_value))
    }

    /// Records which codebook entries the given site indices touched.
    pub fn note_usage(&mut self, indices: &[usize]) {
        for &i in indices {
            if let Some(c) = self.usage_counts.get_mut(i) {
                *c += 1;
            }
        }
    }

    pub fn reset_usage(&mut self) {
        for c in &mut self.usage_counts {
            *c = 0;
        }
    }

    /// Re-seeds entries unused since the last reset to random site
    /// vectors drawn from `features`, and clears their Adam moments.
    /// Returns how many entries were re-seeded.
    pub fn reseed_dead_entries<R: Rng + ?Sized>(
        &mut self,
        features: &FeatureGrid,
        rng: &mut R,
    ) -> Result<usize> {
        let pref = self
            .codebook_ref
            .ok_or_else(|| crate::Error::Config("reseed needs discrete mode".into()))?;
        let (c, h, w) = features.shape();
        if c != self.cfg.latent_channels {
            return config_err("feature channels do not match codebook dim");
        }
        let dead: Vec<usize> = self
            .usage_counts
            .iter()
            .enumerate()
            .filter_map(|(i, &n)| (n == 0).then_some(i))
            .collect();
        for &entry in &dead {
            let site = rng.random_range(0..h * w);
            let (r, col) = (site / w, site % w);
            for ch in 0..c {
                let v = features.values()[(ch, r, col)];
                self.params.value_mut(pref)[[entry, ch]] = v;
                self.params.entries[pref.0].m[[entry, ch]] = 0.0;
                self.params.entries[pref.0].v[[entry, ch]] = 0.0;
            }
        }
        Ok(dead.len())
    }
}

fn grid_from_var(tape: &Tape, v: Var) -> Result<FeatureGrid> {
    let arr = tape
        .value(v)
        .view()
        .into_dimensionality::<ndarray::Ix3>()
        .map_err(|_| crate::Error::Config("expected 3d tape value".into()))?
        .to_owned();
    FeatureGrid::new(arr)
}

/// Patch discriminator with its own parameter set (it trains against the
/// autoencoder, never with it).
pub struct Discriminator {
    pub params: Params,
    net: DiscriminatorNet,
    pub width: usize,
}

impl Discriminator {
    pub fn new(width: usize, seed: u64) -> Self {
        let mut params = Params::new();
        let mut rng = split(seed, "model.discriminator", 0);
        let net = DiscriminatorNet::new(&mut params, width, &mut rng);
        Self { params, net, width }
    }

    pub(crate) fn forward_var(&self, tape: &mut Tape, x: Var) -> Var {
        self.net.forward(tape, &self.params, x)
    }

    /// Per-patch realness logits. Fully convolutional; inputs as small as
    /// [`DISC_MIN_INPUT`] on each axis are scorable.
    pub fn discriminate(&self, x: &FeatureGrid) -> Result<FeatureGrid> {
        x.expect_image(None)?;
        if x.height() < DISC_MIN_INPUT || x.width() < DISC_MIN_INPUT {
            return config_err(format!(
                "discriminator input {}x{} below minimum {}",
                x.height(),
                x.width(),
                DISC_MIN_INPUT
            ));
        }
        let mut tape = Tape::new();
        let xv = tape.constant(x.values().to_owned().into_dyn());
        let out = self.forward_var(&mut tape, xv);
        grid_from_var(&tape, out)
    }
}

/// Frozen feature extractor used by the perceptual loss, the Fréchet
/// proxy, and the reconstruction probes.
pub struct PerceptualExtractor {
    net: FeatureNet,
}

impl Default for PerceptualExtractor {
    fn default() -> Self {
        Self::fixed()
    }
}

impl PerceptualExtractor {
    pub fn fixed() -> Self {
        Self { net: FeatureNet::fixed() }
    }

    pub(crate) fn forward_var(&self, tape: &mut Tape, x: Var) -> Var {
        self.net.forward(tape, x)
    }

    pub fn feature_map(&self, x: &FeatureGrid) -> Result<FeatureGrid> {
        x.expect_image(None)?;
        if x.height() < self.net.min_input() || x.width() < self.net.min_input() {
            return config_err(format!(
                "feature extractor input {}x{} below minimum {}",
                x.height(),
                x.width(),
                self.net.min_input()
            ));
        }
        let mut tape = Tape::new();
        let xv = tape.constant(x.values().to_owned().into_dyn());
        let out = self.forward_var(&mut tape, xv);
        grid_from_var(&tape, out)
    }

    /// Globally average-pooled feature vector (length [`FEATURE_DIM`]).
    pub fn pooled(&self, x: &FeatureGrid) -> Result<Array1<f64>> {
        let map = self.feature_map(x)?;
        let (c, h, w) = map.shape();
        let mv = map.values();
        let mut out = Array1::zeros(c);
        for ch in 0..c {
            out[ch] = mv.index_axis(ndarray::Axis(0), ch).sum() / (h * w) as f64;
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::rng::split;
    use ndarray::Array3;

    fn small_cfg() -> AutoencoderConfig {
        AutoencoderConfig {
            image_size: 16,
            compression: 4,
            latent_channels: 3,
            base_width: 8,
            latent_mode: LatentMode::Continuous,
            codebook_size: 8,
        }
    }

    fn random_image(size: usize, seed: u64) -> FeatureGrid {
        let mut rng = split(seed, "test-image", 0);
        let arr = crate::nn::rng::uniform_array(&mut rng, &[3, size, size], -1.0, 1.0);
        FeatureGrid::with_range(arr.into_dimensionality().unwrap(), Some((-1.0, 1.0))).unwrap()
    }

    #[test]
    fn encode_shape_law_and_determinism() {
        let model = AutoencoderModel::new(small_cfg(), 1).unwrap();
        let x = random_image(16, 2);
        let EncodedLatent::Posterior(p) = model.encode(&x).unwrap() else {
            panic!("continuous mode returns a posterior")
        };
        assert_eq!(p.mean.shape(), (3, 4, 4));
        assert_eq!(p.logvar.shape(), (3, 4, 4));
        let again = model.encode(&x).unwrap();
        assert_eq!(again.deterministic(), &p.mean);
    }

    #[test]
    fn encode_rejects_bad_shapes() {
        let model = AutoencoderModel::new(small_cfg(), 1).unwrap();
        let bad = FeatureGrid::constant(3, 15, 16, 0.0).unwrap();
        assert!(model.encode(&bad).is_err());
        let bad_ch = FeatureGrid::constant(1, 16, 16, 0.0).unwrap();
        assert!(model.encode(&bad_ch).is_err());
        // A non-finite pixel cannot even enter a FeatureGrid.
        let mut arr = Array3::zeros((3, 16, 16));
        arr[(0, 0, 0)] = f64::NAN;
        assert!(FeatureGrid::new(arr).is_err());
    }

    #[test]
    fn decode_shape_laws_and_range() {
        let model = AutoencoderModel::new(small_cfg(), 3).unwrap();
        let z = FeatureGrid::constant(3, 4, 4, 0.3).unwrap();
        let img = model.decode(&z).unwrap();
        assert_eq!(img.shape(), (3, 16, 16));
        // Fully convolutional: a transformed, half-size latent decodes too.
        let z_half = FeatureGrid::constant(3, 2, 2, 0.3).unwrap();
        let img_half = model.decode(&z_half).unwrap();
        assert_eq!(img_half.shape(), (3, 8, 8));
        assert!(img.values().iter().all(|v| (-1.0..=1.0).contains(v)));
        let wrong = FeatureGrid::constant(2, 4, 4, 0.0).unwrap();
        assert!(model.decode(&wrong).is_err());
    }

    #[test]
    fn shape_round_trip() {
        for (size, f) in [(16, 4), (16, 2), (32, 8)] {
            let cfg = AutoencoderConfig { image_size: size, compression: f, ..small_cfg() };
            let model = AutoencoderModel::new(cfg, 5).unwrap();
            let x = random_image(size, 6);
            let z = model.encode_latent(&x).unwrap();
            assert_eq!(z.shape(), (3, size / f, size / f));
            let xh = model.decode(&z).unwrap();
            assert_eq!(xh.shape(), x.shape());
        }
    }

    #[test]
    fn reparameterize_collapses_at_tiny_variance() {
        let mean = FeatureGrid::constant(2, 3, 3, 0.7).unwrap();
        let logvar = FeatureGrid::constant(2, 3, 3, -30.0).unwrap();
        let post = GaussianPosterior::new(mean.clone(), logvar).unwrap();
        let mut rng = split(0, "rep", 0);
        let z = reparameterize(&post, &mut rng);
        for (a, b) in z.values().iter().zip(mean.values().iter()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn reparameterize_unit_variance_chi_square_band() {
        // Chi-square concentration: the sample variance of 10_000 standard
        // normals lands in [0.9, 1.1] with overwhelming probability.
        let mean = FeatureGrid::constant(1, 1, 1, 0.0).unwrap();
        let logvar = FeatureGrid::constant(1, 1, 1, 0.0).unwrap();
        let post = GaussianPosterior::new(mean, logvar).unwrap();
        let mut rng = split(42, "rep-var", 0);
        let n = 10_000;
        let draws: Vec<f64> = (0..n)
            .map(|_| reparameterize(&post, &mut rng).values()[(0, 0, 0)])
            .collect();
        let m = draws.iter().sum::<f64>() / n as f64;
        let var = draws.iter().map(|d| (d - m) * (d - m)).sum::<f64>() / (n - 1) as f64;
        assert!((0.9..=1.1).contains(&var), "sample variance {var}");
    }

    #[test]
    fn reparameterize_is_seed_reproducible() {
        let mean = FeatureGrid::constant(2, 2, 2, 0.1).unwrap();
        let logvar = FeatureGrid::constant(2, 2, 2, 0.5).unwrap();
        let post = GaussianPosterior::new(mean, logvar).unwrap();
        let a = reparameterize(&post, &mut split(9, "r", 0));
        let b = reparameterize(&post, &mut split(9, "r", 0));
        assert_eq!(a, b);
    }

    #[test]
    fn logvar_clamped_into_band() {
        let mean = FeatureGrid::constant(1, 1, 1, 0.0).unwrap();
        let logvar = FeatureGrid::constant(1, 1, 1, 500.0).unwrap();
        let post = GaussianPosterior::new(mean, logvar).unwrap();
        assert_eq!(post.logvar.values()[(0, 0, 0)], LOGVAR_MAX);
    }

    #[test]
    fn quantize_examples() {
        // Exact match on entry 3.
        let mut entries = Array2::zeros((6, 2));
        for k in 0..6 {
            entries[(k, 0)] = k as f64;
            entries[(k, 1)] = -(k as f64);
        }
        let cb = Codebook::new(entries).unwrap();
        let mut z = Array3::zeros((2, 2, 2));
        z.index_axis_mut(ndarray::Axis(0), 0).fill(3.0);
        z.index_axis_mut(ndarray::Axis(0), 1).fill(-3.0);
        let out = quantize(&FeatureGrid::new(z).unwrap(), &cb).unwrap();
        assert!(out.indices.iter().all(|&i| i == 3));
        assert_eq!(out.commitment_loss, 0.0);

        // Brute-force nearest over a 2-entry codebook.
        let entries = ndarray::array![[0.0, 0.0], [1.0, 1.0]];
        let cb = Codebook::new(entries).unwrap();
        let z = Array3::from_shape_fn((2, 1, 1), |_| 0.4);
        let out = quantize(&FeatureGrid::new(z).unwrap(), &cb).unwrap();
        assert_eq!(out.indices[(0, 0)], 0, "0.4 is closer to (0,0) than (1,1)");
    }

    #[test]
    fn quantize_tie_breaks_to_lowest_index() {
        // Equidistant between entries 1 (at 1.0) and 5 (at -1.0).
        let mut entries = Array2::from_elem((6, 1), 99.0);
        entries[(1, 0)] = 1.0;
        entries[(5, 0)] = -1.0;
        let cb = Codebook::new(entries).unwrap();
        let z = Array3::from_elem((1, 1, 1), 0.0);
        let out = quantize(&FeatureGrid::new(z).unwrap(), &cb).unwrap();
        assert_eq!(out.indices[(0, 0)], 1);
    }

    #[test]
    fn quantizer_idempotence_and_bit_equality() {
        let mut rng = split(17, "cbtest", 0);
        let entries = crate::nn::rng::normal_array(&mut rng, &[8, 3])
            .into_dimensionality::<ndarray::Ix2>()
            .unwrap();
        let cb = Codebook::new(entries).unwrap();
        let z = FeatureGrid::new(
            crate::nn::rng::normal_array(&mut rng, &[3, 4, 4]).into_dimensionality().unwrap(),
        )
        .unwrap();
        let out = quantize(&z, &cb).unwrap();
        for r in 0..4 {
            for col in 0..4 {
                let k = out.indices[(r, col)];
                for ch in 0..3 {
                    assert_eq!(out.quantized.values()[(ch, r, col)], cb.entries[(k, ch)]);
                }
            }
        }
        let again = quantize(&out.quantized, &cb).unwrap();
        assert_eq!(again.quantized, out.quantized);
        assert_eq!(again.commitment_loss, 0.0);
    }

    #[test]
    fn straight_through_gradient_contract() {
        // dL/dz must equal dL/dq at 5 random coordinates, rel err < 1e-3,
        // checked against central finite differences of the quantized loss.
        let cfg = AutoencoderConfig {
            latent_mode: LatentMode::Discrete,
            image_size: 16,
            compression: 4,
            latent_channels: 2,
            base_width: 8,
            codebook_size: 4,
        };
        let model = AutoencoderModel::new(cfg, 21).unwrap();
        let mut rng = split(23, "st", 0);
        let z0 = crate::nn::rng::normal_array(&mut rng, &[2, 3, 3]);
        let weights = crate::nn::rng::normal_array(&mut rng, &[2, 3, 3]);

        // L = sum(q * w) + 0.5 * sum(q^2) on the straight-through grid.
        let mut tape = Tape::new();
        let zv = tape.watch(z0.clone());
        let (q_st, _, _, _) = model.quantize_var(&mut tape, zv).unwrap();
        let q_val = tape.value(q_st).clone();
        let wv = tape.constant(weights.clone());
        let lin = tape.mul(q_st, wv);
        let lin_sum = tape.sum_all(lin);
        let sq = tape.mul(q_st, q_st);
        let sq_sum = tape.sum_all(sq);
        let sq_half = tape.scale(sq_sum, 0.5);
        let loss = tape.add(lin_sum, sq_half);
        let grads = tape.backward(loss);
        let gz = grads.of(zv).unwrap().clone();

        // Finite differences on the quantized grid itself: the contract is
        // that z receives exactly dL/d(quantized).
        let loss_at = |q: &ndarray::ArrayD<f64>| -> f64 {
            q.iter()
                .zip(weights.iter())
                .map(|(qi, wi)| qi * wi + 0.5 * qi * qi)
                .sum()
        };
        let mut pick = split(29, "coords", 0);
        for _ in 0..5 {
            let i = pick.random_range(0..z0.len());
            let mut qp = q_val.clone();
            let mut qm = q_val.clone();
            let eps = 1e-5;
            qp.as_slice_mut().unwrap()[i] += eps;
            qm.as_slice_mut().unwrap()[i] -= eps;
            let fd = (loss_at(&qp) - loss_at(&qm)) / (2.0 * eps);
            let an = gz.as_slice().unwrap()[i];
            let denom = fd.abs().max(an.abs()).max(1e-9);
            assert!(
                (fd - an).abs() / denom < 1e-3,
                "straight-through grad mismatch: fd {fd} vs {an}"
            );
        }
    }

    #[test]
    fn discriminator_shapes_and_determinism() {
        let disc = Discriminator::new(8, 31);
        let x = random_image(16, 33);
        let logits = disc.discriminate(&x).unwrap();
        assert_eq!(logits.channels(), 1);
        assert!(logits.height() >= 1 && logits.width() >= 1);
        let small = random_image(8, 34);
        let logits_small = disc.discriminate(&small).unwrap();
        assert!(logits_small.height() >= 1);
        assert_eq!(disc.discriminate(&x).unwrap(), logits);
        let tiny = random_image(2, 35);
        assert!(disc.discriminate(&tiny).is_err());
    }

    #[test]
    fn dead_codebook_entries_reseed() {
        let cfg = AutoencoderConfig {
            latent_mode: LatentMode::Discrete,
            image_size: 16,
            compression: 4,
            latent_channels: 2,
            base_width: 8,
            codebook_size: 4,
        };
        let mut model = AutoencoderModel::new(cfg, 41).unwrap();
        model.note_usage(&[0, 0, 2]);
        let feats = FeatureGrid::constant(2, 2, 2, 0.123).unwrap();
        let mut rng = split(43, "reseed", 0);
        let n = model.reseed_dead_entries(&feats, &mut rng).unwrap();
        assert_eq!(n, 2);
        let cb = model.codebook().unwrap();
        assert_eq!(cb.entries[(1, 0)], 0.123);
        assert_eq!(cb.entries[(3, 1)], 0.123);
    }

    #[test]
    fn pooled_features_have_declared_dim() {
        let feat = PerceptualExtractor::fixed();
        let x = random_image(16, 51);
        let v = feat.pooled(&x).unwrap();
        assert_eq!(v.len(), FEATURE_DIM);
        // Fixed seed: two extractors agree.
        let feat2 = PerceptualExtractor::fixed();
        assert_eq!(feat2.pooled(&x).unwrap(), v);
    }
}
