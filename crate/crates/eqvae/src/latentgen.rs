//! Toy latent denoising-diffusion model.
//!
//! A small FiLM-conditioned conv net learns to predict the noise mixed
//! into autoencoder latents under a linear variance schedule; ancestral
//! sampling plus the frozen decoder then turns the learned latent
//! distribution back into images, scored against held-out real images
//! with the Fréchet feature proxy. The point is comparative: the same
//! denoiser budget on two latent spaces measures which one is easier to
//! model.

use ndarray::{Array1, Array3};
use rand::Rng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};
use std::io::{Read, Write};
use std::path::Path;

use crate::autoencoder::{AutoencoderModel, PerceptualExtractor};
use crate::error::{config_err, data_err, Error, Result};
use crate::grid::FeatureGrid;
use crate::nn::layers::{Conv2d, GroupNorm, Linear};
use crate::nn::rng::split;
use crate::nn::{Adam, Params, Tape, Var};
use crate::probes::{frechet_distance, FrechetStats};

/// Linear variance schedule with cumulative products; `alpha_bars[0]` is
/// defined as 1 so step 0 returns the clean signal.
#[derive(Debug, Clone)]
pub struct NoiseSchedule {
    pub t_steps: usize,
    pub betas: Vec<f64>,
    pub alpha_bars: Vec<f64>,
}

impl NoiseSchedule {
    /// Linear schedule matching the usual 1e-4..0.02 range at 1000 steps;
    /// shorter schedules scale the increments so the endpoint noise level
    /// stays comparable.
    pub fn linear(t_steps: usize) -> Result<Self> {
        if t_steps < 2 {
            return config_err("schedule needs at least 2 steps");
        }
        let k = 1000.0 / t_steps as f64;
        let start = (1e-4 * k).min(0.5);
        let end = (0.02 * k).min(0.999);
        let betas: Vec<f64> = (0..t_steps)
            .map(|i| start + (end - start) * i as f64 / (t_steps - 1) as f64)
            .collect();
        let mut alpha_bars = Vec::with_capacity(t_steps + 1);
        alpha_bars.push(1.0);
        let mut acc = 1.0;
        for b in &betas {
            acc *= 1.0 - b;
            alpha_bars.push(acc);
        }
        let s = Self { t_steps, betas, alpha_bars };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if self.betas.len() != self.t_steps || self.alpha_bars.len() != self.t_steps + 1 {
            return config_err("schedule length mismatch");
        }
        let ascending = self.betas.windows(2).all(|w| w[0] <= w[1]);
        if !ascending || self.betas.iter().any(|b| *b <= 0.0 || *b >= 1.0) {
            return config_err("betas must be ascending inside (0, 1)");
        }
        if self.alpha_bars[0] != 1.0 {
            return config_err("alpha_bar at step 0 must be 1");
        }
        if !self.alpha_bars.windows(2).all(|w| w[1] < w[0]) {
            return config_err("alpha_bars must be strictly decreasing");
        }
        Ok(())
    }

    pub fn alpha_bar(&self, t: usize) -> Result<f64> {
        self.alpha_bars
            .get(t)
            .copied()
            .ok_or_else(|| Error::Config(format!("step {t} outside schedule 0..={}", self.t_steps)))
    }
}

/// `sqrt(abar_t) * z0 + sqrt(1 - abar_t) * noise`.
pub fn diffusion_forward(
    z0: &FeatureGrid,
    t: usize,
    noise: &FeatureGrid,
    sched: &NoiseSchedule,
) -> Result<FeatureGrid> {
    if z0.shape() != noise.shape() {
        return config_err("noise shape must match the latent");
    }
    let ab = sched.alpha_bar(t)?;
    let (sa, sn) = (ab.sqrt(), (1.0 - ab).sqrt());
    let mut out = z0.values().to_owned();
    ndarray::Zip::from(&mut out)
        .and(&noise.values())
        .for_each(|o, &e| *o = sa * *o + sn * e);
    FeatureGrid::new(out)
}

/// Normalized latents of a frozen autoencoder plus the scalar that undoes
/// the normalization at decode time.
#[derive(Debug, Clone)]
pub struct LatentDataset {
    pub latents: Vec<FeatureGrid>,
    pub scale_factor: f64,
    pub source_checkpoint: String,
    pub per_channel_std: Vec<f64>,
}

#[derive(Debug, Serialize, Deserialize)]
struct LatentMeta {
    count: usize,
    channels: usize,
    height: usize,
    width: usize,
    scale_factor: f64,
    source_checkpoint: String,
    per_channel_std: Vec<f64>,
}

impl LatentDataset {
    /// Normalizes raw latents to unit global standard deviation.
    ///
    /// Channel balance is recorded (and warned about) rather than
    /// enforced: a healthy latent space keeps every per-channel standard
    /// deviation inside [0.8, 1.2] after scaling, but a single scalar
    /// factor cannot make that true by construction — call
    /// [`LatentDataset::channel_balance`] for the hard check.
    pub fn from_raw(raw: Vec<FeatureGrid>, source_checkpoint: impl Into<String>) -> Result<Self> {
        if raw.is_empty() {
            return data_err("latent dataset is empty");
        }
        let shape = raw[0].shape();
        if raw.iter().any(|l| l.shape() != shape) {
            return data_err("latents have mixed shapes");
        }
        let (c, _, _) = shape;
        let mut sum = 0.0;
        let mut sum_sq = 0.0;
        let mut n = 0usize;
        let mut ch_sum = vec![0.0f64; c];
        let mut ch_sum_sq = vec![0.0f64; c];
        let mut ch_n = vec![0usize; c];
        for l in &raw {
            for ch in 0..c {
                for &v in l.values().index_axis(ndarray::Axis(0), ch).iter() {
                    sum += v;
                    sum_sq += v * v;
                    n += 1;
                    ch_sum[ch] += v;
                    ch_sum_sq[ch] += v * v;
                    ch_n[ch] += 1;
                }
            }
        }
        let mean = sum / n as f64;
        let var = sum_sq / n as f64 - mean * mean;
        if var <= 0.0 {
            return Err(Error::Numerical("latents have zero variance".into()));
        }
        let scale_factor = 1.0 / var.sqrt();
        let per_channel_std: Vec<f64> = (0..c)
            .map(|ch| {
                let m = ch_sum[ch] / ch_n[ch] as f64;
                ((ch_sum_sq[ch] / ch_n[ch] as f64 - m * m).max(0.0)).sqrt() * scale_factor
            })
            .collect();
        for (ch, sd) in per_channel_std.iter().enumerate() {
            if !(0.8..=1.2).contains(sd) {
                eprintln!(
                    "warning: latent channel {ch} std {sd:.3} outside [0.8, 1.2] after global \
                     scaling (all: {per_channel_std:?})"
                );
            }
        }
        let latents = raw
            .into_iter()
            .map(|l| FeatureGrid::new(l.values().mapv(|v| v * scale_factor)))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            latents,
            scale_factor,
            source_checkpoint: source_checkpoint.into(),
            per_channel_std,
        })
    }

    pub fn latent_shape(&self) -> (usize, usize, usize) {
        self.latents[0].shape()
    }

    /// Errors unless every per-channel standard deviation ended up inside
    /// [0.8, 1.2] after the global scaling.
    pub fn channel_balance(&self) -> Result<()> {
        for (ch, sd) in self.per_channel_std.iter().enumerate() {
            if !(0.8..=1.2).contains(sd) {
                return Err(Error::Numerical(format!(
                    "channel {ch} std {sd:.3} outside [0.8, 1.2] after global scaling; \
                     channel stds: {:?}",
                    self.per_channel_std
                )));
            }
        }
        Ok(())
    }

    /// Binary array file plus a JSON metadata document.
    pub fn save(&self, bin_path: &Path, meta_path: &Path) -> Result<()> {
        let (c, h, w) = self.latent_shape();
        let meta = LatentMeta {
            count: self.latents.len(),
            channels: c,
            height: h,
            width: w,
            scale_factor: self.scale_factor,
            source_checkpoint: self.source_checkpoint.clone(),
            per_channel_std: self.per_channel_std.clone(),
        };
        if let Some(p) = bin_path.parent() {
            std::fs::create_dir_all(p)?;
        }
        let mut f = std::io::BufWriter::new(std::fs::File::create(bin_path)?);
        for l in &self.latents {
            for &v in l.values().iter() {
                f.write_all(&v.to_le_bytes())?;
            }
        }
        f.flush()?;
        std::fs::write(meta_path, serde_json::to_string_pretty(&meta).map_err(|e| Error::Data(e.to_string()))?)?;
        Ok(())
    }

    pub fn load(bin_path: &Path, meta_path: &Path) -> Result<Self> {
        let meta: LatentMeta = serde_json::from_str(
            &std::fs::read_to_string(meta_path)
                .map_err(|e| Error::Data(format!("read {}: {e}", meta_path.display())))?,
        )
        .map_err(|e| Error::Data(format!("latent metadata: {e}")))?;
        let mut f = std::io::BufReader::new(
            std::fs::File::open(bin_path)
                .map_err(|e| Error::Data(format!("open {}: {e}", bin_path.display())))?,
        );
        let per = meta.channels * meta.height * meta.width;
        let mut latents = Vec::with_capacity(meta.count);
        for _ in 0..meta.count {
            let mut buf = vec![0u8; per * 8];
            f.read_exact(&mut buf)?;
            let vals: Vec<f64> = buf
                .chunks_exact(8)
                .map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")))
                .collect();
            latents.push(FeatureGrid::new(
                Array3::from_shape_vec((meta.channels, meta.height, meta.width), vals)
                    .map_err(|e| Error::Data(e.to_string()))?,
            )?);
        }
        Ok(Self {
            latents,
            scale_factor: meta.scale_factor,
            source_checkpoint: meta.source_checkpoint,
            per_channel_std: meta.per_channel_std,
        })
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct LatentGenConfig {
    /// Diffusion steps in the schedule.
    pub t_steps: usize,
    pub width: usize,
    pub blocks: usize,
    pub t_embed_dim: usize,
    pub train_steps: u64,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for LatentGenConfig {
    fn default() -> Self {
        Self {
            t_steps: 1000,
            width: 32,
            blocks: 2,
            t_embed_dim: 32,
            train_steps: 20_000,
            batch_size: 16,
            lr: 2e-4,
            seed: 0,
        }
    }
}

impl LatentGenConfig {
    pub fn validate(&self) -> Result<()> {
        if self.t_embed_dim % 2 != 0 || self.t_embed_dim == 0 {
            return config_err("t_embed_dim must be a positive even number");
        }
        if self.width == 0 || self.blocks == 0 || self.batch_size == 0 {
            return config_err("width, blocks, and batch_size must be positive");
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return config_err("lr must be positive");
        }
        Ok(())
    }
}

/// Anything that predicts the noise content of a latent at a given step.
pub trait EpsilonModel {
    fn predict_noise(&self, z_t: &Array3<f64>, t: usize) -> Array3<f64>;
}

impl<F> EpsilonModel for F
where
    F: Fn(&Array3<f64>, usize) -> Array3<f64>,
{
    fn predict_noise(&self, z_t: &Array3<f64>, t: usize) -> Array3<f64> {
        self(z_t, t)
    }
}

struct FilmBlock {
    gn: GroupNorm,
    conv1: Conv2d,
    film: Linear,
    conv2: Conv2d,
}

/// FiLM-conditioned residual conv denoiser over latent grids.
pub struct DenoiserModel {
    pub cfg: LatentGenConfig,
    pub latent_channels: usize,
    pub params: Params,
    conv_in: Conv2d,
    blocks: Vec<FilmBlock>,
    t_mlp1: Linear,
    t_mlp2: Linear,
    head_gn: GroupNorm,
    head: Conv2d,
}

impl DenoiserModel {
    pub fn new(cfg: LatentGenConfig, latent_channels: usize, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut params = Params::new();
        let mut rng = split(seed, "denoiser", 0);
        let w = cfg.width;
        let e = cfg.t_embed_dim;
        let conv_in = Conv2d::new(&mut params, "den.conv_in", latent_channels, w, 3, 1, 1, &mut rng);
        let t_mlp1 = Linear::new(&mut params, "den.temb1", e, e, &mut rng);
        let t_mlp2 = Linear::new(&mut params, "den.temb2", e, e, &mut rng);
        let mut blocks = Vec::new();
        for i in 0..cfg.blocks {
            blocks.push(FilmBlock {
                gn: GroupNorm::new(&mut params, &format!("den.b{i}.gn"), w),
                conv1: Conv2d::new(&mut params, &format!("den.b{i}.conv1"), w, w, 3, 1, 1, &mut rng),
                film: Linear::new(&mut params, &format!("den.b{i}.film"), e, 2 * w, &mut rng),
                conv2: Conv2d::new(&mut params, &format!("den.b{i}.conv2"), w, w, 3, 1, 1, &mut rng),
            });
        }
        let head_gn = GroupNorm::new(&mut params, "den.head_gn", w);
        let head = Conv2d::new(&mut params, "den.head", w, latent_channels, 3, 1, 1, &mut rng);
        Ok(Self {
            cfg,
            latent_channels,
            params,
            conv_in,
            blocks,
            t_mlp1,
            t_mlp2,
            head_gn,
            head,
        })
    }

    fn time_embedding(&self, t: usize) -> Array1<f64> {
        let e = self.cfg.t_embed_dim;
        let half = e / 2;
        let mut out = Array1::<f64>::zeros(e);
        for k in 0..half {
            let freq = (10_000f64).powf(-(k as f64) / half as f64);
            out[2 * k] = (t as f64 * freq).sin();
            out[2 * k + 1] = (t as f64 * freq).cos();
        }
        out
    }

    pub(crate) fn forward_var(&self, tape: &mut Tape, z_t: Var, t: usize) -> Var {
        let emb = tape.constant(self.time_embedding(t).into_dyn());
        let h1 = self.t_mlp1.forward(tape, &self.params, emb);
        let h1 = tape.silu(h1);
        let temb = self.t_mlp2.forward(tape, &self.params, h1);
        let temb = tape.silu(temb);

        let mut h = self.conv_in.forward(tape, &self.params, z_t);
        let w = self.cfg.width;
        for b in &self.blocks {
            let skip = h;
            let mut x = b.gn.forward(tape, &self.params, h);
            x = tape.silu(x);
            x = b.conv1.forward(tape, &self.params, x);
            let film = b.film.forward(tape, &self.params, temb);
            let scale = tape.slice_vec(film, 0, w);
            let shift = tape.slice_vec(film, w, 2 * w);
            x = tape.channel_film(x, scale, shift);
            x = tape.silu(x);
            x = b.conv2.forward(tape, &self.params, x);
            h = tape.add(skip, x);
        }
        let mut out = self.head_gn.forward(tape, &self.params, h);
        out = tape.silu(out);
        self.head.forward(tape, &self.params, out)
    }
}

impl EpsilonModel for DenoiserModel {
    fn predict_noise(&self, z_t: &Array3<f64>, t: usize) -> Array3<f64> {
        let mut tape = Tape::new();
        let zv = tape.constant(z_t.clone().into_dyn());
        let out = self.forward_var(&mut tape, zv, t);
        tape.value(out)
            .view()
            .into_dimensionality::<ndarray::Ix3>()
            .expect("3d prediction")
            .to_owned()
    }
}

const DENOISER_TAG: &str = "eqvae-denoiser-v1";

#[derive(Serialize, Deserialize)]
struct DenoiserHeader {
    format: String,
    cfg: LatentGenConfig,
    latent_channels: usize,
    arrays: Vec<(String, Vec<usize>)>,
}

/// Saves a trained denoiser (config + parameter arrays).
pub fn save_denoiser(path: &Path, model: &DenoiserModel) -> Result<()> {
    let mut arrays = Vec::new();
    let mut blob: Vec<f64> = Vec::new();
    for p in model.params.iter_refs() {
        let v = model.params.value(p);
        arrays.push((model.params.name(p).to_string(), v.shape().to_vec()));
        blob.extend(v.iter().copied());
    }
    let header = DenoiserHeader {
        format: DENOISER_TAG.to_string(),
        cfg: model.cfg.clone(),
        latent_channels: model.latent_channels,
        arrays,
    };
    let header_bytes = serde_json::to_vec(&header).map_err(|e| Error::Data(e.to_string()))?;
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    w.write_all(DENOISER_TAG.as_bytes())?;
    w.write_all(b"\n")?;
    w.write_all(&(header_bytes.len() as u64).to_le_bytes())?;
    w.write_all(&header_bytes)?;
    for v in &blob {
        w.write_all(&v.to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

/// Loads a denoiser and rebuilds its schedule from the stored config.
pub fn load_denoiser(path: &Path) -> Result<(DenoiserModel, NoiseSchedule)> {
    let mut r = std::io::BufReader::new(
        std::fs::File::open(path).map_err(|e| Error::Data(format!("open {}: {e}", path.display())))?,
    );
    let mut tag = vec![0u8; DENOISER_TAG.len() + 1];
    r.read_exact(&mut tag)?;
    if &tag[..DENOISER_TAG.len()] != DENOISER_TAG.as_bytes() {
        return data_err(format!("{} is not a {DENOISER_TAG} archive", path.display()));
    }
    let mut len_bytes = [0u8; 8];
    r.read_exact(&mut len_bytes)?;
    let mut header_bytes = vec![0u8; u64::from_le_bytes(len_bytes) as usize];
    r.read_exact(&mut header_bytes)?;
    let header: DenoiserHeader =
        serde_json::from_slice(&header_bytes).map_err(|e| Error::Data(e.to_string()))?;
    if header.format != DENOISER_TAG {
        return data_err(format!("unsupported denoiser format {}", header.format));
    }
    let mut model = DenoiserModel::new(header.cfg.clone(), header.latent_channels, 0)?;
    for (name, shape) in &header.arrays {
        let count: usize = shape.iter().product();
        let mut buf = vec![0u8; count * 8];
        r.read_exact(&mut buf)?;
        let data: Vec<f64> = buf
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        let arr = ndarray::ArrayD::from_shape_vec(shape.clone(), data)
            .map_err(|e| Error::Data(e.to_string()))?;
        let zeros = ndarray::ArrayD::zeros(arr.raw_dim());
        model.params.restore(name, arr, zeros.clone(), zeros)?;
    }
    let sched = NoiseSchedule::linear(header.cfg.t_steps)?;
    Ok((model, sched))
}

/// Trains a noise-prediction denoiser on a prepared latent dataset.
/// Returns the model and the per-step training losses.
pub fn train_latent_denoiser(
    data: &LatentDataset,
    cfg: &LatentGenConfig,
) -> Result<(DenoiserModel, NoiseSchedule, Vec<f64>)> {
    cfg.validate()?;
    let sched = NoiseSchedule::linear(cfg.t_steps)?;
    let (c, _, _) = data.latent_shape();
    let mut model = DenoiserModel::new(cfg.clone(), c, cfg.seed)?;
    let mut opt = Adam::new(cfg.lr);
    let mut rng = split(cfg.seed, "denoiser-train", 0);
    let mut losses = Vec::with_capacity(cfg.train_steps as usize);
    for _step in 0..cfg.train_steps {
        model.params.zero_grads();
        let mut batch_loss = 0.0;
        for _ in 0..cfg.batch_size {
            let idx = rng.random_range(0..data.latents.len());
            let z0 = &data.latents[idx];
            let t = rng.random_range(1..=sched.t_steps);
            let shape = [z0.channels(), z0.height(), z0.width()];
            let noise = crate::nn::rng::normal_array(&mut rng, &shape);
            let ab = sched.alpha_bar(t)?;
            let z_t = z0.values().mapv(|v| ab.sqrt() * v)
                + &noise.view().into_dimensionality::<ndarray::Ix3>().expect("3d").mapv(|e| (1.0 - ab).sqrt() * e);

            let mut tape = Tape::new();
            let ztv = tape.constant(z_t.into_dyn());
            let pred = model.forward_var(&mut tape, ztv, t);
            let target = tape.constant(noise);
            let loss = tape.mse_mean(pred, target);
            batch_loss += tape.scalar(loss);
            let grads = tape.backward(loss).into_accum();
            model.params.accumulate(&grads, 1.0 / cfg.batch_size as f64);
        }
        losses.push(batch_loss / cfg.batch_size as f64);
        opt.step(&mut model.params);
    }
    Ok((model, sched, losses))
}

/// Ancestral sampling of `n` latents of the given shape.
pub fn sample_latents<M: EpsilonModel>(
    model: &M,
    sched: &NoiseSchedule,
    n: usize,
    shape: (usize, usize, usize),
    rng: &mut ChaCha12Rng,
) -> Result<Vec<Array3<f64>>> {
    sched.validate()?;
    let dims = [shape.0, shape.1, shape.2];
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let mut z = crate::nn::rng::normal_array(rng, &dims)
            .into_dimensionality::<ndarray::Ix3>()
            .expect("3d");
        for t in (1..=sched.t_steps).rev() {
            let beta = sched.betas[t - 1];
            let alpha = 1.0 - beta;
            let ab_t = sched.alpha_bars[t];
            let ab_prev = sched.alpha_bars[t - 1];
            let eps_hat = model.predict_noise(&z, t);
            let coef = beta / (1.0 - ab_t).sqrt();
            let mut mean = (&z - &eps_hat.mapv(|e| coef * e)).mapv(|v| v / alpha.sqrt());
            if t > 1 {
                let sigma = ((1.0 - ab_prev) / (1.0 - ab_t) * beta).sqrt();
                let xi = crate::nn::rng::normal_array(rng, &dims)
                    .into_dimensionality::<ndarray::Ix3>()
                    .expect("3d");
                mean += &xi.mapv(|x| sigma * x);
            }
            z = mean;
        }
        out.push(z);
    }
    Ok(out)
}

/// Gaussian feature summary of a set of real images.
pub fn image_feature_stats(images: &[FeatureGrid], feat: &PerceptualExtractor) -> Result<FrechetStats> {
    let rows = images
        .iter()
        .map(|x| feat.pooled(x))
        .collect::<Result<Vec<_>>>()?;
    FrechetStats::from_features(&rows)
}

/// Real-vs-real Fréchet proxy between the two halves of a set; the noise
/// floor below which proxy differences are not meaningful.
pub fn self_distance_floor(images: &[FeatureGrid], feat: &PerceptualExtractor) -> Result<f64> {
    if images.len() < 4 {
        return config_err("need at least 4 images for a self-distance floor");
    }
    let mid = images.len() / 2;
    let a = image_feature_stats(&images[..mid], feat)?;
    let b = image_feature_stats(&images[mid..], feat)?;
    frechet_distance(&a, &b)
}

/// Samples `n` latents, de-normalizes and decodes them, and scores the
/// decoded images against a real-image feature summary.
///
/// Refuses `n < 500`: the proxy is too noisy below that.
#[allow(clippy::too_many_arguments)]
pub fn sample_and_score<M: EpsilonModel>(
    model: &M,
    sched: &NoiseSchedule,
    decoder: &AutoencoderModel,
    data: &LatentDataset,
    n: usize,
    rng: &mut ChaCha12Rng,
    real_stats: &FrechetStats,
    feat: &PerceptualExtractor,
) -> Result<(Vec<FeatureGrid>, f64)> {
    if n < 500 {
        return config_err(format!("sample_and_score needs n >= 500, got {n} (statistic too noisy)"));
    }
    let shape = data.latent_shape();
    let latents = sample_latents(model, sched, n, shape, rng)?;
    let mut images = Vec::with_capacity(n);
    let mut rows = Vec::with_capacity(n);
    for z in latents {
        let raw = z.mapv(|v| v / data.scale_factor);
        let img = decoder.decode(&FeatureGrid::new(raw)?)?;
        rows.push(feat.pooled(&img)?);
        images.push(img);
    }
    let gen_stats = FrechetStats::from_features(&rows)?;
    let proxy = frechet_distance(&gen_stats, real_stats)?;
    Ok((images, proxy))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::rng::split;

    #[test]
    fn schedule_invariants_and_product_oracle() {
        let s = NoiseSchedule::linear(1000).unwrap();
        assert_eq!(s.alpha_bars[0], 1.0);
        assert!(s.betas.windows(2).all(|w| w[0] <= w[1]));
        assert!(s.alpha_bars.windows(2).all(|w| w[1] < w[0]));
        // Brute-force running product.
        let mut acc = 1.0;
        for (t, b) in s.betas.iter().enumerate() {
            acc *= 1.0 - b;
            assert!((s.alpha_bars[t + 1] - acc).abs() < 1e-10);
        }
        assert!(s.alpha_bars[1000] <= 1e-4, "terminal alpha_bar {}", s.alpha_bars[1000]);
        assert!(NoiseSchedule::linear(1).is_err());
    }

    #[test]
    fn forward_boundaries() {
        let s = NoiseSchedule::linear(1000).unwrap();
        let mut rng = split(1, "fb", 0);
        let z0 = FeatureGrid::new(
            crate::nn::rng::normal_array(&mut rng, &[2, 4, 4]).into_dimensionality().unwrap(),
        )
        .unwrap();
        let noise = FeatureGrid::new(
            crate::nn::rng::normal_array(&mut rng, &[2, 4, 4]).into_dimensionality().unwrap(),
        )
        .unwrap();
        let at0 = diffusion_forward(&z0, 0, &noise, &s).unwrap();
        assert_eq!(at0, z0);
        let at_t = diffusion_forward(&z0, 1000, &noise, &s).unwrap();
        let diff: f64 = at_t
            .values()
            .iter()
            .zip(noise.values().iter())
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        let norm = noise.sq_norm().sqrt();
        assert!(diff / norm < 0.02, "terminal state {}% from pure noise", 100.0 * diff / norm);
        assert!(diffusion_forward(&z0, 1001, &noise, &s).is_err());
    }

    #[test]
    fn forward_marginals_match_analytics() {
        // Empirical mean/variance over 10_000 draws of (z0, eps).
        let s = NoiseSchedule::linear(100).unwrap();
        let t = 40;
        let ab = s.alpha_bar(t).unwrap();
        let mut rng = split(3, "marg", 0);
        let (mu0, sd0) = (0.7, 1.3);
        let n = 10_000;
        let mut vals = Vec::with_capacity(n);
        for _ in 0..n {
            let z0v: f64 = mu0 + sd0 * rng.sample::<f64, _>(rand_distr::StandardNormal);
            let z0 = FeatureGrid::constant(1, 1, 1, z0v).unwrap();
            let e = crate::nn::rng::normal_array(&mut rng, &[1, 1, 1]);
            let noise = FeatureGrid::new(e.into_dimensionality().unwrap()).unwrap();
            vals.push(diffusion_forward(&z0, t, &noise, &s).unwrap().values()[(0, 0, 0)]);
        }
        let mean = vals.iter().sum::<f64>() / n as f64;
        let var = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1) as f64;
        let want_mean = ab.sqrt() * mu0;
        let want_var = ab * sd0 * sd0 + (1.0 - ab);
        let se_mean = (want_var / n as f64).sqrt();
        let se_var = want_var * (2.0 / (n as f64 - 1.0)).sqrt();
        assert!((mean - want_mean).abs() < 3.0 * se_mean, "mean {mean} vs {want_mean}");
        assert!((var - want_var).abs() < 3.0 * se_var, "var {var} vs {want_var}");
    }

    #[test]
    fn latent_dataset_normalizes_and_roundtrips() {
        let mut rng = split(5, "lds", 0);
        let raw: Vec<FeatureGrid> = (0..20)
            .map(|_| {
                FeatureGrid::new(
                    crate::nn::rng::normal_array(&mut rng, &[2, 3, 3])
                        .mapv(|v| 4.0 * v)
                        .into_dimensionality()
                        .unwrap(),
                )
                .unwrap()
            })
            .collect();
        let ds = LatentDataset::from_raw(raw, "ckpt-xyz").unwrap();
        for sd in &ds.per_channel_std {
            assert!((0.8..=1.2).contains(sd));
        }
        let dir = tempfile::tempdir().unwrap();
        let bin = dir.path().join("lat.bin");
        let meta = dir.path().join("lat.json");
        ds.save(&bin, &meta).unwrap();
        let loaded = LatentDataset::load(&bin, &meta).unwrap();
        assert_eq!(loaded.latents.len(), ds.latents.len());
        assert_eq!(loaded.scale_factor, ds.scale_factor);
        assert_eq!(loaded.latents[7], ds.latents[7]);
        assert_eq!(loaded.source_checkpoint, "ckpt-xyz");
    }

    #[test]
    fn latent_dataset_flags_imbalanced_channels() {
        let mut rng = split(6, "lds2", 0);
        let raw: Vec<FeatureGrid> = (0..10)
            .map(|_| {
                let mut a = crate::nn::rng::normal_array(&mut rng, &[2, 3, 3])
                    .into_dimensionality::<ndarray::Ix3>()
                    .unwrap();
                // Second channel 10x the first.
                a.index_axis_mut(ndarray::Axis(0), 1).mapv_inplace(|v| 10.0 * v);
                FeatureGrid::new(a).unwrap()
            })
            .collect();
        let ds = LatentDataset::from_raw(raw, "x").unwrap();
        assert!(ds.per_channel_std[0] < 0.8);
        assert!(matches!(ds.channel_balance(), Err(Error::Numerical(_))));
    }

    #[test]
    fn sampling_is_seed_reproducible() {
        let sched = NoiseSchedule::linear(50).unwrap();
        let oracle = |z: &Array3<f64>, _t: usize| z.mapv(|v| 0.1 * v);
        let a = sample_latents(&oracle, &sched, 3, (2, 4, 4), &mut split(9, "s", 0)).unwrap();
        let b = sample_latents(&oracle, &sched, 3, (2, 4, 4), &mut split(9, "s", 0)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn oracle_denoiser_reproduces_gaussian_latents() {
        // z0 ~ N(mu0, sd0^2) iid per element. The posterior-mean noise
        // predictor is analytic:
        //   E[eps | z_t] = sqrt(1-ab) (z_t - sqrt(ab) mu0) / (ab sd0^2 + 1 - ab).
        // Ancestral sampling with it must reproduce the latent
        // distribution within the real-vs-real noise floor.
        let t_steps = 1000;
        let sched = NoiseSchedule::linear(t_steps).unwrap();
        let (mu0, sd0) = (0.4, 0.9);
        let abars = sched.alpha_bars.clone();
        let oracle = move |z: &Array3<f64>, t: usize| {
            let ab = abars[t];
            let denom = ab * sd0 * sd0 + (1.0 - ab);
            z.mapv(|v| (1.0 - ab).sqrt() * (v - ab.sqrt() * mu0) / denom)
        };
        let n = 1500usize;
        let mut rng = split(11, "oracle", 0);
        let samples = sample_latents(&oracle, &sched, n, (2, 4, 4), &mut rng).unwrap();

        let mut all: Vec<f64> = Vec::new();
        for s in &samples {
            all.extend(s.iter().copied());
        }
        let m = all.iter().sum::<f64>() / all.len() as f64;
        let v = all.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (all.len() - 1) as f64;
        assert!((m - mu0).abs() < 0.05, "sample mean {m} vs {mu0}");
        assert!((v.sqrt() - sd0).abs() < 0.05, "sample std {} vs {sd0}", v.sqrt());

        // Fréchet proxy on flattened latents against real draws, compared
        // to a real-vs-real floor of the same sample size.
        let mut real: Vec<Array1<f64>> = Vec::with_capacity(2 * n);
        for _ in 0..2 * n {
            let z = crate::nn::rng::normal_array(&mut rng, &[32]).mapv(|e| mu0 + sd0 * e);
            real.push(z.into_dimensionality().unwrap());
        }
        let gen_rows: Vec<Array1<f64>> = samples
            .iter()
            .map(|s| Array1::from_iter(s.iter().copied()))
            .collect();
        let real_a = FrechetStats::from_features(&real[..n].to_vec()).unwrap();
        let real_b = FrechetStats::from_features(&real[n..].to_vec()).unwrap();
        let floor = frechet_distance(&real_a, &real_b).unwrap();
        let gen_stats = FrechetStats::from_features(&gen_rows).unwrap();
        let proxy = frechet_distance(&gen_stats, &real_a).unwrap();
        assert!(
            proxy < floor * 3.0 + 0.05,
            "oracle proxy {proxy} far above real-vs-real floor {floor}"
        );
    }

    #[test]
    fn sample_and_score_refuses_small_n() {
        let cfg = crate::autoencoder::AutoencoderConfig {
            image_size: 8,
            compression: 2,
            latent_channels: 2,
            base_width: 4,
            ..Default::default()
        };
        let model = AutoencoderModel::new(cfg, 1).unwrap();
        let sched = NoiseSchedule::linear(10).unwrap();
        let mut rng = split(13, "n", 0);
        let raw: Vec<FeatureGrid> = (0..8)
            .map(|_| {
                FeatureGrid::new(
                    crate::nn::rng::normal_array(&mut rng, &[2, 4, 4]).into_dimensionality().unwrap(),
                )
                .unwrap()
            })
            .collect();
        let data = LatentDataset::from_raw(raw, "x").unwrap();
        let feat = PerceptualExtractor::fixed();
        let real: Vec<FeatureGrid> = (0..6)
            .map(|i| {
                let mut r = split(14 + i, "img", 0);
                FeatureGrid::with_range(
                    crate::nn::rng::uniform_array(&mut r, &[3, 8, 8], -1.0, 1.0)
                        .into_dimensionality()
                        .unwrap(),
                    Some((-1.0, 1.0)),
                )
                .unwrap()
            })
            .collect();
        let stats = image_feature_stats(&real, &feat).unwrap();
        let oracle = |z: &Array3<f64>, _t: usize| z.clone();
        let err = sample_and_score(&oracle, &sched, &model, &data, 10, &mut rng, &stats, &feat);
        assert!(err.is_err());
    }

    #[test]
    fn tiny_denoiser_training_reduces_loss() {
        let mut rng = split(15, "train", 0);
        let raw: Vec<FeatureGrid> = (0..32)
            .map(|_| {
                FeatureGrid::new(
                    crate::nn::rng::normal_array(&mut rng, &[2, 4, 4]).into_dimensionality().unwrap(),
                )
                .unwrap()
            })
            .collect();
        let data = LatentDataset::from_raw(raw, "toy").unwrap();
        let cfg = LatentGenConfig {
            t_steps: 50,
            width: 8,
            blocks: 1,
            t_embed_dim: 8,
            train_steps: 60,
            batch_size: 4,
            lr: 1e-3,
            seed: 3,
        };
        let (_model, _sched, losses) = train_latent_denoiser(&data, &cfg).unwrap();
        let head: f64 = losses[..10].iter().sum::<f64>() / 10.0;
        let tail: f64 = losses[losses.len() - 10..].iter().sum::<f64>() / 10.0;
        assert!(tail < head, "loss should fall: head {head}, tail {tail}");
        // Determinism.
        let (_m2, _s2, losses2) = train_latent_denoiser(&data, &cfg).unwrap();
        assert_eq!(losses, losses2);
    }
}
