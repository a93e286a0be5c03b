//! Training objectives.
//!
//! The standard autoencoder loss is
//! `rec + lambda_gan * gan_g + lambda_reg * reg`, with `rec` a pixel L1
//! plus a weighted perceptual feature distance. The transformed variant
//! routes the latent through a spatial transform before decoding and
//! reconstructs the transformed input instead; with the identity
//! transform it reduces to the standard loss bit for bit on a shared rng
//! stream. A third, explicit variant penalizes
//! `||tau(E(x)) - E(tau(x))||^2` directly on posterior means; it exists
//! to demonstrate the latent-collapse failure mode it invites.

use rand::Rng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::autoencoder::{
    AutoencoderModel, Discriminator, EncodedVar, GaussianPosterior, LatentMode,
    PerceptualExtractor,
};
use crate::error::{config_err, Result};
use crate::grid::FeatureGrid;
use crate::nn::params::GradAccum;
use crate::nn::{Tape, Var};
use crate::transform2d::{apply_transform_to, sample_transform, Transform2D, TransformSamplerConfig};

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct LossWeights {
    /// Adversarial weight once `gan_warmup_steps` have elapsed; zero
    /// before.
    pub lambda_gan: f64,
    /// KL weight (continuous) or vector-quantization weight (discrete).
    pub lambda_reg: f64,
    /// Weight of the explicit equivariance penalty in the ablation modes.
    pub lambda_explicit: f64,
    pub perceptual_weight: f64,
    pub gan_warmup_steps: u64,
}

impl LossWeights {
    pub fn default_continuous() -> Self {
        Self {
            lambda_gan: 0.1,
            lambda_reg: 1e-6,
            lambda_explicit: 0.1,
            perceptual_weight: 1.0,
            gan_warmup_steps: 1000,
        }
    }

    pub fn default_discrete() -> Self {
        Self { lambda_reg: 1.0, ..Self::default_continuous() }
    }

    pub fn validate(&self) -> Result<()> {
        let all = [
            self.lambda_gan,
            self.lambda_reg,
            self.lambda_explicit,
            self.perceptual_weight,
        ];
        if !all.iter().all(|w| w.is_finite() && *w >= 0.0) {
            return config_err("loss weights must be finite and non-negative");
        }
        Ok(())
    }

    /// Effective adversarial weight at a given optimization step.
    pub fn gan_weight(&self, step: u64) -> f64 {
        if step < self.gan_warmup_steps {
            0.0
        } else {
            self.lambda_gan
        }
    }
}

/// Per-step loss decomposition.
///
/// `total = rec_pixel + perceptual_weight * rec_perceptual
///        + gan_weight(step) * gan_g + lambda_reg * reg
///        + lambda_explicit * explicit_eq`;
/// `gan_d` is the discriminator's own objective and stays outside
/// `total`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub rec_pixel: f64,
    pub rec_perceptual: f64,
    pub gan_g: f64,
    pub gan_d: f64,
    pub reg: f64,
    pub explicit_eq: f64,
    pub total: f64,
    pub tau_used: Transform2D,
    pub was_identity: bool,
}

/// One sample's worth of gradients plus bookkeeping for the trainer.
pub struct StepOutput {
    pub breakdown: LossBreakdown,
    pub gen_grads: GradAccum,
    pub disc_grads: Option<GradAccum>,
    /// Codebook rows touched this step (discrete mode).
    pub vq_indices: Option<Vec<usize>>,
    /// Pre-quantization features, kept as a reseeding pool.
    pub pre_quant: Option<FeatureGrid>,
    /// Discrete-path ordering witness: set when quantization consumed the
    /// transformed features rather than the other way round.
    pub quantized_after_transform: Option<bool>,
}

/// Borrowed pieces every training step needs.
pub struct StepContext<'a> {
    pub model: &'a AutoencoderModel,
    pub disc: &'a Discriminator,
    pub feat: &'a PerceptualExtractor,
    pub weights: &'a LossWeights,
    /// Global optimization step, for the adversarial warmup gate.
    pub step: u64,
}

// ---- plain (value-level) loss operations ----

/// Pixel L1 plus weighted perceptual feature distance.
pub fn reconstruction_loss(
    x_hat: &FeatureGrid,
    x_target: &FeatureGrid,
    feat: &PerceptualExtractor,
    w: &LossWeights,
) -> Result<f64> {
    if x_hat.shape() != x_target.shape() {
        return config_err(format!(
            "reconstruction shapes differ: {:?} vs {:?}",
            x_hat.shape(),
            x_target.shape()
        ));
    }
    let n = x_hat.values().len() as f64;
    let pixel: f64 = x_hat
        .values()
        .iter()
        .zip(x_target.values().iter())
        .map(|(a, b)| (a - b).abs())
        .sum::<f64>()
        / n;
    if w.perceptual_weight == 0.0 {
        return Ok(pixel);
    }
    let fa = feat.feature_map(x_hat)?;
    let fb = feat.feature_map(x_target)?;
    Ok(pixel + w.perceptual_weight * fa.mean_sq_diff(&fb)?)
}

/// Mean over elements of `0.5 * (mu^2 + exp(logvar) - 1 - logvar)`.
pub fn kl_regularizer(post: &GaussianPosterior) -> f64 {
    let n = post.mean.values().len() as f64;
    post.mean
        .values()
        .iter()
        .zip(post.logvar.values().iter())
        .map(|(&m, &lv)| 0.5 * (m * m + lv.exp() - 1.0 - lv))
        .sum::<f64>()
        / n
}

/// Hinge discriminator objective on logit grids.
pub fn hinge_d_loss(real_logits: &FeatureGrid, fake_logits: &FeatureGrid) -> f64 {
    let real: f64 = real_logits.values().iter().map(|&l| (1.0 - l).max(0.0)).sum::<f64>()
        / real_logits.values().len() as f64;
    let fake: f64 = fake_logits.values().iter().map(|&l| (1.0 + l).max(0.0)).sum::<f64>()
        / fake_logits.values().len() as f64;
    real + fake
}

/// Hinge generator objective on a fake logit grid.
pub fn hinge_g_loss(fake_logits: &FeatureGrid) -> f64 {
    -fake_logits.values().iter().sum::<f64>() / fake_logits.values().len() as f64
}

/// `(g_loss, d_loss)` of the hinge formulation for a reconstruction and a
/// matching real image.
pub fn adversarial_losses(
    x_hat: &FeatureGrid,
    x_real: &FeatureGrid,
    disc: &Discriminator,
) -> Result<(f64, f64)> {
    let fake = disc.discriminate(x_hat)?;
    let real = disc.discriminate(x_real)?;
    Ok((hinge_g_loss(&fake), hinge_d_loss(&real, &fake)))
}

/// `||tau(E(x)) - E(tau(x))||^2` averaged over elements, for any latent
/// encoder (posterior mean). The second path's input is produced at
/// exactly `f` times the transformed latent's size, so both paths agree
/// in shape by construction. `stop_gradient` only affects training
/// gradients, never this value.
pub fn explicit_equivariance_loss<E>(
    x: &FeatureGrid,
    tau: &Transform2D,
    encode: E,
    _stop_gradient: bool,
) -> Result<f64>
where
    E: Fn(&FeatureGrid) -> Result<FeatureGrid>,
{
    let z = encode(x)?;
    if x.height() % z.height() != 0 {
        return config_err("encoder output does not evenly divide the input");
    }
    let f = x.height() / z.height();
    let (lh, lw) = tau.output_shape(z.height(), z.width())?;
    let z_tau = apply_transform_to(&z, tau, (lh, lw))?;
    let x_tau = apply_transform_to(x, tau, (f * lh, f * lw))?;
    let z_of_tau = encode(&x_tau)?;
    z_tau.mean_sq_diff(&z_of_tau)
}

// ---- taped graph builders ----

struct RecGraph {
    rec_pixel: Var,
    rec_perceptual: Var,
    reg: Var,
    x_hat: Var,
    target: FeatureGrid,
    vq_indices: Option<Vec<usize>>,
    pre_quant: Option<FeatureGrid>,
    quantized_after_transform: Option<bool>,
}

/// Builds the reconstruction side of the objective. With `tau = None`
/// the graph is the plain autoencoding path; with a transform it routes
/// the latent through `resample` and retargets the reconstruction to the
/// transformed input rendered at exactly `f` times the transformed
/// latent's size.
fn build_rec_graph(
    ctx: &StepContext<'_>,
    tape: &mut Tape,
    x: &FeatureGrid,
    tau: Option<&Transform2D>,
    rng: &mut ChaCha12Rng,
) -> Result<RecGraph> {
    let f = ctx.model.cfg.compression;
    let xv = tape.constant(x.values().to_owned().into_dyn());
    let encoded = ctx.model.encode_var(tape, xv);

    // Latent to route, plus the KL term (continuous) or the pre-quant
    // feature snapshot (discrete).
    let (z, kl_reg, pre_quant) = match encoded {
        EncodedVar::Posterior { mean, logvar } => {
            let shape = tape.value(mean).shape().to_vec();
            let eps = tape.constant(crate::nn::rng::normal_array(rng, &shape));
            let half_lv = tape.scale(logvar, 0.5);
            let sigma = tape.exp(half_lv);
            let noise = tape.mul(sigma, eps);
            let z = tape.add(mean, noise);
            // KL of the untransformed posterior.
            let mu_sq = tape.mul(mean, mean);
            let var = tape.exp(logvar);
            let sum = tape.add(mu_sq, var);
            let sum = tape.sub(sum, logvar);
            let sum = tape.add_scalar(sum, -1.0);
            let kl_mean = tape.mean_all(sum);
            (z, Some(tape.scale(kl_mean, 0.5)), None)
        }
        EncodedVar::Features(feats) => {
            let pre = FeatureGrid::new(
                tape.value(feats)
                    .view()
                    .into_dimensionality::<ndarray::Ix3>()
                    .expect("3d features")
                    .to_owned(),
            )?;
            (feats, None, Some(pre))
        }
    };

    let (zh, zw) = {
        let s = tape.value(z).shape().to_vec();
        (s[1], s[2])
    };

    // Transform the latent, then (discrete mode) quantize the transformed
    // features -- never the other way round.
    let (z_tau, lh, lw) = match tau {
        Some(t) => {
            let (lh, lw) = t.output_shape(zh, zw)?;
            (tape.resample(z, t.quarter_turns(), lh, lw), lh, lw)
        }
        None => (z, zh, zw),
    };
    let (z_dec, reg, vq_indices, quantized_after_transform) = match ctx.model.cfg.latent_mode {
        LatentMode::Discrete => {
            let (q_st, idx, vq_reg, _commit) = ctx.model.quantize_var(tape, z_tau)?;
            (q_st, vq_reg, Some(idx), Some(true))
        }
        LatentMode::Continuous => {
            (z_tau, kl_reg.expect("continuous mode has a KL term"), None, None)
        }
    };

    let x_hat = ctx.model.decode_var(tape, z_dec);

    // Reconstruction target at exactly f times the decoded latent size.
    let target = match tau {
        Some(t) => apply_transform_to(x, t, (f * lh, f * lw))?,
        None => x.clone(),
    };
    let target_v = tape.constant(target.values().to_owned().into_dyn());
    let rec_pixel = tape.l1_mean(x_hat, target_v);
    let fm_hat = ctx.feat.forward_var(tape, x_hat);
    let fm_tgt = ctx.feat.forward_var(tape, target_v);
    let rec_perceptual = tape.mse_mean(fm_hat, fm_tgt);

    Ok(RecGraph {
        rec_pixel,
        rec_perceptual,
        reg,
        x_hat,
        target,
        vq_indices,
        pre_quant,
        quantized_after_transform,
    })
}

// ---- public step functions ----

/// Standard objective: reconstruct `x` from its own latent.
pub fn standard_step(
    ctx: &StepContext<'_>,
    x: &FeatureGrid,
    rng: &mut ChaCha12Rng,
) -> Result<StepOutput> {
    step_impl(ctx, x, None, None, rng)
}

/// Transformed objective: decode the transformed latent and reconstruct
/// the transformed input. Reduces to [`standard_step`] when `tau` is the
/// identity.
pub fn eqvae_step(
    ctx: &StepContext<'_>,
    x: &FeatureGrid,
    tau: &Transform2D,
    rng: &mut ChaCha12Rng,
) -> Result<StepOutput> {
    step_impl(ctx, x, Some(tau), None, rng)
}

/// Standard objective augmented with the explicit equivariance penalty
/// (optionally stop-gradient on the transformed-input encoding).
pub fn explicit_step(
    ctx: &StepContext<'_>,
    x: &FeatureGrid,
    tau: &Transform2D,
    stop_gradient: bool,
    rng: &mut ChaCha12Rng,
) -> Result<StepOutput> {
    if ctx.model.cfg.latent_mode != LatentMode::Continuous {
        return config_err("the explicit penalty is defined on posterior means (continuous mode)");
    }
    step_impl(ctx, x, None, Some((tau, stop_gradient)), rng)
}

fn step_impl(
    ctx: &StepContext<'_>,
    x: &FeatureGrid,
    tau: Option<&Transform2D>,
    explicit: Option<(&Transform2D, bool)>,
    rng: &mut ChaCha12Rng,
) -> Result<StepOutput> {
    ctx.weights.validate()?;
    let mut tape = Tape::new();
    let graph = build_rec_graph(ctx, &mut tape, x, tau, rng)?;

    // Explicit penalty: tau applied to the posterior mean of x versus the
    // encoding of the transformed input, shapes forced to agree.
    let explicit_var = match explicit {
        Some((tau_e, stop_gradient)) => {
            let f = ctx.model.cfg.compression;
            let xv = tape.constant(x.values().to_owned().into_dyn());
            let EncodedVar::Posterior { mean, .. } = ctx.model.encode_var(&mut tape, xv) else {
                return config_err("explicit penalty needs continuous mode");
            };
            let (mh, mw) = {
                let s = tape.value(mean).shape().to_vec();
                (s[1], s[2])
            };
            let (lh, lw) = tau_e.output_shape(mh, mw)?;
            let z_tau = tape.resample(mean, tau_e.quarter_turns(), lh, lw);
            let x_tau = apply_transform_to(x, tau_e, (f * lh, f * lw))?;
            let x_tau_v = tape.constant(x_tau.values().to_owned().into_dyn());
            let EncodedVar::Posterior { mean: mean_tau, .. } =
                ctx.model.encode_var(&mut tape, x_tau_v)
            else {
                return config_err("explicit penalty needs continuous mode");
            };
            let mean_tau = if stop_gradient { tape.detach(mean_tau) } else { mean_tau };
            Some(tape.mse_mean(z_tau, mean_tau))
        }
        None => None,
    };

    let w = ctx.weights;
    let gan_w = w.gan_weight(ctx.step);
    let perc_w = tape.scale(graph.rec_perceptual, w.perceptual_weight);
    let mut total = tape.add(graph.rec_pixel, perc_w);
    let mut gan_g_graph_val = None;
    if gan_w > 0.0 {
        tape.set_frozen(true);
        let fake_logits = ctx.disc.forward_var(&mut tape, graph.x_hat);
        tape.set_frozen(false);
        let mean_logit = tape.mean_all(fake_logits);
        let g_loss = tape.scale(mean_logit, -1.0);
        gan_g_graph_val = Some(tape.scalar(g_loss));
        let g_term = tape.scale(g_loss, gan_w);
        total = tape.add(total, g_term);
    }
    let reg_term = tape.scale(graph.reg, w.lambda_reg);
    total = tape.add(total, reg_term);
    if let Some(ex) = explicit_var {
        let ex_term = tape.scale(ex, w.lambda_explicit);
        total = tape.add(total, ex_term);
    }
    let total_val = tape.scalar(total);
    let gen_grads = tape.backward(total).into_accum();

    // Alternating discriminator pass on detached reconstructions; the
    // same transformed real image is the size-matched positive.
    let x_hat_value = tape.value_arc(graph.x_hat);
    let mut d_tape = Tape::new();
    let fake_c = d_tape.constant((*x_hat_value).clone());
    let real_c = d_tape.constant(graph.target.values().to_owned().into_dyn());
    let real_logits = ctx.disc.forward_var(&mut d_tape, real_c);
    let fake_logits = ctx.disc.forward_var(&mut d_tape, fake_c);
    let neg_real = d_tape.scale(real_logits, -1.0);
    let one_minus_real = d_tape.add_scalar(neg_real, 1.0);
    let real_hinge = d_tape.relu(one_minus_real);
    let real_term = d_tape.mean_all(real_hinge);
    let one_plus_fake = d_tape.add_scalar(fake_logits, 1.0);
    let fake_hinge = d_tape.relu(one_plus_fake);
    let fake_term = d_tape.mean_all(fake_hinge);
    let d_loss = d_tape.add(real_term, fake_term);
    let gan_d = d_tape.scalar(d_loss);
    let fake_mean = d_tape.mean_all(fake_logits);
    let gan_g_det = -d_tape.scalar(fake_mean);
    let disc_grads = (gan_w > 0.0).then(|| d_tape.backward(d_loss).into_accum());

    let tau_used = tau.copied().unwrap_or_else(Transform2D::identity);
    let breakdown = LossBreakdown {
        rec_pixel: tape.scalar(graph.rec_pixel),
        rec_perceptual: tape.scalar(graph.rec_perceptual),
        gan_g: gan_g_graph_val.unwrap_or(gan_g_det),
        gan_d,
        reg: tape.scalar(graph.reg),
        explicit_eq: explicit_var.map(|v| tape.scalar(v)).unwrap_or(0.0),
        total: total_val,
        tau_used,
        was_identity: tau_used.is_identity(),
    };
    Ok(StepOutput {
        breakdown,
        gen_grads,
        disc_grads,
        vq_indices: graph.vq_indices,
        pre_quant: graph.pre_quant,
        quantized_after_transform: graph.quantized_after_transform,
    })
}

/// The identity-gate draw of the total objective; consumes one uniform.
pub fn gate_draw(rng: &mut ChaCha12Rng, p_alpha: f64) -> bool {
    let p: f64 = rng.random();
    p < p_alpha
}

/// Gated total objective: with probability `p_alpha` run the standard
/// step, otherwise draw a non-identity transform and run the transformed
/// step. One draw (and one transform) per sample.
pub fn total_training_step(
    ctx: &StepContext<'_>,
    x: &FeatureGrid,
    sampler: &TransformSamplerConfig,
    rng: &mut ChaCha12Rng,
) -> Result<StepOutput> {
    sampler.validate()?;
    if gate_draw(rng, sampler.p_alpha) {
        standard_step(ctx, x, rng)
    } else {
        let non_identity = TransformSamplerConfig { p_alpha: 0.0, ..sampler.clone() };
        let tau = sample_transform(rng, &non_identity)?;
        eqvae_step(ctx, x, &tau, rng)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autoencoder::AutoencoderConfig;
    use crate::nn::rng::split;
    use crate::transform2d::apply_transform;
    use ndarray::Array3;

    fn tiny_ctx(mode: LatentMode, warmup: u64) -> (AutoencoderModel, Discriminator, PerceptualExtractor, LossWeights) {
        let cfg = AutoencoderConfig {
            image_size: 8,
            compression: 2,
            latent_channels: 2,
            base_width: 4,
            latent_mode: mode,
            codebook_size: 6,
        };
        let model = AutoencoderModel::new(cfg, 11).unwrap();
        let disc = Discriminator::new(4, 12);
        let feat = PerceptualExtractor::fixed();
        let mut w = match mode {
            LatentMode::Continuous => LossWeights::default_continuous(),
            LatentMode::Discrete => LossWeights::default_discrete(),
        };
        w.gan_warmup_steps = warmup;
        (model, disc, feat, w)
    }

    fn random_image(size: usize, seed: u64) -> FeatureGrid {
        let mut rng = split(seed, "obj-image", 0);
        let arr = crate::nn::rng::uniform_array(&mut rng, &[3, size, size], -0.9, 0.9);
        FeatureGrid::with_range(arr.into_dimensionality().unwrap(), Some((-1.0, 1.0))).unwrap()
    }

    #[test]
    fn reconstruction_loss_identical_inputs_is_zero() {
        let feat = PerceptualExtractor::fixed();
        let w = LossWeights::default_continuous();
        let x = random_image(8, 1);
        assert_eq!(reconstruction_loss(&x, &x, &feat, &w).unwrap(), 0.0);
    }

    #[test]
    fn reconstruction_loss_constant_gap() {
        let feat = PerceptualExtractor::fixed();
        let mut w = LossWeights::default_continuous();
        w.perceptual_weight = 0.0;
        let a = FeatureGrid::constant(3, 8, 8, 0.0).unwrap();
        let b = FeatureGrid::constant(3, 8, 8, 0.5).unwrap();
        let loss = reconstruction_loss(&a, &b, &feat, &w).unwrap();
        assert!((loss - 0.5).abs() < 1e-12);
    }

    #[test]
    fn reconstruction_loss_matches_scalar_oracle() {
        let feat = PerceptualExtractor::fixed();
        let w = LossWeights::default_continuous();
        let a = random_image(8, 2);
        let b = random_image(8, 3);
        let loss = reconstruction_loss(&a, &b, &feat, &w).unwrap();
        // Scalar-loop recomputation of both terms.
        let mut l1 = 0.0;
        for (x, y) in a.values().iter().zip(b.values().iter()) {
            l1 += (x - y).abs();
        }
        l1 /= a.values().len() as f64;
        let fa = feat.feature_map(&a).unwrap();
        let fb = feat.feature_map(&b).unwrap();
        let mut mse = 0.0;
        for (x, y) in fa.values().iter().zip(fb.values().iter()) {
            mse += (x - y) * (x - y);
        }
        mse /= fa.values().len() as f64;
        assert!((loss - (l1 + w.perceptual_weight * mse)).abs() < 1e-6);
    }

    #[test]
    fn reconstruction_loss_rejects_shape_mismatch() {
        let feat = PerceptualExtractor::fixed();
        let w = LossWeights::default_continuous();
        let a = random_image(8, 4);
        let b = random_image(16, 5);
        assert!(reconstruction_loss(&a, &b, &feat, &w).is_err());
    }

    #[test]
    fn kl_analytic_cases() {
        let zero = GaussianPosterior::new(
            FeatureGrid::constant(1, 2, 2, 0.0).unwrap(),
            FeatureGrid::constant(1, 2, 2, 0.0).unwrap(),
        )
        .unwrap();
        assert_eq!(kl_regularizer(&zero), 0.0);
        let unit_mean = GaussianPosterior::new(
            FeatureGrid::constant(1, 2, 2, 1.0).unwrap(),
            FeatureGrid::constant(1, 2, 2, 0.0).unwrap(),
        )
        .unwrap();
        assert!((kl_regularizer(&unit_mean) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn kl_matches_monte_carlo_oracle() {
        // E_q[log q - log p] estimated from 100_000 reparameterized draws.
        let mut rng = split(7, "klmc", 0);
        let mean = crate::nn::rng::uniform_array(&mut rng, &[2, 2, 2], -1.5, 1.5);
        let logvar = crate::nn::rng::uniform_array(&mut rng, &[2, 2, 2], -1.0, 1.0);
        let post = GaussianPosterior::new(
            FeatureGrid::new(mean.clone().into_dimensionality().unwrap()).unwrap(),
            FeatureGrid::new(logvar.clone().into_dimensionality().unwrap()).unwrap(),
        )
        .unwrap();
        let analytic = kl_regularizer(&post);

        let n = 100_000usize;
        let dims = post.mean.values().len() as f64;
        let mut samples = Vec::with_capacity(n);
        for _ in 0..n {
            let z = crate::autoencoder::reparameterize(&post, &mut rng);
            // mean over elements of log q(z) - log p(z)
            let mut acc = 0.0;
            for ((zv, mv), lv) in z
                .values()
                .iter()
                .zip(post.mean.values().iter())
                .zip(post.logvar.values().iter())
            {
                let var = lv.exp();
                let log_q = -0.5 * (lv + (zv - mv) * (zv - mv) / var);
                let log_p = -0.5 * zv * zv;
                acc += log_q - log_p;
            }
            samples.push(acc / dims);
        }
        let mc = samples.iter().sum::<f64>() / n as f64;
        let var = samples.iter().map(|s| (s - mc) * (s - mc)).sum::<f64>() / (n - 1) as f64;
        let se = (var / n as f64).sqrt();
        assert!(
            (mc - analytic).abs() < 3.0 * se,
            "kl {analytic} vs MC {mc} (3se = {})",
            3.0 * se
        );
    }

    #[test]
    fn hinge_losses_analytic_cases() {
        let zeros = FeatureGrid::constant(1, 3, 3, 0.0).unwrap();
        assert_eq!(hinge_d_loss(&zeros, &zeros), 2.0);
        assert_eq!(hinge_g_loss(&zeros), 0.0);
        let real = FeatureGrid::constant(1, 3, 3, 10.0).unwrap();
        let fake = FeatureGrid::constant(1, 3, 3, -10.0).unwrap();
        assert_eq!(hinge_d_loss(&real, &fake), 0.0);
        assert_eq!(hinge_g_loss(&fake), 10.0);
    }

    #[test]
    fn hinge_losses_match_scalar_oracle() {
        let mut rng = split(13, "hinge", 0);
        let real = FeatureGrid::new(
            crate::nn::rng::normal_array(&mut rng, &[1, 4, 5]).into_dimensionality().unwrap(),
        )
        .unwrap();
        let fake = FeatureGrid::new(
            crate::nn::rng::normal_array(&mut rng, &[1, 4, 5]).into_dimensionality().unwrap(),
        )
        .unwrap();
        let d = hinge_d_loss(&real, &fake);
        let g = hinge_g_loss(&fake);
        let mut dr = 0.0;
        let mut df = 0.0;
        let mut gs = 0.0;
        for &l in real.values().iter() {
            dr += f64::max(0.0, 1.0 - l);
        }
        for &l in fake.values().iter() {
            df += f64::max(0.0, 1.0 + l);
            gs += l;
        }
        let n = 20.0;
        assert!((d - (dr / n + df / n)).abs() < 1e-9);
        assert!((g + gs / n).abs() < 1e-9);
    }

    #[test]
    fn adversarial_losses_with_zeroed_head_saturate() {
        // Zeroing the final conv makes the discriminator output constant 0.
        let mut disc = Discriminator::new(4, 17);
        let wref = disc.params.find("disc.conv3.w").unwrap();
        disc.params.value_mut(wref).fill(0.0);
        let bref = disc.params.find("disc.conv3.b").unwrap();
        disc.params.value_mut(bref).fill(0.0);
        let x = random_image(8, 21);
        let y = random_image(8, 22);
        let (g, d) = adversarial_losses(&x, &y, &disc).unwrap();
        assert_eq!(g, 0.0);
        assert_eq!(d, 2.0);
    }

    #[test]
    fn explicit_loss_zero_for_resampling_encoder() {
        // Channel-wise bicubic downsampling commutes with right-angle
        // rotations on square grids.
        let x = random_image(8, 31);
        let encode = |img: &FeatureGrid| -> Result<FeatureGrid> {
            let h = img.height() / 2;
            let w = img.width() / 2;
            FeatureGrid::new(crate::transform2d::resample_bicubic(
                &img.values().to_owned(),
                h,
                w,
            ))
        };
        for turns in 1..4u8 {
            let tau = Transform2D::rotation(turns).unwrap();
            let loss = explicit_equivariance_loss(&x, &tau, encode, false).unwrap();
            assert!(loss < 1e-6, "rotation {turns}: loss {loss}");
        }
    }

    #[test]
    fn explicit_loss_zero_for_constant_encoder() {
        // The collapse solution: a constant encoder zeroes the penalty for
        // every transform.
        let x = random_image(16, 32);
        let encode = |img: &FeatureGrid| -> Result<FeatureGrid> {
            FeatureGrid::constant(2, img.height() / 4, img.width() / 4, 0.42)
        };
        for tau in [
            Transform2D::identity(),
            Transform2D::rotation(1).unwrap(),
            Transform2D::scaling(0.5, 0.5).unwrap(),
            Transform2D::from_quarter_turns(0.5, 0.75, 2).unwrap(),
        ] {
            let loss = explicit_equivariance_loss(&x, &tau, encode, false).unwrap();
            assert!(loss < 1e-12, "tau {}: loss {loss}", tau.descriptor());
        }
    }

    #[test]
    fn explicit_loss_matches_hand_enumerated_oracle() {
        // Non-equivariant toy encoder on a fixed 2x2 grid under R(PI):
        // E(x) = x * site_mask, f = 1. Both paths enumerated by hand.
        let xvals = ndarray::array![[[0.2, -0.4], [0.6, 0.8]]];
        let x = FeatureGrid::new(xvals.clone()).unwrap();
        let mask = ndarray::array![[[1.0, 2.0], [3.0, 4.0]]];
        let encode = {
            let mask = mask.clone();
            move |img: &FeatureGrid| -> Result<FeatureGrid> {
                FeatureGrid::new(img.values().to_owned() * &mask)
            }
        };
        let tau = Transform2D::rotation(2).unwrap();
        let loss = explicit_equivariance_loss(&x, &tau, encode, false).unwrap();

        // tau(E(x)): rotate (x * mask) by 180.
        // E(tau(x)): rotate x by 180, then multiply by mask.
        let mut acc = 0.0;
        let rot = |r: usize, c: usize| (1 - r, 1 - c);
        for r in 0..2 {
            for c in 0..2 {
                let (sr, sc) = rot(r, c);
                let z_tau = xvals[(0, sr, sc)] * mask[(0, sr, sc)];
                let z_of_tau = xvals[(0, sr, sc)] * mask[(0, r, c)];
                acc += (z_tau - z_of_tau) * (z_tau - z_of_tau);
            }
        }
        let oracle = acc / 4.0;
        assert!((loss - oracle).abs() < 1e-6, "loss {loss} vs oracle {oracle}");
    }

    #[test]
    fn equivariant_toy_pipeline_keeps_rec_term_small() {
        // Bicubic-downsample encoder + bicubic-upsample decoder, c = 3.
        // The pipeline commutes with right-angle rotation, so the
        // transformed objective's rec term equals the untransformed one,
        // and on constant fields it vanishes.
        let rec_term = |x: &FeatureGrid, turns: u8| -> f64 {
            let (h, w) = (x.height(), x.width());
            let mut tape = Tape::new();
            let xv = tape.constant(x.values().to_owned().into_dyn());
            let z = tape.resample(xv, 0, h / 2, w / 2);
            let tau = Transform2D::rotation(turns).unwrap();
            let (lh, lw) = tau.output_shape(h / 2, w / 2).unwrap();
            let z_tau = tape.resample(z, turns, lh, lw);
            let x_hat = tape.resample(z_tau, 0, 2 * lh, 2 * lw);
            let target = apply_transform_to(x, &tau, (2 * lh, 2 * lw)).unwrap();
            let tv = tape.constant(target.values().to_owned().into_dyn());
            let l = tape.l1_mean(x_hat, tv);
            tape.scalar(l)
        };
        let constant = FeatureGrid::constant(3, 8, 8, 0.37).unwrap();
        assert!(rec_term(&constant, 1) < 1e-4);
        let x = random_image(8, 41);
        let at_rot = rec_term(&x, 1);
        let at_id = rec_term(&x, 0);
        assert!(
            (at_rot - at_id).abs() < 1e-12,
            "rotation must not change the toy rec term: {at_rot} vs {at_id}"
        );
    }

    #[test]
    fn identity_reduction_is_bit_exact() {
        for mode in [LatentMode::Continuous, LatentMode::Discrete] {
            let (model, disc, feat, w) = tiny_ctx(mode, 0);
            let ctx = StepContext { model: &model, disc: &disc, feat: &feat, weights: &w, step: 5 };
            let x = random_image(8, 51);
            let mut rng_a = split(60, "step", 0);
            let mut rng_b = split(60, "step", 0);
            let std_out = standard_step(&ctx, &x, &mut rng_a).unwrap();
            let eqv_out = eqvae_step(&ctx, &x, &Transform2D::identity(), &mut rng_b).unwrap();

            let a = &std_out.breakdown;
            let b = &eqv_out.breakdown;
            assert_eq!(a.rec_pixel.to_bits(), b.rec_pixel.to_bits());
            assert_eq!(a.rec_perceptual.to_bits(), b.rec_perceptual.to_bits());
            assert_eq!(a.gan_g.to_bits(), b.gan_g.to_bits());
            assert_eq!(a.gan_d.to_bits(), b.gan_d.to_bits());
            assert_eq!(a.reg.to_bits(), b.reg.to_bits());
            assert_eq!(a.total.to_bits(), b.total.to_bits());
            assert!(b.was_identity);

            assert_eq!(std_out.gen_grads.per_param.len(), eqv_out.gen_grads.per_param.len());
            for ((ia, ga), (ib, gb)) in std_out
                .gen_grads
                .per_param
                .iter()
                .zip(eqv_out.gen_grads.per_param.iter())
            {
                assert_eq!(ia, ib);
                assert_eq!(ga, gb, "gradient mismatch on param {ia}");
            }
        }
    }

    #[test]
    fn breakdown_total_matches_weighted_sum() {
        for mode in [LatentMode::Continuous, LatentMode::Discrete] {
            let (model, disc, feat, w) = tiny_ctx(mode, 0);
            let ctx = StepContext { model: &model, disc: &disc, feat: &feat, weights: &w, step: 10 };
            let x = random_image(8, 61);
            let tau = Transform2D::from_quarter_turns(0.5, 0.5, 1).unwrap();
            let mut rng = split(62, "step", 0);
            let out = eqvae_step(&ctx, &x, &tau, &mut rng).unwrap();
            let b = &out.breakdown;
            let expect = b.rec_pixel
                + w.perceptual_weight * b.rec_perceptual
                + w.gan_weight(10) * b.gan_g
                + w.lambda_reg * b.reg;
            assert!(
                (b.total - expect).abs() <= 1e-6 * expect.abs().max(1.0),
                "total {} vs weighted sum {expect}",
                b.total
            );
            assert!(b.rec_pixel >= 0.0 && b.rec_perceptual >= 0.0 && b.reg >= 0.0 && b.gan_d >= 0.0);
            if mode == LatentMode::Discrete {
                assert_eq!(out.quantized_after_transform, Some(true));
                assert!(out.vq_indices.is_some());
            }
        }
    }

    #[test]
    fn explicit_step_stop_gradient_changes_gradients_not_value() {
        let (model, disc, feat, w) = tiny_ctx(LatentMode::Continuous, 1000);
        let ctx = StepContext { model: &model, disc: &disc, feat: &feat, weights: &w, step: 0 };
        let x = random_image(8, 71);
        let tau = Transform2D::rotation(1).unwrap();
        let out_plain = explicit_step(&ctx, &x, &tau, false, &mut split(72, "s", 0)).unwrap();
        let out_sg = explicit_step(&ctx, &x, &tau, true, &mut split(72, "s", 0)).unwrap();
        assert_eq!(out_plain.breakdown.explicit_eq.to_bits(), out_sg.breakdown.explicit_eq.to_bits());
        assert!(out_plain.breakdown.explicit_eq > 0.0);
        // Sum each side's contributions per parameter before comparing:
        // the sg graph has fewer contributing leaves, not just different
        // values.
        let fold = |acc: &crate::nn::params::GradAccum| {
            let mut sums = std::collections::HashMap::<usize, ndarray::ArrayD<f64>>::new();
            for (idx, g) in &acc.per_param {
                sums.entry(*idx)
                    .and_modify(|a| a.zip_mut_with(g, |x, y| *x += y))
                    .or_insert_with(|| g.clone());
            }
            sums
        };
        let plain = fold(&out_plain.gen_grads);
        let sg = fold(&out_sg.gen_grads);
        let differs = plain.iter().any(|(idx, g)| sg.get(idx) != Some(g));
        assert!(differs, "stop-gradient must alter encoder gradients");
    }

    #[test]
    fn gate_frequencies_match_binomial_oracle() {
        let mut rng = split(81, "gate", 0);
        let n = 30_000usize;
        let hits = (0..n).filter(|_| gate_draw(&mut rng, 0.5)).count();
        let sd = (n as f64 * 0.25).sqrt();
        assert!((hits as f64 - n as f64 * 0.5).abs() < 4.0 * sd);
        let mut rng = split(82, "gate", 0);
        assert!((0..500).all(|_| gate_draw(&mut rng, 1.0)));
        let mut rng = split(83, "gate", 0);
        assert!((0..500).all(|_| !gate_draw(&mut rng, 0.0)));
    }

    #[test]
    fn total_step_saturation() {
        let (model, disc, feat, w) = tiny_ctx(LatentMode::Continuous, 1000);
        let ctx = StepContext { model: &model, disc: &disc, feat: &feat, weights: &w, step: 0 };
        let x = random_image(8, 91);
        let mut sampler = TransformSamplerConfig { p_alpha: 1.0, ..Default::default() };
        let mut rng = split(92, "total", 0);
        for _ in 0..4 {
            let out = total_training_step(&ctx, &x, &sampler, &mut rng).unwrap();
            assert!(out.breakdown.was_identity);
        }
        sampler.p_alpha = 0.0;
        sampler.scale_min = 0.5;
        for _ in 0..4 {
            let out = total_training_step(&ctx, &x, &sampler, &mut rng).unwrap();
            assert!(!out.breakdown.was_identity);
        }
    }
}
