//! The diffusion side in isolation: schedule properties, denoiser
//! training on synthetic latents, and ancestral sampling statistics.

use eqvae::latentgen::{
    diffusion_forward, sample_latents, train_latent_denoiser, LatentDataset, LatentGenConfig,
    NoiseSchedule,
};
use eqvae::FeatureGrid;
use ndarray::Array3;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;

fn main() -> eqvae::Result<()> {
    let sched = NoiseSchedule::linear(1000)?;
    println!(
        "schedule: T = {}, beta in [{:.2e}, {:.2e}], terminal alpha_bar = {:.2e}",
        sched.t_steps,
        sched.betas[0],
        sched.betas[sched.t_steps - 1],
        sched.alpha_bars[sched.t_steps]
    );

    let mut rng = ChaCha12Rng::seed_from_u64(3);
    let z0 = FeatureGrid::constant(2, 4, 4, 1.0)?;
    let noise = FeatureGrid::new(Array3::from_shape_fn((2, 4, 4), |_| {
        rng.sample::<f64, _>(rand_distr::StandardNormal)
    }))?;
    for t in [0, 250, 500, 1000] {
        let z_t = diffusion_forward(&z0, t, &noise, &sched)?;
        let rms = (z_t.sq_norm() / 32.0).sqrt();
        println!("  t = {t:>4}: rms(z_t) = {rms:.3}");
    }

    // Synthetic latent dataset around two modes.
    let raw: Vec<FeatureGrid> = (0..64)
        .map(|i| {
            let center = if i % 2 == 0 { 1.2 } else { -1.2 };
            FeatureGrid::new(Array3::from_shape_fn((2, 4, 4), |_| {
                center + 0.3 * rng.sample::<f64, _>(rand_distr::StandardNormal)
            }))
        })
        .collect::<eqvae::Result<_>>()?;
    let data = LatentDataset::from_raw(raw, "synthetic-two-modes")?;
    println!("\nlatent dataset: scale_factor = {:.3}", data.scale_factor);

    let cfg = LatentGenConfig {
        t_steps: 200,
        width: 16,
        blocks: 2,
        t_embed_dim: 16,
        train_steps: 800,
        batch_size: 8,
        lr: 1e-3,
        seed: 5,
    };
    let (model, sched, losses) = train_latent_denoiser(&data, &cfg)?;
    println!(
        "denoiser trained {} steps: loss {:.3} -> {:.3}",
        cfg.train_steps,
        losses[..20].iter().sum::<f64>() / 20.0,
        losses[losses.len() - 20..].iter().sum::<f64>() / 20.0
    );

    let samples = sample_latents(&model, &sched, 200, (2, 4, 4), &mut rng)?;
    let mut values: Vec<f64> = Vec::new();
    for s in &samples {
        values.extend(s.iter().copied());
    }
    let mean = values.iter().sum::<f64>() / values.len() as f64;
    let bimodal = values.iter().filter(|v| v.abs() > 0.5).count() as f64 / values.len() as f64;
    println!("sampled {} latents: mean {:.3}, |v| > 0.5 fraction {:.2}", samples.len(), mean, bimodal);
    Ok(())
}
