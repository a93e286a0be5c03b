//! Measure the normalized equivariance error of two reference encoders:
//! a channel-wise bicubic downsampler (equivariant to right-angle
//! rotations by construction) and a deliberately non-equivariant one.

use eqvae::probes::{equivariance_error, rotation_set, scale_set};
use eqvae::FeatureGrid;
use ndarray::Array3;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;

fn main() -> eqvae::Result<()> {
    let mut rng = ChaCha12Rng::seed_from_u64(7);
    let images: Vec<FeatureGrid> = (0..8)
        .map(|_| {
            FeatureGrid::new(Array3::from_shape_fn((3, 32, 32), |_| rng.random_range(-1.0..1.0)))
        })
        .collect::<eqvae::Result<_>>()?;
    let transforms = [rotation_set(), scale_set()].concat();

    let downsample = |x: &FeatureGrid| eqvae::probes::reference_downsample(x, 4);
    let report = equivariance_error(downsample, &images, &transforms)?;
    println!("bicubic reference encoder:");
    println!("  rotation_mean = {:.3e}", report.rotation_mean);
    println!("  scale_mean    = {:.3e}", report.scale_mean);

    // Break equivariance with a fixed positional ramp.
    let ramped = |x: &FeatureGrid| -> eqvae::Result<FeatureGrid> {
        let base = eqvae::probes::reference_downsample(x, 4)?;
        let (c, h, w) = base.shape();
        let ramp = Array3::from_shape_fn((c, h, w), |(_, r, col)| 0.5 * r as f64 - 0.3 * col as f64);
        FeatureGrid::new(base.values().to_owned() + &ramp)
    };
    let report = equivariance_error(ramped, &images, &transforms)?;
    println!("positional-ramp encoder:");
    println!("  rotation_mean = {:.3}", report.rotation_mean);
    println!("  scale_mean    = {:.3}", report.scale_mean);
    for (k, v) in &report.per_transform {
        println!("    {k:>10}: {v:.4}");
    }
    Ok(())
}
