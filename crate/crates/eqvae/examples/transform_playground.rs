//! Build spatial transforms, apply them to grids, and sample from the
//! stochastic transform distribution.

use eqvae::transform2d::{apply_transform, sample_transform, Transform2D, TransformSamplerConfig};
use eqvae::FeatureGrid;
use ndarray::Array3;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;

fn main() -> eqvae::Result<()> {
    // A small labeled grid makes the index permutation visible.
    let grid = FeatureGrid::new(Array3::from_shape_fn((1, 3, 4), |(_, r, c)| {
        (10 * (r + 1) + c + 1) as f64
    }))?;
    println!("input 3x4 grid:\n{:?}\n", grid.values());

    for turns in 0..4u8 {
        let tau = Transform2D::rotation(turns)?;
        let out = apply_transform(&grid, &tau)?;
        println!("{} -> shape {:?}", tau.descriptor(), out.shape());
    }

    let tau = Transform2D::new(0.5, 0.25, std::f64::consts::PI)?;
    println!("\nS(0.5, 0.25) * R(pi) matrix: {:?}", tau.matrix());
    let shrunk = apply_transform(&FeatureGrid::constant(3, 8, 8, 5.0)?, &tau)?;
    println!("8x8 constant grid -> {:?}, still constant 5.0", shrunk.shape());

    // Sampler statistics at the default identity probability.
    let cfg = TransformSamplerConfig::default();
    let mut rng = ChaCha12Rng::seed_from_u64(0);
    let n = 10_000;
    let mut identity = 0;
    let mut by_angle = [0usize; 4];
    for _ in 0..n {
        let t = sample_transform(&mut rng, &cfg)?;
        if t.is_identity() {
            identity += 1;
        } else {
            by_angle[t.quarter_turns() as usize] += 1;
        }
    }
    println!("\n{n} draws at p_alpha = {}:", cfg.p_alpha);
    println!("  identity: {:.3}", identity as f64 / n as f64);
    for (turns, count) in by_angle.iter().enumerate().skip(1) {
        println!("  theta = {:>3} deg: {:.3}", 90 * turns, *count as f64 / n as f64);
    }
    Ok(())
}
