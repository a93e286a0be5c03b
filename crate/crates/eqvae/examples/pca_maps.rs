//! PCA latent visualization: project latent grids onto their top three
//! principal components and write the RGB maps as PNG files.

use eqvae::harness::write_grid_png;
use eqvae::probes::pca_latent_visualization;
use eqvae::FeatureGrid;
use ndarray::Array3;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;

fn main() -> eqvae::Result<()> {
    let mut rng = ChaCha12Rng::seed_from_u64(9);
    // Six-channel latents whose structure lives in three directions: a
    // vertical ramp, a horizontal ramp, and a blob, plus channel noise.
    let latents: Vec<FeatureGrid> = (0..6)
        .map(|i| {
            let phase = i as f64 * 0.7;
            FeatureGrid::new(Array3::from_shape_fn((6, 16, 16), |(c, r, col)| {
                let vert = r as f64 / 15.0 - 0.5;
                let horiz = col as f64 / 15.0 - 0.5;
                let blob = (-((r as f64 - 8.0).powi(2) + (col as f64 - 8.0).powi(2)) / 30.0).exp();
                let mix = match c % 3 {
                    0 => (phase.cos()) * vert + 0.2 * blob,
                    1 => horiz - 0.3 * vert,
                    _ => blob + 0.1 * horiz,
                };
                mix + 0.02 * rng.random_range(-1.0..1.0)
            }))
        })
        .collect::<eqvae::Result<_>>()?;

    let maps = pca_latent_visualization(&latents)?;
    let out = std::env::temp_dir().join("eqvae_example_pca");
    std::fs::create_dir_all(&out)?;
    for (i, map) in maps.iter().enumerate() {
        let path = out.join(format!("pca_{i}.png"));
        write_grid_png(&path, map)?;
        println!("wrote {}", path.display());
    }
    Ok(())
}
