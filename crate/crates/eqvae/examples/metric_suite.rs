//! PSNR, SSIM, Fréchet feature distance, and TwoNN intrinsic dimension
//! on synthetic inputs with known answers.

use eqvae::probes::{frechet_distance, psnr, ssim, twonn_intrinsic_dimension, FrechetStats};
use eqvae::FeatureGrid;
use ndarray::{Array1, Array2, Array3};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;

fn main() -> eqvae::Result<()> {
    let mut rng = ChaCha12Rng::seed_from_u64(1);

    // Reconstruction metrics on a known perturbation.
    let x = FeatureGrid::with_range(
        Array3::from_shape_fn((3, 32, 32), |_| rng.random_range(-1.0..1.0)),
        Some((-1.0, 1.0)),
    )?;
    let noisy = FeatureGrid::with_range(
        x.values().mapv(|v| (v + 0.05 * rng.random_range(-1.0..1.0)).clamp(-1.0, 1.0)),
        Some((-1.0, 1.0)),
    )?;
    println!("psnr(x, x)     = {:.1} dB (capped)", psnr(&x, &x)?);
    println!("psnr(x, noisy) = {:.2} dB", psnr(&x, &noisy)?);
    println!("ssim(x, noisy) = {:.4}", ssim(&x, &noisy)?);

    // Fréchet distance: the 1-D analytic case and a sampled pair.
    let a = FrechetStats { mean: ndarray::array![0.0], covariance: ndarray::array![[1.0]], n: 1000 };
    let b = FrechetStats { mean: ndarray::array![1.0], covariance: ndarray::array![[1.0]], n: 1000 };
    println!("frechet 1-d analytic case = {:.6} (exactly 1)", frechet_distance(&a, &b)?);
    let rows_a: Vec<Array1<f64>> = (0..500)
        .map(|_| Array1::from_shape_fn(8, |_| rng.random_range(-1.0..1.0)))
        .collect();
    let rows_b: Vec<Array1<f64>> = (0..500)
        .map(|_| Array1::from_shape_fn(8, |_| rng.random_range(-0.8..1.2)))
        .collect();
    let sa = FrechetStats::from_features(&rows_a)?;
    let sb = FrechetStats::from_features(&rows_b)?;
    println!("frechet shifted uniforms  = {:.4}", frechet_distance(&sa, &sb)?);

    // TwoNN on a 2-plane embedded in 8-D.
    let n = 2000;
    let mut pts = Array2::<f64>::zeros((n, 8));
    for i in 0..n {
        let u: f64 = rng.random_range(-1.0..1.0);
        let v: f64 = rng.random_range(-1.0..1.0);
        pts[(i, 0)] = u;
        pts[(i, 3)] = v;
        pts[(i, 6)] = 0.5 * u; // linear in u: still dimension 2
    }
    let est = twonn_intrinsic_dimension(&pts)?;
    println!(
        "twonn on a plane in 8-D: id = {:.2} over {} points ({} duplicates dropped)",
        est.id, est.n_points, est.discarded_pairs
    );
    Ok(())
}
