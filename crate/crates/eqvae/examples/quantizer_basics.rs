//! Vector quantization on a toy codebook: nearest-entry lookup,
//! tie-breaking, idempotence, and usage counting.

use eqvae::autoencoder::{quantize, Codebook};
use eqvae::FeatureGrid;
use ndarray::{array, Array3};

fn main() -> eqvae::Result<()> {
    let cb = Codebook::new(array![
        [0.0, 0.0],
        [1.0, 1.0],
        [-1.0, 1.0],
        [2.0, -2.0],
    ])?;
    println!("codebook ({} entries of dim {}):\n{:?}\n", cb.size(), cb.dim(), cb.entries);

    let z = FeatureGrid::new(
        Array3::from_shape_vec(
            (2, 2, 2),
            vec![
                0.1, 0.9, -0.8, 1.9, // channel 0 per site
                0.2, 1.1, 0.9, -1.8, // channel 1 per site
            ],
        )
        .expect("shape matches data"),
    )?;
    let out = quantize(&z, &cb)?;
    println!("indices:\n{:?}", out.indices);
    println!("commitment loss: {:.4}", out.commitment_loss);

    // Quantizing the quantized grid is a fixed point.
    let again = quantize(&out.quantized, &cb)?;
    assert_eq!(again.quantized, out.quantized);
    assert_eq!(again.commitment_loss, 0.0);
    println!("idempotent: re-quantizing costs {:.1}", again.commitment_loss);

    // Equidistant sites resolve to the lowest index.
    let tie = FeatureGrid::new(
        Array3::from_shape_vec((2, 1, 1), vec![0.5, 0.5]).expect("shape matches data"),
    )?;
    let out = quantize(&tie, &cb)?;
    println!("tie at (0.5, 0.5) -> entry {}", out.indices[(0, 0)]);
    Ok(())
}
