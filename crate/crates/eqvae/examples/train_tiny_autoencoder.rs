//! Train a tiny continuous autoencoder on a generated shapes corpus and
//! print the final report.

use eqvae::autoencoder::AutoencoderConfig;
use eqvae::harness::{generate_shapes_corpus, run_experiment, ExperimentConfig, Mode};
use eqvae::objectives::LossWeights;

fn main() -> eqvae::Result<()> {
    let root = std::env::temp_dir().join("eqvae_example_tiny_ae");
    let data = root.join("data");
    generate_shapes_corpus(&data, 64, 16, 0)?;

    let cfg = ExperimentConfig {
        dataset_path: data,
        image_size: 16,
        autoencoder: AutoencoderConfig {
            image_size: 16,
            compression: 4,
            latent_channels: 3,
            base_width: 8,
            ..Default::default()
        },
        weights: LossWeights { gan_warmup_steps: 20, ..LossWeights::default_continuous() },
        epochs: 4,
        batch_size: 8,
        lr: 1e-3,
        seed: 0,
        mode: Mode::BaselineVae,
        out_dir: root.join("run"),
        ..Default::default()
    };
    let run_dir = run_experiment(&cfg)?;
    let report = std::fs::read_to_string(run_dir.join("report.json"))?;
    println!("{report}");
    println!("checkpoints and metrics.csv under {}", run_dir.display());
    Ok(())
}
