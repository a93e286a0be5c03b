//! The whole story at micro scale: pretrain a baseline autoencoder,
//! fine-tune it with the transformed-reconstruction objective, and
//! compare equivariance errors and reconstruction quality.

use eqvae::autoencoder::AutoencoderConfig;
use eqvae::harness::{
    compare_runs, generate_shapes_corpus, run_experiment, ExperimentConfig, Mode,
};
use eqvae::objectives::LossWeights;

fn main() -> eqvae::Result<()> {
    let root = std::env::temp_dir().join("eqvae_example_finetune");
    let _ = std::fs::remove_dir_all(&root);
    let data = root.join("data");
    generate_shapes_corpus(&data, 96, 16, 1)?;

    let base_cfg = ExperimentConfig {
        dataset_path: data.clone(),
        image_size: 16,
        autoencoder: AutoencoderConfig {
            image_size: 16,
            compression: 4,
            latent_channels: 3,
            base_width: 8,
            ..Default::default()
        },
        weights: LossWeights { gan_warmup_steps: 60, ..LossWeights::default_continuous() },
        epochs: 10,
        batch_size: 8,
        lr: 1e-3,
        seed: 0,
        mode: Mode::BaselineVae,
        out_dir: root.join("baseline"),
        ..Default::default()
    };
    println!("pretraining baseline ...");
    let base_run = run_experiment(&base_cfg)?;

    let ft_cfg = ExperimentConfig {
        mode: Mode::EqvaeFinetune,
        epochs: 4,
        init_checkpoint: Some(base_run.join("ckpt").join("epoch_0010")),
        out_dir: root.join("finetuned"),
        ..base_cfg
    };
    println!("fine-tuning with transformed reconstructions ...");
    let ft_run = run_experiment(&ft_cfg)?;

    let cmp = compare_runs(&base_run, &ft_run, &root.join("cmp"))?;
    println!("\n{:<32}{:>12}{:>12}{:>10}", "metric", "baseline", "finetuned", "rel");
    for row in &cmp.rows {
        println!(
            "{:<32}{:>12.4}{:>12.4}{:>9.1}%",
            row.metric,
            row.run_a,
            row.run_b,
            100.0 * row.rel_change
        );
    }
    println!("\nplot data: {}", root.join("cmp").display());
    Ok(())
}
