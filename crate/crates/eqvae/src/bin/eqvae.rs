//! Command-line front end. Each subcommand is a thin wrapper over the
//! library; see the crate examples for programmatic use.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use eqvae::autoencoder::LatentMode;
use eqvae::harness::{self, ExperimentConfig, Mode};
use eqvae::latentgen::LatentGenConfig;

#[derive(Parser)]
#[command(name = "eqvae", about = "Desk-scale equivariance-regularized autoencoder lab")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Every experiment-config field is overridable on the command line; flags
/// left unset keep the config-file (or default) values.
#[derive(Args, Debug, Default)]
struct ConfigOverrides {
    /// TOML experiment config to start from.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    dataset: Option<PathBuf>,
    #[arg(long)]
    image_size: Option<usize>,
    #[arg(long)]
    compression: Option<usize>,
    #[arg(long)]
    latent_channels: Option<usize>,
    #[arg(long)]
    base_width: Option<usize>,
    /// continuous | discrete
    #[arg(long)]
    latent_mode: Option<String>,
    #[arg(long)]
    codebook_size: Option<usize>,
    #[arg(long)]
    p_alpha: Option<f64>,
    #[arg(long)]
    scale_min: Option<f64>,
    #[arg(long)]
    scale_max: Option<f64>,
    #[arg(long)]
    isotropic: Option<bool>,
    #[arg(long)]
    enable_rotation: Option<bool>,
    #[arg(long)]
    enable_scale: Option<bool>,
    #[arg(long)]
    lambda_gan: Option<f64>,
    #[arg(long)]
    lambda_reg: Option<f64>,
    #[arg(long)]
    lambda_explicit: Option<f64>,
    #[arg(long)]
    perceptual_weight: Option<f64>,
    #[arg(long)]
    gan_warmup_steps: Option<u64>,
    #[arg(long)]
    epochs: Option<u64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// baseline_vae | eqvae_finetune | explicit_ablation | explicit_sg_ablation
    #[arg(long)]
    mode: Option<String>,
    /// Checkpoint to initialize parameters from.
    #[arg(long)]
    init: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
}

impl ConfigOverrides {
    fn resolve(&self, default_mode: Mode) -> eqvae::Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(path) => ExperimentConfig::load_toml(path)?,
            None => ExperimentConfig { mode: default_mode, ..Default::default() },
        };
        if let Some(v) = &self.dataset {
            cfg.dataset_path = v.clone();
        }
        if let Some(v) = self.image_size {
            cfg.image_size = v;
            cfg.autoencoder.image_size = v;
        }
        if let Some(v) = self.compression {
            cfg.autoencoder.compression = v;
        }
        if let Some(v) = self.latent_channels {
            cfg.autoencoder.latent_channels = v;
        }
        if let Some(v) = self.base_width {
            cfg.autoencoder.base_width = v;
        }
        if let Some(v) = &self.latent_mode {
            cfg.autoencoder.latent_mode = match v.as_str() {
                "continuous" => LatentMode::Continuous,
                "discrete" => LatentMode::Discrete,
                other => {
                    return Err(eqvae::Error::Config(format!("unknown latent mode {other}")))
                }
            };
        }
        if let Some(v) = self.codebook_size {
            cfg.autoencoder.codebook_size = v;
        }
        if let Some(v) = self.p_alpha {
            cfg.sampler.p_alpha = v;
        }
        if let Some(v) = self.scale_min {
            cfg.sampler.scale_min = v;
        }
        if let Some(v) = self.scale_max {
            cfg.sampler.scale_max = v;
        }
        if let Some(v) = self.isotropic {
            cfg.sampler.isotropic = v;
        }
        if let Some(v) = self.enable_rotation {
            cfg.sampler.enable_rotation = v;
        }
        if let Some(v) = self.enable_scale {
            cfg.sampler.enable_scale = v;
        }
        if let Some(v) = self.lambda_gan {
            cfg.weights.lambda_gan = v;
        }
        if let Some(v) = self.lambda_reg {
            cfg.weights.lambda_reg = v;
        }
        if let Some(v) = self.lambda_explicit {
            cfg.weights.lambda_explicit = v;
        }
        if let Some(v) = self.perceptual_weight {
            cfg.weights.perceptual_weight = v;
        }
        if let Some(v) = self.gan_warmup_steps {
            cfg.weights.gan_warmup_steps = v;
        }
        if let Some(v) = self.epochs {
            cfg.epochs = v;
        }
        if let Some(v) = self.batch_size {
            cfg.batch_size = v;
        }
        if let Some(v) = self.lr {
            cfg.lr = v;
        }
        if let Some(v) = self.seed {
            cfg.seed = v;
            cfg.sampler.seed = v;
        }
        if let Some(v) = &self.mode {
            cfg.mode = v.parse()?;
        }
        if let Some(v) = &self.init {
            cfg.init_checkpoint = Some(v.clone());
        }
        if let Some(v) = &self.out {
            cfg.out_dir = v.clone();
        }
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic shapes corpus (random colored polygons and
    /// ellipses).
    GenData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 5000)]
        count: usize,
        #[arg(long, default_value_t = 64)]
        image_size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train an autoencoder from scratch (standard objective by default).
    TrainAe {
        #[command(flatten)]
        overrides: ConfigOverrides,
    },
    /// Fine-tune a checkpoint with the transformed-reconstruction
    /// objective (or an ablation mode via --mode).
    FinetuneEqvae {
        #[command(flatten)]
        overrides: ConfigOverrides,
    },
    /// PSNR / SSIM / Fréchet reconstruction proxy on the val split.
    EvalRecon {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 256)]
        cap: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Normalized equivariance error over the rotation and scale sets.
    EvalEquivariance {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 64)]
        cap: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// TwoNN intrinsic dimension of the latent manifold.
    EstimateId {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// One point per whole latent instead of per spatial site.
        #[arg(long, default_value_t = false)]
        whole_latent: bool,
        #[arg(long, default_value_t = 20000)]
        max_points: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Top-3 principal-component maps of eval latents, as PNG files.
    VisualizePca {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 8)]
        count: usize,
    },
    /// Reconstruction quality under latent-space transforms, per
    /// transform.
    ProbeLatentTransforms {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 64)]
        cap: usize,
        /// Also write transform_probe.json (+ .csv) here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Encode the train split into a normalized latent dataset.
    BuildLatentDataset {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Writes <prefix>.bin and <prefix>.json.
        #[arg(long)]
        out_prefix: PathBuf,
    },
    /// Train the toy latent diffusion model on a latent dataset.
    TrainLatentgen {
        /// Latent dataset prefix (expects <prefix>.bin and <prefix>.json).
        #[arg(long)]
        latents: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        losses_csv: Option<PathBuf>,
        #[arg(long, default_value_t = 1000)]
        t_steps: usize,
        #[arg(long, default_value_t = 32)]
        width: usize,
        #[arg(long, default_value_t = 2)]
        blocks: usize,
        #[arg(long, default_value_t = 20000)]
        train_steps: u64,
        #[arg(long, default_value_t = 16)]
        batch_size: usize,
        #[arg(long, default_value_t = 2e-4)]
        lr: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Sample the denoiser, decode, and score against held-out images.
    EvalGen {
        #[arg(long)]
        denoiser: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        latents: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 500)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Metric deltas and plot data between two completed runs.
    Compare {
        #[arg(long)]
        run_a: PathBuf,
        #[arg(long)]
        run_b: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn emit<T: serde::Serialize>(value: &T, out: Option<&PathBuf>) -> eqvae::Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| eqvae::Error::Data(e.to_string()))?;
    say(&text);
    if let Some(path) = out {
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        std::fs::write(path, text)?;
    }
    Ok(())
}

/// Print without dying when stdout is a closed pipe.
fn say(text: &str) {
    use std::io::Write;
    let _ = writeln!(std::io::stdout(), "{text}");
}

fn run(cli: Cli) -> eqvae::Result<()> {
    match cli.command {
        Command::GenData { out, count, image_size, seed } => {
            harness::generate_shapes_corpus(&out, count, image_size, seed)?;
            say(&format!("wrote {count} images to {}", out.display()));
        }
        Command::TrainAe { overrides } => {
            let cfg = overrides.resolve(Mode::BaselineVae)?;
            let run_dir = harness::run_experiment(&cfg)?;
            say(&format!("run complete: {}", run_dir.display()));
        }
        Command::FinetuneEqvae { overrides } => {
            let cfg = overrides.resolve(Mode::EqvaeFinetune)?;
            if cfg.mode == Mode::BaselineVae {
                return Err(eqvae::Error::Config(
                    "finetune-eqvae expects a fine-tuning mode; use train-ae for baseline_vae".into(),
                ));
            }
            let run_dir = harness::run_experiment(&cfg)?;
            say(&format!("run complete: {}", run_dir.display()));
        }
        Command::EvalRecon { ckpt, data, cap, out } => {
            let report = harness::eval_recon(&ckpt, &data, cap)?;
            emit(&report, out.as_ref())?;
        }
        Command::EvalEquivariance { ckpt, data, cap, out } => {
            let report = harness::eval_equivariance(&ckpt, &data, cap)?;
            emit(&report, out.as_ref())?;
        }
        Command::EstimateId { ckpt, data, whole_latent, max_points, out } => {
            let est = harness::estimate_id(&ckpt, &data, !whole_latent, max_points)?;
            emit(&est, out.as_ref())?;
        }
        Command::VisualizePca { ckpt, data, out, count } => {
            let paths = harness::visualize_pca(&ckpt, &data, &out, count)?;
            say(&format!("wrote {} PCA maps to {}", paths.len(), out.display()));
        }
        Command::ProbeLatentTransforms { ckpt, data, cap, out } => {
            let report = harness::probe_latent_transforms(&ckpt, &data, cap)?;
            if let Some(dir) = &out {
                std::fs::create_dir_all(dir)?;
                std::fs::write(
                    dir.join("transform_probe.json"),
                    serde_json::to_string_pretty(&report)
                        .map_err(|e| eqvae::Error::Data(e.to_string()))?,
                )?;
                let mut w = csv::Writer::from_path(dir.join("transform_probe.csv"))
                    .map_err(|e| eqvae::Error::Data(e.to_string()))?;
                w.write_record(["transform", "frechet_proxy"])
                    .map_err(|e| eqvae::Error::Data(e.to_string()))?;
                for (k, v) in &report.per_transform {
                    w.write_record([k.clone(), format!("{v}")])
                        .map_err(|e| eqvae::Error::Data(e.to_string()))?;
                }
                w.flush()?;
            }
            emit(&report, None)?;
        }
        Command::BuildLatentDataset { ckpt, data, out_prefix } => {
            let bin = out_prefix.with_extension("bin");
            let meta = out_prefix.with_extension("json");
            harness::build_latent_dataset(&ckpt, &data, &bin, &meta)?;
            say(&format!("wrote {} and {}", bin.display(), meta.display()));
        }
        Command::TrainLatentgen {
            latents,
            out,
            losses_csv,
            t_steps,
            width,
            blocks,
            train_steps,
            batch_size,
            lr,
            seed,
        } => {
            let cfg = LatentGenConfig {
                t_steps,
                width,
                blocks,
                t_embed_dim: 32,
                train_steps,
                batch_size,
                lr,
                seed,
            };
            let bin = latents.with_extension("bin");
            let meta = latents.with_extension("json");
            harness::train_latentgen(&bin, &meta, &cfg, &out, losses_csv.as_deref())?;
            say(&format!("denoiser written to {}", out.display()));
        }
        Command::EvalGen { denoiser, ckpt, latents, data, n, seed, out } => {
            let bin = latents.with_extension("bin");
            let meta = latents.with_extension("json");
            let report = harness::eval_gen(&denoiser, &ckpt, &bin, &meta, &data, n, seed)?;
            emit(&report, out.as_ref())?;
        }
        Command::Compare { run_a, run_b, out } => {
            let report = harness::compare_runs(&run_a, &run_b, &out)?;
            emit(&report, None)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
