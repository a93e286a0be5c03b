//! Config-driven training runs.
//!
//! A run directory holds `config.echo`, per-epoch checkpoints under
//! `ckpt/`, a per-step `metrics.csv`, PCA maps under `viz/`, and a final
//! `report.json`. Runs resume from their own checkpoints (same config
//! hash only) and are bit-reproducible given the seed; the only
//! non-deterministic CSV column is `wall_time_ms`.

use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::config::{config_hash, ExperimentConfig, Mode};
use super::dataset::{ingest_dataset, DatasetHandle};
use crate::autoencoder::{
    load_checkpoint, save_checkpoint, AutoencoderModel, Discriminator, PerceptualExtractor,
    TrainState,
};
use crate::error::{config_err, Error, Result};
use crate::grid::FeatureGrid;
use crate::nn::rng::{fingerprint, split};
use crate::nn::Adam;
use crate::objectives::{explicit_step, standard_step, total_training_step, StepContext, StepOutput};
use crate::transform2d::sample_transform;
use crate::probes::{
    equivariance_error, frechet_distance, psnr, rotation_set, scale_set, ssim, EquivarianceReport,
    FrechetStats, IdEstimate,
};
use crate::transform2d::TransformSamplerConfig;

pub const METRICS_HEADER: [&str; 12] = [
    "step",
    "epoch",
    "rec_pixel",
    "rec_perceptual",
    "gan_g",
    "gan_d",
    "reg",
    "explicit_eq",
    "total",
    "identity_fraction",
    "wall_time_ms",
    "rng_fingerprint",
];

/// One optimization step, averaged over the batch.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricsRow {
    pub step: u64,
    pub epoch: u64,
    pub rec_pixel: f64,
    pub rec_perceptual: f64,
    pub gan_g: f64,
    pub gan_d: f64,
    pub reg: f64,
    pub explicit_eq: f64,
    pub total: f64,
    pub identity_fraction: f64,
    pub wall_time_ms: f64,
    pub rng_fingerprint: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FinalReport {
    pub mode: Mode,
    pub seed: u64,
    pub epochs: u64,
    pub global_steps: u64,
    pub n_train: usize,
    pub n_val: usize,
    pub skipped_files: usize,
    pub val_psnr: f64,
    pub val_ssim: f64,
    /// Fréchet feature distance between val images and their
    /// reconstructions.
    pub frechet_recon_proxy: f64,
    pub equivariance: EquivarianceReport,
    pub latent_id: Option<IdEstimate>,
    pub config_sha: String,
}

/// How many val images feed the heavier report probes.
const REPORT_EQ_CAP: usize = 64;
const REPORT_ID_IMAGE_CAP: usize = 256;
const REPORT_ID_POINT_CAP: usize = 20_000;

fn ckpt_path(run_dir: &Path, epoch: u64) -> PathBuf {
    run_dir.join("ckpt").join(format!("epoch_{epoch:04}"))
}

fn latest_checkpoint(run_dir: &Path) -> Option<(u64, PathBuf)> {
    let dir = run_dir.join("ckpt");
    let mut best: Option<(u64, PathBuf)> = None;
    if let Ok(entries) = std::fs::read_dir(&dir) {
        for entry in entries.flatten() {
            let name = entry.file_name().to_string_lossy().into_owned();
            if let Some(num) = name.strip_prefix("epoch_") {
                if let Ok(epoch) = num.parse::<u64>() {
                    if best.as_ref().is_none_or(|(e, _)| epoch > *e) {
                        best = Some((epoch, entry.path()));
                    }
                }
            }
        }
    }
    best
}

/// Runs one experiment to completion and returns the run directory.
///
/// If the directory already holds checkpoints for this exact config
/// (matching hash), training resumes after the last saved epoch; a
/// mismatched hash is refused.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<PathBuf> {
    cfg.validate()?;
    let run_dir = cfg.out_dir.clone();
    std::fs::create_dir_all(run_dir.join("ckpt"))?;
    std::fs::create_dir_all(run_dir.join("viz"))?;
    let sha = config_hash(cfg)?;
    let config_json = cfg.to_json()?;
    std::fs::write(run_dir.join("config.echo"), cfg.to_toml()?)?;

    let data = ingest_dataset(&cfg.dataset_path, cfg.image_size, cfg.seed)?;
    for w in &data.warnings {
        eprintln!("warning: {w}");
    }
    if data.train.is_empty() {
        return Err(Error::Data("train split is empty".into()));
    }

    // Fresh start, resume, or fine-tune initialization.
    let mut state = if let Some((epoch, path)) = latest_checkpoint(&run_dir) {
        let (state, meta) = load_checkpoint(&path)?;
        if meta.config_sha != sha {
            return config_err(format!(
                "refusing to resume: checkpoint at {} was written under config {} but the \
                 current config hashes to {sha}",
                path.display(),
                meta.config_sha
            ));
        }
        eprintln!("resuming after epoch {epoch}");
        state
    } else if let Some(init) = &cfg.init_checkpoint {
        let (loaded, _meta) = load_checkpoint(init)?;
        if loaded.model.cfg != cfg.autoencoder {
            return config_err(format!(
                "init checkpoint autoencoder config {:?} does not match the requested {:?}",
                loaded.model.cfg, cfg.autoencoder
            ));
        }
        // New training stage: keep parameters and the step counter (the
        // adversarial warmup refers to the model lineage), fresh
        // optimizers and rng, epoch count restarts.
        TrainState {
            model: loaded.model,
            disc: loaded.disc,
            adam_g: Adam::new(cfg.lr),
            adam_d: Adam::new(cfg.lr),
            rng: split(cfg.seed, "train-loop", 0),
            epoch: 0,
            global_step: loaded.global_step,
        }
    } else {
        TrainState {
            model: AutoencoderModel::new(cfg.autoencoder.clone(), cfg.seed)?,
            disc: Discriminator::new(cfg.autoencoder.base_width, cfg.seed),
            adam_g: Adam::new(cfg.lr),
            adam_d: Adam::new(cfg.lr),
            rng: split(cfg.seed, "train-loop", 0),
            epoch: 0,
            global_step: 0,
        }
    };

    let feat = PerceptualExtractor::fixed();
    let metrics_path = run_dir.join("metrics.csv");
    let resuming = state.epoch > 0;
    let mut csv = if resuming && metrics_path.exists() {
        csv::WriterBuilder::new().has_headers(false).from_writer(
            std::fs::OpenOptions::new().append(true).open(&metrics_path)?,
        )
    } else {
        let mut w = csv::Writer::from_path(&metrics_path)
            .map_err(|e| Error::Data(format!("create metrics csv: {e}")))?;
        w.write_record(METRICS_HEADER)
            .map_err(|e| Error::Data(format!("metrics header: {e}")))?;
        w.into_inner()
            .map(|f| csv::WriterBuilder::new().has_headers(false).from_writer(f))
            .map_err(|e| Error::Data(format!("metrics csv: {e}")))?
    };

    let started = Instant::now();
    while state.epoch < cfg.epochs {
        let epoch = state.epoch;
        let order = shuffled_indices(data.train.len(), cfg.seed, epoch);
        let mut reseed_pool: Option<FeatureGrid> = None;

        for batch in order.chunks(cfg.batch_size) {
            let outputs = {
                let TrainState { model, disc, rng, global_step, .. } = &mut state;
                run_batch(cfg, model, disc, rng, *global_step, &data, batch)?
            };
            let row = apply_batch(cfg, &mut state, outputs, &mut reseed_pool, epoch, &started)?;
            csv.serialize(&row)
                .map_err(|e| Error::Data(format!("metrics row: {e}")))?;
        }
        csv.flush()?;

        // Dead codebook entries reseed from recent encoder features.
        if state.model.codebook_ref.is_some() {
            if let Some(pool) = &reseed_pool {
                let mut rng = split(cfg.seed, "reseed", epoch);
                state.model.reseed_dead_entries(pool, &mut rng)?;
            }
            state.model.reset_usage();
        }

        state.epoch = epoch + 1;
        save_checkpoint(&ckpt_path(&run_dir, state.epoch), &state, &config_json, &sha)?;
    }
    csv.flush()?;
    drop(csv);

    let report = final_report(cfg, &state, &data, &feat, &sha)?;
    std::fs::write(
        run_dir.join("report.json"),
        serde_json::to_string_pretty(&report).map_err(|e| Error::Data(e.to_string()))?,
    )?;
    Ok(run_dir)
}

fn shuffled_indices(n: usize, seed: u64, epoch: u64) -> Vec<usize> {
    use rand::Rng;
    let mut rng = split(seed, "epoch-order", epoch);
    let mut order: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = rng.random_range(0..=i);
        order.swap(i, j);
    }
    order
}

fn run_batch(
    cfg: &ExperimentConfig,
    model: &AutoencoderModel,
    disc: &Discriminator,
    rng: &mut rand_chacha::ChaCha12Rng,
    global_step: u64,
    data: &DatasetHandle,
    batch: &[usize],
) -> Result<Vec<StepOutput>> {
    let feat = PerceptualExtractor::fixed();
    let ctx = StepContext { model, disc, feat: &feat, weights: &cfg.weights, step: global_step };
    let non_identity = TransformSamplerConfig { p_alpha: 0.0, ..cfg.sampler.clone() };
    let mut outputs = Vec::with_capacity(batch.len());
    for &idx in batch {
        let x = &data.train[idx];
        let out = match cfg.mode {
            Mode::BaselineVae => standard_step(&ctx, x, rng)?,
            Mode::EqvaeFinetune => total_training_step(&ctx, x, &cfg.sampler, rng)?,
            Mode::ExplicitAblation | Mode::ExplicitSgAblation => {
                let tau = sample_transform(rng, &non_identity)?;
                let sg = cfg.mode == Mode::ExplicitSgAblation;
                explicit_step(&ctx, x, &tau, sg, rng)?
            }
        };
        outputs.push(out);
    }
    Ok(outputs)
}

fn apply_batch(
    _cfg: &ExperimentConfig,
    state: &mut TrainState,
    outputs: Vec<StepOutput>,
    reseed_pool: &mut Option<FeatureGrid>,
    epoch: u64,
    started: &Instant,
) -> Result<MetricsRow> {
    let scale = 1.0 / outputs.len() as f64;
    state.model.params.zero_grads();
    state.disc.params.zero_grads();
    let mut any_disc = false;
    let mut acc = MetricsRow {
        step: state.global_step + 1,
        epoch,
        rec_pixel: 0.0,
        rec_perceptual: 0.0,
        gan_g: 0.0,
        gan_d: 0.0,
        reg: 0.0,
        explicit_eq: 0.0,
        total: 0.0,
        identity_fraction: 0.0,
        wall_time_ms: 0.0,
        rng_fingerprint: String::new(),
    };
    for out in &outputs {
        state.model.params.accumulate(&out.gen_grads, scale);
        if let Some(d) = &out.disc_grads {
            state.disc.params.accumulate(d, scale);
            any_disc = true;
        }
        if let Some(idx) = &out.vq_indices {
            state.model.note_usage(idx);
        }
        if let Some(pool) = &out.pre_quant {
            *reseed_pool = Some(pool.clone());
        }
        let b = &out.breakdown;
        acc.rec_pixel += scale * b.rec_pixel;
        acc.rec_perceptual += scale * b.rec_perceptual;
        acc.gan_g += scale * b.gan_g;
        acc.gan_d += scale * b.gan_d;
        acc.reg += scale * b.reg;
        acc.explicit_eq += scale * b.explicit_eq;
        acc.total += scale * b.total;
        acc.identity_fraction += scale * f64::from(b.was_identity as u8);
    }
    if !acc.total.is_finite() {
        return Err(Error::Numerical(format!(
            "training diverged: non-finite loss at step {}",
            state.global_step + 1
        )));
    }
    state.adam_g.step(&mut state.model.params);
    if any_disc {
        state.adam_d.step(&mut state.disc.params);
    }
    state.global_step += 1;
    acc.wall_time_ms = started.elapsed().as_secs_f64() * 1e3;
    acc.rng_fingerprint = fingerprint(&state.rng);
    Ok(acc)
}

fn final_report(
    cfg: &ExperimentConfig,
    state: &TrainState,
    data: &DatasetHandle,
    feat: &PerceptualExtractor,
    sha: &str,
) -> Result<FinalReport> {
    let model = &state.model;
    // Fréchet stats need at least two images; tiny datasets may leave a
    // thinner val split than that, in which case the train split serves.
    let eval_set: Vec<&FeatureGrid> = if data.val.len() >= 2 {
        data.val.iter().take(REPORT_EQ_CAP).collect()
    } else {
        data.train.iter().take(REPORT_EQ_CAP).collect()
    };

    let mut psnr_sum = 0.0;
    let mut ssim_sum = 0.0;
    let mut real_rows = Vec::new();
    let mut recon_rows = Vec::new();
    for x in &eval_set {
        let z = model.encode_latent(x)?;
        let recon = decode_eval(model, &z)?;
        psnr_sum += psnr(x, &recon)?;
        ssim_sum += ssim(x, &recon)?;
        real_rows.push(feat.pooled(x)?);
        recon_rows.push(feat.pooled(&recon)?);
    }
    let n_eval = eval_set.len() as f64;
    let frechet_recon_proxy = frechet_distance(
        &FrechetStats::from_features(&real_rows)?,
        &FrechetStats::from_features(&recon_rows)?,
    )?;

    let transforms = [rotation_set(), scale_set()].concat();
    let images: Vec<FeatureGrid> = eval_set.iter().map(|x| (*x).clone()).collect();
    let equivariance = equivariance_error(|x| model.encode_latent(x), &images, &transforms)?;

    let latent_id = latent_id_estimate(model, data, cfg.seed)?;

    Ok(FinalReport {
        mode: cfg.mode,
        seed: cfg.seed,
        epochs: state.epoch,
        global_steps: state.global_step,
        n_train: data.train.len(),
        n_val: data.val.len(),
        skipped_files: data.skipped,
        val_psnr: psnr_sum / n_eval,
        val_ssim: ssim_sum / n_eval,
        frechet_recon_proxy,
        equivariance,
        latent_id,
        config_sha: sha.to_string(),
    })
}

/// Quantization-aware eval decode: discrete models decode quantized
/// features, continuous models decode the mean latent directly.
fn decode_eval(model: &AutoencoderModel, z: &FeatureGrid) -> Result<FeatureGrid> {
    if model.codebook_ref.is_some() {
        let cb = model.codebook()?;
        let q = crate::autoencoder::quantize(z, &cb)?;
        model.decode(&q.quantized)
    } else {
        model.decode(z)
    }
}

/// Per-site latent vectors pooled over up to [`REPORT_ID_IMAGE_CAP`]
/// train images, subsampled to [`REPORT_ID_POINT_CAP`] points. `None`
/// when too few points exist for the estimator.
fn latent_id_estimate(
    model: &AutoencoderModel,
    data: &DatasetHandle,
    seed: u64,
) -> Result<Option<IdEstimate>> {
    use rand::Rng;
    let images: Vec<&FeatureGrid> = data.train.iter().take(REPORT_ID_IMAGE_CAP).collect();
    let mut sites: Vec<Vec<f64>> = Vec::new();
    for x in images {
        let z = model.encode_latent(x)?;
        let (c, h, w) = z.shape();
        let v = z.values();
        for r in 0..h {
            for col in 0..w {
                sites.push((0..c).map(|ch| v[(ch, r, col)]).collect());
            }
        }
    }
    if sites.len() < 100 {
        return Ok(None);
    }
    let mut rng = split(seed, "id-subsample", 0);
    while sites.len() > REPORT_ID_POINT_CAP {
        let drop = rng.random_range(0..sites.len());
        sites.swap_remove(drop);
    }
    let d = sites[0].len();
    let flat: Vec<f64> = sites.iter().flatten().copied().collect();
    let pts = ndarray::Array2::from_shape_vec((sites.len(), d), flat)
        .map_err(|e| Error::Numerical(e.to_string()))?;
    match crate::probes::twonn_intrinsic_dimension(&pts) {
        Ok(est) => Ok(Some(est)),
        Err(Error::Config(_)) => Ok(None),
        Err(e) => Err(e),
    }
}

/// Reads a run's final report.
pub fn read_report(run_dir: &Path) -> Result<FinalReport> {
    let path = run_dir.join("report.json");
    let text = std::fs::read_to_string(&path)
        .map_err(|e| Error::Data(format!("missing report {}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| Error::Data(format!("parse {}: {e}", path.display())))
}
