//! Evaluation commands over trained checkpoints, plus run comparison.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::dataset::{ingest_dataset, DatasetHandle};
use super::trainer::read_report;
use crate::autoencoder::{load_checkpoint, AutoencoderModel, PerceptualExtractor};
use crate::error::{config_err, data_err, Error, Result};
use crate::grid::FeatureGrid;
use crate::latentgen::{
    image_feature_stats, sample_and_score, self_distance_floor, DenoiserModel, LatentDataset,
    NoiseSchedule,
};
use crate::nn::rng::split;
use crate::probes::{
    equivariance_error, frechet_distance, pca_latent_visualization, psnr, rotation_set, scale_set,
    ssim, twonn_intrinsic_dimension, EquivarianceReport, FrechetStats, IdEstimate,
};
use crate::transform2d::apply_transform_to;

fn load_model(ckpt: &Path) -> Result<(AutoencoderModel, u64)> {
    let (state, meta) = load_checkpoint(ckpt)?;
    // The original run's seed keeps the train/val split reproducible.
    let seed = serde_json::from_str::<super::config::ExperimentConfig>(&meta.config_json)
        .map(|c| c.seed)
        .unwrap_or(0);
    Ok((state.model, seed))
}

fn eval_images(data: &DatasetHandle, cap: usize) -> Vec<FeatureGrid> {
    let source = if data.val.len() >= 2 { &data.val } else { &data.train };
    source.iter().take(cap).cloned().collect()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReconReport {
    pub n_images: usize,
    pub psnr: f64,
    pub ssim: f64,
    pub frechet_recon_proxy: f64,
}

/// PSNR/SSIM and the Fréchet reconstruction proxy of a checkpoint over
/// the val split of a dataset.
pub fn eval_recon(ckpt: &Path, data_dir: &Path, cap: usize) -> Result<ReconReport> {
    let (model, seed) = load_model(ckpt)?;
    let data = ingest_dataset(data_dir, model.cfg.image_size, seed)?;
    let images = eval_images(&data, cap);
    if images.len() < 2 {
        return data_err("need at least 2 eval images");
    }
    let feat = PerceptualExtractor::fixed();
    let mut psnr_sum = 0.0;
    let mut ssim_sum = 0.0;
    let mut real_rows = Vec::new();
    let mut recon_rows = Vec::new();
    for x in &images {
        let z = model.encode_latent(x)?;
        let recon = decode_eval(&model, &z)?;
        psnr_sum += psnr(x, &recon)?;
        ssim_sum += ssim(x, &recon)?;
        real_rows.push(feat.pooled(x)?);
        recon_rows.push(feat.pooled(&recon)?);
    }
    Ok(ReconReport {
        n_images: images.len(),
        psnr: psnr_sum / images.len() as f64,
        ssim: ssim_sum / images.len() as f64,
        frechet_recon_proxy: frechet_distance(
            &FrechetStats::from_features(&real_rows)?,
            &FrechetStats::from_features(&recon_rows)?,
        )?,
    })
}

fn decode_eval(model: &AutoencoderModel, z: &FeatureGrid) -> Result<FeatureGrid> {
    if model.codebook_ref.is_some() {
        let cb = model.codebook()?;
        let q = crate::autoencoder::quantize(z, &cb)?;
        model.decode(&q.quantized)
    } else {
        model.decode(z)
    }
}

/// Equivariance error of a checkpoint over the rotation and scale sets.
pub fn eval_equivariance(ckpt: &Path, data_dir: &Path, cap: usize) -> Result<EquivarianceReport> {
    let (model, seed) = load_model(ckpt)?;
    let data = ingest_dataset(data_dir, model.cfg.image_size, seed)?;
    let images = eval_images(&data, cap);
    let transforms = [rotation_set(), scale_set()].concat();
    equivariance_error(|x| model.encode_latent(x), &images, &transforms)
}

/// TwoNN intrinsic dimension of a checkpoint's latents. `per_site` pools
/// each spatial site as one point (the default); otherwise each whole
/// flattened latent is one point.
pub fn estimate_id(
    ckpt: &Path,
    data_dir: &Path,
    per_site: bool,
    max_points: usize,
) -> Result<IdEstimate> {
    use rand::Rng;
    let (model, seed) = load_model(ckpt)?;
    let data = ingest_dataset(data_dir, model.cfg.image_size, seed)?;
    let mut points: Vec<Vec<f64>> = Vec::new();
    for x in data.train.iter().chain(data.val.iter()) {
        let z = model.encode_latent(x)?;
        let (c, h, w) = z.shape();
        let v = z.values();
        if per_site {
            for r in 0..h {
                for col in 0..w {
                    points.push((0..c).map(|ch| v[(ch, r, col)]).collect());
                }
            }
        } else {
            points.push(v.iter().copied().collect());
        }
    }
    let mut rng = split(seed, "id-subsample", 1);
    while points.len() > max_points.max(100) {
        let drop = rng.random_range(0..points.len());
        points.swap_remove(drop);
    }
    let d = points.first().map(|p| p.len()).unwrap_or(0);
    let flat: Vec<f64> = points.iter().flatten().copied().collect();
    let pts = Array2::from_shape_vec((points.len(), d), flat)
        .map_err(|e| Error::Numerical(e.to_string()))?;
    twonn_intrinsic_dimension(&pts)
}

/// Writes top-3-component PCA maps of the first `count` eval latents as
/// PNG files and returns their paths.
pub fn visualize_pca(ckpt: &Path, data_dir: &Path, out_dir: &Path, count: usize) -> Result<Vec<PathBuf>> {
    let (model, seed) = load_model(ckpt)?;
    let data = ingest_dataset(data_dir, model.cfg.image_size, seed)?;
    let images = eval_images(&data, count.max(1));
    let latents = images
        .iter()
        .map(|x| model.encode_latent(x))
        .collect::<Result<Vec<_>>>()?;
    let maps = pca_latent_visualization(&latents)?;
    std::fs::create_dir_all(out_dir)?;
    let mut paths = Vec::new();
    for (i, map) in maps.iter().enumerate() {
        let path = out_dir.join(format!("pca_{i:04}.png"));
        write_grid_png(&path, map)?;
        paths.push(path);
    }
    Ok(paths)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TransformProbeReport {
    /// Fréchet proxy between transformed inputs and decoded transformed
    /// latents, per transform descriptor.
    pub per_transform: BTreeMap<String, f64>,
    pub n_images: usize,
}

/// Reconstruction quality under latent-space transforms: for each
/// transform, the Fréchet proxy between `tau(x)` and `D(tau(E(x)))`.
pub fn probe_latent_transforms(ckpt: &Path, data_dir: &Path, cap: usize) -> Result<TransformProbeReport> {
    let (model, seed) = load_model(ckpt)?;
    let data = ingest_dataset(data_dir, model.cfg.image_size, seed)?;
    let images = eval_images(&data, cap);
    if images.len() < 2 {
        return data_err("need at least 2 eval images");
    }
    let feat = PerceptualExtractor::fixed();
    let transforms = [scale_set(), rotation_set()].concat();
    let f = model.cfg.compression;
    let mut per_transform = BTreeMap::new();
    for tau in &transforms {
        let mut target_rows = Vec::new();
        let mut decoded_rows = Vec::new();
        for x in &images {
            let z = model.encode_latent(x)?;
            let (lh, lw) = tau.output_shape(z.height(), z.width())?;
            let z_tau = apply_transform_to(&z, tau, (lh, lw))?;
            let decoded = decode_eval(&model, &z_tau)?;
            let target = apply_transform_to(x, tau, (f * lh, f * lw))?;
            target_rows.push(feat.pooled(&target)?);
            decoded_rows.push(feat.pooled(&decoded)?);
        }
        let d = frechet_distance(
            &FrechetStats::from_features(&target_rows)?,
            &FrechetStats::from_features(&decoded_rows)?,
        )?;
        per_transform.insert(tau.descriptor(), d);
    }
    Ok(TransformProbeReport { per_transform, n_images: images.len() })
}

/// Encodes the train split to deterministic latents and saves them as a
/// normalized latent dataset (binary array + metadata).
pub fn build_latent_dataset(ckpt: &Path, data_dir: &Path, out_bin: &Path, out_meta: &Path) -> Result<()> {
    let (model, seed) = load_model(ckpt)?;
    let data = ingest_dataset(data_dir, model.cfg.image_size, seed)?;
    let latents = data
        .train
        .iter()
        .map(|x| model.encode_latent(x))
        .collect::<Result<Vec<_>>>()?;
    let source = format!("{}", ckpt.display());
    let ds = LatentDataset::from_raw(latents, source)?;
    ds.save(out_bin, out_meta)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GenEvalReport {
    pub n_samples: usize,
    pub frechet_gen_proxy: f64,
    /// Real-vs-real proxy between val halves: differences below this are
    /// noise.
    pub noise_floor: f64,
}

/// Samples the denoiser, decodes through the autoencoder, and scores the
/// images against held-out real features.
pub fn eval_gen(
    denoiser_path: &Path,
    ae_ckpt: &Path,
    latent_bin: &Path,
    latent_meta: &Path,
    data_dir: &Path,
    n: usize,
    seed: u64,
) -> Result<GenEvalReport> {
    let (model, data_seed) = load_model(ae_ckpt)?;
    let (denoiser, sched) = crate::latentgen::load_denoiser(denoiser_path)?;
    let dataset = LatentDataset::load(latent_bin, latent_meta)?;
    let data = ingest_dataset(data_dir, model.cfg.image_size, data_seed)?;
    let real = eval_images(&data, usize::MAX);
    if real.len() < 4 {
        return data_err("need at least 4 held-out images");
    }
    let feat = PerceptualExtractor::fixed();
    let real_stats = image_feature_stats(&real, &feat)?;
    let floor = self_distance_floor(&real, &feat)?;
    let mut rng = split(seed, "eval-gen", 0);
    let (_images, proxy) =
        sample_and_score(&denoiser, &sched, &model, &dataset, n, &mut rng, &real_stats, &feat)?;
    Ok(GenEvalReport { n_samples: n, frechet_gen_proxy: proxy, noise_floor: floor })
}

/// Wrapper re-exported for CLI use.
pub fn train_latentgen(
    latent_bin: &Path,
    latent_meta: &Path,
    cfg: &crate::latentgen::LatentGenConfig,
    out_path: &Path,
    losses_csv: Option<&Path>,
) -> Result<(DenoiserModel, NoiseSchedule)> {
    let data = LatentDataset::load(latent_bin, latent_meta)?;
    let (model, sched, losses) = crate::latentgen::train_latent_denoiser(&data, cfg)?;
    crate::latentgen::save_denoiser(out_path, &model)?;
    if let Some(path) = losses_csv {
        let mut w = csv::Writer::from_path(path).map_err(|e| Error::Data(e.to_string()))?;
        w.write_record(["step", "loss"]).map_err(|e| Error::Data(e.to_string()))?;
        for (i, l) in losses.iter().enumerate() {
            w.write_record([i.to_string(), format!("{l}")])
                .map_err(|e| Error::Data(e.to_string()))?;
        }
        w.flush()?;
    }
    Ok((model, sched))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub metric: String,
    pub run_a: f64,
    pub run_b: f64,
    pub delta: f64,
    pub rel_change: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ComparisonReport {
    pub run_a: String,
    pub run_b: String,
    pub rows: Vec<ComparisonRow>,
}

/// Side-by-side metric deltas between two completed runs, plus plot-ready
/// CSVs (metric deltas; transform-probe bars when both runs carry probe
/// output).
pub fn compare_runs(run_a: &Path, run_b: &Path, out_dir: &Path) -> Result<ComparisonReport> {
    let a = read_report(run_a)?;
    let b = read_report(run_b)?;
    let mut rows = Vec::new();
    let mut push = |metric: &str, va: f64, vb: f64| {
        let rel = if va != 0.0 { (vb - va) / va.abs() } else { f64::NAN };
        rows.push(ComparisonRow {
            metric: metric.to_string(),
            run_a: va,
            run_b: vb,
            delta: vb - va,
            rel_change: rel,
        });
    };
    push("val_psnr", a.val_psnr, b.val_psnr);
    push("val_ssim", a.val_ssim, b.val_ssim);
    push("frechet_recon_proxy", a.frechet_recon_proxy, b.frechet_recon_proxy);
    push("equivariance_rotation_mean", a.equivariance.rotation_mean, b.equivariance.rotation_mean);
    push("equivariance_scale_mean", a.equivariance.scale_mean, b.equivariance.scale_mean);
    if let (Some(ia), Some(ib)) = (&a.latent_id, &b.latent_id) {
        push("latent_id", ia.id, ib.id);
    }
    for (k, va) in &a.equivariance.per_transform {
        if let Some(vb) = b.equivariance.per_transform.get(k) {
            push(&format!("equivariance[{k}]"), *va, *vb);
        }
    }
    let report = ComparisonReport {
        run_a: run_a.display().to_string(),
        run_b: run_b.display().to_string(),
        rows,
    };

    std::fs::create_dir_all(out_dir)?;
    std::fs::write(
        out_dir.join("comparison.json"),
        serde_json::to_string_pretty(&report).map_err(|e| Error::Data(e.to_string()))?,
    )?;
    let mut w = csv::Writer::from_path(out_dir.join("metric_deltas.csv"))
        .map_err(|e| Error::Data(e.to_string()))?;
    w.write_record(["metric", "run_a", "run_b", "delta", "rel_change"])
        .map_err(|e| Error::Data(e.to_string()))?;
    for r in &report.rows {
        w.write_record([
            r.metric.clone(),
            format!("{}", r.run_a),
            format!("{}", r.run_b),
            format!("{}", r.delta),
            format!("{}", r.rel_change),
        ])
        .map_err(|e| Error::Data(e.to_string()))?;
    }
    w.flush()?;

    // Transform-probe bar data when both runs have it.
    let probe_a = run_a.join("transform_probe.json");
    let probe_b = run_b.join("transform_probe.json");
    if probe_a.exists() && probe_b.exists() {
        let pa: TransformProbeReport = serde_json::from_str(
            &std::fs::read_to_string(&probe_a).map_err(|e| Error::Data(e.to_string()))?,
        )
        .map_err(|e| Error::Data(e.to_string()))?;
        let pb: TransformProbeReport = serde_json::from_str(
            &std::fs::read_to_string(&probe_b).map_err(|e| Error::Data(e.to_string()))?,
        )
        .map_err(|e| Error::Data(e.to_string()))?;
        let mut w = csv::Writer::from_path(out_dir.join("transform_bars.csv"))
            .map_err(|e| Error::Data(e.to_string()))?;
        w.write_record(["transform", "run_a_proxy", "run_b_proxy"])
            .map_err(|e| Error::Data(e.to_string()))?;
        for (k, va) in &pa.per_transform {
            if let Some(vb) = pb.per_transform.get(k) {
                w.write_record([k.clone(), format!("{va}"), format!("{vb}")])
                    .map_err(|e| Error::Data(e.to_string()))?;
            }
        }
        w.flush()?;
    }
    // ID comparison data.
    if let (Some(ia), Some(ib)) = (&a.latent_id, &b.latent_id) {
        let mut w = csv::Writer::from_path(out_dir.join("id_comparison.csv"))
            .map_err(|e| Error::Data(e.to_string()))?;
        w.write_record(["run", "intrinsic_dimension", "n_points"])
            .map_err(|e| Error::Data(e.to_string()))?;
        w.write_record([report.run_a.clone(), format!("{}", ia.id), ia.n_points.to_string()])
            .map_err(|e| Error::Data(e.to_string()))?;
        w.write_record([report.run_b.clone(), format!("{}", ib.id), ib.n_points.to_string()])
            .map_err(|e| Error::Data(e.to_string()))?;
        w.flush()?;
    }
    Ok(report)
}

/// Writes a 1- or 3-channel grid as a PNG, mapping the declared range
/// (default `[-1, 1]`) to 8-bit.
pub fn write_grid_png(path: &Path, grid: &FeatureGrid) -> Result<()> {
    let (c, h, w) = grid.shape();
    if c != 1 && c != 3 {
        return config_err(format!("png export needs 1 or 3 channels, got {c}"));
    }
    let (lo, hi) = grid.value_range().unwrap_or((-1.0, 1.0));
    let span = (hi - lo).max(1e-12);
    let v = grid.values();
    let to_u8 = |x: f64| (((x - lo) / span).clamp(0.0, 1.0) * 255.0).round() as u8;
    let mut img = image::RgbImage::new(w as u32, h as u32);
    for r in 0..h {
        for col in 0..w {
            let px = if c == 3 {
                image::Rgb([
                    to_u8(v[(0, r, col)]),
                    to_u8(v[(1, r, col)]),
                    to_u8(v[(2, r, col)]),
                ])
            } else {
                let g = to_u8(v[(0, r, col)]);
                image::Rgb([g, g, g])
            };
            img.put_pixel(col as u32, r as u32, px);
        }
    }
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    img.save(path).map_err(|e| Error::Data(format!("write {}: {e}", path.display())))
}
