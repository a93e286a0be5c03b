//! Latent-space and reconstruction diagnostics.
//!
//! Everything here is deterministic and evaluation-only: the normalized
//! equivariance error of an encoder under a transform set, PSNR/SSIM,
//! a Fréchet distance between feature distributions, the TwoNN intrinsic
//! dimension estimator, and PCA latent visualizations.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, SymmetricEigen};
use ndarray::{Array1, Array2, Array3};
use serde::{Deserialize, Serialize};

use crate::error::{config_err, numerical_err, Result};
use crate::grid::FeatureGrid;
use crate::transform2d::{apply_transform_to, Transform2D, TransformKind};

/// The rotation evaluation set: quarter, half, and three-quarter turns.
pub fn rotation_set() -> Vec<Transform2D> {
    (1..4).map(|t| Transform2D::rotation(t).expect("right angles")).collect()
}

/// The isotropic scale evaluation set: factors 0.25, 0.50, 0.75.
pub fn scale_set() -> Vec<Transform2D> {
    [0.25, 0.5, 0.75]
        .iter()
        .map(|&s| Transform2D::scaling(s, s).expect("valid scales"))
        .collect()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EquivarianceReport {
    /// Normalized error per transform descriptor.
    pub per_transform: BTreeMap<String, f64>,
    /// Mean over the rotation entries.
    pub rotation_mean: f64,
    /// Mean over the scale entries.
    pub scale_mean: f64,
    pub n_samples: usize,
    /// Samples skipped because the reference encoding had zero norm.
    pub skipped_zero_norm: usize,
}

/// Normalized equivariance error of an encoder over a dataset:
/// per transform, the mean of
/// `||tau(E(x)) - E(tau(x))||^2 / ||E(tau(x))||^2` over samples.
///
/// The transformed input is rendered at exactly `f` times the transformed
/// latent's size (`f` inferred from the encoder's own output), so both
/// paths agree in shape for any transform in the set.
pub fn equivariance_error<E>(
    encode: E,
    images: &[FeatureGrid],
    transforms: &[Transform2D],
) -> Result<EquivarianceReport>
where
    E: Fn(&FeatureGrid) -> Result<FeatureGrid>,
{
    if images.is_empty() {
        return config_err("equivariance_error needs a non-empty dataset");
    }
    if transforms.is_empty() {
        return config_err("equivariance_error needs at least one transform");
    }
    let mut per_transform = BTreeMap::new();
    let mut skipped = 0usize;
    for tau in transforms {
        let mut acc = 0.0;
        let mut used = 0usize;
        for x in images {
            let z = encode(x)?;
            if x.height() % z.height() != 0 {
                return config_err("encoder output does not evenly divide its input");
            }
            let f = x.height() / z.height();
            let (lh, lw) = tau.output_shape(z.height(), z.width())?;
            let z_tau = apply_transform_to(&z, tau, (lh, lw))?;
            let x_tau = apply_transform_to(x, tau, (f * lh, f * lw))?;
            let z_of_tau = encode(&x_tau)?;
            if z_tau.shape() != z_of_tau.shape() {
                return config_err("equivariance paths disagree in shape");
            }
            let den = z_of_tau.sq_norm();
            if den == 0.0 {
                skipped += 1;
                continue;
            }
            let num: f64 = z_tau
                .values()
                .iter()
                .zip(z_of_tau.values().iter())
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            acc += num / den;
            used += 1;
        }
        if used == 0 {
            return numerical_err(format!(
                "all samples skipped for transform {}",
                tau.descriptor()
            ));
        }
        per_transform.insert(tau.descriptor(), acc / used as f64);
    }
    let mean_of = |kind: TransformKind| -> f64 {
        let vals: Vec<f64> = transforms
            .iter()
            .filter(|t| t.kind() == kind)
            .filter_map(|t| per_transform.get(&t.descriptor()).copied())
            .collect();
        if vals.is_empty() {
            0.0
        } else {
            vals.iter().sum::<f64>() / vals.len() as f64
        }
    };
    Ok(EquivarianceReport {
        rotation_mean: mean_of(TransformKind::Rotation),
        scale_mean: mean_of(TransformKind::Scale),
        per_transform,
        n_samples: images.len(),
        skipped_zero_norm: skipped,
    })
}

/// Channel-wise bicubic downsampling by an integer factor: the reference
/// encoder that is rotation-equivariant by construction, handy for
/// sanity-checking the probes against a known-good case.
pub fn reference_downsample(x: &FeatureGrid, factor: usize) -> Result<FeatureGrid> {
    if factor == 0 || x.height() % factor != 0 || x.width() % factor != 0 {
        return config_err(format!(
            "factor {factor} must divide the {}x{} grid",
            x.height(),
            x.width()
        ));
    }
    FeatureGrid::new(crate::transform2d::resample_bicubic(
        &x.values().to_owned(),
        x.height() / factor,
        x.width() / factor,
    ))
}

/// Peak signal-to-noise ratio in decibels, capped at 100 dB.
///
/// The peak is the declared range width of `x` (default `[-1, 1]`).
pub fn psnr(x: &FeatureGrid, x_hat: &FeatureGrid) -> Result<f64> {
    if x.shape() != x_hat.shape() {
        return config_err(format!("psnr shapes differ: {:?} vs {:?}", x.shape(), x_hat.shape()));
    }
    let (lo, hi) = x.value_range().unwrap_or((-1.0, 1.0));
    let peak = hi - lo;
    let mse = x.mean_sq_diff(x_hat)?;
    if mse == 0.0 {
        return Ok(100.0);
    }
    Ok((10.0 * (peak * peak / mse).log10()).min(100.0))
}

fn gaussian_window(size: usize, sigma: f64) -> Vec<f64> {
    let half = (size - 1) as f64 / 2.0;
    let mut w: Vec<f64> = (0..size)
        .map(|i| {
            let d = i as f64 - half;
            (-d * d / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    let sum: f64 = w.iter().sum();
    for v in &mut w {
        *v /= sum;
    }
    w
}

/// Structural similarity with an 11x11 Gaussian window (sigma 1.5) and
/// the standard stabilizing constants, averaged over channels and valid
/// window positions. The window shrinks to the largest odd size that fits
/// when inputs are smaller than 11 pixels.
pub fn ssim(x: &FeatureGrid, x_hat: &FeatureGrid) -> Result<f64> {
    if x.shape() != x_hat.shape() {
        return config_err(format!("ssim shapes differ: {:?} vs {:?}", x.shape(), x_hat.shape()));
    }
    let (c, h, w) = x.shape();
    let mut win = 11usize.min(h).min(w);
    if win % 2 == 0 {
        win -= 1;
    }
    if win < 1 {
        return config_err("image too small for ssim");
    }
    let kernel = gaussian_window(win, 1.5);
    let (lo, hi) = x.value_range().unwrap_or((-1.0, 1.0));
    let l = hi - lo;
    let c1 = (0.01 * l) * (0.01 * l);
    let c2 = (0.03 * l) * (0.03 * l);

    let xv = x.values();
    let yv = x_hat.values();
    let mut acc = 0.0;
    let mut count = 0usize;
    for ch in 0..c {
        for r0 in 0..=(h - win) {
            for c0 in 0..=(w - win) {
                let mut mx = 0.0;
                let mut my = 0.0;
                let mut mxx = 0.0;
                let mut myy = 0.0;
                let mut mxy = 0.0;
                for i in 0..win {
                    for j in 0..win {
                        let wij = kernel[i] * kernel[j];
                        let a = xv[(ch, r0 + i, c0 + j)];
                        let b = yv[(ch, r0 + i, c0 + j)];
                        mx += wij * a;
                        my += wij * b;
                        mxx += wij * a * a;
                        myy += wij * b * b;
                        mxy += wij * a * b;
                    }
                }
                let vx = mxx - mx * mx;
                let vy = myy - my * my;
                let cxy = mxy - mx * my;
                let s = ((2.0 * mx * my + c1) * (2.0 * cxy + c2))
                    / ((mx * mx + my * my + c1) * (vx + vy + c2));
                acc += s;
                count += 1;
            }
        }
    }
    Ok(acc / count as f64)
}

/// Gaussian summary (mean, covariance) of a feature sample.
#[derive(Debug, Clone)]
pub struct FrechetStats {
    pub mean: Array1<f64>,
    pub covariance: Array2<f64>,
    pub n: usize,
}

impl FrechetStats {
    /// Unbiased sample statistics; needs at least two rows.
    pub fn from_features(rows: &[Array1<f64>]) -> Result<Self> {
        let n = rows.len();
        if n < 2 {
            return config_err("frechet stats need at least 2 samples");
        }
        let d = rows[0].len();
        if rows.iter().any(|r| r.len() != d) {
            return config_err("feature rows have mixed dimensions");
        }
        let mut mean = Array1::<f64>::zeros(d);
        for r in rows {
            mean += r;
        }
        mean /= n as f64;
        let mut cov = Array2::<f64>::zeros((d, d));
        for r in rows {
            let c = r - &mean;
            for i in 0..d {
                for j in 0..d {
                    cov[(i, j)] += c[i] * c[j];
                }
            }
        }
        cov /= (n - 1) as f64;
        // Exact symmetrization.
        let cov = (&cov + &cov.t()) * 0.5;
        Ok(Self { mean, covariance: cov, n })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

const EIG_CLIP_TOL: f64 = 1e-6;

fn to_dmatrix(a: &Array2<f64>) -> DMatrix<f64> {
    let (r, c) = a.dim();
    DMatrix::from_fn(r, c, |i, j| a[(i, j)])
}

/// Symmetric PSD square root via eigendecomposition; eigenvalues in
/// `[-tol, 0)` clip to zero, anything below `-tol` is a stability error.
fn sym_sqrt(a: &DMatrix<f64>, what: &str) -> Result<DMatrix<f64>> {
    let sym = (a + a.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let mut vals = eig.eigenvalues.clone();
    for v in vals.iter_mut() {
        if *v < -EIG_CLIP_TOL {
            return numerical_err(format!("{what} has eigenvalue {v} below -{EIG_CLIP_TOL}"));
        }
        *v = v.max(0.0).sqrt();
    }
    let q = eig.eigenvectors;
    Ok(&q * DMatrix::from_diagonal(&vals) * q.transpose())
}

/// Fréchet distance between two Gaussian feature summaries:
/// `||mu_a - mu_b||^2 + tr(Sa + Sb - 2 (Sa Sb)^{1/2})`.
pub fn frechet_distance(a: &FrechetStats, b: &FrechetStats) -> Result<f64> {
    if a.dim() != b.dim() {
        return config_err(format!("frechet dims differ: {} vs {}", a.dim(), b.dim()));
    }
    let sa = to_dmatrix(&a.covariance);
    let sb = to_dmatrix(&b.covariance);
    let sqrt_a = sym_sqrt(&sa, "covariance a")?;
    // tr((Sa Sb)^1/2) = tr((sqrt(Sa) Sb sqrt(Sa))^1/2), and the inner
    // matrix is symmetric PSD, which keeps the eigensolver honest.
    let inner = &sqrt_a * &sb * &sqrt_a;
    let eig = SymmetricEigen::new((&inner + inner.transpose()) * 0.5);
    let mut tr_sqrt = 0.0;
    for &v in eig.eigenvalues.iter() {
        if v < -EIG_CLIP_TOL {
            return numerical_err(format!("cross covariance eigenvalue {v} below tolerance"));
        }
        tr_sqrt += v.max(0.0).sqrt();
    }
    let mean_term: f64 = a
        .mean
        .iter()
        .zip(b.mean.iter())
        .map(|(x, y)| (x - y) * (x - y))
        .sum();
    let tr_a: f64 = (0..a.dim()).map(|i| a.covariance[(i, i)]).sum();
    let tr_b: f64 = (0..b.dim()).map(|i| b.covariance[(i, i)]).sum();
    Ok(mean_term + tr_a + tr_b - 2.0 * tr_sqrt)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct IdEstimate {
    pub id: f64,
    pub n_points: usize,
    /// Exact-duplicate points removed before the fit.
    pub discarded_pairs: usize,
}

/// TwoNN intrinsic dimension from the ratios `mu_i = r_2 / r_1` of
/// second- to first-nearest-neighbor distances.
///
/// Exact duplicates are dropped, the top 10% largest ratios are
/// discarded, and the dimension is the origin-constrained regression
/// slope of `-ln(1 - F(mu))` on `ln mu` over the kept ratios. (A plain
/// `N / sum(ln mu)` likelihood fit over the trimmed sample would
/// overestimate by a factor `1/(1 - ln(10)/9) ~ 1.34`; the regression
/// form is how the estimator is normally used with trimming.)
pub fn twonn_intrinsic_dimension(points: &Array2<f64>) -> Result<IdEstimate> {
    let (n_raw, d) = points.dim();
    if d == 0 {
        return config_err("points need at least one dimension");
    }
    // Exact-duplicate removal via bit-level dedup.
    let mut seen = std::collections::HashSet::<Vec<u64>>::with_capacity(n_raw);
    let mut kept_rows: Vec<usize> = Vec::with_capacity(n_raw);
    for i in 0..n_raw {
        let key: Vec<u64> = (0..d).map(|j| points[(i, j)].to_bits()).collect();
        if seen.insert(key) {
            kept_rows.push(i);
        }
    }
    let discarded = n_raw - kept_rows.len();
    let n = kept_rows.len();
    if n < 100 {
        return config_err(format!("twonn needs >= 100 distinct points, got {n}"));
    }

    let mut log_ratios = Vec::with_capacity(n);
    for (a_pos, &a) in kept_rows.iter().enumerate() {
        let mut r1 = f64::INFINITY;
        let mut r2 = f64::INFINITY;
        for (b_pos, &b) in kept_rows.iter().enumerate() {
            if a_pos == b_pos {
                continue;
            }
            let mut dist = 0.0;
            for j in 0..d {
                let diff = points[(a, j)] - points[(b, j)];
                dist += diff * diff;
            }
            if dist < r1 {
                r2 = r1;
                r1 = dist;
            } else if dist < r2 {
                r2 = dist;
            }
        }
        if r1 <= 0.0 {
            return numerical_err("zero first-neighbor distance after dedup");
        }
        // Squared distances: ln(r2/r1) = 0.5 * ln(d2/d1).
        log_ratios.push(0.5 * (r2 / r1).ln());
    }
    log_ratios.sort_by(|a, b| a.partial_cmp(b).expect("finite ratios"));
    let keep = (((n as f64) * 0.9).floor() as usize).max(1);
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    for (i, &x) in log_ratios[..keep].iter().enumerate() {
        let y = -(1.0 - (i + 1) as f64 / n as f64).ln();
        sxy += x * y;
        sxx += x * x;
    }
    if sxx <= 0.0 {
        return numerical_err("degenerate neighbor ratios (all equal)");
    }
    Ok(IdEstimate { id: sxy / sxx, n_points: n, discarded_pairs: discarded })
}

/// Fits a PCA over all spatial sites pooled across the batch and renders
/// each latent's top-3 component projections as an RGB map in `[0, 1]`.
pub fn pca_latent_visualization(latents: &[FeatureGrid]) -> Result<Vec<FeatureGrid>> {
    if latents.is_empty() {
        return config_err("pca needs at least one latent");
    }
    let c = latents[0].channels();
    if c < 3 {
        return config_err("pca needs at least 3 latent channels");
    }
    if latents.iter().any(|l| l.channels() != c) {
        return config_err("latents have mixed channel counts");
    }
    let n_sites: usize = latents.iter().map(|l| l.height() * l.width()).sum();
    let mut mean = vec![0.0f64; c];
    for l in latents {
        let v = l.values();
        for ch in 0..c {
            mean[ch] += v.index_axis(ndarray::Axis(0), ch).sum();
        }
    }
    for m in &mut mean {
        *m /= n_sites as f64;
    }
    let mut cov = DMatrix::<f64>::zeros(c, c);
    for l in latents {
        let v = l.values();
        for r in 0..l.height() {
            for col in 0..l.width() {
                for i in 0..c {
                    let vi = v[(i, r, col)] - mean[i];
                    for j in i..c {
                        let vj = v[(j, r, col)] - mean[j];
                        cov[(i, j)] += vi * vj;
                    }
                }
            }
        }
    }
    for i in 0..c {
        for j in 0..i {
            cov[(i, j)] = cov[(j, i)];
        }
    }
    cov /= (n_sites.max(2) - 1) as f64;

    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..c).collect();
    order.sort_by(|&i, &j| {
        eig.eigenvalues[j].partial_cmp(&eig.eigenvalues[i]).expect("finite eigenvalues")
    });
    let lead = eig.eigenvalues[order[0]].max(0.0);
    let third = eig.eigenvalues[order[2]].max(0.0);
    if lead <= 0.0 || third <= lead * 1e-12 {
        return numerical_err("latent covariance has rank < 3");
    }
    let components: Vec<Vec<f64>> = order[..3]
        .iter()
        .map(|&k| (0..c).map(|i| eig.eigenvectors[(i, k)]).collect())
        .collect();

    // Project every site, remembering global per-component extents.
    let mut projections: Vec<Array3<f64>> = Vec::with_capacity(latents.len());
    let mut lo = [f64::INFINITY; 3];
    let mut hi = [f64::NEG_INFINITY; 3];
    for l in latents {
        let v = l.values();
        let mut p = Array3::<f64>::zeros((3, l.height(), l.width()));
        for r in 0..l.height() {
            for col in 0..l.width() {
                for (k, comp) in components.iter().enumerate() {
                    let mut acc = 0.0;
                    for ch in 0..c {
                        acc += (v[(ch, r, col)] - mean[ch]) * comp[ch];
                    }
                    p[(k, r, col)] = acc;
                    lo[k] = lo[k].min(acc);
                    hi[k] = hi[k].max(acc);
                }
            }
        }
        projections.push(p);
    }
    let out = projections
        .into_iter()
        .map(|mut p| {
            for k in 0..3 {
                let span = (hi[k] - lo[k]).max(1e-12);
                p.index_axis_mut(ndarray::Axis(0), k).mapv_inplace(|v| (v - lo[k]) / span);
            }
            FeatureGrid::with_range(p, Some((0.0, 1.0)))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(out)
}
