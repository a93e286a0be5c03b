//! Image-folder ingestion: deterministic ordering, center-crop + bicubic
//! resize to the training resolution, normalization to `[-1, 1]`, and a
//! seeded 90/10 train/val split keyed on filenames.

use std::path::{Path, PathBuf};

use ndarray::Array3;
use sha2::{Digest, Sha256};

use crate::error::{data_err, Result};
use crate::grid::FeatureGrid;
use crate::transform2d::resample_bicubic;

pub struct DatasetHandle {
    pub train: Vec<FeatureGrid>,
    pub val: Vec<FeatureGrid>,
    pub train_names: Vec<String>,
    pub val_names: Vec<String>,
    /// Files that could not be decoded.
    pub skipped: usize,
    pub warnings: Vec<String>,
}

impl DatasetHandle {
    pub fn len(&self) -> usize {
        self.train.len() + self.val.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

fn collect_image_files(root: &Path) -> Result<Vec<(String, PathBuf)>> {
    let mut files = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        let entries = std::fs::read_dir(&dir)
            .map_err(|e| crate::Error::Data(format!("read dir {}: {e}", dir.display())))?;
        for entry in entries {
            let entry = entry?;
            let path = entry.path();
            if path.is_dir() {
                stack.push(path);
            } else if let Some(ext) = path.extension().and_then(|e| e.to_str()) {
                if matches!(ext.to_ascii_lowercase().as_str(), "png" | "jpg" | "jpeg") {
                    let rel = path
                        .strip_prefix(root)
                        .unwrap_or(&path)
                        .to_string_lossy()
                        .into_owned();
                    files.push((rel, path));
                }
            }
        }
    }
    files.sort_by(|a, b| a.0.cmp(&b.0));
    Ok(files)
}

/// Loads one image: center-crop to square, bicubic resize, map to
/// `[-1, 1]`.
pub fn load_image(path: &Path, image_size: usize) -> Result<FeatureGrid> {
    let img = image::open(path)
        .map_err(|e| crate::Error::Data(format!("decode {}: {e}", path.display())))?
        .to_rgb8();
    let (w, h) = img.dimensions();
    let side = w.min(h);
    let x0 = (w - side) / 2;
    let y0 = (h - side) / 2;
    let mut arr = Array3::<f64>::zeros((3, side as usize, side as usize));
    for r in 0..side {
        for c in 0..side {
            let px = img.get_pixel(x0 + c, y0 + r);
            for ch in 0..3 {
                arr[(ch, r as usize, c as usize)] = px.0[ch] as f64 / 255.0;
            }
        }
    }
    let resized = resample_bicubic(&arr, image_size, image_size);
    // Bicubic can overshoot slightly at edges; clamp back to range.
    let normalized = resized.mapv(|v| (2.0 * v - 1.0).clamp(-1.0, 1.0));
    FeatureGrid::with_range(normalized, Some((-1.0, 1.0)))
}

fn in_val_split(seed: u64, name: &str) -> bool {
    let mut hasher = Sha256::new();
    hasher.update(seed.to_le_bytes());
    hasher.update(name.as_bytes());
    let digest = hasher.finalize();
    let h = u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"));
    h % 10 == 0
}

/// Ingests a directory of images. Unreadable files are skipped with a
/// warning; an empty usable set is fatal.
pub fn ingest_dataset(path: &Path, image_size: usize, seed: u64) -> Result<DatasetHandle> {
    if image_size == 0 {
        return crate::error::config_err("image_size must be positive");
    }
    let files = collect_image_files(path)?;
    let mut handle = DatasetHandle {
        train: Vec::new(),
        val: Vec::new(),
        train_names: Vec::new(),
        val_names: Vec::new(),
        skipped: 0,
        warnings: Vec::new(),
    };
    for (rel, full) in files {
        match load_image(&full, image_size) {
            Ok(grid) => {
                if in_val_split(seed, &rel) {
                    handle.val.push(grid);
                    handle.val_names.push(rel);
                } else {
                    handle.train.push(grid);
                    handle.train_names.push(rel);
                }
            }
            Err(e) => {
                handle.skipped += 1;
                handle.warnings.push(format!("skipping {rel}: {e}"));
            }
        }
    }
    if handle.is_empty() {
        return data_err(format!("no usable images under {}", path.display()));
    }
    Ok(handle)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::shapes::generate_shapes_corpus;

    #[test]
    fn ingest_skips_corrupt_files_and_splits_deterministically() {
        let dir = tempfile::tempdir().unwrap();
        generate_shapes_corpus(dir.path(), 30, 16, 7).unwrap();
        std::fs::write(dir.path().join("broken.png"), b"not a png").unwrap();

        let a = ingest_dataset(dir.path(), 16, 3).unwrap();
        assert_eq!(a.skipped, 1);
        assert_eq!(a.len(), 30);
        assert!(!a.train.is_empty() && !a.val.is_empty());
        // Same path and seed give identical membership.
        let b = ingest_dataset(dir.path(), 16, 3).unwrap();
        assert_eq!(a.train_names, b.train_names);
        assert_eq!(a.val_names, b.val_names);
        // Split is disjoint and exhaustive.
        let mut all: Vec<&String> = a.train_names.iter().chain(a.val_names.iter()).collect();
        all.sort();
        all.dedup();
        assert_eq!(all.len(), 30);
        // Different seed reshuffles membership.
        let c = ingest_dataset(dir.path(), 16, 4).unwrap();
        assert_ne!(a.val_names, c.val_names);
    }

    #[test]
    fn loaded_pixels_stay_in_range() {
        let dir = tempfile::tempdir().unwrap();
        generate_shapes_corpus(dir.path(), 5, 24, 1).unwrap();
        let handle = ingest_dataset(dir.path(), 16, 0).unwrap();
        for g in handle.train.iter().chain(handle.val.iter()) {
            assert_eq!(g.shape(), (3, 16, 16));
            assert!(g.values().iter().all(|v| (-1.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn empty_directory_is_fatal() {
        let dir = tempfile::tempdir().unwrap();
        assert!(ingest_dataset(dir.path(), 16, 0).is_err());
    }
}
