//! Single-archive checkpoint: config echo, parameter arrays, optimizer
//! state, codebook usage, and rng state.
//!
//! Layout: the format tag line, a length-prefixed JSON header describing
//! every array, then one raw little-endian `f64` blob holding the arrays
//! in header order.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::ArrayD;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use super::{AutoencoderConfig, AutoencoderModel, Discriminator};
use crate::error::{data_err, Error, Result};
use crate::nn::rng::RngState;
use crate::nn::{Adam, Params};

pub const CKPT_FORMAT_TAG: &str = "eqvae-ckpt-v1";

/// Everything the trainer persists between epochs.
pub struct TrainState {
    pub model: AutoencoderModel,
    pub disc: Discriminator,
    pub adam_g: Adam,
    pub adam_d: Adam,
    pub rng: ChaCha12Rng,
    pub epoch: u64,
    pub global_step: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub format: String,
    /// Verbatim experiment config the run was started with.
    pub config_json: String,
    /// SHA-256 of `config_json`; resume refuses on mismatch.
    pub config_sha: String,
    pub ae: AutoencoderConfig,
    pub disc_width: usize,
    pub epoch: u64,
    pub global_step: u64,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    meta: CheckpointMeta,
    adam_g: Adam,
    adam_d: Adam,
    rng: RngState,
    usage_counts: Vec<u64>,
    arrays: Vec<ArrayRecord>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ArrayRecord {
    set: String,
    name: String,
    role: String,
    shape: Vec<usize>,
}

fn push_params(set: &str, params: &Params, records: &mut Vec<ArrayRecord>, blob: &mut Vec<f64>) {
    for p in params.iter_refs() {
        let name = params.name(p).to_string();
        let entry = &params.entries[p.0];
        for (role, arr) in [("value", &*entry.value), ("m", &entry.m), ("v", &entry.v)] {
            records.push(ArrayRecord {
                set: set.to_string(),
                name: name.clone(),
                role: role.to_string(),
                shape: arr.shape().to_vec(),
            });
            blob.extend(arr.iter().copied());
        }
    }
}

pub fn save_checkpoint(path: &Path, state: &TrainState, config_json: &str, config_sha: &str) -> Result<()> {
    let mut records = Vec::new();
    let mut blob = Vec::new();
    push_params("g", &state.model.params, &mut records, &mut blob);
    push_params("d", &state.disc.params, &mut records, &mut blob);
    let header = Header {
        meta: CheckpointMeta {
            format: CKPT_FORMAT_TAG.to_string(),
            config_json: config_json.to_string(),
            config_sha: config_sha.to_string(),
            ae: state.model.cfg.clone(),
            disc_width: state.disc.width,
            epoch: state.epoch,
            global_step: state.global_step,
        },
        adam_g: state.adam_g.clone(),
        adam_d: state.adam_d.clone(),
        rng: RngState::capture(&state.rng),
        usage_counts: state.model.usage_counts.clone(),
        arrays: records,
    };
    let header_bytes = serde_json::to_vec(&header)
        .map_err(|e| Error::Data(format!("checkpoint header encode: {e}")))?;

    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(CKPT_FORMAT_TAG.as_bytes())?;
    w.write_all(b"\n")?;
    w.write_all(&(header_bytes.len() as u64).to_le_bytes())?;
    w.write_all(&header_bytes)?;
    for v in &blob {
        w.write_all(&v.to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<(TrainState, CheckpointMeta)> {
    let mut r = BufReader::new(
        File::open(path).map_err(|e| Error::Data(format!("open checkpoint {}: {e}", path.display())))?,
    );
    let mut tag = vec![0u8; CKPT_FORMAT_TAG.len() + 1];
    r.read_exact(&mut tag)?;
    if &tag[..CKPT_FORMAT_TAG.len()] != CKPT_FORMAT_TAG.as_bytes() || tag[CKPT_FORMAT_TAG.len()] != b'\n' {
        return data_err(format!("{} is not a {CKPT_FORMAT_TAG} archive", path.display()));
    }
    let mut len_bytes = [0u8; 8];
    r.read_exact(&mut len_bytes)?;
    let header_len = u64::from_le_bytes(len_bytes) as usize;
    let mut header_bytes = vec![0u8; header_len];
    r.read_exact(&mut header_bytes)?;
    let header: Header = serde_json::from_slice(&header_bytes)
        .map_err(|e| Error::Data(format!("checkpoint header decode: {e}")))?;
    if header.meta.format != CKPT_FORMAT_TAG {
        return data_err(format!("unsupported checkpoint format {}", header.meta.format));
    }

    // Rebuild the nets from the stored config, then overwrite every array.
    let mut model = AutoencoderModel::new(header.meta.ae.clone(), 0)?;
    let mut disc = Discriminator::new(header.meta.disc_width, 0);
    let mut pending: std::collections::HashMap<(String, String), (Option<ArrayD<f64>>, Option<ArrayD<f64>>, Option<ArrayD<f64>>)> =
        std::collections::HashMap::new();
    for rec in &header.arrays {
        let count: usize = rec.shape.iter().product();
        let mut buf = vec![0u8; count * 8];
        r.read_exact(&mut buf)?;
        let data: Vec<f64> = buf
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        let arr = ArrayD::from_shape_vec(rec.shape.clone(), data)
            .map_err(|e| Error::Data(format!("checkpoint array {}: {e}", rec.name)))?;
        let slot = pending.entry((rec.set.clone(), rec.name.clone())).or_default();
        match rec.role.as_str() {
            "value" => slot.0 = Some(arr),
            "m" => slot.1 = Some(arr),
            "v" => slot.2 = Some(arr),
            other => return data_err(format!("unknown array role {other}")),
        }
    }
    for ((set, name), (value, m, v)) in pending {
        let (Some(value), Some(m), Some(v)) = (value, m, v) else {
            return data_err(format!("incomplete checkpoint entry {set}/{name}"));
        };
        match set.as_str() {
            "g" => model.params.restore(&name, value, m, v)?,
            "d" => disc.params.restore(&name, value, m, v)?,
            other => return data_err(format!("unknown parameter set {other}")),
        }
    }
    model.usage_counts = header.usage_counts.clone();
    let state = TrainState {
        model,
        disc,
        adam_g: header.adam_g,
        adam_d: header.adam_d,
        rng: header.rng.restore()?,
        epoch: header.meta.epoch,
        global_step: header.meta.global_step,
    };
    Ok((state, header.meta))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autoencoder::LatentMode;
    use crate::nn::rng::split;
    use rand::RngCore;

    #[test]
    fn checkpoint_roundtrip_is_bitwise() {
        let cfg = AutoencoderConfig {
            image_size: 16,
            compression: 4,
            latent_channels: 2,
            base_width: 8,
            latent_mode: LatentMode::Discrete,
            codebook_size: 4,
        };
        let mut model = AutoencoderModel::new(cfg, 7).unwrap();
        model.note_usage(&[1, 1, 3]);
        let disc = Discriminator::new(8, 8);
        let mut rng = split(99, "train", 0);
        let _burn: u64 = rng.next_u64();
        let state = TrainState {
            model,
            disc,
            adam_g: Adam::new(1e-4),
            adam_d: Adam::new(2e-4),
            rng,
            epoch: 3,
            global_step: 77,
        };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt.bin");
        save_checkpoint(&path, &state, "{\"demo\":true}", "abc123").unwrap();
        let (loaded, meta) = load_checkpoint(&path).unwrap();

        assert_eq!(meta.format, CKPT_FORMAT_TAG);
        assert_eq!(meta.config_sha, "abc123");
        assert_eq!(loaded.epoch, 3);
        assert_eq!(loaded.global_step, 77);
        assert_eq!(loaded.model.usage_counts, state.model.usage_counts);
        for p in state.model.params.iter_refs() {
            let q = loaded.model.params.find(state.model.params.name(p)).unwrap();
            assert_eq!(state.model.params.value(p), loaded.model.params.value(q));
        }
        for p in state.disc.params.iter_refs() {
            let q = loaded.disc.params.find(state.disc.params.name(p)).unwrap();
            assert_eq!(state.disc.params.value(p), loaded.disc.params.value(q));
        }
        // The rng resumes mid-stream.
        let mut a = state.rng.clone();
        let mut b = loaded.rng.clone();
        for _ in 0..8 {
            assert_eq!(a.next_u64(), b.next_u64());
        }
    }

    #[test]
    fn rejects_foreign_files() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("junk.bin");
        std::fs::write(&path, b"not a checkpoint at all").unwrap();
        assert!(load_checkpoint(&path).is_err());
    }
}
