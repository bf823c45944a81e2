//! Soft-label sets: for every (epoch, image) pair one augmentation record
//! (the crop rectangle and flip used when the teacher looked at the image)
//! and the teacher's probability row. Students replay these records instead
//! of querying the teacher, so a training run never needs the teacher model.
//!
//! Binary layout of `labels.bin`, fixed little-endian, one record per
//! (epoch, image) in epoch-major order:
//!   u32 top, u32 left, u32 height, u32 width, u32 flip(0|1), f32 * classes

use std::path::Path;

use serde::{Deserialize, Serialize};

use ddistill_core::augment::CropParams;

use crate::error::{Result, ToolError};

pub const MANIFEST_NAME: &str = "manifest.json";
pub const BLOB_NAME: &str = "labels.bin";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SoftLabelManifest {
    pub version: u32,
    pub epochs: usize,
    pub images: usize,
    pub classes: usize,
    pub view_height: usize,
    pub view_width: usize,
    pub temperature: f64,
    pub crop_lower: f64,
    pub crop_upper: f64,
    pub flip: bool,
    pub teacher_fingerprint: String,
    pub seed: u64,
    pub config_hash: String,
    pub blob: String,
}

pub struct SoftLabelSet {
    pub manifest: SoftLabelManifest,
    crops: Vec<CropParams>,
    probs: Vec<f32>,
}

impl SoftLabelSet {
    pub fn new(manifest: SoftLabelManifest) -> Self {
        let records = manifest.epochs * manifest.images;
        SoftLabelSet {
            crops: Vec::with_capacity(records),
            probs: Vec::with_capacity(records * manifest.classes),
            manifest,
        }
    }

    /// Records must arrive epoch-major: epoch 0 image 0, epoch 0 image 1, ...
    pub fn push(&mut self, crop: CropParams, probs: &[f32]) -> Result<()> {
        if probs.len() != self.manifest.classes {
            return Err(ToolError::validation(format!(
                "soft label row has {} entries, expected {}",
                probs.len(),
                self.manifest.classes
            )));
        }
        self.crops.push(crop);
        self.probs.extend_from_slice(probs);
        Ok(())
    }

    pub fn record(&self, epoch: usize, image: usize) -> (&CropParams, &[f32]) {
        let idx = epoch * self.manifest.images + image;
        let c = self.manifest.classes;
        (&self.crops[idx], &self.probs[idx * c..(idx + 1) * c])
    }

    pub fn is_complete(&self) -> bool {
        self.crops.len() == self.manifest.epochs * self.manifest.images
    }
}

const HEADER_U32S: usize = 5;

pub fn save_softlabels(dir: &Path, set: &SoftLabelSet) -> Result<()> {
    if !set.is_complete() {
        return Err(ToolError::runtime(format!(
            "soft label set holds {} records, expected {}",
            set.crops.len(),
            set.manifest.epochs * set.manifest.images
        )));
    }
    std::fs::create_dir_all(dir)?;
    let manifest = serde_json::to_string_pretty(&set.manifest)?;
    std::fs::write(dir.join(MANIFEST_NAME), manifest)?;
    let c = set.manifest.classes;
    let record_bytes = 4 * (HEADER_U32S + c);
    let mut blob = Vec::with_capacity(set.crops.len() * record_bytes);
    for (i, crop) in set.crops.iter().enumerate() {
        for v in [crop.top, crop.left, crop.height, crop.width, crop.flip as u32] {
            blob.extend_from_slice(&v.to_le_bytes());
        }
        for p in &set.probs[i * c..(i + 1) * c] {
            blob.extend_from_slice(&p.to_le_bytes());
        }
    }
    std::fs::write(dir.join(&set.manifest.blob), blob)?;
    Ok(())
}

pub fn load_softlabels(dir: &Path) -> Result<SoftLabelSet> {
    let manifest_path = dir.join(MANIFEST_NAME);
    let text = std::fs::read_to_string(&manifest_path)
        .map_err(|e| ToolError::validation(format!("{}: {e}", manifest_path.display())))?;
    let manifest: SoftLabelManifest = serde_json::from_str(&text)
        .map_err(|e| ToolError::validation(format!("{}: {e}", manifest_path.display())))?;
    if manifest.version != VERSION {
        return Err(ToolError::validation(format!(
            "unsupported soft label version {}",
            manifest.version
        )));
    }
    let blob_path = dir.join(&manifest.blob);
    let blob = std::fs::read(&blob_path)
        .map_err(|e| ToolError::validation(format!("{}: {e}", blob_path.display())))?;
    let c = manifest.classes;
    let records = manifest.epochs * manifest.images;
    let record_bytes = 4 * (HEADER_U32S + c);
    if blob.len() != records * record_bytes {
        return Err(ToolError::validation(format!(
            "{}: {} bytes, expected {} ({} records of {} bytes)",
            blob_path.display(),
            blob.len(),
            records * record_bytes,
            records,
            record_bytes
        )));
    }
    let mut set = SoftLabelSet::new(manifest);
    let mut probs = vec![0f32; c];
    for rec in blob.chunks_exact(record_bytes) {
        let u = |k: usize| u32::from_le_bytes(rec[4 * k..4 * k + 4].try_into().expect("4 bytes"));
        let crop = CropParams {
            top: u(0),
            left: u(1),
            height: u(2),
            width: u(3),
            flip: u(4) != 0,
        };
        for (j, p) in probs.iter_mut().enumerate() {
            let off = 4 * (HEADER_U32S + j);
            *p = f32::from_le_bytes(rec[off..off + 4].try_into().expect("4 bytes"));
        }
        set.push(crop, &probs)?;
    }
    Ok(set)
}
