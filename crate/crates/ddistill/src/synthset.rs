//! Distilled image sets on disk: a JSON manifest next to a raw
//! little-endian pixel blob, plus one PPM contact sheet per class so the
//! images can be eyeballed without extra tooling. Pixels are stored in the
//! normalized domain the recovery optimized in; the manifest carries the
//! normalization stats needed to map them back.

use std::path::Path;

use serde::{Deserialize, Serialize};

use ddistill_core::Scalar;

use crate::data::NormStats;
use crate::error::{Result, ToolError};

pub const MANIFEST_NAME: &str = "manifest.json";
pub const BLOB_NAME: &str = "images.bin";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SynthManifest {
    pub version: u32,
    pub dtype: String,
    pub dataset: String,
    pub classes: usize,
    pub ipc: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub labels: Vec<u32>,
    pub norm: NormStats,
    pub teacher_fingerprint: String,
    pub teacher_val_top1: f64,
    pub seed: u64,
    pub config_hash: String,
    pub blob: String,
}

/// Normalized images plus the metadata a student run needs.
pub struct SynthSet<T: Scalar> {
    pub manifest: SynthManifest,
    pub images: Vec<T>,
}

impl<T: Scalar> SynthSet<T> {
    pub fn len(&self) -> usize {
        self.manifest.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.manifest.labels.is_empty()
    }

    pub fn pixels_per_image(&self) -> usize {
        self.manifest.channels * self.manifest.height * self.manifest.width
    }

    pub fn image(&self, i: usize) -> &[T] {
        let p = self.pixels_per_image();
        &self.images[i * p..(i + 1) * p]
    }

    pub fn validate(&self) -> Result<()> {
        let m = &self.manifest;
        if m.version != VERSION {
            return Err(ToolError::validation(format!(
                "unsupported synthset version {}",
                m.version
            )));
        }
        if m.dtype != T::DTYPE {
            return Err(ToolError::validation(format!(
                "synthset dtype is {} but the run wants {}",
                m.dtype,
                T::DTYPE
            )));
        }
        let expect = m.labels.len() * m.channels * m.height * m.width;
        if self.images.len() != expect {
            return Err(ToolError::validation(format!(
                "synthset blob holds {} values, manifest implies {expect}",
                self.images.len()
            )));
        }
        if m.labels.len() != m.classes * m.ipc {
            return Err(ToolError::validation(format!(
                "synthset has {} labels, expected classes*ipc = {}",
                m.labels.len(),
                m.classes * m.ipc
            )));
        }
        if m.labels.iter().any(|&l| (l as usize) >= m.classes) {
            return Err(ToolError::validation("synthset label out of range"));
        }
        if m.norm.mean.len() != m.channels || m.norm.std.len() != m.channels {
            return Err(ToolError::validation("synthset norm stats do not match channels"));
        }
        Ok(())
    }
}

pub fn save_synthset<T: Scalar>(dir: &Path, set: &SynthSet<T>) -> Result<()> {
    set.validate()?;
    std::fs::create_dir_all(dir)?;
    let manifest = serde_json::to_string_pretty(&set.manifest)?;
    std::fs::write(dir.join(MANIFEST_NAME), manifest)?;
    let mut blob = vec![0u8; set.images.len() * T::BYTE_WIDTH];
    for (v, chunk) in set.images.iter().zip(blob.chunks_exact_mut(T::BYTE_WIDTH)) {
        v.write_le(chunk);
    }
    std::fs::write(dir.join(&set.manifest.blob), blob)?;
    write_previews(dir, set)?;
    Ok(())
}

pub fn load_synthset<T: Scalar>(dir: &Path) -> Result<SynthSet<T>> {
    let manifest_path = dir.join(MANIFEST_NAME);
    let text = std::fs::read_to_string(&manifest_path)
        .map_err(|e| ToolError::validation(format!("{}: {e}", manifest_path.display())))?;
    let manifest: SynthManifest = serde_json::from_str(&text)
        .map_err(|e| ToolError::validation(format!("{}: {e}", manifest_path.display())))?;
    let blob_path = dir.join(&manifest.blob);
    let blob = std::fs::read(&blob_path)
        .map_err(|e| ToolError::validation(format!("{}: {e}", blob_path.display())))?;
    if blob.len() % T::BYTE_WIDTH != 0 {
        return Err(ToolError::validation(format!(
            "{}: length {} is not a multiple of {}",
            blob_path.display(),
            blob.len(),
            T::BYTE_WIDTH
        )));
    }
    let images: Vec<T> = blob.chunks_exact(T::BYTE_WIDTH).map(T::read_le).collect();
    let set = SynthSet { manifest, images };
    set.validate()?;
    Ok(set)
}

/// One P6 contact sheet per class: IPC instances side by side, pixels
/// denormalized and clipped to [0, 255]. Single-channel sets render gray.
fn write_previews<T: Scalar>(dir: &Path, set: &SynthSet<T>) -> Result<()> {
    let m = &set.manifest;
    let preview_dir = dir.join("previews");
    std::fs::create_dir_all(&preview_dir)?;
    let (h, w, c) = (m.height, m.width, m.channels);
    for class in 0..m.classes {
        let members: Vec<usize> = (0..set.len())
            .filter(|&i| m.labels[i] as usize == class)
            .collect();
        if members.is_empty() {
            continue;
        }
        let sheet_w = w * members.len();
        let mut rgb = vec![0u8; 3 * h * sheet_w];
        for (slot, &i) in members.iter().enumerate() {
            let img = set.image(i);
            for y in 0..h {
                for x in 0..w {
                    for ch in 0..3 {
                        let src_ch = if c == 1 { 0 } else { ch.min(c - 1) };
                        let v = img[src_ch * h * w + y * w + x].into_f64();
                        let raw = m.norm.denormalize(src_ch, v);
                        let byte = (raw * 255.0).round().clamp(0.0, 255.0) as u8;
                        rgb[3 * (y * sheet_w + slot * w + x) + ch] = byte;
                    }
                }
            }
        }
        let mut out = format!("P6\n{sheet_w} {h}\n255\n").into_bytes();
        out.extend_from_slice(&rgb);
        std::fs::write(preview_dir.join(format!("class_{class:03}.ppm")), out)?;
    }
    Ok(())
}
