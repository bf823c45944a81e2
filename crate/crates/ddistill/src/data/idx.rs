//! IDX file format (big-endian), the MNIST container: magic 0x0000_0803 for
//! u8 image tensors, 0x0000_0801 for u8 label vectors.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Result, ToolError};

const IMAGES_MAGIC: u32 = 0x0000_0803;
const LABELS_MAGIC: u32 = 0x0000_0801;

fn read_u32_be(r: &mut impl Read, what: &str, path: &Path) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b).map_err(|e| {
        ToolError::validation(format!("{}: truncated {what}: {e}", path.display()))
    })?;
    Ok(u32::from_be_bytes(b))
}

/// Load an IDX3 u8 image file as (images scaled to [0,1], height, width).
pub fn load_idx_images(path: &Path) -> Result<(Vec<f32>, usize, usize)> {
    let mut r = BufReader::new(File::open(path).map_err(|e| {
        ToolError::validation(format!("{}: {e}", path.display()))
    })?);
    let magic = read_u32_be(&mut r, "magic", path)?;
    if magic != IMAGES_MAGIC {
        return Err(ToolError::validation(format!(
            "{}: bad IDX image magic {magic:#010x}",
            path.display()
        )));
    }
    let n = read_u32_be(&mut r, "count", path)? as usize;
    let h = read_u32_be(&mut r, "height", path)? as usize;
    let w = read_u32_be(&mut r, "width", path)? as usize;
    let mut bytes = vec![0u8; n * h * w];
    r.read_exact(&mut bytes).map_err(|e| {
        ToolError::validation(format!("{}: truncated pixel payload: {e}", path.display()))
    })?;
    let mut extra = [0u8; 1];
    if r.read(&mut extra)? != 0 {
        return Err(ToolError::validation(format!(
            "{}: trailing bytes after {n} images",
            path.display()
        )));
    }
    Ok((bytes.iter().map(|&b| b as f32 / 255.0).collect(), h, w))
}

/// Load an IDX1 u8 label file.
pub fn load_idx_labels(path: &Path) -> Result<Vec<u32>> {
    let mut r = BufReader::new(File::open(path).map_err(|e| {
        ToolError::validation(format!("{}: {e}", path.display()))
    })?);
    let magic = read_u32_be(&mut r, "magic", path)?;
    if magic != LABELS_MAGIC {
        return Err(ToolError::validation(format!(
            "{}: bad IDX label magic {magic:#010x}",
            path.display()
        )));
    }
    let n = read_u32_be(&mut r, "count", path)? as usize;
    let mut bytes = vec![0u8; n];
    r.read_exact(&mut bytes).map_err(|e| {
        ToolError::validation(format!("{}: truncated label payload: {e}", path.display()))
    })?;
    Ok(bytes.into_iter().map(u32::from).collect())
}

/// Write grayscale [0,1] images (N x H x W) as an IDX3 u8 file.
pub fn write_idx_images(path: &Path, images: &[f32], h: usize, w: usize) -> Result<()> {
    let n = images.len() / (h * w);
    let mut f = BufWriter::new(File::create(path)?);
    f.write_all(&IMAGES_MAGIC.to_be_bytes())?;
    f.write_all(&(n as u32).to_be_bytes())?;
    f.write_all(&(h as u32).to_be_bytes())?;
    f.write_all(&(w as u32).to_be_bytes())?;
    let bytes: Vec<u8> = images
        .iter()
        .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    f.write_all(&bytes)?;
    f.flush()?;
    Ok(())
}

/// Write labels as an IDX1 u8 file.
pub fn write_idx_labels(path: &Path, labels: &[u32]) -> Result<()> {
    let mut f = BufWriter::new(File::create(path)?);
    f.write_all(&LABELS_MAGIC.to_be_bytes())?;
    f.write_all(&(labels.len() as u32).to_be_bytes())?;
    let bytes: Vec<u8> = labels.iter().map(|&l| l as u8).collect();
    f.write_all(&bytes)?;
    f.flush()?;
    Ok(())
}
