//! CIFAR binary row format: 1 label byte (CIFAR-10) or coarse+fine label
//! bytes (CIFAR-100) followed by 3072 pixel bytes (3 x 32 x 32, channel
//! planes in RGB order).

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Result, ToolError};

pub const CIFAR_EDGE: usize = 32;
const PIXELS: usize = 3 * CIFAR_EDGE * CIFAR_EDGE;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CifarVariant {
    C10,
    C100,
}

impl CifarVariant {
    pub fn classes(self) -> usize {
        match self {
            CifarVariant::C10 => 10,
            CifarVariant::C100 => 100,
        }
    }

    fn label_bytes(self) -> usize {
        match self {
            CifarVariant::C10 => 1,
            CifarVariant::C100 => 2,
        }
    }
}

/// Load one CIFAR binary file: ([0,1] pixels NCHW, fine labels).
pub fn load_cifar_binary(path: &Path, variant: CifarVariant) -> Result<(Vec<f32>, Vec<u32>)> {
    let mut r = BufReader::new(File::open(path).map_err(|e| {
        ToolError::validation(format!("{}: {e}", path.display()))
    })?);
    let mut raw = Vec::new();
    r.read_to_end(&mut raw)?;
    let row = variant.label_bytes() + PIXELS;
    if raw.is_empty() || raw.len() % row != 0 {
        return Err(ToolError::validation(format!(
            "{}: {} bytes is not a whole number of {row}-byte rows",
            path.display(),
            raw.len()
        )));
    }
    let n = raw.len() / row;
    let mut images = Vec::with_capacity(n * PIXELS);
    let mut labels = Vec::with_capacity(n);
    for rec in raw.chunks_exact(row) {
        // The fine label is the last label byte in both variants.
        let label = rec[variant.label_bytes() - 1] as u32;
        if label as usize >= variant.classes() {
            return Err(ToolError::validation(format!(
                "{}: label {label} out of range for {} classes",
                path.display(),
                variant.classes()
            )));
        }
        labels.push(label);
        images.extend(rec[variant.label_bytes()..].iter().map(|&b| b as f32 / 255.0));
    }
    Ok((images, labels))
}

/// Write [0,1] NCHW pixels and labels in CIFAR binary layout. For the
/// 100-class variant the coarse byte is label/5 (20 superclasses).
pub fn write_cifar_binary(
    path: &Path,
    images: &[f32],
    labels: &[u32],
    variant: CifarVariant,
) -> Result<()> {
    if images.len() != labels.len() * PIXELS {
        return Err(ToolError::validation(format!(
            "{} pixels for {} labels",
            images.len(),
            labels.len()
        )));
    }
    let mut f = BufWriter::new(File::create(path)?);
    for (img, &label) in images.chunks_exact(PIXELS).zip(labels) {
        match variant {
            CifarVariant::C10 => f.write_all(&[label as u8])?,
            CifarVariant::C100 => f.write_all(&[(label / 5) as u8, label as u8])?,
        }
        let bytes: Vec<u8> = img
            .iter()
            .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect();
        f.write_all(&bytes)?;
    }
    f.flush()?;
    Ok(())
}
