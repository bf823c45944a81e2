//! Real-dataset ingestion: IDX and CIFAR binary loaders, normalization
//! statistics, per-class subsetting, and class-incremental schedules.

mod cifar;
mod gen;
mod idx;

pub use cifar::{load_cifar_binary, write_cifar_binary, CifarVariant};
pub use gen::{generate, GeneratedKind, GeneratorParams};
pub use idx::{load_idx_images, load_idx_labels, write_idx_images, write_idx_labels};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Result, ToolError};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SplitTag {
    Train,
    Val,
}

/// Per-channel normalization statistics, always derived from a train split.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct NormStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl NormStats {
    /// Mean and standard deviation per channel over every pixel of `set`.
    /// Standard deviations are floored at 1e-3 so normalization never blows
    /// up on a degenerate channel.
    pub fn from_set(set: &LabeledImageSet) -> Self {
        let (c, plane) = (set.channels, set.height * set.width);
        let n = set.len() * plane;
        let mut mean = vec![0.0f64; c];
        let mut sq = vec![0.0f64; c];
        for img in set.images.chunks(c * plane) {
            for ch in 0..c {
                for &p in &img[ch * plane..(ch + 1) * plane] {
                    mean[ch] += p as f64;
                    sq[ch] += (p as f64) * (p as f64);
                }
            }
        }
        let mut std = vec![0.0f64; c];
        for ch in 0..c {
            mean[ch] /= n as f64;
            std[ch] = (sq[ch] / n as f64 - mean[ch] * mean[ch]).max(0.0).sqrt().max(1e-3);
        }
        NormStats { mean, std }
    }

    pub fn normalize(&self, channel: usize, v: f64) -> f64 {
        (v - self.mean[channel]) / self.std[channel]
    }

    pub fn denormalize(&self, channel: usize, v: f64) -> f64 {
        v * self.std[channel] + self.mean[channel]
    }
}

/// A labeled split held fully in memory: NCHW pixels in [0, 1].
#[derive(Debug, Clone)]
pub struct LabeledImageSet {
    pub images: Vec<f32>,
    pub labels: Vec<u32>,
    pub classes: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub split: SplitTag,
}

impl LabeledImageSet {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn pixels_per_image(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub fn image(&self, i: usize) -> &[f32] {
        let p = self.pixels_per_image();
        &self.images[i * p..(i + 1) * p]
    }

    pub fn validate(&self) -> Result<()> {
        if self.images.len() != self.len() * self.pixels_per_image() {
            return Err(ToolError::validation(format!(
                "image buffer holds {} values for {} images of {} pixels",
                self.images.len(),
                self.len(),
                self.pixels_per_image()
            )));
        }
        if let Some(&bad) = self.labels.iter().find(|&&l| l as usize >= self.classes) {
            return Err(ToolError::validation(format!(
                "label {bad} out of range for {} classes",
                self.classes
            )));
        }
        if self.split == SplitTag::Train {
            let mut seen = vec![false; self.classes];
            for &l in &self.labels {
                seen[l as usize] = true;
            }
            if let Some(missing) = seen.iter().position(|s| !s) {
                return Err(ToolError::validation(format!(
                    "train split has no samples of class {missing}"
                )));
            }
        }
        Ok(())
    }

    /// Indices of every sample of `class`, in storage order.
    pub fn class_indices(&self, class: usize) -> Vec<usize> {
        self.labels
            .iter()
            .enumerate()
            .filter(|(_, &l)| l as usize == class)
            .map(|(i, _)| i)
            .collect()
    }

    /// New set holding the given sample indices, in the given order.
    pub fn select(&self, indices: &[usize]) -> LabeledImageSet {
        let p = self.pixels_per_image();
        let mut images = Vec::with_capacity(indices.len() * p);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            images.extend_from_slice(self.image(i));
            labels.push(self.labels[i]);
        }
        LabeledImageSet { images, labels, ..self.clone_geometry() }
    }

    /// Samples whose label lies in `classes` (order preserved).
    pub fn restrict_to_classes(&self, classes: &[usize]) -> LabeledImageSet {
        let keep: Vec<usize> = (0..self.len())
            .filter(|&i| classes.contains(&(self.labels[i] as usize)))
            .collect();
        self.select(&keep)
    }

    fn clone_geometry(&self) -> LabeledImageSet {
        LabeledImageSet {
            images: Vec::new(),
            labels: Vec::new(),
            classes: self.classes,
            channels: self.channels,
            height: self.height,
            width: self.width,
            split: self.split,
        }
    }
}

/// Train and validation splits plus the train-derived normalization.
#[derive(Debug, Clone)]
pub struct DatasetBundle {
    pub id: String,
    pub train: LabeledImageSet,
    pub val: LabeledImageSet,
    pub norm: NormStats,
}

/// On-disk dataset flavor; fixes the loader and the standard filenames
/// inside a dataset directory.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetKind {
    MnistIdx,
    Cifar10,
    Cifar100,
}

impl DatasetKind {
    pub fn classes(self) -> usize {
        match self {
            DatasetKind::MnistIdx | DatasetKind::Cifar10 => 10,
            DatasetKind::Cifar100 => 100,
        }
    }
}

/// Load train+val from a dataset directory laid out with the standard
/// filenames (as written by the generator): IDX pairs for the grayscale
/// corpus, `train.bin`/`val.bin` for the CIFAR-format ones. Normalization is
/// always computed from the train split.
pub fn load_bundle(kind: DatasetKind, dir: &std::path::Path) -> Result<DatasetBundle> {
    let load_split = |split: SplitTag| -> Result<LabeledImageSet> {
        let prefix = match split {
            SplitTag::Train => "train",
            SplitTag::Val => "val",
        };
        let (images, labels, channels, height, width) = match kind {
            DatasetKind::MnistIdx => {
                let (images, h, w) =
                    load_idx_images(&dir.join(format!("{prefix}-images-idx3-ubyte")))?;
                let labels = load_idx_labels(&dir.join(format!("{prefix}-labels-idx1-ubyte")))?;
                if images.len() != labels.len() * h * w {
                    return Err(ToolError::validation(format!(
                        "{prefix}: {} labels for {} pixels",
                        labels.len(),
                        images.len()
                    )));
                }
                (images, labels, 1, h, w)
            }
            DatasetKind::Cifar10 | DatasetKind::Cifar100 => {
                let variant = if kind == DatasetKind::Cifar10 {
                    cifar::CifarVariant::C10
                } else {
                    cifar::CifarVariant::C100
                };
                let (images, labels) =
                    load_cifar_binary(&dir.join(format!("{prefix}.bin")), variant)?;
                (images, labels, 3, cifar::CIFAR_EDGE, cifar::CIFAR_EDGE)
            }
        };
        let set = LabeledImageSet {
            images,
            labels,
            classes: kind.classes(),
            channels,
            height,
            width,
            split,
        };
        set.validate()?;
        Ok(set)
    };
    let train = load_split(SplitTag::Train)?;
    let val = load_split(SplitTag::Val)?;
    if (train.channels, train.height, train.width) != (val.channels, val.height, val.width) {
        return Err(ToolError::validation("train/val geometry mismatch"));
    }
    let norm = NormStats::from_set(&train);
    Ok(DatasetBundle {
        id: format!("{kind:?}").to_lowercase(),
        train,
        val,
        norm,
    })
}

/// Ordered disjoint class groups for class-incremental runs.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClassIncrementalSchedule {
    pub steps: Vec<Vec<usize>>,
}

impl ClassIncrementalSchedule {
    /// Classes seen up to and including `step`.
    pub fn seen(&self, step: usize) -> Vec<usize> {
        self.steps[..=step].iter().flatten().copied().collect()
    }
}

/// Split a seeded shuffle of the class ids into `steps` equal groups; the
/// last group absorbs any remainder.
pub fn incremental_split(
    class_count: usize,
    steps: usize,
    rng_seed: u64,
) -> Result<ClassIncrementalSchedule> {
    if steps == 0 || steps > class_count {
        return Err(ToolError::validation(format!(
            "{steps} steps for {class_count} classes"
        )));
    }
    let mut order: Vec<usize> = (0..class_count).collect();
    let mut rng = ddistill_core::rng::stream_rng(rng_seed, ddistill_core::rng::purpose::SPLIT, 0);
    order.shuffle(&mut rng);
    let per = class_count / steps;
    let mut groups: Vec<Vec<usize>> = (0..steps)
        .map(|s| order[s * per..(s + 1) * per].to_vec())
        .collect();
    groups.last_mut().unwrap().extend_from_slice(&order[steps * per..]);
    Ok(ClassIncrementalSchedule { steps: groups })
}

/// Exactly `ipc` samples per class, drawn without replacement, deterministic
/// per seed. Output is ordered by (replica, class) to match the synthetic
/// set layout.
pub fn random_real_subset(
    set: &LabeledImageSet,
    ipc: usize,
    rng_seed: u64,
) -> Result<LabeledImageSet> {
    let mut per_class: Vec<Vec<usize>> = Vec::with_capacity(set.classes);
    for class in 0..set.classes {
        let mut idx = set.class_indices(class);
        if idx.len() < ipc {
            return Err(ToolError::validation(format!(
                "class {class} has {} samples, need {ipc}",
                idx.len()
            )));
        }
        let mut rng = ddistill_core::rng::stream_rng(
            rng_seed,
            ddistill_core::rng::purpose::SUBSET,
            class as u64,
        );
        idx.shuffle(&mut rng);
        idx.truncate(ipc);
        per_class.push(idx);
    }
    let mut order = Vec::with_capacity(ipc * set.classes);
    for replica in 0..ipc {
        for chosen in &per_class {
            order.push(chosen[replica]);
        }
    }
    Ok(set.select(&order))
}

/// Deterministic shuffled index order for one training epoch.
pub fn epoch_order(n: usize, seed: u64, stream_index: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng =
        ddistill_core::rng::stream_rng(seed, ddistill_core::rng::purpose::DATA_ORDER, stream_index);
    order.shuffle(&mut rng);
    order
}

/// Convenience for tests and the generator: seed-addressed ChaCha stream.
pub fn plain_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
