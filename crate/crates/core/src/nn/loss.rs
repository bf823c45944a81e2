//! Losses and metrics: temperature-scaled soft-label cross-entropy, the
//! batch-norm statistic matching penalty, one-hot/smoothed target
//! construction, and top-1 accuracy.

use alloc::vec::Vec;

use crate::nn::layers::BnSnapshot;
use crate::ops;
use crate::scalar::Scalar;
use crate::tape::Tape;
use crate::tensor::{Tensor, TensorError};

/// Cross-entropy of `targets` (rows on the probability simplex) against
/// `softmax(logits / temperature)`, averaged over the batch:
/// `-(1/N) * sum_{n,c} targets[n,c] * log_softmax(logits/tau)[n,c]`.
pub fn soft_cross_entropy<T: Scalar>(
    tape: &Tape<T>,
    logits: &Tensor<T>,
    targets: &Tensor<T>,
    temperature: f64,
) -> Result<Tensor<T>, TensorError> {
    let (n, c) = match *logits.shape() {
        [n, c] => (n, c),
        _ => {
            return Err(TensorError::ShapeMismatch {
                op: "soft_cross_entropy",
                detail: alloc::format!("logits must be 2-d, got {:?}", logits.shape()),
            })
        }
    };
    if targets.shape() != [n, c] {
        return Err(TensorError::ShapeMismatch {
            op: "soft_cross_entropy",
            detail: alloc::format!("targets {:?} vs logits {:?}", targets.shape(), logits.shape()),
        });
    }
    if !(temperature > 0.0 && temperature.is_finite()) {
        return Err(TensorError::InvalidArgument {
            op: "soft_cross_entropy",
            detail: alloc::format!("temperature must be positive and finite, got {temperature}"),
        });
    }
    {
        let td = targets.data();
        for row in 0..n {
            let mut s = 0.0f64;
            for col in 0..c {
                let v = td[row * c + col].into_f64();
                if v < -1e-6 {
                    return Err(TensorError::InvalidArgument {
                        op: "soft_cross_entropy",
                        detail: alloc::format!("target row {row} has negative mass {v}"),
                    });
                }
                s += v;
            }
            if (s - 1.0).abs() > 1e-5 {
                return Err(TensorError::InvalidArgument {
                    op: "soft_cross_entropy",
                    detail: alloc::format!("target row {row} sums to {s}, expected 1"),
                });
            }
        }
    }
    let z = ops::scale(tape, logits, T::from_f64(1.0 / temperature))?;
    let logp = ops::log_softmax(tape, &z)?;
    let weighted = ops::mul(tape, &logp, targets)?;
    let total = ops::sum(tape, &weighted)?;
    ops::scale(tape, &total, T::from_f64(-1.0 / n as f64))
}

/// `(N, classes)` target rows: one-hot with optional label smoothing
/// (`(1 - smoothing)` on the label, `smoothing / classes` everywhere).
pub fn one_hot_targets<T: Scalar>(
    labels: &[usize],
    classes: usize,
    smoothing: f64,
) -> Result<Tensor<T>, TensorError> {
    if !(0.0..1.0).contains(&smoothing) {
        return Err(TensorError::InvalidArgument {
            op: "one_hot_targets",
            detail: alloc::format!("smoothing must lie in [0, 1), got {smoothing}"),
        });
    }
    let off = T::from_f64(smoothing / classes as f64);
    let on = T::from_f64(1.0 - smoothing);
    let mut data = alloc::vec![off; labels.len() * classes];
    for (row, &label) in labels.iter().enumerate() {
        if label >= classes {
            return Err(TensorError::InvalidArgument {
                op: "one_hot_targets",
                detail: alloc::format!("label {label} out of range for {classes} classes"),
            });
        }
        let i = row * classes + label;
        data[i] = data[i] + on;
    }
    Tensor::from_vec(data, &[labels.len(), classes])
}

/// Fraction of rows whose argmax (lowest index on ties) equals the label.
pub fn accuracy<T: Scalar>(logits: &Tensor<T>, labels: &[usize]) -> f64 {
    let (n, c) = (logits.shape()[0], logits.shape()[1]);
    debug_assert_eq!(n, labels.len());
    let data = logits.data();
    let mut correct = 0usize;
    for row in 0..n {
        let r = &data[row * c..(row + 1) * c];
        let mut best = 0usize;
        for (i, &v) in r.iter().enumerate() {
            if v > r[best] {
                best = i;
            }
        }
        if best == labels[row] {
            correct += 1;
        }
    }
    correct as f64 / n.max(1) as f64
}

/// Target statistics for one BN layer: the teacher's running mean/var.
#[derive(Debug, Clone)]
pub struct BnTarget<T: Scalar> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

/// Batch-norm statistic matching penalty: for each BN layer, the Euclidean
/// norm (over channels) of `batch_mean - target_mean` plus the norm of
/// `batch_var - target_var`, summed over layers. Zero iff the synthetic
/// batch reproduces the teacher's running statistics at every layer.
pub fn bn_matching_loss<T: Scalar>(
    tape: &Tape<T>,
    snapshot: &BnSnapshot<T>,
    targets: &[BnTarget<T>],
) -> Result<Tensor<T>, TensorError> {
    if snapshot.layers.len() != targets.len() {
        return Err(TensorError::ShapeMismatch {
            op: "bn_matching_loss",
            detail: alloc::format!(
                "{} captured layers vs {} targets",
                snapshot.layers.len(),
                targets.len()
            ),
        });
    }
    if targets.is_empty() {
        return Err(TensorError::InvalidArgument {
            op: "bn_matching_loss",
            detail: alloc::string::String::from("need at least one BN layer"),
        });
    }
    let mut total: Option<Tensor<T>> = None;
    for (stats, target) in snapshot.layers.iter().zip(targets) {
        let c = stats.mean.numel();
        if target.mean.len() != c || target.var.len() != c || stats.var.numel() != c {
            return Err(TensorError::ShapeMismatch {
                op: "bn_matching_loss",
                detail: alloc::format!("channel count mismatch at a layer ({c} captured)"),
            });
        }
        let tm = Tensor::from_vec(target.mean.clone(), &[c])?;
        let tv = Tensor::from_vec(target.var.clone(), &[c])?;
        let dm = ops::sub(tape, &stats.mean, &tm)?;
        let dv = ops::sub(tape, &stats.var, &tv)?;
        let nm = ops::l2_norm(tape, &dm)?;
        let nv = ops::l2_norm(tape, &dv)?;
        let term = ops::add(tape, &nm, &nv)?;
        total = Some(match total {
            None => term,
            Some(t) => ops::add(tape, &t, &term)?,
        });
    }
    Ok(total.expect("targets checked non-empty"))
}
