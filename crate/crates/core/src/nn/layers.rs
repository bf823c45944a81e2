//! Individual layers. Parameters are created through `Tensor::param_from_vec`
//! when trainable, plain constants when frozen; batch-norm running statistics
//! are always constants, mutated only by the explicit EMA update in
//! `BnMode::Batch { update_running: true }`.

use alloc::vec::Vec;

use crate::ops;
use crate::scalar::Scalar;
use crate::tape::Tape;
use crate::tensor::{Tensor, TensorError};

/// 3x3/1x1 convolution without bias (a following BN provides the shift).
pub struct Conv2dLayer<T: Scalar> {
    pub weight: Tensor<T>,
    pub stride: usize,
    pub pad: usize,
}

impl<T: Scalar> Conv2dLayer<T> {
    pub fn forward(&self, tape: &Tape<T>, x: &Tensor<T>) -> Result<Tensor<T>, TensorError> {
        ops::conv2d(tape, x, &self.weight, self.stride, self.pad)
    }
}

/// Fully connected layer; weight layout is `(in, out)`.
pub struct LinearLayer<T: Scalar> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

impl<T: Scalar> LinearLayer<T> {
    pub fn forward(&self, tape: &Tape<T>, x: &Tensor<T>) -> Result<Tensor<T>, TensorError> {
        let y = ops::matmul(tape, x, &self.weight)?;
        ops::bias_add(tape, &y, &self.bias)
    }
}

/// Which statistics batch norm normalizes with.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BnMode {
    /// Normalize with the current batch statistics. `update_running` drives
    /// the EMA on the running buffers (true while squeezing the teacher,
    /// false when the model is frozen during synthesis).
    Batch { update_running: bool },
    /// Normalize with the stored running statistics (evaluation).
    Running,
}

/// Batch statistics of one BN layer, still attached to the tape so losses on
/// them differentiate back to the input.
pub struct BnLayerStats<T: Scalar> {
    pub mean: Tensor<T>,
    pub var: Tensor<T>,
}

/// Batch statistics of every BN layer of one forward pass, in declaration
/// order (the same order as the running buffers they are matched against).
pub struct BnSnapshot<T: Scalar> {
    pub layers: Vec<BnLayerStats<T>>,
}

/// Channel-affine batch normalization over NCHW.
pub struct BatchNorm2dLayer<T: Scalar> {
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
    pub running_mean: Tensor<T>,
    pub running_var: Tensor<T>,
    pub eps: f64,
    pub momentum: f64,
}

impl<T: Scalar> BatchNorm2dLayer<T> {
    /// Fresh layer: gamma 1, beta 0, running mean 0, running var 1.
    pub fn init(channels: usize, trainable: bool) -> Self {
        let ones = alloc::vec![T::one(); channels];
        let zeros = alloc::vec![T::zero(); channels];
        let make = |data: Vec<T>| {
            if trainable {
                Tensor::param_from_vec(data, &[channels]).expect("const shape")
            } else {
                Tensor::from_vec(data, &[channels]).expect("const shape")
            }
        };
        BatchNorm2dLayer {
            gamma: make(ones.clone()),
            beta: make(zeros.clone()),
            running_mean: Tensor::from_vec(zeros, &[channels]).expect("const shape"),
            running_var: Tensor::from_vec(ones, &[channels]).expect("const shape"),
            eps: 1e-5,
            momentum: 0.1,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.numel()
    }

    /// Forward pass. In batch mode the mean/var tensors are recorded on the
    /// tape (so gradients reach the input through the statistics) and are
    /// optionally captured into `snapshot`; the EMA update uses the unbiased
    /// variance, while normalization uses the biased one.
    pub fn forward(
        &self,
        tape: &Tape<T>,
        x: &Tensor<T>,
        mode: BnMode,
        snapshot: Option<&mut BnSnapshot<T>>,
    ) -> Result<Tensor<T>, TensorError> {
        let eps = T::from_f64(self.eps);
        match mode {
            BnMode::Batch { update_running } => {
                let mean = ops::channel_mean(tape, x)?;
                let var = ops::channel_var(tape, x, &mean)?;
                let y = ops::normalize(tape, x, &mean, &var, &self.gamma, &self.beta, eps)?;
                if update_running {
                    let count = x.numel() / self.channels();
                    let unbias = if count > 1 {
                        count as f64 / (count - 1) as f64
                    } else {
                        1.0
                    };
                    let m = T::from_f64(self.momentum);
                    let keep = T::from_f64(1.0 - self.momentum);
                    let unbias = T::from_f64(unbias);
                    let (bm, bv) = (mean.data(), var.data());
                    self.running_mean.with_data_mut(|rm| {
                        for (r, &b) in rm.iter_mut().zip(bm.iter()) {
                            *r = keep * *r + m * b;
                        }
                    });
                    self.running_var.with_data_mut(|rv| {
                        for (r, &b) in rv.iter_mut().zip(bv.iter()) {
                            *r = keep * *r + m * (b * unbias);
                        }
                    });
                }
                if let Some(snap) = snapshot {
                    snap.layers.push(BnLayerStats { mean, var });
                }
                Ok(y)
            }
            BnMode::Running => {
                if let Some(snap) = snapshot {
                    snap.layers.push(BnLayerStats {
                        mean: self.running_mean.clone(),
                        var: self.running_var.clone(),
                    });
                }
                ops::normalize(
                    tape,
                    x,
                    &self.running_mean,
                    &self.running_var,
                    &self.gamma,
                    &self.beta,
                    eps,
                )
            }
        }
    }
}
