//! Model construction, forward passes, and checkpointable state.
//!
//! Parameter and buffer enumeration order is a stability contract: artifact
//! files store raw buffers in exactly the order `named_params` /
//! `named_buffers` yield them.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

// Float supplies sqrt on f64 in no_std builds; with std the inherent
// methods shadow it.
#[allow(unused_imports)]
use num_traits::Float;
use rand::Rng;

use crate::nn::layers::{BatchNorm2dLayer, BnMode, BnSnapshot, Conv2dLayer, LinearLayer};
use crate::nn::loss::BnTarget;
use crate::nn::{Architecture, ModelSpec};
use crate::ops;
use crate::scalar::Scalar;
use crate::tape::Tape;
use crate::tensor::{Tensor, TensorError};

/// Provenance carried by a checkpoint.
#[derive(Debug, Clone, Default, serde::Serialize, serde::Deserialize)]
pub struct CheckpointMeta {
    pub stage: String,
    pub dataset: String,
    pub seed: u64,
    pub epochs: usize,
    pub val_top1: f64,
}

/// Plain-data model state: spec, provenance, and raw buffers in enumeration
/// order. This is what artifact files serialize.
#[derive(Debug, Clone)]
pub struct ModelCheckpoint<T: Scalar> {
    pub spec: ModelSpec,
    pub meta: CheckpointMeta,
    /// Trainable parameters, one buffer per tensor.
    pub params: Vec<Vec<T>>,
    /// BN running statistics: mean then var per BN layer, in layer order.
    pub running: Vec<Vec<T>>,
}

/// Logits plus optionally captured per-layer BN batch statistics.
pub struct ForwardOutput<T: Scalar> {
    pub logits: Tensor<T>,
    pub bn_stats: Option<BnSnapshot<T>>,
}

struct ConvBn<T: Scalar> {
    conv: Conv2dLayer<T>,
    bn: BatchNorm2dLayer<T>,
}

impl<T: Scalar> ConvBn<T> {
    fn forward(
        &self,
        tape: &Tape<T>,
        x: &Tensor<T>,
        mode: BnMode,
        snap: &mut Option<BnSnapshot<T>>,
    ) -> Result<Tensor<T>, TensorError> {
        let y = self.conv.forward(tape, x)?;
        self.bn.forward(tape, &y, mode, snap.as_mut())
    }
}

struct BasicBlock<T: Scalar> {
    c1: ConvBn<T>,
    c2: ConvBn<T>,
    down: Option<ConvBn<T>>,
}

enum Backbone<T: Scalar> {
    ConvNet(Vec<ConvBn<T>>),
    ResNet { stem: ConvBn<T>, blocks: Vec<BasicBlock<T>> },
}

/// A live model. Build fresh with [`Network::init`], or from stored weights
/// with [`Network::from_checkpoint`] (`trainable: false` freezes every
/// parameter, which is how teacher models participate in synthesis).
pub struct Network<T: Scalar> {
    spec: ModelSpec,
    backbone: Backbone<T>,
    head: LinearLayer<T>,
    final_hw: (usize, usize),
}

fn kaiming<T: Scalar, R: Rng + ?Sized>(
    rng: &mut R,
    shape: &[usize],
    fan_in: usize,
    trainable: bool,
) -> Tensor<T> {
    let std = (2.0 / fan_in as f64).sqrt();
    let n: usize = shape.iter().product();
    let mut data = Vec::with_capacity(n);
    for _ in 0..n {
        data.push(T::sample_standard_normal(rng) * T::from_f64(std));
    }
    if trainable {
        Tensor::param_from_vec(data, shape).expect("sized data")
    } else {
        Tensor::from_vec(data, shape).expect("sized data")
    }
}

fn conv_bn<T: Scalar, R: Rng + ?Sized>(
    rng: &mut R,
    ic: usize,
    oc: usize,
    k: usize,
    stride: usize,
    pad: usize,
    trainable: bool,
) -> ConvBn<T> {
    ConvBn {
        conv: Conv2dLayer {
            weight: kaiming(rng, &[oc, ic, k, k], ic * k * k, trainable),
            stride,
            pad,
        },
        bn: BatchNorm2dLayer::init(oc, trainable),
    }
}

/// Output size of one stride-2 avgpool / k3-s2-p1 conv chain step.
fn pool2(h: usize) -> usize {
    (h - 2) / 2 + 1
}

fn stride2_conv(h: usize) -> usize {
    (h + 2 - 3) / 2 + 1
}

impl<T: Scalar> Network<T> {
    /// Fresh model with Kaiming fan-in weights drawn from `rng`.
    pub fn init<R: Rng + ?Sized>(
        spec: &ModelSpec,
        rng: &mut R,
        trainable: bool,
    ) -> Result<Self, TensorError> {
        spec.validate()?;
        let w = spec.width();
        let widths = [w, 2 * w, 4 * w];
        let (backbone, feat, final_hw) = match spec.arch {
            Architecture::ConvNetBn3 => {
                let mut stages = Vec::with_capacity(3);
                let mut ic = spec.in_channels;
                let (mut h, mut wd) = (spec.image_h, spec.image_w);
                for &oc in &widths {
                    stages.push(conv_bn(rng, ic, oc, 3, 1, 1, trainable));
                    ic = oc;
                    h = pool2(h);
                    wd = pool2(wd);
                }
                (Backbone::ConvNet(stages), widths[2] * h * wd, (h, wd))
            }
            Architecture::ResNet8Bn => {
                let stem = conv_bn(rng, spec.in_channels, w, 3, 1, 1, trainable);
                let mut blocks = Vec::with_capacity(3);
                let mut ic = w;
                let mut h = spec.image_h;
                for (i, &oc) in widths.iter().enumerate() {
                    let stride = if i == 0 { 1 } else { 2 };
                    let c1 = conv_bn(rng, ic, oc, 3, stride, 1, trainable);
                    let c2 = conv_bn(rng, oc, oc, 3, 1, 1, trainable);
                    let down = if stride != 1 || ic != oc {
                        Some(conv_bn(rng, ic, oc, 1, stride, 0, trainable))
                    } else {
                        None
                    };
                    blocks.push(BasicBlock { c1, c2, down });
                    ic = oc;
                    if stride == 2 {
                        h = stride2_conv(h);
                    }
                }
                (Backbone::ResNet { stem, blocks }, widths[2], (h, h))
            }
        };
        if final_hw.0 == 0 || final_hw.1 == 0 {
            return Err(TensorError::InvalidArgument {
                op: "network_init",
                detail: format!("input {}x{} collapses to zero spatial size", spec.image_h, spec.image_w),
            });
        }
        let head = LinearLayer {
            weight: kaiming(rng, &[feat, spec.classes], feat, trainable),
            bias: if trainable {
                Tensor::param_from_vec(alloc::vec![T::zero(); spec.classes], &[spec.classes])?
            } else {
                Tensor::zeros(&[spec.classes])
            },
        };
        Ok(Network { spec: *spec, backbone, head, final_hw })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    /// Forward pass over an NCHW batch matching the spec's input shape.
    pub fn forward(
        &self,
        tape: &Tape<T>,
        x: &Tensor<T>,
        mode: BnMode,
        capture_bn: bool,
    ) -> Result<ForwardOutput<T>, TensorError> {
        let expect = [
            x.shape().first().copied().unwrap_or(0),
            self.spec.in_channels,
            self.spec.image_h,
            self.spec.image_w,
        ];
        if x.shape() != expect || expect[0] == 0 {
            return Err(TensorError::ShapeMismatch {
                op: "network_forward",
                detail: format!("input {:?}, model expects (N, {}, {}, {})", x.shape(), expect[1], expect[2], expect[3]),
            });
        }
        let mut snap = if capture_bn {
            Some(BnSnapshot { layers: Vec::new() })
        } else {
            None
        };
        let features = match &self.backbone {
            Backbone::ConvNet(stages) => {
                let mut cur = x.clone();
                for stage in stages {
                    let y = stage.forward(tape, &cur, mode, &mut snap)?;
                    let y = ops::relu(tape, &y)?;
                    cur = ops::avg_pool2d(tape, &y, 2, 2)?;
                }
                ops::flatten(tape, &cur)?
            }
            Backbone::ResNet { stem, blocks } => {
                let y = stem.forward(tape, x, mode, &mut snap)?;
                let mut cur = ops::relu(tape, &y)?;
                for block in blocks {
                    let main = block.c1.forward(tape, &cur, mode, &mut snap)?;
                    let main = ops::relu(tape, &main)?;
                    let main = block.c2.forward(tape, &main, mode, &mut snap)?;
                    let shortcut = match &block.down {
                        Some(d) => d.forward(tape, &cur, mode, &mut snap)?,
                        None => cur,
                    };
                    let merged = ops::add(tape, &main, &shortcut)?;
                    cur = ops::relu(tape, &merged)?;
                }
                let pooled = ops::avg_pool2d(tape, &cur, self.final_hw.0, 1)?;
                ops::flatten(tape, &pooled)?
            }
        };
        let logits = self.head.forward(tape, &features)?;
        Ok(ForwardOutput { logits, bn_stats: snap })
    }

    /// Forward returning logits only.
    pub fn logits(&self, tape: &Tape<T>, x: &Tensor<T>, mode: BnMode) -> Result<Tensor<T>, TensorError> {
        Ok(self.forward(tape, x, mode, false)?.logits)
    }

    fn conv_bns(&self) -> Vec<(String, &ConvBn<T>)> {
        let mut out = Vec::new();
        match &self.backbone {
            Backbone::ConvNet(stages) => {
                for (i, s) in stages.iter().enumerate() {
                    out.push((format!("stage{}", i + 1), s));
                }
            }
            Backbone::ResNet { stem, blocks } => {
                out.push((String::from("stem"), stem));
                for (i, b) in blocks.iter().enumerate() {
                    out.push((format!("block{}.c1", i + 1), &b.c1));
                    out.push((format!("block{}.c2", i + 1), &b.c2));
                    if let Some(d) = &b.down {
                        out.push((format!("block{}.down", i + 1), d));
                    }
                }
            }
        }
        out
    }

    /// Trainable parameters with stable names, in enumeration order.
    pub fn named_params(&self) -> Vec<(String, Tensor<T>)> {
        let mut out = Vec::new();
        for (name, cb) in self.conv_bns() {
            out.push((format!("{name}.conv.weight"), cb.conv.weight.clone()));
            out.push((format!("{name}.bn.gamma"), cb.bn.gamma.clone()));
            out.push((format!("{name}.bn.beta"), cb.bn.beta.clone()));
        }
        out.push((String::from("head.weight"), self.head.weight.clone()));
        out.push((String::from("head.bias"), self.head.bias.clone()));
        out
    }

    /// Trainable parameters in enumeration order.
    pub fn params(&self) -> Vec<Tensor<T>> {
        self.named_params().into_iter().map(|(_, t)| t).collect()
    }

    /// BN running buffers (mean then var per layer) with stable names.
    pub fn named_buffers(&self) -> Vec<(String, Tensor<T>)> {
        let mut out = Vec::new();
        for (name, cb) in self.conv_bns() {
            out.push((format!("{name}.bn.running_mean"), cb.bn.running_mean.clone()));
            out.push((format!("{name}.bn.running_var"), cb.bn.running_var.clone()));
        }
        out
    }

    /// BN layers in declaration order (the order snapshots capture).
    pub fn bn_layers(&self) -> Vec<&BatchNorm2dLayer<T>> {
        self.conv_bns().into_iter().map(|(_, cb)| &cb.bn).collect()
    }

    /// Running statistics as matching targets for synthesis.
    pub fn bn_targets(&self) -> Vec<BnTarget<T>> {
        self.bn_layers()
            .into_iter()
            .map(|bn| BnTarget {
                mean: bn.running_mean.to_vec(),
                var: bn.running_var.to_vec(),
            })
            .collect()
    }

    pub fn zero_grads(&self) {
        for p in self.params() {
            p.zero_grad();
        }
    }

    /// Snapshot all state into a plain-data checkpoint.
    pub fn to_checkpoint(&self, meta: CheckpointMeta) -> ModelCheckpoint<T> {
        ModelCheckpoint {
            spec: self.spec,
            meta,
            params: self.params().iter().map(|p| p.to_vec()).collect(),
            running: self
                .named_buffers()
                .iter()
                .map(|(_, b)| b.to_vec())
                .collect(),
        }
    }

    /// Rebuild a live model from a checkpoint. Buffer counts and lengths must
    /// match the spec's enumeration exactly.
    pub fn from_checkpoint(ckpt: &ModelCheckpoint<T>, trainable: bool) -> Result<Self, TensorError> {
        use rand_chacha::rand_core::SeedableRng;
        // The random init is immediately overwritten below.
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let net = Network::init(&ckpt.spec, &mut rng, trainable)?;
        let params = net.params();
        let buffers: Vec<Tensor<T>> = net.named_buffers().into_iter().map(|(_, b)| b).collect();
        if params.len() != ckpt.params.len() || buffers.len() != ckpt.running.len() {
            return Err(TensorError::ShapeMismatch {
                op: "from_checkpoint",
                detail: format!(
                    "checkpoint has {} params / {} buffers, spec {:?} expects {} / {}",
                    ckpt.params.len(),
                    ckpt.running.len(),
                    ckpt.spec.arch,
                    params.len(),
                    buffers.len()
                ),
            });
        }
        for (t, data) in params.iter().zip(&ckpt.params) {
            t.set_data(data.clone()).map_err(|_| TensorError::ShapeMismatch {
                op: "from_checkpoint",
                detail: format!("parameter buffer length {} does not fit {:?}", data.len(), t.shape()),
            })?;
        }
        for (t, data) in buffers.iter().zip(&ckpt.running) {
            t.set_data(data.clone()).map_err(|_| TensorError::ShapeMismatch {
                op: "from_checkpoint",
                detail: format!("running buffer length {} does not fit {:?}", data.len(), t.shape()),
            })?;
        }
        Ok(net)
    }
}
