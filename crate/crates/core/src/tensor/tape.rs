//! Gradient tape: ordered op records and the reverse pass.

use std::cell::{Cell, RefCell};
use std::collections::HashMap;

use crate::error::{Error, Result};

use super::kernels::{self, ConvGeom};
use super::params::{Gradients, ParamStore};
use super::{Scalar, Tensor};

pub type NodeId = usize;

/// Normalization statistics source for [`Tape::batch_norm3d`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NormMode {
    /// Normalize by the current batch moments; updates an attached running
    /// accumulator with momentum 0.1.
    BatchStats,
    /// Normalize by stored running moments.
    RunningStats,
}

enum Record<E: Scalar> {
    Leaf,
    Conv3d {
        x: Option<NodeId>,
        w: Option<NodeId>,
        b: Option<NodeId>,
        x_val: Tensor<E>,
        w_val: Tensor<E>,
        geom: ConvGeom,
    },
    AvgPool3d {
        x: Option<NodeId>,
        dims: [usize; 5],
        kernel: [usize; 3],
        out_dhw: [usize; 3],
    },
    Upsample3d {
        x: Option<NodeId>,
        dims: [usize; 5],
        factors: [usize; 3],
        target: [usize; 3],
    },
    BatchNorm {
        x: Option<NodeId>,
        gamma: Option<NodeId>,
        beta: Option<NodeId>,
        dims: [usize; 5],
        x_hat: Vec<E>,
        inv_std: Vec<f64>,
        gamma_val: Tensor<E>,
        coupled: bool,
    },
    Head {
        x: Option<NodeId>,
        w: Option<NodeId>,
        b: Option<NodeId>,
        dims: [usize; 5],
        k_out: usize,
        w_val: Tensor<E>,
        pooled: Vec<E>,
    },
    Relu {
        x: Option<NodeId>,
        x_val: Tensor<E>,
    },
    Softmax {
        x: Option<NodeId>,
        probs: Vec<f64>,
    },
    LogSumExp {
        x: Option<NodeId>,
        probs: Vec<f64>,
    },
    CrossEntropy {
        logits: Option<NodeId>,
        probs: Vec<f64>,
        labels: Vec<usize>,
        classes: usize,
    },
    WeightedSum {
        weights: Option<NodeId>,
        weights_val: Vec<f64>,
        branches: Vec<(Option<NodeId>, Tensor<E>)>,
    },
    Add {
        a: Option<NodeId>,
        b: Option<NodeId>,
    },
    Scale {
        x: Option<NodeId>,
        factor: f64,
    },
    Sum {
        x: Option<NodeId>,
        in_len: usize,
    },
    DotConst {
        x: Option<NodeId>,
        weights: Vec<f64>,
    },
}

struct Node<E: Scalar> {
    record: Record<E>,
    out_len: usize,
}

struct TapeInner<E: Scalar> {
    nodes: Vec<Node<E>>,
    leaves: HashMap<String, NodeId>,
}

/// Ordered record of forward ops for one backward pass.
///
/// A tape belongs to a single search/training context and is used from one
/// thread. Ops are pure with respect to their tensor inputs; an inference
/// tape records nothing and costs nothing.
pub struct Tape<E: Scalar> {
    inner: RefCell<TapeInner<E>>,
    recording: bool,
    consumed: Cell<bool>,
}

/// Per-node gradient buffers produced by the reverse pass.
pub struct NodeGrads {
    grads: Vec<Option<Vec<f64>>>,
}

impl NodeGrads {
    /// Gradient w.r.t. the tensor, if it was recorded and reached.
    pub fn for_tensor<E: Scalar>(&self, t: &Tensor<E>) -> Option<&[f64]> {
        t.node()
            .and_then(|id| self.grads.get(id))
            .and_then(|g| g.as_deref())
    }
}

impl<E: Scalar> Default for Tape<E> {
    fn default() -> Self {
        Self::new()
    }
}

impl<E: Scalar> Tape<E> {
    /// A recording tape.
    pub fn new() -> Self {
        Tape {
            inner: RefCell::new(TapeInner {
                nodes: Vec::new(),
                leaves: HashMap::new(),
            }),
            recording: true,
            consumed: Cell::new(false),
        }
    }

    /// A non-recording tape for evaluation forwards.
    pub fn inference() -> Self {
        Tape {
            inner: RefCell::new(TapeInner {
                nodes: Vec::new(),
                leaves: HashMap::new(),
            }),
            recording: false,
            consumed: Cell::new(false),
        }
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    fn push(&self, record: Record<E>, out_len: usize) -> Option<NodeId> {
        if !self.recording {
            return None;
        }
        let mut inner = self.inner.borrow_mut();
        inner.nodes.push(Node { record, out_len });
        Some(inner.nodes.len() - 1)
    }

    /// Named leaf for a parameter. Repeated calls with the same name return
    /// the same node, so gradients from every use accumulate together.
    pub fn leaf(&self, name: &str, value: &Tensor<E>) -> Tensor<E> {
        if !self.recording {
            return value.detach();
        }
        let existing = self.inner.borrow().leaves.get(name).copied();
        let id = match existing {
            Some(id) => id,
            None => {
                let id = self
                    .push(Record::Leaf, value.len())
                    .expect("recording tape");
                self.inner.borrow_mut().leaves.insert(name.to_string(), id);
                id
            }
        };
        value.detach().with_node(Some(id))
    }

    /// Anonymous leaf for a data input whose gradient is wanted.
    pub fn input(&self, value: &Tensor<E>) -> Tensor<E> {
        let id = self.push(Record::Leaf, value.len());
        value.detach().with_node(id)
    }

    pub fn conv3d(
        &self,
        x: &Tensor<E>,
        w: &Tensor<E>,
        b: Option<&Tensor<E>>,
        stride: [usize; 3],
        dilation: [usize; 3],
        pad: [usize; 3],
    ) -> Result<Tensor<E>> {
        let [batch, c_in, d, h, wd] = x.dims5()?;
        let ws = w.dims5()?;
        let [c_out, wc_in, k0, k1, k2] = ws;
        if k0 != k1 || k1 != k2 {
            return Err(Error::shape(
                "conv3d",
                format!("kernel must be cubic, got {k0}x{k1}x{k2}"),
            ));
        }
        if wc_in != c_in {
            return Err(Error::shape(
                "conv3d",
                format!(
                    "input channels {c_in} (x shape {:?}) do not match kernel channels {wc_in} (w shape {:?})",
                    x.shape(),
                    w.shape()
                ),
            ));
        }
        if let Some(bt) = b {
            if bt.shape() != [c_out] {
                return Err(Error::shape(
                    "conv3d",
                    format!("bias shape {:?}, expected [{c_out}]", bt.shape()),
                ));
            }
        }
        if stride.contains(&0) || dilation.contains(&0) {
            return Err(Error::invalid("conv3d", "stride and dilation must be >= 1"));
        }
        let mut out_dhw = [0usize; 3];
        for (axis, n) in [d, h, wd].into_iter().enumerate() {
            out_dhw[axis] =
                kernels::conv_out_extent(n, k0, stride[axis], dilation[axis], pad[axis]).ok_or_else(
                    || {
                        Error::invalid(
                            "conv3d",
                            format!(
                                "dilated kernel (k={k0}, dilation={}) does not fit input extent {n} with pad {}",
                                dilation[axis], pad[axis]
                            ),
                        )
                    },
                )?;
        }
        let geom = ConvGeom {
            batch,
            c_in,
            c_out,
            in_dhw: [d, h, wd],
            out_dhw,
            k: k0,
            stride,
            dilation,
            pad,
        };
        let data = kernels::conv3d_forward(x.data(), w.data(), b.map(|t| t.data()), &geom);
        let out = Tensor::from_vec(
            &[batch, c_out, out_dhw[0], out_dhw[1], out_dhw[2]],
            data,
        )?;
        let tracked = x.node().is_some() || w.node().is_some() || b.and_then(|t| t.node()).is_some();
        let node = if tracked {
            self.push(
                Record::Conv3d {
                    x: x.node(),
                    w: w.node(),
                    b: b.and_then(|t| t.node()),
                    x_val: x.detach(),
                    w_val: w.detach(),
                    geom,
                },
                out.len(),
            )
        } else {
            None
        };
        Ok(out.with_node(node))
    }

    pub fn avg_pool3d(
        &self,
        x: &Tensor<E>,
        kernel: [usize; 3],
        stride: [usize; 3],
        ceil_mode: bool,
    ) -> Result<Tensor<E>> {
        let dims = x.dims5()?;
        if kernel.contains(&0) {
            return Err(Error::invalid("avg_pool3d", "zero-sized window"));
        }
        if kernel != stride {
            return Err(Error::invalid(
                "avg_pool3d",
                format!("windows must not overlap: kernel {kernel:?} != stride {stride:?}"),
            ));
        }
        let out_dhw = [
            kernels::pool_out_extent(dims[2], kernel[0], ceil_mode),
            kernels::pool_out_extent(dims[3], kernel[1], ceil_mode),
            kernels::pool_out_extent(dims[4], kernel[2], ceil_mode),
        ];
        if out_dhw.contains(&0) {
            return Err(Error::invalid(
                "avg_pool3d",
                format!("window {kernel:?} larger than input {:?} without ceil mode", &dims[2..]),
            ));
        }
        let data = kernels::avg_pool3d_forward(x.data(), dims, kernel, out_dhw);
        let out = Tensor::from_vec(&[dims[0], dims[1], out_dhw[0], out_dhw[1], out_dhw[2]], data)?;
        let node = if x.node().is_some() {
            self.push(
                Record::AvgPool3d {
                    x: x.node(),
                    dims,
                    kernel,
                    out_dhw,
                },
                out.len(),
            )
        } else {
            None
        };
        Ok(out.with_node(node))
    }

    pub fn upsample_nearest3d(
        &self,
        x: &Tensor<E>,
        factors: [usize; 3],
        target: [usize; 3],
    ) -> Result<Tensor<E>> {
        let dims = x.dims5()?;
        if factors.contains(&0) {
            return Err(Error::invalid("upsample_nearest3d", "zero factor"));
        }
        for axis in 0..3 {
            let replicated = dims[2 + axis] * factors[axis];
            if target[axis] > replicated || target[axis] < dims[2 + axis] {
                return Err(Error::invalid(
                    "upsample_nearest3d",
                    format!(
                        "target {:?} outside [{:?}, {:?}] for factors {factors:?}",
                        target,
                        &dims[2..],
                        [dims[2] * factors[0], dims[3] * factors[1], dims[4] * factors[2]]
                    ),
                ));
            }
        }
        let data = kernels::upsample3d_forward(x.data(), dims, factors, target);
        let out = Tensor::from_vec(&[dims[0], dims[1], target[0], target[1], target[2]], data)?;
        let node = if x.node().is_some() {
            self.push(
                Record::Upsample3d {
                    x: x.node(),
                    dims,
                    factors,
                    target,
                },
                out.len(),
            )
        } else {
            None
        };
        Ok(out.with_node(node))
    }

    /// Batch normalization over (N, D, H, W) per channel.
    ///
    /// Returns the normalized tensor and, in batch-stats mode with an
    /// attached `running` pair, the updated running (mean, var).
    #[allow(clippy::type_complexity)]
    pub fn batch_norm3d(
        &self,
        x: &Tensor<E>,
        gamma: &Tensor<E>,
        beta: &Tensor<E>,
        running: Option<(&Tensor<E>, &Tensor<E>)>,
        mode: NormMode,
    ) -> Result<(Tensor<E>, Option<(Tensor<E>, Tensor<E>)>)> {
        let dims = x.dims5()?;
        let c = dims[1];
        if gamma.shape() != [c] || beta.shape() != [c] {
            return Err(Error::shape(
                "batch_norm3d",
                format!(
                    "gamma {:?} / beta {:?} must both be [{c}]",
                    gamma.shape(),
                    beta.shape()
                ),
            ));
        }
        if let Some((rm, rv)) = running {
            if rm.shape() != [c] || rv.shape() != [c] {
                return Err(Error::shape(
                    "batch_norm3d",
                    format!("running stats must be [{c}], got {:?} / {:?}", rm.shape(), rv.shape()),
                ));
            }
        }
        let (fwd, coupled, updated) = match mode {
            NormMode::BatchStats => {
                let fwd = kernels::bn_batch_forward(x.data(), dims, gamma.data(), beta.data());
                let updated = running.map(|(rm, rv)| {
                    let mom = kernels::BN_MOMENTUM;
                    let new_mean: Vec<E> = rm
                        .data()
                        .iter()
                        .zip(&fwd.mean)
                        .map(|(r, m)| E::from_f64((1.0 - mom) * r.to_f64() + mom * m))
                        .collect();
                    let new_var: Vec<E> = rv
                        .data()
                        .iter()
                        .zip(&fwd.var)
                        .map(|(r, v)| E::from_f64((1.0 - mom) * r.to_f64() + mom * v))
                        .collect();
                    (
                        Tensor::from_vec(&[c], new_mean).expect("bn: running mean shape"),
                        Tensor::from_vec(&[c], new_var).expect("bn: running var shape"),
                    )
                });
                (fwd, true, updated)
            }
            NormMode::RunningStats => {
                let (rm, rv) = running.ok_or_else(|| {
                    Error::invalid("batch_norm3d", "running_stats mode requires stored moments")
                })?;
                let fwd = kernels::bn_running_forward(
                    x.data(),
                    dims,
                    gamma.data(),
                    beta.data(),
                    rm.data(),
                    rv.data(),
                );
                (fwd, false, None)
            }
        };
        let out = Tensor::from_vec(x.shape(), fwd.y)?;
        let tracked = x.node().is_some() || gamma.node().is_some() || beta.node().is_some();
        let node = if tracked {
            self.push(
                Record::BatchNorm {
                    x: x.node(),
                    gamma: gamma.node(),
                    beta: beta.node(),
                    dims,
                    x_hat: fwd.x_hat,
                    inv_std: fwd.inv_std,
                    gamma_val: gamma.detach(),
                    coupled,
                },
                out.len(),
            )
        } else {
            None
        };
        Ok((out.with_node(node), updated))
    }

    /// Global average pool over (D, H, W), then an affine map to class logits.
    pub fn classifier_head(&self, x: &Tensor<E>, w: &Tensor<E>, b: &Tensor<E>) -> Result<Tensor<E>> {
        let dims = x.dims5()?;
        let c = dims[1];
        if w.rank() != 2 || w.shape()[1] != c {
            return Err(Error::shape(
                "classifier_head",
                format!("weight {:?} must be [K, {c}]", w.shape()),
            ));
        }
        let k_out = w.shape()[0];
        if b.shape() != [k_out] {
            return Err(Error::shape(
                "classifier_head",
                format!("bias {:?} must be [{k_out}]", b.shape()),
            ));
        }
        let (y, pooled) = kernels::head_forward(x.data(), dims, w.data(), b.data(), k_out);
        let out = Tensor::from_vec(&[dims[0], k_out], y)?;
        let tracked = x.node().is_some() || w.node().is_some() || b.node().is_some();
        let node = if tracked {
            self.push(
                Record::Head {
                    x: x.node(),
                    w: w.node(),
                    b: b.node(),
                    dims,
                    k_out,
                    w_val: w.detach(),
                    pooled,
                },
                out.len(),
            )
        } else {
            None
        };
        Ok(out.with_node(node))
    }

    /// Elementwise max(0, x); the subgradient at 0 is 0.
    pub fn relu(&self, x: &Tensor<E>) -> Tensor<E> {
        let data: Vec<E> = x
            .data()
            .iter()
            .map(|&v| if v > E::ZERO { v } else { E::ZERO })
            .collect();
        let out = Tensor::from_vec(x.shape(), data).expect("relu: same shape");
        let node = if x.node().is_some() {
            self.push(
                Record::Relu {
                    x: x.node(),
                    x_val: x.detach(),
                },
                out.len(),
            )
        } else {
            None
        };
        out.with_node(node)
    }

    fn softmax_probs(v: &[E]) -> Vec<f64> {
        let max = v.iter().fold(f64::NEG_INFINITY, |m, x| m.max(x.to_f64()));
        let exps: Vec<f64> = v.iter().map(|x| (x.to_f64() - max).exp()).collect();
        let total: f64 = exps.iter().sum();
        exps.into_iter().map(|e| e / total).collect()
    }

    /// Softmax of a 1-D logit vector, stabilized by max subtraction.
    pub fn softmax(&self, v: &Tensor<E>) -> Result<Tensor<E>> {
        if v.rank() != 1 {
            return Err(Error::shape("softmax", format!("expected rank 1, got {:?}", v.shape())));
        }
        let probs = Self::softmax_probs(v.data());
        let out = Tensor::from_vec(v.shape(), probs.iter().map(|&p| E::from_f64(p)).collect())?;
        let node = if v.node().is_some() {
            self.push(
                Record::Softmax {
                    x: v.node(),
                    probs,
                },
                out.len(),
            )
        } else {
            None
        };
        Ok(out.with_node(node))
    }

    /// log-sum-exp (smoothmax) of a 1-D logit vector; its gradient is the
    /// softmax of the same vector.
    pub fn logsumexp(&self, v: &Tensor<E>) -> Result<Tensor<E>> {
        if v.rank() != 1 {
            return Err(Error::shape("logsumexp", format!("expected rank 1, got {:?}", v.shape())));
        }
        let max = v.data().iter().fold(f64::NEG_INFINITY, |m, x| m.max(x.to_f64()));
        let total: f64 = v.data().iter().map(|x| (x.to_f64() - max).exp()).sum();
        let lse = max + total.ln();
        let probs = Self::softmax_probs(v.data());
        let out = Tensor::scalar(E::from_f64(lse));
        let node = if v.node().is_some() {
            self.push(
                Record::LogSumExp {
                    x: v.node(),
                    probs,
                },
                1,
            )
        } else {
            None
        };
        Ok(out.with_node(node))
    }

    /// Softmax probabilities together with the smoothmax value.
    pub fn softmax_smoothmax(&self, v: &Tensor<E>) -> Result<(Tensor<E>, Tensor<E>)> {
        Ok((self.softmax(v)?, self.logsumexp(v)?))
    }

    /// Mean over the batch of -log softmax(logits)[label].
    pub fn cross_entropy(&self, logits: &Tensor<E>, labels: &[usize]) -> Result<Tensor<E>> {
        if logits.rank() != 2 {
            return Err(Error::shape(
                "cross_entropy",
                format!("expected [N, K] logits, got {:?}", logits.shape()),
            ));
        }
        let n = logits.shape()[0];
        let classes = logits.shape()[1];
        if labels.len() != n {
            return Err(Error::shape(
                "cross_entropy",
                format!("{} labels for batch of {n}", labels.len()),
            ));
        }
        for (i, &lab) in labels.iter().enumerate() {
            if lab >= classes {
                return Err(Error::LabelOutOfRange {
                    index: i,
                    value: lab,
                    num_classes: classes,
                });
            }
        }
        let mut probs = vec![0.0f64; n * classes];
        let mut loss = 0.0f64;
        for i in 0..n {
            let row = &logits.data()[i * classes..(i + 1) * classes];
            let max = row.iter().fold(f64::NEG_INFINITY, |m, x| m.max(x.to_f64()));
            let mut total = 0.0f64;
            for (j, x) in row.iter().enumerate() {
                let e = (x.to_f64() - max).exp();
                probs[i * classes + j] = e;
                total += e;
            }
            for p in &mut probs[i * classes..(i + 1) * classes] {
                *p /= total;
            }
            let lse = max + total.ln();
            loss += lse - row[labels[i]].to_f64();
        }
        loss /= n as f64;
        let out = Tensor::scalar(E::from_f64(loss));
        let node = if logits.node().is_some() {
            self.push(
                Record::CrossEntropy {
                    logits: logits.node(),
                    probs,
                    labels: labels.to_vec(),
                    classes,
                },
                1,
            )
        } else {
            None
        };
        Ok(out.with_node(node))
    }

    /// out = sum_k weights[k] * branches[k], accumulated in fixed branch order.
    pub fn weighted_sum(&self, weights: &Tensor<E>, branches: &[Tensor<E>]) -> Result<Tensor<E>> {
        if weights.rank() != 1 || weights.len() != branches.len() || branches.is_empty() {
            return Err(Error::shape(
                "weighted_sum",
                format!("{} weights for {} branches", weights.len(), branches.len()),
            ));
        }
        let shape = branches[0].shape().to_vec();
        for b in branches {
            if b.shape() != shape {
                return Err(Error::shape(
                    "weighted_sum",
                    format!("branch shape {:?} != {:?}", b.shape(), shape),
                ));
            }
        }
        let weights_val: Vec<f64> = weights.data().iter().map(|w| w.to_f64()).collect();
        let mut acc = vec![0.0f64; branches[0].len()];
        for (w, b) in weights_val.iter().zip(branches) {
            for (o, v) in acc.iter_mut().zip(b.data()) {
                *o += w * v.to_f64();
            }
        }
        let out = Tensor::from_vec(&shape, acc.into_iter().map(E::from_f64).collect())?;
        let tracked =
            weights.node().is_some() || branches.iter().any(|b| b.node().is_some());
        let node = if tracked {
            self.push(
                Record::WeightedSum {
                    weights: weights.node(),
                    weights_val,
                    branches: branches.iter().map(|b| (b.node(), b.detach())).collect(),
                },
                out.len(),
            )
        } else {
            None
        };
        Ok(out.with_node(node))
    }

    /// Elementwise sum of two same-shape tensors.
    pub fn add(&self, a: &Tensor<E>, b: &Tensor<E>) -> Result<Tensor<E>> {
        if a.shape() != b.shape() {
            return Err(Error::shape(
                "add",
                format!("{:?} vs {:?}", a.shape(), b.shape()),
            ));
        }
        let data: Vec<E> = a
            .data()
            .iter()
            .zip(b.data())
            .map(|(x, y)| E::from_f64(x.to_f64() + y.to_f64()))
            .collect();
        let out = Tensor::from_vec(a.shape(), data)?;
        let tracked = a.node().is_some() || b.node().is_some();
        let node = if tracked {
            self.push(
                Record::Add {
                    a: a.node(),
                    b: b.node(),
                },
                out.len(),
            )
        } else {
            None
        };
        Ok(out.with_node(node))
    }

    /// Elementwise multiplication by a constant.
    pub fn scale(&self, x: &Tensor<E>, factor: f64) -> Tensor<E> {
        let data: Vec<E> = x
            .data()
            .iter()
            .map(|v| E::from_f64(v.to_f64() * factor))
            .collect();
        let out = Tensor::from_vec(x.shape(), data).expect("scale: same shape");
        let node = if x.node().is_some() {
            self.push(
                Record::Scale {
                    x: x.node(),
                    factor,
                },
                out.len(),
            )
        } else {
            None
        };
        out.with_node(node)
    }

    /// Sum of all elements, as a scalar tensor.
    pub fn sum(&self, x: &Tensor<E>) -> Tensor<E> {
        let total = kernels::lane_sum(x.data());
        let out = Tensor::scalar(E::from_f64(total));
        let node = if x.node().is_some() {
            self.push(
                Record::Sum {
                    x: x.node(),
                    in_len: x.len(),
                },
                1,
            )
        } else {
            None
        };
        out.with_node(node)
    }

    /// Fixed-weight projection sum_i weights[i] * x[i], as a scalar tensor.
    pub fn dot_const(&self, x: &Tensor<E>, weights: &[f64]) -> Result<Tensor<E>> {
        if weights.len() != x.len() {
            return Err(Error::shape(
                "dot_const",
                format!("{} weights for {} elements", weights.len(), x.len()),
            ));
        }
        let total = kernels::lane_dot(weights, x.data());
        let out = Tensor::scalar(E::from_f64(total));
        let node = if x.node().is_some() {
            self.push(
                Record::DotConst {
                    x: x.node(),
                    weights: weights.to_vec(),
                },
                1,
            )
        } else {
            None
        };
        Ok(out.with_node(node))
    }

    /// Reverse pass from a recorded scalar loss; returns raw per-node
    /// gradient buffers. Errors if the tape was already consumed.
    pub fn backward_nodes(&self, loss: &Tensor<E>) -> Result<NodeGrads> {
        if self.consumed.get() {
            return Err(Error::TapeConsumed);
        }
        if loss.len() != 1 {
            return Err(Error::invalid(
                "backward",
                format!("loss must be scalar, got shape {:?}", loss.shape()),
            ));
        }
        let loss_node = loss.node().ok_or_else(|| {
            Error::invalid("backward", "loss was not recorded on this tape")
        })?;
        self.consumed.set(true);
        let inner = self.inner.borrow();
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; inner.nodes.len()];
        grads[loss_node] = Some(vec![1.0]);

        for id in (0..=loss_node).rev() {
            let g = match grads[id].take() {
                Some(g) => g,
                None => continue,
            };
            let node = &inner.nodes[id];
            if matches!(node.record, Record::Leaf) {
                // Leaf gradients are re-stored for collection below.
                grads[id] = Some(g);
                continue;
            }
            let mut send = |target: Option<NodeId>, contribution: Vec<f64>| {
                if let Some(t) = target {
                    let slot = grads[t].get_or_insert_with(|| vec![0.0; inner.nodes[t].out_len]);
                    for (o, v) in slot.iter_mut().zip(&contribution) {
                        *o += *v;
                    }
                }
            };
            match &node.record {
                Record::Leaf => unreachable!("handled above"),
                Record::Conv3d {
                    x,
                    w,
                    b,
                    x_val,
                    w_val,
                    geom,
                } => {
                    if x.is_some() {
                        send(*x, kernels::conv3d_backward_x(&g, w_val.data(), geom));
                    }
                    if w.is_some() {
                        send(*w, kernels::conv3d_backward_w(&g, x_val.data(), geom));
                    }
                    if b.is_some() {
                        send(*b, kernels::conv3d_backward_b(&g, geom));
                    }
                }
                Record::AvgPool3d {
                    x,
                    dims,
                    kernel,
                    out_dhw,
                } => {
                    send(*x, kernels::avg_pool3d_backward(&g, *dims, *kernel, *out_dhw));
                }
                Record::Upsample3d {
                    x,
                    dims,
                    factors,
                    target,
                } => {
                    send(*x, kernels::upsample3d_backward(&g, *dims, *factors, *target));
                }
                Record::BatchNorm {
                    x,
                    gamma,
                    beta,
                    dims,
                    x_hat,
                    inv_std,
                    gamma_val,
                    coupled,
                } => {
                    let (gx, ggamma, gbeta) =
                        kernels::bn_backward(&g, *dims, x_hat, inv_std, gamma_val.data(), *coupled);
                    if x.is_some() {
                        send(*x, gx);
                    }
                    if gamma.is_some() {
                        send(*gamma, ggamma);
                    }
                    if beta.is_some() {
                        send(*beta, gbeta);
                    }
                }
                Record::Head {
                    x,
                    w,
                    b,
                    dims,
                    k_out,
                    w_val,
                    pooled,
                } => {
                    let (gx, gw, gb) = kernels::head_backward(&g, *dims, w_val.data(), pooled, *k_out);
                    if x.is_some() {
                        send(*x, gx);
                    }
                    if w.is_some() {
                        send(*w, gw);
                    }
                    if b.is_some() {
                        send(*b, gb);
                    }
                }
                Record::Relu { x, x_val } => {
                    let gx: Vec<f64> = x_val
                        .data()
                        .iter()
                        .zip(&g)
                        .map(|(v, gi)| if *v > E::ZERO { *gi } else { 0.0 })
                        .collect();
                    send(*x, gx);
                }
                Record::Softmax { x, probs } => {
                    let dot: f64 = probs.iter().zip(&g).map(|(p, gi)| p * gi).sum();
                    let gx: Vec<f64> = probs.iter().zip(&g).map(|(p, gi)| p * (gi - dot)).collect();
                    send(*x, gx);
                }
                Record::LogSumExp { x, probs } => {
                    let gx: Vec<f64> = probs.iter().map(|p| p * g[0]).collect();
                    send(*x, gx);
                }
                Record::CrossEntropy {
                    logits,
                    probs,
                    labels,
                    classes,
                } => {
                    let n = labels.len();
                    let scale = g[0] / n as f64;
                    let mut gx = vec![0.0f64; probs.len()];
                    for i in 0..n {
                        for j in 0..*classes {
                            let indicator = if j == labels[i] { 1.0 } else { 0.0 };
                            gx[i * classes + j] = scale * (probs[i * classes + j] - indicator);
                        }
                    }
                    send(*logits, gx);
                }
                Record::WeightedSum {
                    weights,
                    weights_val,
                    branches,
                } => {
                    if weights.is_some() {
                        let gw: Vec<f64> = branches
                            .iter()
                            .map(|(_, bv)| kernels::lane_dot(&g, bv.data()))
                            .collect();
                        send(*weights, gw);
                    }
                    for (wk, (node, _)) in weights_val.iter().zip(branches) {
                        if node.is_some() {
                            let gb: Vec<f64> = g.iter().map(|gi| wk * gi).collect();
                            send(*node, gb);
                        }
                    }
                }
                Record::Add { a, b } => {
                    if a.is_some() {
                        send(*a, g.clone());
                    }
                    if b.is_some() {
                        send(*b, g.clone());
                    }
                }
                Record::Scale { x, factor } => {
                    let gx: Vec<f64> = g.iter().map(|gi| gi * factor).collect();
                    send(*x, gx);
                }
                Record::Sum { x, in_len } => {
                    send(*x, vec![g[0]; *in_len]);
                }
                Record::DotConst { x, weights } => {
                    let gx: Vec<f64> = weights.iter().map(|w| w * g[0]).collect();
                    send(*x, gx);
                }
            }
        }
        Ok(NodeGrads { grads })
    }

    /// Reverse pass returning gradients keyed by parameter name. Every
    /// trainable parameter of the store appears; unreached ones get zeros.
    pub fn backward(&self, loss: &Tensor<E>, params: &ParamStore<E>) -> Result<Gradients<E>> {
        self.backward_with_nodes(loss, params).map(|(g, _)| g)
    }

    /// [`Tape::backward`] that also hands back the raw per-node buffers.
    pub fn backward_with_nodes(
        &self,
        loss: &Tensor<E>,
        params: &ParamStore<E>,
    ) -> Result<(Gradients<E>, NodeGrads)> {
        let node_grads = self.backward_nodes(loss)?;
        let leaves: Vec<(String, NodeId)> = {
            let inner = self.inner.borrow();
            inner
                .leaves
                .iter()
                .map(|(n, id)| (n.clone(), *id))
                .collect()
        };
        let mut grads = Gradients::default();
        for (name, id) in leaves {
            if let Some(param) = params.get(&name) {
                if let Some(buf) = node_grads.grads[id].as_ref() {
                    let t = Tensor::from_f64_slice(param.value.shape(), buf)?;
                    grads.insert(name, t);
                }
            }
        }
        for (name, param) in params.iter() {
            if param.trainable && grads.get(name).is_none() {
                grads.insert(name.to_string(), Tensor::zeros(param.value.shape()));
            }
        }
        Ok((grads, node_grads))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t5(shape: [usize; 5], data: Vec<f32>) -> Tensor<f32> {
        Tensor::from_vec(&shape, data).unwrap()
    }

    #[test]
    fn conv_identity_kernel() {
        let tape = Tape::<f32>::new();
        let x = t5([1, 1, 2, 2, 2], vec![1., 2., 3., 4., 5., 6., 7., 8.]);
        let w = t5([1, 1, 1, 1, 1], vec![1.0]);
        let y = tape
            .conv3d(&x, &w, None, [1, 1, 1], [1, 1, 1], [0, 0, 0])
            .unwrap();
        assert_eq!(y.data(), x.data());
    }

    #[test]
    fn conv_full_window_sum_is_27() {
        let tape = Tape::<f32>::new();
        let x = t5([1, 1, 5, 5, 5], vec![1.0; 125]);
        let w = t5([1, 1, 3, 3, 3], vec![1.0; 27]);
        let y = tape
            .conv3d(&x, &w, None, [1, 1, 1], [1, 1, 1], [1, 1, 1])
            .unwrap();
        assert_eq!(y.shape(), [1, 1, 5, 5, 5]);
        // center voxel sees the full 3x3x3 window
        let center = y.data()[(2 * 5 + 2) * 5 + 2];
        assert_eq!(center, 27.0);
    }

    #[test]
    fn conv_dilated_same_padding_keeps_shape() {
        let tape = Tape::<f32>::new();
        let x = t5([1, 1, 19, 19, 19], vec![0.5; 19 * 19 * 19]);
        let w = t5([1, 1, 3, 3, 3], vec![0.1; 27]);
        let y = tape
            .conv3d(&x, &w, None, [1, 1, 1], [2, 2, 2], [2, 2, 2])
            .unwrap();
        assert_eq!(y.shape(), [1, 1, 19, 19, 19]);
    }

    #[test]
    fn conv_channel_mismatch_names_shapes() {
        let tape = Tape::<f32>::new();
        let x = t5([1, 2, 3, 3, 3], vec![0.0; 54]);
        let w = t5([1, 3, 1, 1, 1], vec![0.0; 3]);
        let err = tape
            .conv3d(&x, &w, None, [1, 1, 1], [1, 1, 1], [0, 0, 0])
            .unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[1, 2, 3, 3, 3]") && msg.contains("[1, 3, 1, 1, 1]"), "{msg}");
    }

    #[test]
    fn pool_pairwise_means() {
        let tape = Tape::<f32>::new();
        let x = t5([1, 1, 4, 1, 1], vec![1., 3., 5., 7.]);
        let y = tape.avg_pool3d(&x, [2, 1, 1], [2, 1, 1], true).unwrap();
        assert_eq!(y.data(), &[2.0, 6.0]);
    }

    #[test]
    fn pool_ceil_boundary_window() {
        let tape = Tape::<f32>::new();
        let x = t5([1, 1, 5, 1, 1], vec![1., 2., 3., 4., 5.]);
        let y = tape.avg_pool3d(&x, [2, 1, 1], [2, 1, 1], true).unwrap();
        assert_eq!(y.data(), &[1.5, 3.5, 5.0]);
    }

    #[test]
    fn pool_identity_kernel() {
        let tape = Tape::<f32>::new();
        let x = t5([1, 1, 3, 2, 2], (0..12).map(|v| v as f32).collect());
        let y = tape.avg_pool3d(&x, [1, 1, 1], [1, 1, 1], true).unwrap();
        assert_eq!(y.data(), x.data());
    }

    #[test]
    fn pool_rejects_zero_window_and_overlap() {
        let tape = Tape::<f32>::new();
        let x = t5([1, 1, 4, 1, 1], vec![0.0; 4]);
        assert!(tape.avg_pool3d(&x, [0, 1, 1], [0, 1, 1], true).is_err());
        assert!(tape.avg_pool3d(&x, [2, 1, 1], [1, 1, 1], true).is_err());
    }

    #[test]
    fn upsample_replicates_then_crops() {
        let tape = Tape::<f32>::new();
        let x = t5([1, 1, 2, 1, 1], vec![2., 6.]);
        let y = tape.upsample_nearest3d(&x, [2, 1, 1], [4, 1, 1]).unwrap();
        assert_eq!(y.data(), &[2., 2., 6., 6.]);

        let x = t5([1, 1, 3, 1, 1], vec![1.5, 3.5, 5.0]);
        let y = tape.upsample_nearest3d(&x, [2, 1, 1], [5, 1, 1]).unwrap();
        assert_eq!(y.data(), &[1.5, 1.5, 3.5, 3.5, 5.0]);
    }

    #[test]
    fn upsample_identity_and_bad_target() {
        let tape = Tape::<f32>::new();
        let x = t5([1, 1, 2, 2, 2], (0..8).map(|v| v as f32).collect());
        let y = tape.upsample_nearest3d(&x, [1, 1, 1], [2, 2, 2]).unwrap();
        assert_eq!(y.data(), x.data());
        assert!(tape.upsample_nearest3d(&x, [2, 1, 1], [5, 2, 2]).is_err());
    }

    #[test]
    fn bn_constant_input_zeros_out() {
        let tape = Tape::<f32>::new();
        let x = t5([2, 1, 2, 2, 2], vec![3.5; 16]);
        let gamma = Tensor::from_vec(&[1], vec![1.0f32]).unwrap();
        let beta = Tensor::from_vec(&[1], vec![0.0f32]).unwrap();
        let (y, _) = tape
            .batch_norm3d(&x, &gamma, &beta, None, NormMode::BatchStats)
            .unwrap();
        assert!(y.data().iter().all(|v| v.abs() < 1e-6));
    }

    #[test]
    fn bn_gamma_zero_yields_beta() {
        let tape = Tape::<f32>::new();
        let x = t5([1, 2, 2, 1, 1], vec![1., 2., 3., 4.]);
        let gamma = Tensor::from_vec(&[2], vec![0.0f32, 0.0]).unwrap();
        let beta = Tensor::from_vec(&[2], vec![0.7f32, -0.3]).unwrap();
        let (y, _) = tape
            .batch_norm3d(&x, &gamma, &beta, None, NormMode::BatchStats)
            .unwrap();
        assert_eq!(y.data(), &[0.7, 0.7, -0.3, -0.3]);
    }

    #[test]
    fn head_constant_input_identity_weight() {
        let tape = Tape::<f32>::new();
        let c = 3;
        let x = t5([1, 3, 2, 2, 2], vec![0.25; 24]);
        let mut wid = vec![0.0f32; c * c];
        for i in 0..c {
            wid[i * c + i] = 1.0;
        }
        let w = Tensor::from_vec(&[c, c], wid).unwrap();
        let b = Tensor::zeros(&[c]);
        let y = tape.classifier_head(&x, &w, &b).unwrap();
        assert!(y.data().iter().all(|v| (v - 0.25).abs() < 1e-7));

        let w0 = Tensor::zeros(&[2, c]);
        let b2 = Tensor::from_vec(&[2], vec![1.5f32, -2.0]).unwrap();
        let y = tape.classifier_head(&x, &w0, &b2).unwrap();
        assert_eq!(y.data(), &[1.5, -2.0]);
    }

    #[test]
    fn head_shape_contract() {
        let tape = Tape::<f32>::new();
        let x = Tensor::<f32>::zeros(&[2, 64, 200, 5, 5]);
        let w = Tensor::<f32>::zeros(&[16, 64]);
        let b = Tensor::<f32>::zeros(&[16]);
        let y = tape.classifier_head(&x, &w, &b).unwrap();
        assert_eq!(y.shape(), [2, 16]);
    }

    #[test]
    fn relu_values_and_subgradient() {
        let tape = Tape::<f32>::new();
        let x = tape.input(&Tensor::from_vec(&[3], vec![-1.0f32, 0.0, 2.0]).unwrap());
        let y = tape.relu(&x);
        assert_eq!(y.data(), &[0.0, 0.0, 2.0]);
        let loss = tape.sum(&y);
        let grads = tape.backward_nodes(&loss).unwrap();
        assert_eq!(grads.for_tensor(&x).unwrap(), &[0.0, 0.0, 1.0]);
    }

    #[test]
    fn softmax_uniform_and_shift_invariance() {
        let tape = Tape::<f32>::new();
        let v = Tensor::from_vec(&[3], vec![0.0f32; 3]).unwrap();
        let (p, lse) = tape.softmax_smoothmax(&v).unwrap();
        for &pi in p.data() {
            assert!((pi - 1.0 / 3.0).abs() < 1e-7);
        }
        assert!((lse.item() - 3.0f32.ln()) < 1e-6);

        let v2 = Tensor::from_vec(&[2], vec![0.0f32; 2]).unwrap();
        let lse2 = tape.logsumexp(&v2).unwrap();
        assert!((lse2.item() - std::f32::consts::LN_2).abs() < 1e-5);

        let a = Tensor::from_vec(&[3], vec![0.3f32, -1.2, 2.0]).unwrap();
        let shifted = Tensor::from_vec(&[3], vec![0.3f32 + 7.25, -1.2 + 7.25, 2.0 + 7.25]).unwrap();
        let pa = tape.softmax(&a).unwrap();
        let pb = tape.softmax(&shifted).unwrap();
        for (x, y) in pa.data().iter().zip(pb.data()) {
            assert!((x - y).abs() < 1e-6);
        }
        let la = tape.logsumexp(&a).unwrap();
        let lb = tape.logsumexp(&shifted).unwrap();
        assert!((lb.item() - la.item() - 7.25).abs() < 1e-5);
    }

    #[test]
    fn cross_entropy_values() {
        let tape = Tape::<f32>::new();
        let logits = Tensor::from_vec(&[1, 2], vec![0.0f32, 0.0]).unwrap();
        let loss = tape.cross_entropy(&logits, &[0]).unwrap();
        assert!((loss.item() - 2.0f32.ln()).abs() < 1e-6);

        let sat = Tensor::from_vec(&[1, 2], vec![40.0f32, 0.0]).unwrap();
        let loss = tape.cross_entropy(&sat, &[0]).unwrap();
        assert!(loss.item() < 1e-10);

        let bad = tape.cross_entropy(&logits, &[5]).unwrap_err();
        assert!(bad.to_string().contains("5"));
    }

    #[test]
    fn backward_sum_gives_ones_and_consumes_tape() {
        let tape = Tape::<f32>::new();
        let x = tape.input(&Tensor::from_vec(&[4], vec![1.0f32, 2.0, 3.0, 4.0]).unwrap());
        let loss = tape.sum(&x);
        let grads = tape.backward_nodes(&loss).unwrap();
        assert_eq!(grads.for_tensor(&x).unwrap(), &[1.0; 4]);
        assert!(matches!(
            tape.backward_nodes(&loss),
            Err(Error::TapeConsumed)
        ));
    }

    #[test]
    fn backward_relu_of_negated_positive_is_zero() {
        let tape = Tape::<f32>::new();
        let x = tape.input(&Tensor::from_vec(&[3], vec![0.5f32, 1.0, 2.0]).unwrap());
        let neg = tape.scale(&x, -1.0);
        let r = tape.relu(&neg);
        let loss = tape.sum(&r);
        let grads = tape.backward_nodes(&loss).unwrap();
        assert_eq!(grads.for_tensor(&x).unwrap(), &[0.0; 3]);
    }
}
