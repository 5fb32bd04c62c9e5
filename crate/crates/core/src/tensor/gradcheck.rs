//! Finite-difference gradient verification.
//!
//! Runs entirely in the 64-bit mode. The oracle side only ever calls forward
//! ops on a non-recording tape, so it stays independent of the backward
//! implementation it is checking.

use crate::error::Result;
use crate::rng::Rng;

use super::tape::NormMode;
use super::{Tape, Tensor};

/// Central-difference step.
pub const FD_EPSILON: f64 = 1e-3;

/// |a - b| relative to the larger magnitude, floored at 1 so near-zero
/// gradients are compared absolutely.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1.0)
}

/// Central finite differences of `f` w.r.t. every element of every input.
pub fn finite_difference<F>(f: F, inputs: &[Vec<f64>]) -> Vec<Vec<f64>>
where
    F: Fn(&[Vec<f64>]) -> f64,
{
    let mut work: Vec<Vec<f64>> = inputs.to_vec();
    let mut grads = Vec::with_capacity(inputs.len());
    for i in 0..inputs.len() {
        let mut g = vec![0.0f64; inputs[i].len()];
        for j in 0..inputs[i].len() {
            let orig = work[i][j];
            work[i][j] = orig + FD_EPSILON;
            let up = f(&work);
            work[i][j] = orig - FD_EPSILON;
            let down = f(&work);
            work[i][j] = orig;
            g[j] = (up - down) / (2.0 * FD_EPSILON);
        }
        grads.push(g);
    }
    grads
}

/// Op selector plus shape parameters for [`grad_check`].
#[derive(Clone, Debug)]
pub enum CheckedOp {
    Conv3d {
        batch: usize,
        c_in: usize,
        c_out: usize,
        dhw: [usize; 3],
        k: usize,
        stride: [usize; 3],
        dilation: [usize; 3],
        pad: [usize; 3],
    },
    AvgPool3d {
        batch: usize,
        channels: usize,
        dhw: [usize; 3],
        kernel: [usize; 3],
    },
    Upsample3d {
        batch: usize,
        channels: usize,
        dhw: [usize; 3],
        factors: [usize; 3],
        target: [usize; 3],
    },
    /// avg_pool3d followed by an upsample restoring the original extents.
    PoolUpsample {
        batch: usize,
        channels: usize,
        dhw: [usize; 3],
        kernel: [usize; 3],
    },
    BatchNorm3d {
        batch: usize,
        channels: usize,
        dhw: [usize; 3],
    },
    Relu {
        len: usize,
    },
    ClassifierHead {
        batch: usize,
        channels: usize,
        dhw: [usize; 3],
        classes: usize,
    },
    Softmax {
        len: usize,
    },
    LogSumExp {
        len: usize,
    },
    CrossEntropy {
        batch: usize,
        classes: usize,
    },
}

impl CheckedOp {
    pub fn name(&self) -> &'static str {
        match self {
            CheckedOp::Conv3d { .. } => "conv3d",
            CheckedOp::AvgPool3d { .. } => "avg_pool3d",
            CheckedOp::Upsample3d { .. } => "upsample_nearest3d",
            CheckedOp::PoolUpsample { .. } => "avg_pool3d+upsample",
            CheckedOp::BatchNorm3d { .. } => "batch_norm3d",
            CheckedOp::Relu { .. } => "relu",
            CheckedOp::ClassifierHead { .. } => "classifier_head",
            CheckedOp::Softmax { .. } => "softmax",
            CheckedOp::LogSumExp { .. } => "logsumexp",
            CheckedOp::CrossEntropy { .. } => "cross_entropy",
        }
    }
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub op: String,
    pub max_rel_err: f64,
}

fn draw(rng: &mut Rng, len: usize) -> Vec<f64> {
    (0..len).map(|_| 2.0 * rng.next_f64() - 1.0).collect()
}

/// Values bounded away from zero, for kink-free ReLU checks.
fn draw_off_zero(rng: &mut Rng, len: usize) -> Vec<f64> {
    (0..len)
        .map(|_| {
            let mag = 0.1 + 0.9 * rng.next_f64();
            if rng.next_f64() < 0.5 {
                -mag
            } else {
                mag
            }
        })
        .collect()
}

type ForwardFn = Box<dyn Fn(&Tape<f64>, &[Tensor<f64>]) -> Result<Tensor<f64>>>;

struct Case {
    /// Flat input buffers, perturbed one element at a time.
    inputs: Vec<Vec<f64>>,
    shapes: Vec<Vec<usize>>,
    /// Forward to a projected scalar, given input tensors.
    forward: ForwardFn,
}

fn build_case(op: &CheckedOp, rng: &mut Rng) -> Case {
    match *op {
        CheckedOp::Conv3d {
            batch,
            c_in,
            c_out,
            dhw,
            k,
            stride,
            dilation,
            pad,
        } => {
            let x_len = batch * c_in * dhw.iter().product::<usize>();
            let w_len = c_out * c_in * k * k * k;
            let out_dhw: Vec<usize> = (0..3)
                .map(|a| super::kernels::conv_out_extent(dhw[a], k, stride[a], dilation[a], pad[a]).unwrap())
                .collect();
            let out_len = batch * c_out * out_dhw.iter().product::<usize>();
            let proj = draw(rng, out_len);
            Case {
                inputs: vec![draw(rng, x_len), draw(rng, w_len), draw(rng, c_out)],
                shapes: vec![
                    vec![batch, c_in, dhw[0], dhw[1], dhw[2]],
                    vec![c_out, c_in, k, k, k],
                    vec![c_out],
                ],
                forward: Box::new(move |tape, ts| {
                    let y = tape.conv3d(&ts[0], &ts[1], Some(&ts[2]), stride, dilation, pad)?;
                    tape.dot_const(&y, &proj)
                }),
            }
        }
        CheckedOp::AvgPool3d {
            batch,
            channels,
            dhw,
            kernel,
        } => {
            let x_len = batch * channels * dhw.iter().product::<usize>();
            let out_len = batch
                * channels
                * (0..3)
                    .map(|a| super::kernels::pool_out_extent(dhw[a], kernel[a], true))
                    .product::<usize>();
            let proj = draw(rng, out_len);
            Case {
                inputs: vec![draw(rng, x_len)],
                shapes: vec![vec![batch, channels, dhw[0], dhw[1], dhw[2]]],
                forward: Box::new(move |tape, ts| {
                    let y = tape.avg_pool3d(&ts[0], kernel, kernel, true)?;
                    tape.dot_const(&y, &proj)
                }),
            }
        }
        CheckedOp::Upsample3d {
            batch,
            channels,
            dhw,
            factors,
            target,
        } => {
            let x_len = batch * channels * dhw.iter().product::<usize>();
            let out_len = batch * channels * target.iter().product::<usize>();
            let proj = draw(rng, out_len);
            Case {
                inputs: vec![draw(rng, x_len)],
                shapes: vec![vec![batch, channels, dhw[0], dhw[1], dhw[2]]],
                forward: Box::new(move |tape, ts| {
                    let y = tape.upsample_nearest3d(&ts[0], factors, target)?;
                    tape.dot_const(&y, &proj)
                }),
            }
        }
        CheckedOp::PoolUpsample {
            batch,
            channels,
            dhw,
            kernel,
        } => {
            let x_len = batch * channels * dhw.iter().product::<usize>();
            let proj = draw(rng, x_len);
            Case {
                inputs: vec![draw(rng, x_len)],
                shapes: vec![vec![batch, channels, dhw[0], dhw[1], dhw[2]]],
                forward: Box::new(move |tape, ts| {
                    let pooled = tape.avg_pool3d(&ts[0], kernel, kernel, true)?;
                    let y = tape.upsample_nearest3d(&pooled, kernel, dhw)?;
                    tape.dot_const(&y, &proj)
                }),
            }
        }
        CheckedOp::BatchNorm3d {
            batch,
            channels,
            dhw,
        } => {
            let x_len = batch * channels * dhw.iter().product::<usize>();
            let proj = draw(rng, x_len);
            Case {
                inputs: vec![draw(rng, x_len), draw(rng, channels), draw(rng, channels)],
                shapes: vec![
                    vec![batch, channels, dhw[0], dhw[1], dhw[2]],
                    vec![channels],
                    vec![channels],
                ],
                forward: Box::new(move |tape, ts| {
                    let (y, _) = tape.batch_norm3d(&ts[0], &ts[1], &ts[2], None, NormMode::BatchStats)?;
                    tape.dot_const(&y, &proj)
                }),
            }
        }
        CheckedOp::Relu { len } => {
            let proj = draw(rng, len);
            Case {
                inputs: vec![draw_off_zero(rng, len)],
                shapes: vec![vec![len]],
                forward: Box::new(move |tape, ts| {
                    let y = tape.relu(&ts[0]);
                    tape.dot_const(&y, &proj)
                }),
            }
        }
        CheckedOp::ClassifierHead {
            batch,
            channels,
            dhw,
            classes,
        } => {
            let x_len = batch * channels * dhw.iter().product::<usize>();
            let proj = draw(rng, batch * classes);
            Case {
                inputs: vec![
                    draw(rng, x_len),
                    draw(rng, classes * channels),
                    draw(rng, classes),
                ],
                shapes: vec![
                    vec![batch, channels, dhw[0], dhw[1], dhw[2]],
                    vec![classes, channels],
                    vec![classes],
                ],
                forward: Box::new(move |tape, ts| {
                    let y = tape.classifier_head(&ts[0], &ts[1], &ts[2])?;
                    tape.dot_const(&y, &proj)
                }),
            }
        }
        CheckedOp::Softmax { len } => {
            let proj = draw(rng, len);
            Case {
                inputs: vec![draw(rng, len)],
                shapes: vec![vec![len]],
                forward: Box::new(move |tape, ts| {
                    let y = tape.softmax(&ts[0])?;
                    tape.dot_const(&y, &proj)
                }),
            }
        }
        CheckedOp::LogSumExp { len } => Case {
            inputs: vec![draw(rng, len)],
            shapes: vec![vec![len]],
            forward: Box::new(move |tape, ts| tape.logsumexp(&ts[0])),
        },
        CheckedOp::CrossEntropy { batch, classes } => {
            let labels: Vec<usize> = (0..batch)
                .map(|_| rng.next_below(classes as u64) as usize)
                .collect();
            Case {
                inputs: vec![draw(rng, batch * classes)],
                shapes: vec![vec![batch, classes]],
                forward: Box::new(move |tape, ts| tape.cross_entropy(&ts[0], &labels)),
            }
        }
    }
}

/// Compare reverse-mode gradients against central finite differences for one
/// op at the given shapes; returns the maximum relative error over all
/// differentiable inputs.
pub fn grad_check(op: &CheckedOp, seed: u64) -> GradCheckReport {
    let mut rng = Rng::stream(seed, op.name());
    let case = build_case(op, &mut rng);

    // Reverse-mode side.
    let tape = Tape::<f64>::new();
    let tensors: Vec<Tensor<f64>> = case
        .inputs
        .iter()
        .zip(&case.shapes)
        .map(|(buf, shape)| tape.input(&Tensor::from_vec(shape, buf.clone()).expect("case shape")))
        .collect();
    let loss = (case.forward)(&tape, &tensors).expect("grad_check forward");
    let node_grads = tape.backward_nodes(&loss).expect("grad_check backward");

    // Finite-difference side: forward only, non-recording tape.
    let shapes = case.shapes.clone();
    let forward = &case.forward;
    let fd = finite_difference(
        |bufs: &[Vec<f64>]| {
            let tape = Tape::<f64>::inference();
            let ts: Vec<Tensor<f64>> = bufs
                .iter()
                .zip(&shapes)
                .map(|(buf, shape)| Tensor::from_vec(shape, buf.clone()).expect("case shape"))
                .collect();
            forward(&tape, &ts).expect("fd forward").item()
        },
        &case.inputs,
    );

    let mut max_err = 0.0f64;
    for (tensor, fd_grad) in tensors.iter().zip(&fd) {
        let ad: Vec<f64> = match node_grads.for_tensor(tensor) {
            Some(g) => g.to_vec(),
            None => vec![0.0; tensor.len()],
        };
        for (a, b) in ad.iter().zip(fd_grad) {
            max_err = max_err.max(rel_err(*a, *b));
        }
    }
    GradCheckReport {
        op: op.name().to_string(),
        max_rel_err: max_err,
    }
}
