//! Reverse-mode autograd tape over 5-axis f64 tensors.
//!
//! Each forward call appends a node (shape, values, recorded op) to the
//! graph and evaluates eagerly; [`Graph::backward`] walks the tape in
//! reverse, accumulating gradients. Gradients add across reuse, so a leaf
//! bound into several ops receives the sum of its per-use gradients.
//!
//! Convolution inner loops are contiguous row updates so the compiler can
//! vectorize them; parallelism is over disjoint output (or gradient) chunks
//! with a fixed per-chunk summation order, which keeps results bit-stable
//! regardless of thread count.

use rayon::prelude::*;

use crate::error::{Axis, Error, Result};

/// Probabilities are clamped to `[BCE_EPS, 1 - BCE_EPS]` before the logs in
/// the cross-entropy loss, which is undefined at exactly 0 or 1.
pub const BCE_EPS: f64 = 1e-7;

/// Tensor extents as (batch, channel, depth, height, width).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Shape {
    pub n: usize,
    pub c: usize,
    pub d: usize,
    pub h: usize,
    pub w: usize,
}

impl Shape {
    pub fn new(n: usize, c: usize, d: usize, h: usize, w: usize) -> Self {
        Shape { n, c, d, h, w }
    }

    pub fn scalar() -> Self {
        Shape::new(1, 1, 1, 1, 1)
    }

    pub fn len(&self) -> usize {
        self.n * self.c * self.d * self.h * self.w
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn spatial_len(&self) -> usize {
        self.d * self.h * self.w
    }

    fn same_spatial(&self, other: &Shape) -> bool {
        self.d == other.d && self.h == other.h && self.w == other.w
    }
}

impl std::fmt::Display for Shape {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}x{}x{}x{}x{}", self.n, self.c, self.d, self.h, self.w)
    }
}

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Tensor(usize);

/// Hyperparameters of a (possibly dilated) 3D convolution. The paper's
/// networks use cubic kernels with stride 1; padding is per axis.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    /// Cubic kernel extent (1 or 3 in both networks).
    pub kernel: usize,
    pub padding: [usize; 3],
    pub dilation: usize,
}

impl ConvSpec {
    /// Shape-preserving spec: kernel 3 with padding equal to the dilation.
    pub fn k3(in_channels: usize, out_channels: usize, dilation: usize) -> Self {
        ConvSpec {
            in_channels,
            out_channels,
            kernel: 3,
            padding: [dilation; 3],
            dilation,
        }
    }

    /// Pointwise spec: kernel 1, no padding.
    pub fn k1(in_channels: usize, out_channels: usize) -> Self {
        ConvSpec {
            in_channels,
            out_channels,
            kernel: 1,
            padding: [0; 3],
            dilation: 1,
        }
    }

    pub fn weight_len(&self) -> usize {
        self.out_channels * self.in_channels * self.kernel.pow(3)
    }

    fn out_extent(&self, input: usize, axis_pad: usize) -> Result<usize> {
        let reach = self.dilation * (self.kernel - 1);
        let padded = input + 2 * axis_pad;
        if padded <= reach {
            return Err(Error::DimError {
                axis: Axis::Tensor(2),
                expected: reach + 1,
                actual: padded,
            });
        }
        Ok(padded - reach)
    }

    fn out_shape(&self, input: &Shape) -> Result<Shape> {
        if input.c != self.in_channels {
            return Err(Error::DimError {
                axis: Axis::Tensor(1),
                expected: self.in_channels,
                actual: input.c,
            });
        }
        Ok(Shape::new(
            input.n,
            self.out_channels,
            self.out_extent(input.d, self.padding[0])?,
            self.out_extent(input.h, self.padding[1])?,
            self.out_extent(input.w, self.padding[2])?,
        ))
    }
}

/// Batch-normalization statistics source.
#[derive(Debug, Clone)]
pub enum BnMode {
    /// Normalize with the batch's own statistics.
    Train,
    /// Normalize with frozen running statistics.
    Eval { mean: Vec<f64>, var: Vec<f64> },
}

/// Per-channel batch statistics returned from a training-mode forward so
/// the caller can update running statistics.
#[derive(Debug, Clone)]
pub struct BnBatchStats {
    pub mean: Vec<f64>,
    /// Biased variance (divided by the element count), as used for
    /// normalization.
    pub var_biased: Vec<f64>,
    pub count: usize,
}

#[derive(Debug, Clone)]
struct BnCtx {
    mean: Vec<f64>,
    inv_std: Vec<f64>,
    training: bool,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Conv3d {
        input: Tensor,
        weight: Tensor,
        bias: Tensor,
        spec: ConvSpec,
    },
    TransposedConv3d {
        input: Tensor,
        weight: Tensor,
        bias: Tensor,
    },
    MaxPool3d {
        input: Tensor,
        argmax: Vec<u32>,
    },
    BatchNorm3d {
        input: Tensor,
        gamma: Tensor,
        beta: Tensor,
        ctx: BnCtx,
    },
    Relu {
        input: Tensor,
    },
    Sigmoid {
        input: Tensor,
    },
    Concat {
        inputs: Vec<Tensor>,
    },
    Bce {
        pred: Tensor,
        target: Vec<f64>,
    },
    Add {
        a: Tensor,
        b: Tensor,
    },
    Sum {
        input: Tensor,
    },
}

struct Node {
    shape: Shape,
    value: Vec<f64>,
    grad: Vec<f64>,
    op: Op,
}

/// The autograd tape.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    backward_done: bool,
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    fn push(&mut self, shape: Shape, value: Vec<f64>, op: Op) -> Tensor {
        debug_assert_eq!(value.len(), shape.len());
        self.nodes.push(Node {
            shape,
            value,
            grad: Vec::new(),
            op,
        });
        Tensor(self.nodes.len() - 1)
    }

    fn node(&self, t: Tensor) -> Result<&Node> {
        self.nodes.get(t.0).ok_or_else(|| {
            Error::state("tensor was not recorded on this graph")
        })
    }

    pub fn shape(&self, t: Tensor) -> Result<Shape> {
        Ok(self.node(t)?.shape)
    }

    pub fn value(&self, t: Tensor) -> Result<&[f64]> {
        Ok(&self.node(t)?.value)
    }

    /// Gradient of the last [`Graph::backward`] loss w.r.t. `t`.
    pub fn grad(&self, t: Tensor) -> Result<&[f64]> {
        if !self.backward_done {
            return Err(Error::state("backward has not run on this graph"));
        }
        Ok(&self.node(t)?.grad)
    }

    /// Records an input or parameter value.
    pub fn leaf(&mut self, shape: Shape, value: Vec<f64>) -> Result<Tensor> {
        if value.len() != shape.len() {
            return Err(Error::DimError {
                axis: Axis::Tensor(0),
                expected: shape.len(),
                actual: value.len(),
            });
        }
        Ok(self.push(shape, value, Op::Leaf))
    }

    /// d-dilated 3D convolution plus bias: each output voxel v sums
    /// `input(v - d*u) * weight(u)` over centered taps u and input channels.
    /// Kernel 3 with padding d preserves spatial extent.
    pub fn conv3d(
        &mut self,
        input: Tensor,
        weight: Tensor,
        bias: Tensor,
        spec: &ConvSpec,
    ) -> Result<Tensor> {
        let in_shape = self.node(input)?.shape;
        let out_shape = spec.out_shape(&in_shape)?;
        let w_node = self.node(weight)?;
        if w_node.value.len() != spec.weight_len() {
            return Err(Error::DimError {
                axis: Axis::Tensor(0),
                expected: spec.weight_len(),
                actual: w_node.value.len(),
            });
        }
        let b_node = self.node(bias)?;
        if b_node.value.len() != spec.out_channels {
            return Err(Error::DimError {
                axis: Axis::Tensor(1),
                expected: spec.out_channels,
                actual: b_node.value.len(),
            });
        }

        let value = conv3d_forward_raw(
            &self.nodes[input.0].value,
            &in_shape,
            &self.nodes[weight.0].value,
            &self.nodes[bias.0].value,
            spec,
            &out_shape,
        );
        Ok(self.push(
            out_shape,
            value,
            Op::Conv3d {
                input,
                weight,
                bias,
                spec: *spec,
            },
        ))
    }

    /// Transposed convolution with kernel 2, stride 2: exactly doubles each
    /// spatial extent. Weight layout is (C_in, C_out, 2, 2, 2).
    pub fn transposed_conv3d(
        &mut self,
        input: Tensor,
        weight: Tensor,
        bias: Tensor,
        in_channels: usize,
        out_channels: usize,
    ) -> Result<Tensor> {
        let in_shape = self.node(input)?.shape;
        if in_shape.c != in_channels {
            return Err(Error::DimError {
                axis: Axis::Tensor(1),
                expected: in_channels,
                actual: in_shape.c,
            });
        }
        let expected_w = in_channels * out_channels * 8;
        if self.node(weight)?.value.len() != expected_w {
            return Err(Error::DimError {
                axis: Axis::Tensor(0),
                expected: expected_w,
                actual: self.node(weight)?.value.len(),
            });
        }
        if self.node(bias)?.value.len() != out_channels {
            return Err(Error::DimError {
                axis: Axis::Tensor(1),
                expected: out_channels,
                actual: self.node(bias)?.value.len(),
            });
        }
        let out_shape = Shape::new(
            in_shape.n,
            out_channels,
            in_shape.d * 2,
            in_shape.h * 2,
            in_shape.w * 2,
        );
        let value = tconv3d_forward_raw(
            &self.nodes[input.0].value,
            &in_shape,
            &self.nodes[weight.0].value,
            &self.nodes[bias.0].value,
            out_channels,
            &out_shape,
        );
        Ok(self.push(
            out_shape,
            value,
            Op::TransposedConv3d {
                input,
                weight,
                bias,
            },
        ))
    }

    /// Max pooling with a 2x2x2 window, stride 2. Spatial extents must be
    /// even; the failing axis is named otherwise.
    pub fn maxpool3d(&mut self, input: Tensor) -> Result<Tensor> {
        let s = self.node(input)?.shape;
        for (i, (axis, extent)) in [(Axis::X, s.w), (Axis::Y, s.h), (Axis::Z, s.d)]
            .iter()
            .enumerate()
        {
            let _ = i;
            if extent % 2 != 0 {
                return Err(Error::DimError {
                    axis: *axis,
                    expected: extent + 1,
                    actual: *extent,
                });
            }
        }
        let out_shape = Shape::new(s.n, s.c, s.d / 2, s.h / 2, s.w / 2);
        let x = &self.nodes[input.0].value;
        let mut value = vec![0.0; out_shape.len()];
        let mut argmax = vec![0u32; out_shape.len()];
        let (ih, iw) = (s.h, s.w);
        let in_spatial = s.spatial_len();
        let out_spatial = out_shape.spatial_len();
        for nc in 0..s.n * s.c {
            let base_in = nc * in_spatial;
            let base_out = nc * out_spatial;
            for od in 0..out_shape.d {
                for oh in 0..out_shape.h {
                    for ow in 0..out_shape.w {
                        let mut best = f64::NEG_INFINITY;
                        let mut best_idx = 0usize;
                        for kd in 0..2 {
                            for kh in 0..2 {
                                for kw in 0..2 {
                                    let idx = base_in
                                        + ((od * 2 + kd) * ih + (oh * 2 + kh)) * iw
                                        + (ow * 2 + kw);
                                    if x[idx] > best {
                                        best = x[idx];
                                        best_idx = idx;
                                    }
                                }
                            }
                        }
                        let out_idx = base_out + (od * out_shape.h + oh) * out_shape.w + ow;
                        value[out_idx] = best;
                        argmax[out_idx] = best_idx as u32;
                    }
                }
            }
        }
        Ok(self.push(out_shape, value, Op::MaxPool3d { input, argmax }))
    }

    /// Batch normalization over batch and space, per channel. In training
    /// mode also returns the batch statistics so running statistics can be
    /// tracked by the caller.
    pub fn batchnorm3d(
        &mut self,
        input: Tensor,
        gamma: Tensor,
        beta: Tensor,
        eps: f64,
        mode: BnMode,
    ) -> Result<(Tensor, Option<BnBatchStats>)> {
        let s = self.node(input)?.shape;
        let channels = s.c;
        for (t, name) in [(gamma, "gamma"), (beta, "beta")] {
            if self.node(t)?.value.len() != channels {
                return Err(Error::state(format!(
                    "batchnorm {name} has {} entries, expected {channels}",
                    self.node(t)?.value.len()
                )));
            }
        }
        let count = s.n * s.spatial_len();
        if count < 2 {
            return Err(Error::config(
                "batchnorm needs at least 2 elements per channel",
            ));
        }

        let x = &self.nodes[input.0].value;
        let spatial = s.spatial_len();
        let (mean, var_biased, training) = match &mode {
            BnMode::Train => {
                let mut mean = vec![0.0; channels];
                let mut var = vec![0.0; channels];
                for c in 0..channels {
                    let mut acc = 0.0;
                    for n in 0..s.n {
                        let base = (n * channels + c) * spatial;
                        for i in 0..spatial {
                            acc += x[base + i];
                        }
                    }
                    let mu = acc / count as f64;
                    let mut acc2 = 0.0;
                    for n in 0..s.n {
                        let base = (n * channels + c) * spatial;
                        for i in 0..spatial {
                            let d = x[base + i] - mu;
                            acc2 += d * d;
                        }
                    }
                    mean[c] = mu;
                    var[c] = acc2 / count as f64;
                }
                (mean, var, true)
            }
            BnMode::Eval { mean, var } => {
                if mean.len() != channels || var.len() != channels {
                    return Err(Error::state("running statistics length mismatch"));
                }
                (mean.clone(), var.clone(), false)
            }
        };

        let inv_std: Vec<f64> = var_biased.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let g = &self.nodes[gamma.0].value;
        let b = &self.nodes[beta.0].value;
        let mut value = vec![0.0; s.len()];
        for n in 0..s.n {
            for c in 0..channels {
                let base = (n * channels + c) * spatial;
                let (mu, is, gc, bc) = (mean[c], inv_std[c], g[c], b[c]);
                for i in 0..spatial {
                    value[base + i] = (x[base + i] - mu) * is * gc + bc;
                }
            }
        }

        let stats = training.then(|| BnBatchStats {
            mean: mean.clone(),
            var_biased: var_biased.clone(),
            count,
        });
        let out = self.push(
            s,
            value,
            Op::BatchNorm3d {
                input,
                gamma,
                beta,
                ctx: BnCtx {
                    mean,
                    inv_std,
                    training,
                },
            },
        );
        Ok((out, stats))
    }

    pub fn relu(&mut self, input: Tensor) -> Result<Tensor> {
        let s = self.node(input)?.shape;
        let value = self.nodes[input.0]
            .value
            .iter()
            .map(|&v| v.max(0.0))
            .collect();
        Ok(self.push(s, value, Op::Relu { input }))
    }

    pub fn sigmoid(&mut self, input: Tensor) -> Result<Tensor> {
        let s = self.node(input)?.shape;
        let value = self.nodes[input.0]
            .value
            .iter()
            .map(|&v| stable_sigmoid(v))
            .collect();
        Ok(self.push(s, value, Op::Sigmoid { input }))
    }

    /// Concatenation along the channel axis.
    pub fn concat(&mut self, inputs: &[Tensor]) -> Result<Tensor> {
        if inputs.is_empty() {
            return Err(Error::state("concat needs at least one input"));
        }
        let first = self.node(inputs[0])?.shape;
        let mut channels = 0;
        for &t in inputs {
            let s = self.node(t)?.shape;
            if s.n != first.n || !s.same_spatial(&first) {
                return Err(Error::DimError {
                    axis: Axis::Tensor(2),
                    expected: first.d,
                    actual: s.d,
                });
            }
            channels += s.c;
        }
        let out_shape = Shape::new(first.n, channels, first.d, first.h, first.w);
        let spatial = first.spatial_len();
        let mut value = Vec::with_capacity(out_shape.len());
        for n in 0..first.n {
            for &t in inputs {
                let s = self.nodes[t.0].shape;
                let from = n * s.c * spatial;
                value.extend_from_slice(&self.nodes[t.0].value[from..from + s.c * spatial]);
            }
        }
        Ok(self.push(
            out_shape,
            value,
            Op::Concat {
                inputs: inputs.to_vec(),
            },
        ))
    }

    /// Mean binary cross entropy over all voxels. `target` entries must be
    /// 0 or 1; predictions are clamped to `[BCE_EPS, 1 - BCE_EPS]`.
    pub fn bce_loss(&mut self, pred: Tensor, target: &[f64]) -> Result<Tensor> {
        let s = self.node(pred)?.shape;
        if target.len() != s.len() {
            return Err(Error::DimError {
                axis: Axis::Tensor(0),
                expected: s.len(),
                actual: target.len(),
            });
        }
        let p = &self.nodes[pred.0].value;
        let v = s.len() as f64;
        let mut acc = 0.0;
        for (&pi, &ti) in p.iter().zip(target) {
            let pc = pi.clamp(BCE_EPS, 1.0 - BCE_EPS);
            acc += ti * pc.ln() + (1.0 - ti) * (1.0 - pc).ln();
        }
        let value = vec![-acc / v];
        Ok(self.push(
            Shape::scalar(),
            value,
            Op::Bce {
                pred,
                target: target.to_vec(),
            },
        ))
    }

    /// Elementwise sum of two same-shape tensors.
    pub fn add(&mut self, a: Tensor, b: Tensor) -> Result<Tensor> {
        let sa = self.node(a)?.shape;
        let sb = self.node(b)?.shape;
        if sa != sb {
            return Err(Error::DimError {
                axis: Axis::Tensor(0),
                expected: sa.len(),
                actual: sb.len(),
            });
        }
        let value = self.nodes[a.0]
            .value
            .iter()
            .zip(&self.nodes[b.0].value)
            .map(|(x, y)| x + y)
            .collect();
        Ok(self.push(sa, value, Op::Add { a, b }))
    }

    /// Sum of all elements, as a scalar.
    pub fn sum(&mut self, input: Tensor) -> Result<Tensor> {
        self.node(input)?;
        let total: f64 = self.nodes[input.0].value.iter().sum();
        Ok(self.push(Shape::scalar(), vec![total], Op::Sum { input }))
    }

    /// Reverse pass from a scalar loss. Fills every node's gradient buffer;
    /// leaves hold d(loss)/d(leaf) afterwards.
    pub fn backward(&mut self, loss: Tensor) -> Result<()> {
        let loss_node = self.node(loss)?;
        if loss_node.shape.len() != 1 {
            return Err(Error::DimError {
                axis: Axis::Tensor(0),
                expected: 1,
                actual: loss_node.shape.len(),
            });
        }
        for node in &mut self.nodes {
            node.grad = vec![0.0; node.shape.len()];
        }
        self.nodes[loss.0].grad[0] = 1.0;

        for i in (0..=loss.0).rev() {
            // Split so the node's grad can be read while parents are written.
            let (before, rest) = self.nodes.split_at_mut(i);
            let node = &mut rest[0];
            if node.grad.iter().all(|&g| g == 0.0) {
                continue;
            }
            match &node.op {
                Op::Leaf => {}
                Op::Conv3d {
                    input,
                    weight,
                    bias,
                    spec,
                } => {
                    let in_shape = before[input.0].shape;
                    let (d_in, d_w, d_b) = conv3d_backward_raw(
                        &before[input.0].value,
                        &in_shape,
                        &before[weight.0].value,
                        spec,
                        &node.grad,
                        &node.shape,
                    );
                    axpy_into(&mut before[input.0].grad, &d_in);
                    axpy_into(&mut before[weight.0].grad, &d_w);
                    axpy_into(&mut before[bias.0].grad, &d_b);
                }
                Op::TransposedConv3d {
                    input,
                    weight,
                    bias,
                } => {
                    let in_shape = before[input.0].shape;
                    let out_channels = node.shape.c;
                    let (d_in, d_w, d_b) = tconv3d_backward_raw(
                        &before[input.0].value,
                        &in_shape,
                        &before[weight.0].value,
                        out_channels,
                        &node.grad,
                        &node.shape,
                    );
                    axpy_into(&mut before[input.0].grad, &d_in);
                    axpy_into(&mut before[weight.0].grad, &d_w);
                    axpy_into(&mut before[bias.0].grad, &d_b);
                }
                Op::MaxPool3d { input, argmax } => {
                    let grad_in = &mut before[input.0].grad;
                    for (out_idx, &in_idx) in argmax.iter().enumerate() {
                        grad_in[in_idx as usize] += node.grad[out_idx];
                    }
                }
                Op::BatchNorm3d {
                    input,
                    gamma,
                    beta,
                    ctx,
                } => {
                    let s = node.shape;
                    let spatial = s.spatial_len();
                    let channels = s.c;
                    let count = (s.n * spatial) as f64;
                    let x = &before[input.0].value;
                    let g_val = &before[gamma.0].value;
                    let dy = &node.grad;
                    // Per-channel reductions.
                    let mut sum_dy = vec![0.0; channels];
                    let mut sum_dy_xhat = vec![0.0; channels];
                    for n in 0..s.n {
                        for c in 0..channels {
                            let base = (n * channels + c) * spatial;
                            let (mu, is) = (ctx.mean[c], ctx.inv_std[c]);
                            let mut a = 0.0;
                            let mut b = 0.0;
                            for i in 0..spatial {
                                let xhat = (x[base + i] - mu) * is;
                                a += dy[base + i];
                                b += dy[base + i] * xhat;
                            }
                            sum_dy[c] += a;
                            sum_dy_xhat[c] += b;
                        }
                    }
                    for c in 0..channels {
                        before[beta.0].grad[c] += sum_dy[c];
                        before[gamma.0].grad[c] += sum_dy_xhat[c];
                    }
                    for n in 0..s.n {
                        for c in 0..channels {
                            let base = (n * channels + c) * spatial;
                            let (mu, is, gc) = (ctx.mean[c], ctx.inv_std[c], g_val[c]);
                            let grad_in = &mut before[input.0].grad;
                            if ctx.training {
                                let k1 = gc * is / count;
                                for i in 0..spatial {
                                    let xhat = (x[base + i] - mu) * is;
                                    grad_in[base + i] += k1
                                        * (count * dy[base + i]
                                            - sum_dy[c]
                                            - xhat * sum_dy_xhat[c]);
                                }
                            } else {
                                for i in 0..spatial {
                                    grad_in[base + i] += dy[base + i] * gc * is;
                                }
                            }
                        }
                    }
                }
                Op::Relu { input } => {
                    let x = &before[input.0].value;
                    let grad_in = &mut before[input.0].grad;
                    for i in 0..x.len() {
                        if x[i] > 0.0 {
                            grad_in[i] += node.grad[i];
                        }
                    }
                }
                Op::Sigmoid { input } => {
                    let y = &node.value;
                    let grad_in = &mut before[input.0].grad;
                    for i in 0..y.len() {
                        grad_in[i] += node.grad[i] * y[i] * (1.0 - y[i]);
                    }
                }
                Op::Concat { inputs } => {
                    let spatial = node.shape.spatial_len();
                    let mut out_offset = 0;
                    for n in 0..node.shape.n {
                        for &t in inputs.iter() {
                            let s = before[t.0].shape;
                            let block = s.c * spatial;
                            let src_base = n * block;
                            let grad_in = &mut before[t.0].grad;
                            for i in 0..block {
                                grad_in[src_base + i] += node.grad[out_offset + i];
                            }
                            out_offset += block;
                        }
                    }
                }
                Op::Bce { pred, target } => {
                    let scale = node.grad[0] / target.len() as f64;
                    let p = &before[pred.0].value;
                    let grad_in = &mut before[pred.0].grad;
                    for i in 0..p.len() {
                        // Zero gradient in the clamped region, matching the
                        // piecewise-constant loss there.
                        if p[i] > BCE_EPS && p[i] < 1.0 - BCE_EPS {
                            grad_in[i] -=
                                scale * (target[i] / p[i] - (1.0 - target[i]) / (1.0 - p[i]));
                        }
                    }
                }
                Op::Add { a, b } => {
                    let ga = node.grad.clone();
                    axpy_into(&mut before[a.0].grad, &ga);
                    axpy_into(&mut before[b.0].grad, &ga);
                }
                Op::Sum { input } => {
                    let g = node.grad[0];
                    for gi in before[input.0].grad.iter_mut() {
                        *gi += g;
                    }
                }
            }
        }
        self.backward_done = true;
        Ok(())
    }
}

fn axpy_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

/// Dot product with eight independent accumulator chains; the fixed
/// summation order keeps results identical from run to run while still
/// letting the compiler vectorize.
#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len().min(b.len());
    let mut acc = [0.0f64; 8];
    let whole = n / 8 * 8;
    let mut i = 0;
    while i < whole {
        for lane in 0..8 {
            acc[lane] += a[i + lane] * b[i + lane];
        }
        i += 8;
    }
    let mut tail = 0.0;
    for j in whole..n {
        tail += a[j] * b[j];
    }
    ((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7])) + tail
}

fn stable_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Tap offset into the input for kernel index `m`: the kernel is centered,
/// summing `input(v - d*u) * h(u)` over u, so index m maps to offset
/// `(k - 1 - m) * dilation - padding`.
#[inline]
fn tap_offset(k: usize, m: usize, dilation: usize, padding: usize) -> i64 {
    ((k - 1 - m) * dilation) as i64 - padding as i64
}

/// Valid output range `[lo, hi)` along one axis for a tap with offset
/// `off`: input index `o + off` must fall in `[0, in_extent)`.
#[inline]
fn tap_range(out_extent: usize, in_extent: usize, off: i64) -> (usize, usize) {
    let lo = (-off).max(0) as usize;
    let hi = (in_extent as i64 - off).clamp(0, out_extent as i64) as usize;
    (lo, hi.max(lo))
}

fn conv3d_forward_raw(
    input: &[f64],
    in_shape: &Shape,
    weight: &[f64],
    bias: &[f64],
    spec: &ConvSpec,
    out_shape: &Shape,
) -> Vec<f64> {
    let k = spec.kernel;
    let (ci_n, co_n) = (spec.in_channels, spec.out_channels);
    let in_spatial = in_shape.spatial_len();
    let out_spatial = out_shape.spatial_len();
    let (id_e, ih_e, iw_e) = (in_shape.d, in_shape.h, in_shape.w);
    let (od_e, oh_e, ow_e) = (out_shape.d, out_shape.h, out_shape.w);

    let mut out = vec![0.0; out_shape.len()];
    out.par_chunks_mut(out_spatial).enumerate().for_each(|(nc, out_ch)| {
        let n = nc / co_n;
        let co = nc % co_n;
        out_ch.fill(bias[co]);
        for ci in 0..ci_n {
            let in_ch = &input[(n * ci_n + ci) * in_spatial..(n * ci_n + ci + 1) * in_spatial];
            for kd in 0..k {
                let off_d = tap_offset(k, kd, spec.dilation, spec.padding[0]);
                let (d_lo, d_hi) = tap_range(od_e, id_e, off_d);
                for kh in 0..k {
                    let off_h = tap_offset(k, kh, spec.dilation, spec.padding[1]);
                    let (h_lo, h_hi) = tap_range(oh_e, ih_e, off_h);
                    for kw in 0..k {
                        let off_w = tap_offset(k, kw, spec.dilation, spec.padding[2]);
                        let (w_lo, w_hi) = tap_range(ow_e, iw_e, off_w);
                        if w_lo >= w_hi {
                            continue;
                        }
                        let wv = weight[((co * ci_n + ci) * k + kd) * k * k + kh * k + kw];
                        let src_lo = (w_lo as i64 + off_w) as usize;
                        let len = w_hi - w_lo;
                        for od in d_lo..d_hi {
                            let id = (od as i64 + off_d) as usize;
                            for oh in h_lo..h_hi {
                                let ih = (oh as i64 + off_h) as usize;
                                let src =
                                    &in_ch[(id * ih_e + ih) * iw_e + src_lo..][..len];
                                let dst = &mut out_ch[(od * oh_e + oh) * ow_e + w_lo..][..len];
                                for (d, s) in dst.iter_mut().zip(src) {
                                    *d += wv * s;
                                }
                            }
                        }
                    }
                }
            }
        }
    });
    out
}

fn conv3d_backward_raw(
    input: &[f64],
    in_shape: &Shape,
    weight: &[f64],
    spec: &ConvSpec,
    d_out: &[f64],
    out_shape: &Shape,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let k = spec.kernel;
    let (ci_n, co_n) = (spec.in_channels, spec.out_channels);
    let in_spatial = in_shape.spatial_len();
    let out_spatial = out_shape.spatial_len();
    let (id_e, ih_e, iw_e) = (in_shape.d, in_shape.h, in_shape.w);
    let (od_e, oh_e, ow_e) = (out_shape.d, out_shape.h, out_shape.w);
    let n_batch = in_shape.n;

    // d_input, parallel over (n, ci) chunks.
    let mut d_input = vec![0.0; in_shape.len()];
    d_input
        .par_chunks_mut(in_spatial)
        .enumerate()
        .for_each(|(nci, d_in_ch)| {
            let n = nci / ci_n;
            let ci = nci % ci_n;
            for co in 0..co_n {
                let d_out_ch =
                    &d_out[(n * co_n + co) * out_spatial..(n * co_n + co + 1) * out_spatial];
                for kd in 0..k {
                    let off_d = tap_offset(k, kd, spec.dilation, spec.padding[0]);
                    let (d_lo, d_hi) = tap_range(od_e, id_e, off_d);
                    for kh in 0..k {
                        let off_h = tap_offset(k, kh, spec.dilation, spec.padding[1]);
                        let (h_lo, h_hi) = tap_range(oh_e, ih_e, off_h);
                        for kw in 0..k {
                            let off_w = tap_offset(k, kw, spec.dilation, spec.padding[2]);
                            let (w_lo, w_hi) = tap_range(ow_e, iw_e, off_w);
                            if w_lo >= w_hi {
                                continue;
                            }
                            let wv = weight[((co * ci_n + ci) * k + kd) * k * k + kh * k + kw];
                            let src_lo = (w_lo as i64 + off_w) as usize;
                            let len = w_hi - w_lo;
                            for od in d_lo..d_hi {
                                let id = (od as i64 + off_d) as usize;
                                for oh in h_lo..h_hi {
                                    let ih = (oh as i64 + off_h) as usize;
                                    let src = &d_out_ch[(od * oh_e + oh) * ow_e + w_lo..][..len];
                                    let dst = &mut d_in_ch
                                        [(id * ih_e + ih) * iw_e + src_lo..][..len];
                                    for (d, s) in dst.iter_mut().zip(src) {
                                        *d += wv * s;
                                    }
                                }
                            }
                        }
                    }
                }
            }
        });

    // d_weight, parallel over co chunks.
    let w_per_co = ci_n * k * k * k;
    let mut d_weight = vec![0.0; weight.len()];
    d_weight
        .par_chunks_mut(w_per_co)
        .enumerate()
        .for_each(|(co, d_w_co)| {
            for ci in 0..ci_n {
                for kd in 0..k {
                    let off_d = tap_offset(k, kd, spec.dilation, spec.padding[0]);
                    let (d_lo, d_hi) = tap_range(od_e, id_e, off_d);
                    for kh in 0..k {
                        let off_h = tap_offset(k, kh, spec.dilation, spec.padding[1]);
                        let (h_lo, h_hi) = tap_range(oh_e, ih_e, off_h);
                        for kw in 0..k {
                            let off_w = tap_offset(k, kw, spec.dilation, spec.padding[2]);
                            let (w_lo, w_hi) = tap_range(ow_e, iw_e, off_w);
                            if w_lo >= w_hi {
                                continue;
                            }
                            let src_lo = (w_lo as i64 + off_w) as usize;
                            let len = w_hi - w_lo;
                            let mut acc = 0.0;
                            for n in 0..n_batch {
                                let in_ch = &input
                                    [(n * ci_n + ci) * in_spatial..(n * ci_n + ci + 1) * in_spatial];
                                let d_out_ch = &d_out
                                    [(n * co_n + co) * out_spatial..(n * co_n + co + 1) * out_spatial];
                                for od in d_lo..d_hi {
                                    let id = (od as i64 + off_d) as usize;
                                    for oh in h_lo..h_hi {
                                        let ih = (oh as i64 + off_h) as usize;
                                        let a = &in_ch[(id * ih_e + ih) * iw_e + src_lo..][..len];
                                        let b =
                                            &d_out_ch[(od * oh_e + oh) * ow_e + w_lo..][..len];
                                        acc += dot(a, b);
                                    }
                                }
                            }
                            d_w_co[(ci * k + kd) * k * k + kh * k + kw] = acc;
                        }
                    }
                }
            }
        });

    // d_bias.
    let mut d_bias = vec![0.0; co_n];
    for n in 0..n_batch {
        for co in 0..co_n {
            let d_out_ch = &d_out[(n * co_n + co) * out_spatial..(n * co_n + co + 1) * out_spatial];
            d_bias[co] += d_out_ch.iter().sum::<f64>();
        }
    }

    (d_input, d_weight, d_bias)
}

fn tconv3d_forward_raw(
    input: &[f64],
    in_shape: &Shape,
    weight: &[f64],
    bias: &[f64],
    out_channels: usize,
    out_shape: &Shape,
) -> Vec<f64> {
    let ci_n = in_shape.c;
    let in_spatial = in_shape.spatial_len();
    let out_spatial = out_shape.spatial_len();
    let (ih_e, iw_e) = (in_shape.h, in_shape.w);

    let mut out = vec![0.0; out_shape.len()];
    out.par_chunks_mut(out_spatial).enumerate().for_each(|(nc, out_ch)| {
        let n = nc / out_channels;
        let co = nc % out_channels;
        let mut idx = 0;
        for od in 0..out_shape.d {
            let (id, kd) = (od / 2, od % 2);
            for oh in 0..out_shape.h {
                let (ih, kh) = (oh / 2, oh % 2);
                for ow in 0..out_shape.w {
                    let (iw, kw) = (ow / 2, ow % 2);
                    let mut acc = bias[co];
                    let in_idx = (id * ih_e + ih) * iw_e + iw;
                    for ci in 0..ci_n {
                        let wv =
                            weight[((ci * out_channels + co) * 2 + kd) * 4 + kh * 2 + kw];
                        acc += wv * input[(n * ci_n + ci) * in_spatial + in_idx];
                    }
                    out_ch[idx] = acc;
                    idx += 1;
                }
            }
        }
    });
    out
}

fn tconv3d_backward_raw(
    input: &[f64],
    in_shape: &Shape,
    weight: &[f64],
    out_channels: usize,
    d_out: &[f64],
    out_shape: &Shape,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let ci_n = in_shape.c;
    let in_spatial = in_shape.spatial_len();
    let out_spatial = out_shape.spatial_len();
    let (ih_e, iw_e) = (in_shape.h, in_shape.w);
    let (oh_e, ow_e) = (out_shape.h, out_shape.w);
    let n_batch = in_shape.n;

    let mut d_input = vec![0.0; input.len()];
    d_input
        .par_chunks_mut(in_spatial)
        .enumerate()
        .for_each(|(nci, d_in_ch)| {
            let n = nci / ci_n;
            let ci = nci % ci_n;
            for (idx, d_in_v) in d_in_ch.iter_mut().enumerate() {
                let id = idx / (ih_e * iw_e);
                let ih = (idx / iw_e) % ih_e;
                let iw = idx % iw_e;
                let mut acc = 0.0;
                for co in 0..out_channels {
                    let d_out_ch = &d_out
                        [(n * out_channels + co) * out_spatial..(n * out_channels + co + 1) * out_spatial];
                    for kd in 0..2 {
                        for kh in 0..2 {
                            for kw in 0..2 {
                                let o = ((id * 2 + kd) * oh_e + (ih * 2 + kh)) * ow_e
                                    + (iw * 2 + kw);
                                let wv = weight
                                    [((ci * out_channels + co) * 2 + kd) * 4 + kh * 2 + kw];
                                acc += wv * d_out_ch[o];
                            }
                        }
                    }
                }
                *d_in_v += acc;
            }
        });

    let mut d_weight = vec![0.0; weight.len()];
    let w_per_ci = out_channels * 8;
    d_weight
        .par_chunks_mut(w_per_ci)
        .enumerate()
        .for_each(|(ci, d_w_ci)| {
            for co in 0..out_channels {
                for kd in 0..2 {
                    for kh in 0..2 {
                        for kw in 0..2 {
                            let mut acc = 0.0;
                            for n in 0..n_batch {
                                let in_ch = &input
                                    [(n * ci_n + ci) * in_spatial..(n * ci_n + ci + 1) * in_spatial];
                                let d_out_ch = &d_out[(n * out_channels + co) * out_spatial
                                    ..(n * out_channels + co + 1) * out_spatial];
                                for id in 0..in_shape.d {
                                    for ih in 0..ih_e {
                                        for iw in 0..iw_e {
                                            let o = ((id * 2 + kd) * oh_e + (ih * 2 + kh))
                                                * ow_e
                                                + (iw * 2 + kw);
                                            acc += in_ch[(id * ih_e + ih) * iw_e + iw]
                                                * d_out_ch[o];
                                        }
                                    }
                                }
                            }
                            d_w_ci[(co * 2 + kd) * 4 + kh * 2 + kw] = acc;
                        }
                    }
                }
            }
        });

    let mut d_bias = vec![0.0; out_channels];
    for n in 0..n_batch {
        for co in 0..out_channels {
            let d_out_ch = &d_out
                [(n * out_channels + co) * out_spatial..(n * out_channels + co + 1) * out_spatial];
            d_bias[co] += d_out_ch.iter().sum::<f64>();
        }
    }

    (d_input, d_weight, d_bias)
}
