//! Reverse-mode differentiation over a per-step tape.
//!
//! A `Tape` owns every intermediate tensor of one forward pass in topological
//! order. `backward` walks the records in reverse, handing each node's
//! gradient to its inputs and dropping it immediately afterwards so peak
//! memory stays close to the forward footprint. One tape per training step;
//! tapes are never shared between threads.

use std::ops::Range;

use crate::error::{Error, Result};
use crate::ops::{self, ConvSpec};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct TensorId(pub usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Add(TensorId, TensorId),
    Sub(TensorId, TensorId),
    Mul(TensorId, TensorId),
    Div(TensorId, TensorId),
    AddScalar(TensorId),
    MulScalar(TensorId, f64),
    Matmul(TensorId, TensorId),
    Conv2d {
        x: TensorId,
        w: TensorId,
        bias: Option<TensorId>,
        spec: ConvSpec,
    },
    ConvTranspose2d {
        x: TensorId,
        w: TensorId,
        bias: Option<TensorId>,
    },
    MaxPool2d {
        x: TensorId,
        argmax: Vec<u32>,
    },
    Relu(TensorId),
    Gelu(TensorId),
    Sigmoid(TensorId),
    Exp(TensorId),
    Ln(TensorId),
    Clamp {
        x: TensorId,
        lo: f64,
        hi: f64,
    },
    Softmax {
        x: TensorId,
        axis: usize,
    },
    LayerNorm {
        x: TensorId,
        gain: TensorId,
        bias: TensorId,
        eps: f64,
    },
    BatchNorm {
        x: TensorId,
        gamma: TensorId,
        beta: TensorId,
        mean: Vec<f64>,
        var: Vec<f64>,
        training: bool,
        eps: f64,
    },
    Sum {
        x: TensorId,
        axes: Vec<usize>,
    },
    Permute {
        x: TensorId,
        perm: Vec<usize>,
    },
    Reshape(TensorId),
    Concat {
        xs: Vec<TensorId>,
        axis: usize,
    },
    Slice {
        x: TensorId,
        ranges: Vec<Range<usize>>,
    },
    Pad {
        x: TensorId,
        before: Vec<usize>,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradient map produced by `Tape::backward`. After backward only leaves
/// still hold gradients; intermediate node gradients are freed on the fly.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, id: TensorId) -> Option<&Tensor> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, id: TensorId) -> Option<Tensor> {
        self.grads.get_mut(id.0).and_then(|g| g.take())
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: TensorId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: TensorId) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    pub fn requires_grad(&self, id: TensorId) -> bool {
        self.nodes[id.0].requires_grad
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> TensorId {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor) -> TensorId {
        self.push(value, Op::Leaf, false)
    }

    /// Copy of `x` that blocks gradient flow.
    pub fn detach(&mut self, x: TensorId) -> TensorId {
        let v = self.value(x).clone();
        self.constant(v)
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> TensorId {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        TensorId(self.nodes.len() - 1)
    }

    fn push_from(&mut self, value: Tensor, op: Op, inputs: &[TensorId]) -> TensorId {
        let rg = inputs.iter().any(|&i| self.nodes[i.0].requires_grad);
        self.push(value, op, rg)
    }

    // ---- elementwise / scalar -----------------------------------------

    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let out_shape = ops::broadcast_shapes("add", self.shape(a), self.shape(b))?;
        let v = ops::ew_binary(self.value(a), self.value(b), &out_shape, |x, y| x + y);
        Ok(self.push_from(v, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let out_shape = ops::broadcast_shapes("sub", self.shape(a), self.shape(b))?;
        let v = ops::ew_binary(self.value(a), self.value(b), &out_shape, |x, y| x - y);
        Ok(self.push_from(v, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let out_shape = ops::broadcast_shapes("mul", self.shape(a), self.shape(b))?;
        let v = ops::ew_binary(self.value(a), self.value(b), &out_shape, |x, y| x * y);
        Ok(self.push_from(v, Op::Mul(a, b), &[a, b]))
    }

    pub fn div(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let out_shape = ops::broadcast_shapes("div", self.shape(a), self.shape(b))?;
        let v = ops::ew_binary(self.value(a), self.value(b), &out_shape, |x, y| x / y);
        Ok(self.push_from(v, Op::Div(a, b), &[a, b]))
    }

    pub fn add_scalar(&mut self, a: TensorId, k: f64) -> TensorId {
        let v = self.value(a).map(|x| x + k);
        self.push_from(v, Op::AddScalar(a), &[a])
    }

    pub fn mul_scalar(&mut self, a: TensorId, k: f64) -> TensorId {
        let v = self.value(a).map(|x| x * k);
        self.push_from(v, Op::MulScalar(a, k), &[a])
    }

    // ---- activations ----------------------------------------------------

    pub fn relu(&mut self, a: TensorId) -> TensorId {
        let v = self.value(a).map(|x| x.max(0.0));
        self.push_from(v, Op::Relu(a), &[a])
    }

    pub fn gelu(&mut self, a: TensorId) -> TensorId {
        let v = self.value(a).map(ops::gelu);
        self.push_from(v, Op::Gelu(a), &[a])
    }

    pub fn sigmoid(&mut self, a: TensorId) -> TensorId {
        let v = self.value(a).map(ops::sigmoid);
        self.push_from(v, Op::Sigmoid(a), &[a])
    }

    pub fn exp(&mut self, a: TensorId) -> TensorId {
        let v = self.value(a).map(f64::exp);
        self.push_from(v, Op::Exp(a), &[a])
    }

    /// Natural log; the input must be strictly positive.
    pub fn ln(&mut self, a: TensorId) -> Result<TensorId> {
        if self.value(a).data().iter().any(|&v| v <= 0.0) {
            return Err(Error::Numerical("ln of non-positive value".into()));
        }
        let v = self.value(a).map(f64::ln);
        Ok(self.push_from(v, Op::Ln(a), &[a]))
    }

    pub fn clamp(&mut self, a: TensorId, lo: f64, hi: f64) -> TensorId {
        let v = self.value(a).map(|x| x.clamp(lo, hi));
        self.push_from(v, Op::Clamp { x: a, lo, hi }, &[a])
    }

    // ---- matmul / conv ---------------------------------------------------

    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let v = ops::matmul(self.value(a), self.value(b))?;
        Ok(self.push_from(v, Op::Matmul(a, b), &[a, b]))
    }

    pub fn conv2d(
        &mut self,
        x: TensorId,
        w: TensorId,
        bias: Option<TensorId>,
        spec: ConvSpec,
    ) -> Result<TensorId> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if xs.len() != 4 || ws.len() != 4 {
            return Err(Error::shape(
                "conv2d",
                format!("expected NCHW x and OIHW w, got {:?} and {:?}", xs, ws),
            ));
        }
        let (ci, co) = (xs[1], ws[0]);
        if spec.groups == 0 || ci % spec.groups != 0 || co % spec.groups != 0 {
            return Err(Error::shape(
                "conv2d",
                format!("groups {} must divide in/out channels {}/{}", spec.groups, ci, co),
            ));
        }
        if ws[1] != ci / spec.groups {
            return Err(Error::shape(
                "conv2d",
                format!(
                    "weight expects {} input channels per group, input has {} ({} groups)",
                    ws[1],
                    ci,
                    spec.groups
                ),
            ));
        }
        if let Some(b) = bias {
            let bs = self.shape(b);
            if bs != [co] {
                return Err(Error::shape(
                    "conv2d",
                    format!("bias shape {:?} does not match {} output channels", bs, co),
                ));
            }
        }
        let v = ops::conv2d_fwd(self.value(x), self.value(w), bias.map(|b| self.value(b)), &spec)?;
        let mut inputs = vec![x, w];
        if let Some(b) = bias {
            inputs.push(b);
        }
        Ok(self.push_from(v, Op::Conv2d { x, w, bias, spec }, &inputs))
    }

    /// 2x2 stride-2 transposed convolution; doubles H and W.
    pub fn conv_transpose2d(
        &mut self,
        x: TensorId,
        w: TensorId,
        bias: Option<TensorId>,
    ) -> Result<TensorId> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if xs.len() != 4 || ws.len() != 4 || ws[2] != 2 || ws[3] != 2 {
            return Err(Error::shape(
                "conv_transpose2d",
                format!("expected NCHW x and [Ci,Co,2,2] w, got {:?} and {:?}", xs, ws),
            ));
        }
        if ws[0] != xs[1] {
            return Err(Error::shape(
                "conv_transpose2d",
                format!("weight in-channels {} != input channels {}", ws[0], xs[1]),
            ));
        }
        if let Some(b) = bias {
            if self.shape(b) != [ws[1]] {
                return Err(Error::shape("conv_transpose2d", "bias/out-channel mismatch"));
            }
        }
        let v = ops::conv_transpose2d_fwd(self.value(x), self.value(w), bias.map(|b| self.value(b)))?;
        let mut inputs = vec![x, w];
        if let Some(b) = bias {
            inputs.push(b);
        }
        Ok(self.push_from(v, Op::ConvTranspose2d { x, w, bias }, &inputs))
    }

    pub fn maxpool2d(&mut self, x: TensorId) -> Result<TensorId> {
        let (v, argmax) = ops::maxpool2d_fwd(self.value(x))?;
        Ok(self.push_from(v, Op::MaxPool2d { x, argmax }, &[x]))
    }

    // ---- normalization / softmax ----------------------------------------

    pub fn softmax(&mut self, x: TensorId, axis: usize) -> Result<TensorId> {
        self.softmax_inner(x, axis, None)
    }

    /// Softmax restricted to positions where `mask` > 0.5; the mask shape
    /// must be a trailing suffix of x's shape. Masked entries are exactly 0.
    pub fn softmax_masked(&mut self, x: TensorId, axis: usize, mask: &Tensor) -> Result<TensorId> {
        self.softmax_inner(x, axis, Some(mask))
    }

    fn softmax_inner(&mut self, x: TensorId, axis: usize, mask: Option<&Tensor>) -> Result<TensorId> {
        let xs = self.shape(x);
        if axis >= xs.len() {
            return Err(Error::shape(
                "softmax",
                format!("axis {} out of range for {:?}", axis, xs),
            ));
        }
        if let Some(m) = mask {
            if !xs.ends_with(m.shape()) {
                return Err(Error::shape(
                    "softmax",
                    format!("mask {:?} must be a suffix of x {:?}", m.shape(), xs),
                ));
            }
        }
        let v = ops::softmax_fwd(self.value(x), axis, mask)?;
        Ok(self.push_from(v, Op::Softmax { x, axis }, &[x]))
    }

    pub fn layernorm(&mut self, x: TensorId, gain: TensorId, bias: TensorId, eps: f64) -> Result<TensorId> {
        let d = *self.shape(x).last().unwrap();
        if self.shape(gain) != [d] || self.shape(bias) != [d] {
            return Err(Error::shape(
                "layernorm",
                format!(
                    "gain {:?} / bias {:?} must both be [{}]",
                    self.shape(gain),
                    self.shape(bias),
                    d
                ),
            ));
        }
        let v = ops::layernorm_fwd(self.value(x), self.value(gain), self.value(bias), eps);
        Ok(self.push_from(v, Op::LayerNorm { x, gain, bias, eps }, &[x, gain, bias]))
    }

    /// Training-mode batch norm. Returns the output id plus the batch mean
    /// and (biased) variance so the caller can update running statistics.
    pub fn batchnorm_train(
        &mut self,
        x: TensorId,
        gamma: TensorId,
        beta: TensorId,
        eps: f64,
    ) -> Result<(TensorId, Vec<f64>, Vec<f64>)> {
        let xs = self.shape(x).to_vec();
        self.check_bn_shapes(&xs, gamma, beta)?;
        if xs[0] < 2 {
            return Err(Error::Config(format!(
                "batchnorm2d training needs a batch of at least 2, got {}",
                xs[0]
            )));
        }
        let (mean, var) = ops::batch_stats(self.value(x));
        let v = ops::batchnorm_apply(self.value(x), self.value(gamma), self.value(beta), &mean, &var, eps);
        let id = self.push_from(
            v,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                mean: mean.clone(),
                var: var.clone(),
                training: true,
                eps,
            },
            &[x, gamma, beta],
        );
        Ok((id, mean, var))
    }

    /// Eval-mode batch norm on frozen running statistics.
    pub fn batchnorm_eval(
        &mut self,
        x: TensorId,
        gamma: TensorId,
        beta: TensorId,
        running_mean: &Tensor,
        running_var: &Tensor,
        eps: f64,
    ) -> Result<TensorId> {
        let xs = self.shape(x).to_vec();
        self.check_bn_shapes(&xs, gamma, beta)?;
        let mean = running_mean.data().to_vec();
        let var = running_var.data().to_vec();
        if mean.len() != xs[1] || var.len() != xs[1] {
            return Err(Error::shape(
                "batchnorm2d",
                format!("running stats of {} channels, input has {}", mean.len(), xs[1]),
            ));
        }
        let v = ops::batchnorm_apply(self.value(x), self.value(gamma), self.value(beta), &mean, &var, eps);
        Ok(self.push_from(
            v,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                mean,
                var,
                training: false,
                eps,
            },
            &[x, gamma, beta],
        ))
    }

    fn check_bn_shapes(&self, xs: &[usize], gamma: TensorId, beta: TensorId) -> Result<()> {
        if xs.len() != 4 {
            return Err(Error::shape(
                "batchnorm2d",
                format!("expected NCHW input, got {:?}", xs),
            ));
        }
        let c = xs[1];
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(Error::shape(
                "batchnorm2d",
                format!(
                    "gamma {:?} / beta {:?} must both be [{}]",
                    self.shape(gamma),
                    self.shape(beta),
                    c
                ),
            ));
        }
        Ok(())
    }

    // ---- reductions / layout ---------------------------------------------

    pub fn sum(&mut self, x: TensorId, axes: &[usize], keepdim: bool) -> Result<TensorId> {
        let rank = self.shape(x).len();
        let mut axes = axes.to_vec();
        axes.sort_unstable();
        axes.dedup();
        if axes.iter().any(|&a| a >= rank) {
            return Err(Error::shape(
                "sum",
                format!("axes {:?} out of range for rank {}", axes, rank),
            ));
        }
        let v = ops::sum_axes(self.value(x), &axes, keepdim);
        Ok(self.push_from(v, Op::Sum { x, axes }, &[x]))
    }

    pub fn sum_all(&mut self, x: TensorId) -> Result<TensorId> {
        let axes: Vec<usize> = (0..self.shape(x).len()).collect();
        self.sum(x, &axes, false)
    }

    pub fn mean(&mut self, x: TensorId, axes: &[usize], keepdim: bool) -> Result<TensorId> {
        let n: usize = axes.iter().map(|&a| self.shape(x)[a]).product();
        let s = self.sum(x, axes, keepdim)?;
        Ok(self.mul_scalar(s, 1.0 / n as f64))
    }

    pub fn mean_all(&mut self, x: TensorId) -> Result<TensorId> {
        let n = self.value(x).numel();
        let s = self.sum_all(x)?;
        Ok(self.mul_scalar(s, 1.0 / n as f64))
    }

    pub fn permute(&mut self, x: TensorId, perm: &[usize]) -> Result<TensorId> {
        let rank = self.shape(x).len();
        let mut seen = vec![false; rank];
        if perm.len() != rank || perm.iter().any(|&p| p >= rank || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::shape(
                "permute",
                format!("{:?} is not a permutation of 0..{}", perm, rank),
            ));
        }
        let v = ops::permute(self.value(x), perm);
        Ok(self.push_from(v, Op::Permute { x, perm: perm.to_vec() }, &[x]))
    }

    pub fn reshape(&mut self, x: TensorId, shape: &[usize]) -> Result<TensorId> {
        let v = self.value(x).reshaped(shape)?;
        Ok(self.push_from(v, Op::Reshape(x), &[x]))
    }

    pub fn concat(&mut self, xs: &[TensorId], axis: usize) -> Result<TensorId> {
        if xs.is_empty() {
            return Err(Error::shape("concat", "no inputs"));
        }
        if axis >= self.shape(xs[0]).len() {
            return Err(Error::shape(
                "concat",
                format!("axis {} out of range for {:?}", axis, self.shape(xs[0])),
            ));
        }
        let tensors: Vec<&Tensor> = xs.iter().map(|&i| self.value(i)).collect();
        let v = ops::concat(&tensors, axis)?;
        Ok(self.push_from(v, Op::Concat { xs: xs.to_vec(), axis }, xs))
    }

    pub fn slice(&mut self, x: TensorId, ranges: &[Range<usize>]) -> Result<TensorId> {
        let v = ops::slice(self.value(x), ranges)?;
        Ok(self.push_from(
            v,
            Op::Slice {
                x,
                ranges: ranges.to_vec(),
            },
            &[x],
        ))
    }

    pub fn pad(&mut self, x: TensorId, before: &[usize], after: &[usize]) -> Result<TensorId> {
        let rank = self.shape(x).len();
        if before.len() != rank || after.len() != rank {
            return Err(Error::shape(
                "pad",
                format!("padding vectors must have length {}", rank),
            ));
        }
        let v = ops::pad(self.value(x), before, after);
        Ok(self.push_from(
            v,
            Op::Pad {
                x,
                before: before.to_vec(),
            },
            &[x],
        ))
    }

    // ---- backward ---------------------------------------------------------

    /// Reverse pass from a scalar loss. Returns gradients for every
    /// `requires_grad` leaf (zero-filled if the leaf does not reach the loss).
    pub fn backward(&mut self, loss: TensorId) -> Result<Gradients> {
        if self.value(loss).numel() != 1 {
            return Err(Error::shape(
                "backward",
                format!("loss must be scalar, got {:?}", self.shape(loss)),
            ));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(Tensor::ones(self.shape(loss)));
        }

        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            if matches!(self.nodes[i].op, Op::Leaf) {
                continue; // keep leaf gradients for the caller
            }
            let g = match grads[i].take() {
                Some(g) => g,
                None => continue,
            };
            self.propagate(i, &g, &mut grads);
        }

        // Contract: every requires_grad leaf ends up with a gradient of its
        // own shape, even if the loss never touched it.
        for (i, node) in self.nodes.iter().enumerate() {
            if node.requires_grad && matches!(node.op, Op::Leaf) && grads[i].is_none() {
                grads[i] = Some(Tensor::zeros(node.value.shape()));
            }
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], id: TensorId, g: Tensor) {
        if !self.nodes[id.0].requires_grad {
            return;
        }
        debug_assert_eq!(self.nodes[id.0].value.shape(), g.shape());
        match &mut grads[id.0] {
            Some(acc) => {
                for (a, b) in acc.data_mut().iter_mut().zip(g.data().iter()) {
                    *a += b;
                }
            }
            slot => *slot = Some(g),
        }
    }

    fn propagate(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let out = &self.nodes[i].value;
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate(grads, *a, ops::reduce_to_shape(g, self.shape(*a)));
                self.accumulate(grads, *b, ops::reduce_to_shape(g, self.shape(*b)));
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, ops::reduce_to_shape(g, self.shape(*a)));
                let neg = g.map(|v| -v);
                self.accumulate(grads, *b, ops::reduce_to_shape(&neg, self.shape(*b)));
            }
            Op::Mul(a, b) => {
                if self.nodes[a.0].requires_grad {
                    let da = ops::ew_binary(g, self.value(*b), out.shape(), |g, b| g * b);
                    self.accumulate(grads, *a, ops::reduce_to_shape(&da, self.shape(*a)));
                }
                if self.nodes[b.0].requires_grad {
                    let db = ops::ew_binary(g, self.value(*a), out.shape(), |g, a| g * a);
                    self.accumulate(grads, *b, ops::reduce_to_shape(&db, self.shape(*b)));
                }
            }
            Op::Div(a, b) => {
                if self.nodes[a.0].requires_grad {
                    let da = ops::ew_binary(g, self.value(*b), out.shape(), |g, b| g / b);
                    self.accumulate(grads, *a, ops::reduce_to_shape(&da, self.shape(*a)));
                }
                if self.nodes[b.0].requires_grad {
                    let ga = ops::ew_binary(g, self.value(*a), out.shape(), |g, a| g * a);
                    let db = ops::ew_binary(&ga, self.value(*b), out.shape(), |t, b| -t / (b * b));
                    self.accumulate(grads, *b, ops::reduce_to_shape(&db, self.shape(*b)));
                }
            }
            Op::AddScalar(a) => self.accumulate(grads, *a, g.clone()),
            Op::MulScalar(a, k) => {
                let k = *k;
                self.accumulate(grads, *a, g.map(|v| v * k));
            }
            Op::Matmul(a, b) => {
                let ash = self.shape(*a).to_vec();
                let bsh = self.shape(*b).to_vec();
                let m = ash[ash.len() - 2];
                let k = ash[ash.len() - 1];
                let n = bsh[bsh.len() - 1];
                let batch: usize = ash[..ash.len() - 2].iter().product();
                let b_shared = bsh.len() == 2;
                let gd = g.data();
                let ad = self.value(*a).data();
                let bd = self.value(*b).data();
                if self.nodes[a.0].requires_grad {
                    let mut da = vec![0.0; ad.len()];
                    for bi in 0..batch {
                        let gsl = &gd[bi * m * n..(bi + 1) * m * n];
                        let bsl = if b_shared { bd } else { &bd[bi * k * n..(bi + 1) * k * n] };
                        ops::mm_nt(gsl, bsl, m, n, k, &mut da[bi * m * k..(bi + 1) * m * k]);
                    }
                    self.accumulate(grads, *a, Tensor::new(ash.clone(), da).expect("matmul da"));
                }
                if self.nodes[b.0].requires_grad {
                    let mut db = vec![0.0; bd.len()];
                    for bi in 0..batch {
                        let gsl = &gd[bi * m * n..(bi + 1) * m * n];
                        let asl = &ad[bi * m * k..(bi + 1) * m * k];
                        let dbsl = if b_shared {
                            &mut db[..]
                        } else {
                            &mut db[bi * k * n..(bi + 1) * k * n]
                        };
                        ops::mm_tn(asl, gsl, k, m, n, dbsl);
                    }
                    self.accumulate(grads, *b, Tensor::new(bsh, db).expect("matmul db"));
                }
            }
            Op::Conv2d { x, w, bias, spec } => {
                let (dx, dw, db) =
                    ops::conv2d_bwd(self.value(*x), self.value(*w), bias.is_some(), spec, g);
                self.accumulate(grads, *x, dx);
                self.accumulate(grads, *w, dw);
                if let (Some(b), Some(db)) = (bias, db) {
                    self.accumulate(grads, *b, db);
                }
            }
            Op::ConvTranspose2d { x, w, bias } => {
                let (dx, dw, db) =
                    ops::conv_transpose2d_bwd(self.value(*x), self.value(*w), bias.is_some(), g);
                self.accumulate(grads, *x, dx);
                self.accumulate(grads, *w, dw);
                if let (Some(b), Some(db)) = (bias, db) {
                    self.accumulate(grads, *b, db);
                }
            }
            Op::MaxPool2d { x, argmax } => {
                let dx = ops::maxpool2d_bwd(self.shape(*x), argmax, g);
                self.accumulate(grads, *x, dx);
            }
            Op::Relu(a) => {
                let xd = self.value(*a).data();
                let dg: Vec<f64> = g
                    .data()
                    .iter()
                    .zip(xd.iter())
                    .map(|(&gv, &xv)| if xv > 0.0 { gv } else { 0.0 })
                    .collect();
                self.accumulate(grads, *a, Tensor::new(g.shape().to_vec(), dg).expect("relu dx"));
            }
            Op::Gelu(a) => {
                let xd = self.value(*a).data();
                let dg: Vec<f64> = g
                    .data()
                    .iter()
                    .zip(xd.iter())
                    .map(|(&gv, &xv)| gv * ops::gelu_grad(xv))
                    .collect();
                self.accumulate(grads, *a, Tensor::new(g.shape().to_vec(), dg).expect("gelu dx"));
            }
            Op::Sigmoid(a) => {
                let dg: Vec<f64> = g
                    .data()
                    .iter()
                    .zip(out.data().iter())
                    .map(|(&gv, &s)| gv * s * (1.0 - s))
                    .collect();
                self.accumulate(grads, *a, Tensor::new(g.shape().to_vec(), dg).expect("sigmoid dx"));
            }
            Op::Exp(a) => {
                let dg: Vec<f64> = g
                    .data()
                    .iter()
                    .zip(out.data().iter())
                    .map(|(&gv, &e)| gv * e)
                    .collect();
                self.accumulate(grads, *a, Tensor::new(g.shape().to_vec(), dg).expect("exp dx"));
            }
            Op::Ln(a) => {
                let xd = self.value(*a).data();
                let dg: Vec<f64> = g
                    .data()
                    .iter()
                    .zip(xd.iter())
                    .map(|(&gv, &xv)| gv / xv)
                    .collect();
                self.accumulate(grads, *a, Tensor::new(g.shape().to_vec(), dg).expect("ln dx"));
            }
            Op::Clamp { x, lo, hi } => {
                let xd = self.value(*x).data();
                let (lo, hi) = (*lo, *hi);
                let dg: Vec<f64> = g
                    .data()
                    .iter()
                    .zip(xd.iter())
                    .map(|(&gv, &xv)| if xv > lo && xv < hi { gv } else { 0.0 })
                    .collect();
                self.accumulate(grads, *x, Tensor::new(g.shape().to_vec(), dg).expect("clamp dx"));
            }
            Op::Softmax { x, axis } => {
                let dx = ops::softmax_bwd(out, g, *axis);
                self.accumulate(grads, *x, dx);
            }
            Op::LayerNorm { x, gain, bias, eps } => {
                let (dx, dgain, dbias) = ops::layernorm_bwd(self.value(*x), self.value(*gain), *eps, g);
                self.accumulate(grads, *x, dx);
                self.accumulate(grads, *gain, dgain);
                self.accumulate(grads, *bias, dbias);
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                mean,
                var,
                training,
                eps,
            } => {
                let (dx, dgamma, dbeta) = if *training {
                    ops::batchnorm_bwd_train(self.value(*x), self.value(*gamma), mean, var, *eps, g)
                } else {
                    ops::batchnorm_bwd_eval(self.value(*x), self.value(*gamma), mean, var, *eps, g)
                };
                self.accumulate(grads, *x, dx);
                self.accumulate(grads, *gamma, dgamma);
                self.accumulate(grads, *beta, dbeta);
            }
            Op::Sum { x, axes } => {
                let dx = ops::sum_axes_bwd(g, self.shape(*x), axes);
                self.accumulate(grads, *x, dx);
            }
            Op::Permute { x, perm } => {
                let dx = ops::permute(g, &ops::invert_perm(perm));
                self.accumulate(grads, *x, dx);
            }
            Op::Reshape(x) => {
                let dx = g.reshaped(self.shape(*x)).expect("reshape grad");
                self.accumulate(grads, *x, dx);
            }
            Op::Concat { xs, axis } => {
                let shapes: Vec<Vec<usize>> = xs.iter().map(|&i| self.shape(i).to_vec()).collect();
                let parts = ops::concat_bwd(g, &shapes, *axis);
                for (&xid, part) in xs.iter().zip(parts.into_iter()) {
                    self.accumulate(grads, xid, part);
                }
            }
            Op::Slice { x, ranges } => {
                let dx = ops::slice_bwd(g, self.shape(*x), ranges);
                self.accumulate(grads, *x, dx);
            }
            Op::Pad { x, before } => {
                let dx = ops::pad_bwd(g, self.shape(*x), before);
                self.accumulate(grads, *x, dx);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grad_of_sum_is_ones() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap(), true);
        let s = t.sum_all(x).unwrap();
        let mut g = t.backward(s).unwrap();
        assert_eq!(g.take(x).unwrap().data(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn grad_of_square_sum() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap(), true);
        let sq = t.mul(x, x).unwrap();
        let s = t.sum_all(sq).unwrap();
        let mut g = t.backward(s).unwrap();
        assert_eq!(g.take(x).unwrap().data(), &[2.0, 4.0, 6.0]);
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::zeros(&[2, 2]), true);
        assert!(t.backward(x).is_err());
    }

    #[test]
    fn unreached_leaf_gets_zero_grad() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::ones(&[2]), true);
        let y = t.leaf(Tensor::ones(&[3]), true);
        let s = t.sum_all(x).unwrap();
        let mut g = t.backward(s).unwrap();
        assert_eq!(g.take(y).unwrap().data(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn sigmoid_at_zero() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::scalar(0.0));
        let s = t.sigmoid(x);
        assert_eq!(t.value(s).item(), 0.5);
    }

    #[test]
    fn broadcast_add_reduces_bias_grad() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::ones(&[2, 3]), true);
        let b = t.leaf(Tensor::zeros(&[3]), true);
        let y = t.add(x, b).unwrap();
        let s = t.sum_all(y).unwrap();
        let mut g = t.backward(s).unwrap();
        assert_eq!(g.take(b).unwrap().data(), &[2.0, 2.0, 2.0]);
    }

    #[test]
    fn detach_blocks_gradient() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::new(vec![2], vec![1.0, 2.0]).unwrap(), true);
        let d = t.detach(x);
        let sq = t.mul(d, d).unwrap();
        let s = t.sum_all(sq).unwrap();
        let mut g = t.backward(s).unwrap();
        assert_eq!(g.take(x).unwrap().data(), &[0.0, 0.0]);
    }

    #[test]
    fn batchnorm_train_needs_batch() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::zeros(&[1, 2, 2, 2]), true);
        let gm = t.leaf(Tensor::ones(&[2]), true);
        let bt = t.leaf(Tensor::zeros(&[2]), true);
        assert!(t.batchnorm_train(x, gm, bt, 1e-5).is_err());
    }

    #[test]
    fn batchnorm_eval_identity_stats() {
        let mut t = Tape::new();
        let x = t.leaf(
            Tensor::new(vec![1, 1, 2, 2], vec![0.5, -1.0, 2.0, 0.0]).unwrap(),
            false,
        );
        let gm = t.constant(Tensor::ones(&[1]));
        let bt = t.constant(Tensor::zeros(&[1]));
        let y = t
            .batchnorm_eval(x, gm, bt, &Tensor::zeros(&[1]), &Tensor::ones(&[1]), 0.0)
            .unwrap();
        for (a, b) in t.value(y).data().iter().zip(t.value(x).data().iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}
