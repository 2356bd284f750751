//! Layers and the structured convolution blocks: DropBlock, LKA, scalable
//! ReLU, DWF-Conv and D2BR-Conv, plus the plain double-conv used by the
//! ablation baseline.
//!
//! Blocks own their parameters as plain tensors and stay immutable during
//! forward. Each step inserts parameters on the tape through a [`Forward`]
//! context under hierarchical names ("enc0.dwf.conv1.w", ...); batch-norm
//! running statistics are emitted as deferred updates the trainer applies
//! between steps.

use std::collections::HashMap;

use crate::autodiff::{Tape, TensorId};
use crate::error::{Error, Result};
use crate::ops::ConvSpec;
use crate::rng::Rng;
use crate::tensor::Tensor;

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    /// Updated by the optimizer.
    Trainable,
    /// Non-trainable state (batch-norm running stats).
    Stat,
}

/// Named-tensor visitor. `visit` and the forward pass must agree on names;
/// checkpoints, the optimizer and gradient extraction are all keyed on them.
pub trait Params {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor, ParamKind));
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor, ParamKind));
}

/// Per-step forward context: the tape, the mode, a step RNG for DropBlock
/// masks, the name -> leaf map, and deferred running-stat updates.
pub struct Forward<'t> {
    pub tape: &'t mut Tape,
    pub training: bool,
    rng: Rng,
    bindings: HashMap<String, TensorId>,
    params: Vec<(String, TensorId)>,
    stat_updates: Vec<(String, Tensor)>,
}

impl<'t> Forward<'t> {
    pub fn new(tape: &'t mut Tape, training: bool, rng: Rng) -> Self {
        Forward {
            tape,
            training,
            rng,
            bindings: HashMap::new(),
            params: Vec::new(),
            stat_updates: Vec::new(),
        }
    }

    /// Like `new`, but parameter names found in `bindings` resolve to the
    /// given tape ids instead of inserting the block's own tensors. Used by
    /// the finite-difference checker to drive a block from its leaves.
    pub fn with_bindings(
        tape: &'t mut Tape,
        training: bool,
        rng: Rng,
        bindings: HashMap<String, TensorId>,
    ) -> Self {
        Forward {
            tape,
            training,
            rng,
            bindings,
            params: Vec::new(),
            stat_updates: Vec::new(),
        }
    }

    pub fn param(&mut self, name: String, value: &Tensor) -> TensorId {
        if let Some(&id) = self.bindings.get(&name) {
            self.params.push((name, id));
            return id;
        }
        let id = self.tape.leaf(value.clone(), true);
        self.params.push((name, id));
        id
    }

    pub fn rng(&mut self) -> &mut Rng {
        &mut self.rng
    }

    pub fn push_stat_update(&mut self, name: String, value: Tensor) {
        self.stat_updates.push((name, value));
    }

    /// (name, leaf id) pairs in forward insertion order.
    pub fn params(&self) -> &[(String, TensorId)] {
        &self.params
    }

    pub fn into_outputs(self) -> (Vec<(String, TensorId)>, Vec<(String, Tensor)>) {
        (self.params, self.stat_updates)
    }
}

/// Kaiming-uniform init for ReLU fan-in: U(-b, b) with b = sqrt(6 / fan_in).
pub fn kaiming_uniform(rng: &mut Rng, shape: &[usize], fan_in: usize) -> Tensor {
    let bound = (6.0 / fan_in as f64).sqrt();
    Tensor::rand_uniform(rng, shape, -bound, bound)
}

pub fn child_scope(prefix: &str, leaf: &str) -> String {
    if prefix.is_empty() {
        leaf.to_string()
    } else {
        format!("{prefix}.{leaf}")
    }
}

// ---------------------------------------------------------------------------
// base layers
// ---------------------------------------------------------------------------

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub w: Tensor,
    pub b: Option<Tensor>,
    pub spec: ConvSpec,
}

impl Conv2d {
    pub fn new(rng: &mut Rng, in_c: usize, out_c: usize, k: usize, spec: ConvSpec, bias: bool) -> Self {
        let cig = in_c / spec.groups;
        let fan_in = cig * k * k;
        Conv2d {
            w: kaiming_uniform(rng, &[out_c, cig, k, k], fan_in),
            b: if bias { Some(Tensor::zeros(&[out_c])) } else { None },
            spec,
        }
    }

    pub fn forward(&self, fw: &mut Forward, scope: &str, x: TensorId) -> Result<TensorId> {
        let w = fw.param(child_scope(scope, "w"), &self.w);
        let b = self.b.as_ref().map(|b| fw.param(child_scope(scope, "b"), b));
        fw.tape.conv2d(x, w, b, self.spec)
    }
}

impl Params for Conv2d {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor, ParamKind)) {
        f(child_scope(prefix, "w"), &self.w, ParamKind::Trainable);
        if let Some(b) = &self.b {
            f(child_scope(prefix, "b"), b, ParamKind::Trainable);
        }
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor, ParamKind)) {
        f(child_scope(prefix, "w"), &mut self.w, ParamKind::Trainable);
        if let Some(b) = &mut self.b {
            f(child_scope(prefix, "b"), b, ParamKind::Trainable);
        }
    }
}

/// 2x2 stride-2 transposed convolution (doubles H, W).
#[derive(Clone, Debug)]
pub struct ConvTranspose2d {
    pub w: Tensor,
    pub b: Tensor,
}

impl ConvTranspose2d {
    pub fn new(rng: &mut Rng, in_c: usize, out_c: usize) -> Self {
        ConvTranspose2d {
            w: kaiming_uniform(rng, &[in_c, out_c, 2, 2], in_c * 4),
            b: Tensor::zeros(&[out_c]),
        }
    }

    pub fn forward(&self, fw: &mut Forward, scope: &str, x: TensorId) -> Result<TensorId> {
        let w = fw.param(child_scope(scope, "w"), &self.w);
        let b = fw.param(child_scope(scope, "b"), &self.b);
        fw.tape.conv_transpose2d(x, w, Some(b))
    }
}

impl Params for ConvTranspose2d {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor, ParamKind)) {
        f(child_scope(prefix, "w"), &self.w, ParamKind::Trainable);
        f(child_scope(prefix, "b"), &self.b, ParamKind::Trainable);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor, ParamKind)) {
        f(child_scope(prefix, "w"), &mut self.w, ParamKind::Trainable);
        f(child_scope(prefix, "b"), &mut self.b, ParamKind::Trainable);
    }
}

#[derive(Clone, Debug)]
pub struct BatchNorm2d {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub running_mean: Tensor,
    pub running_var: Tensor,
}

impl BatchNorm2d {
    pub fn new(c: usize) -> Self {
        BatchNorm2d {
            gamma: Tensor::ones(&[c]),
            beta: Tensor::zeros(&[c]),
            running_mean: Tensor::zeros(&[c]),
            running_var: Tensor::ones(&[c]),
        }
    }

    pub fn forward(&self, fw: &mut Forward, scope: &str, x: TensorId) -> Result<TensorId> {
        let gamma = fw.param(child_scope(scope, "gamma"), &self.gamma);
        let beta = fw.param(child_scope(scope, "beta"), &self.beta);
        if fw.training {
            let xs = fw.tape.shape(x).to_vec();
            let (y, mean, var) = fw.tape.batchnorm_train(x, gamma, beta, BN_EPS)?;
            // momentum update, unbiased variance for the running estimate
            let m = (xs[0] * xs[2] * xs[3]) as f64;
            let unbias = m / (m - 1.0);
            let new_mean: Vec<f64> = self
                .running_mean
                .data()
                .iter()
                .zip(mean.iter())
                .map(|(&r, &b)| (1.0 - BN_MOMENTUM) * r + BN_MOMENTUM * b)
                .collect();
            let new_var: Vec<f64> = self
                .running_var
                .data()
                .iter()
                .zip(var.iter())
                .map(|(&r, &b)| (1.0 - BN_MOMENTUM) * r + BN_MOMENTUM * b * unbias)
                .collect();
            let c = new_mean.len();
            fw.push_stat_update(child_scope(scope, "running_mean"), Tensor::new(vec![c], new_mean)?);
            fw.push_stat_update(child_scope(scope, "running_var"), Tensor::new(vec![c], new_var)?);
            Ok(y)
        } else {
            fw.tape
                .batchnorm_eval(x, gamma, beta, &self.running_mean, &self.running_var, BN_EPS)
        }
    }
}

impl Params for BatchNorm2d {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor, ParamKind)) {
        f(child_scope(prefix, "gamma"), &self.gamma, ParamKind::Trainable);
        f(child_scope(prefix, "beta"), &self.beta, ParamKind::Trainable);
        f(child_scope(prefix, "running_mean"), &self.running_mean, ParamKind::Stat);
        f(child_scope(prefix, "running_var"), &self.running_var, ParamKind::Stat);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor, ParamKind)) {
        f(child_scope(prefix, "gamma"), &mut self.gamma, ParamKind::Trainable);
        f(child_scope(prefix, "beta"), &mut self.beta, ParamKind::Trainable);
        f(child_scope(prefix, "running_mean"), &mut self.running_mean, ParamKind::Stat);
        f(child_scope(prefix, "running_var"), &mut self.running_var, ParamKind::Stat);
    }
}

/// Per-position linear map on channel-last tensors: y = x @ w + b,
/// w shaped [in, out].
#[derive(Clone, Debug)]
pub struct Linear {
    pub w: Tensor,
    pub b: Tensor,
}

impl Linear {
    pub fn new(rng: &mut Rng, in_f: usize, out_f: usize) -> Self {
        Linear {
            w: kaiming_uniform(rng, &[in_f, out_f], in_f),
            b: Tensor::zeros(&[out_f]),
        }
    }

    pub fn forward(&self, fw: &mut Forward, scope: &str, x: TensorId) -> Result<TensorId> {
        let w = fw.param(child_scope(scope, "w"), &self.w);
        let b = fw.param(child_scope(scope, "b"), &self.b);
        let y = fw.tape.matmul(x, w)?;
        fw.tape.add(y, b)
    }
}

impl Params for Linear {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor, ParamKind)) {
        f(child_scope(prefix, "w"), &self.w, ParamKind::Trainable);
        f(child_scope(prefix, "b"), &self.b, ParamKind::Trainable);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor, ParamKind)) {
        f(child_scope(prefix, "w"), &mut self.w, ParamKind::Trainable);
        f(child_scope(prefix, "b"), &mut self.b, ParamKind::Trainable);
    }
}

// ---------------------------------------------------------------------------
// DropBlock
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, serde::Serialize, serde::Deserialize)]
pub struct DropBlockParams {
    pub block_size: usize,
    pub drop_prob: f64,
}

impl Default for DropBlockParams {
    fn default() -> Self {
        DropBlockParams {
            block_size: 7,
            drop_prob: 0.1,
        }
    }
}

impl DropBlockParams {
    pub fn validate(&self) -> Result<()> {
        if self.block_size == 0 || self.block_size % 2 == 0 {
            return Err(Error::Config(format!(
                "dropblock block_size must be odd and positive, got {}",
                self.block_size
            )));
        }
        if !(0.0..1.0).contains(&self.drop_prob) {
            return Err(Error::Config(format!(
                "dropblock drop_prob must be in [0, 1), got {}",
                self.drop_prob
            )));
        }
        Ok(())
    }
}

/// Multiplicative DropBlock mask for an NCHW shape: per (sample, channel),
/// Bernoulli block seeds on the valid center region zero out full
/// block_size x block_size squares; survivors are rescaled by
/// total / kept so the map's mean is preserved.
///
/// Seed rate: gamma = drop_prob / bs^2 * (H W) / ((H-bs+1)(W-bs+1)).
pub fn dropblock_mask(rng: &mut Rng, shape: &[usize], p: &DropBlockParams) -> Result<Tensor> {
    let (n, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
    let bs = p.block_size;
    if bs > h.min(w) {
        return Err(Error::Config(format!(
            "dropblock block_size {} exceeds feature map {}x{}",
            bs, h, w
        )));
    }
    let valid_h = h - bs + 1;
    let valid_w = w - bs + 1;
    let gamma = p.drop_prob / (bs * bs) as f64 * (h * w) as f64 / (valid_h * valid_w) as f64;
    let r = (bs - 1) / 2;
    let mut mask = vec![1.0f64; n * c * h * w];
    for nc in 0..n * c {
        let base = nc * h * w;
        let mut dropped_any = false;
        for ch in 0..valid_h {
            for cw in 0..valid_w {
                if rng.bernoulli(gamma) {
                    dropped_any = true;
                    let (cy, cx) = (ch + r, cw + r);
                    for y in cy - r..=cy + r {
                        let row = base + y * w;
                        mask[row + cx - r..row + cx + r + 1].fill(0.0);
                    }
                }
            }
        }
        if dropped_any {
            let kept = mask[base..base + h * w].iter().filter(|&&v| v > 0.0).count();
            if kept > 0 {
                let scale = (h * w) as f64 / kept as f64;
                for v in &mut mask[base..base + h * w] {
                    if *v > 0.0 {
                        *v = scale;
                    }
                }
            }
        }
    }
    Tensor::new(shape.to_vec(), mask)
}

/// DropBlock as a tape op: identity in eval mode or at drop_prob 0, a
/// constant multiplicative mask otherwise.
pub fn dropblock(fw: &mut Forward, x: TensorId, p: &DropBlockParams) -> Result<TensorId> {
    if !fw.training || p.drop_prob == 0.0 {
        return Ok(x);
    }
    let shape = fw.tape.shape(x).to_vec();
    let mask = dropblock_mask(fw.rng(), &shape, p)?;
    let m = fw.tape.constant(mask);
    fw.tape.mul(x, m)
}

// ---------------------------------------------------------------------------
// LKA: depthwise 5x5 -> depthwise 7x7 dilation 3 -> pointwise 1x1,
// applied as a multiplicative attention map.
// ---------------------------------------------------------------------------

#[derive(Clone, Debug)]
pub struct Lka {
    pub dw5: Conv2d,
    pub dw7: Conv2d,
    pub pw: Conv2d,
}

impl Lka {
    pub fn new(rng: &mut Rng, c: usize) -> Self {
        let dw5_spec = ConvSpec {
            stride: 1,
            pad: 2,
            dilation: 1,
            groups: c,
        };
        let dw7_spec = ConvSpec {
            stride: 1,
            pad: 9,
            dilation: 3,
            groups: c,
        };
        Lka {
            dw5: Conv2d::new(rng, c, c, 5, dw5_spec, true),
            dw7: Conv2d::new(rng, c, c, 7, dw7_spec, true),
            pw: Conv2d::new(rng, c, c, 1, ConvSpec::unit(0), true),
        }
    }

    pub fn forward(&self, fw: &mut Forward, scope: &str, x: TensorId) -> Result<TensorId> {
        let a = self.dw5.forward(fw, &child_scope(scope, "dw5"), x)?;
        let a = self.dw7.forward(fw, &child_scope(scope, "dw7"), a)?;
        let attn = self.pw.forward(fw, &child_scope(scope, "pw"), a)?;
        fw.tape.mul(x, attn)
    }
}

impl Params for Lka {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor, ParamKind)) {
        self.dw5.visit(&child_scope(prefix, "dw5"), f);
        self.dw7.visit(&child_scope(prefix, "dw7"), f);
        self.pw.visit(&child_scope(prefix, "pw"), f);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor, ParamKind)) {
        self.dw5.visit_mut(&child_scope(prefix, "dw5"), f);
        self.dw7.visit_mut(&child_scope(prefix, "dw7"), f);
        self.pw.visit_mut(&child_scope(prefix, "pw"), f);
    }
}

// ---------------------------------------------------------------------------
// scalable ReLU: learnable positive per-channel gain after the ReLU.
// The trainer clamps the gains at 1e-3 after every optimizer step.
// ---------------------------------------------------------------------------

#[derive(Clone, Debug)]
pub struct ScalableRelu {
    pub scale: Tensor,
}

pub const RELU_SCALE_MIN: f64 = 1e-3;
/// Name suffix the optimizer uses to find gains that need clamping.
pub const RELU_SCALE_SUFFIX: &str = "relu_scale";

impl ScalableRelu {
    pub fn new(c: usize) -> Self {
        ScalableRelu {
            scale: Tensor::ones(&[c]),
        }
    }

    pub fn forward(&self, fw: &mut Forward, scope: &str, x: TensorId) -> Result<TensorId> {
        let c = self.scale.numel();
        let s = fw.param(child_scope(scope, RELU_SCALE_SUFFIX), &self.scale);
        let s4 = fw.tape.reshape(s, &[1, c, 1, 1])?;
        let r = fw.tape.relu(x);
        fw.tape.mul(r, s4)
    }
}

impl Params for ScalableRelu {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor, ParamKind)) {
        f(child_scope(prefix, RELU_SCALE_SUFFIX), &self.scale, ParamKind::Trainable);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor, ParamKind)) {
        f(child_scope(prefix, RELU_SCALE_SUFFIX), &mut self.scale, ParamKind::Trainable);
    }
}

// ---------------------------------------------------------------------------
// DWF-Conv: [3x3 conv -> BN -> scalable ReLU -> LKA] x 2
// ---------------------------------------------------------------------------

#[derive(Clone, Debug)]
pub struct DwfConv {
    pub conv1: Conv2d,
    pub bn1: BatchNorm2d,
    pub act1: ScalableRelu,
    pub lka1: Vec<Lka>,
    pub conv2: Conv2d,
    pub bn2: BatchNorm2d,
    pub act2: ScalableRelu,
    pub lka2: Vec<Lka>,
}

impl DwfConv {
    pub fn new(rng: &mut Rng, in_c: usize, out_c: usize, lka_repeats: usize) -> Self {
        DwfConv {
            conv1: Conv2d::new(rng, in_c, out_c, 3, ConvSpec::unit(1), true),
            bn1: BatchNorm2d::new(out_c),
            act1: ScalableRelu::new(out_c),
            lka1: (0..lka_repeats).map(|_| Lka::new(rng, out_c)).collect(),
            conv2: Conv2d::new(rng, out_c, out_c, 3, ConvSpec::unit(1), true),
            bn2: BatchNorm2d::new(out_c),
            act2: ScalableRelu::new(out_c),
            lka2: (0..lka_repeats).map(|_| Lka::new(rng, out_c)).collect(),
        }
    }

    pub fn forward(&self, fw: &mut Forward, scope: &str, x: TensorId) -> Result<TensorId> {
        let mut h = self.conv1.forward(fw, &child_scope(scope, "conv1"), x)?;
        h = self.bn1.forward(fw, &child_scope(scope, "bn1"), h)?;
        h = self.act1.forward(fw, &child_scope(scope, "act1"), h)?;
        for (i, lka) in self.lka1.iter().enumerate() {
            h = lka.forward(fw, &format!("{scope}.lka1_{i}"), h)?;
        }
        h = self.conv2.forward(fw, &child_scope(scope, "conv2"), h)?;
        h = self.bn2.forward(fw, &child_scope(scope, "bn2"), h)?;
        h = self.act2.forward(fw, &child_scope(scope, "act2"), h)?;
        for (i, lka) in self.lka2.iter().enumerate() {
            h = lka.forward(fw, &format!("{scope}.lka2_{i}"), h)?;
        }
        Ok(h)
    }
}

impl Params for DwfConv {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor, ParamKind)) {
        self.conv1.visit(&child_scope(prefix, "conv1"), f);
        self.bn1.visit(&child_scope(prefix, "bn1"), f);
        self.act1.visit(&child_scope(prefix, "act1"), f);
        for (i, l) in self.lka1.iter().enumerate() {
            l.visit(&format!("{prefix}.lka1_{i}"), f);
        }
        self.conv2.visit(&child_scope(prefix, "conv2"), f);
        self.bn2.visit(&child_scope(prefix, "bn2"), f);
        self.act2.visit(&child_scope(prefix, "act2"), f);
        for (i, l) in self.lka2.iter().enumerate() {
            l.visit(&format!("{prefix}.lka2_{i}"), f);
        }
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor, ParamKind)) {
        self.conv1.visit_mut(&child_scope(prefix, "conv1"), f);
        self.bn1.visit_mut(&child_scope(prefix, "bn1"), f);
        self.act1.visit_mut(&child_scope(prefix, "act1"), f);
        for (i, l) in self.lka1.iter_mut().enumerate() {
            l.visit_mut(&format!("{prefix}.lka1_{i}"), f);
        }
        self.conv2.visit_mut(&child_scope(prefix, "conv2"), f);
        self.bn2.visit_mut(&child_scope(prefix, "bn2"), f);
        self.act2.visit_mut(&child_scope(prefix, "act2"), f);
        for (i, l) in self.lka2.iter_mut().enumerate() {
            l.visit_mut(&format!("{prefix}.lka2_{i}"), f);
        }
    }
}

// ---------------------------------------------------------------------------
// D2BR-Conv: [3x3 conv -> DropBlock -> BN -> ReLU] x 2
// ---------------------------------------------------------------------------

#[derive(Clone, Debug)]
pub struct D2brConv {
    pub conv1: Conv2d,
    pub bn1: BatchNorm2d,
    pub conv2: Conv2d,
    pub bn2: BatchNorm2d,
    pub drop: DropBlockParams,
}

impl D2brConv {
    pub fn new(rng: &mut Rng, in_c: usize, out_c: usize, drop: DropBlockParams) -> Self {
        D2brConv {
            conv1: Conv2d::new(rng, in_c, out_c, 3, ConvSpec::unit(1), true),
            bn1: BatchNorm2d::new(out_c),
            conv2: Conv2d::new(rng, out_c, out_c, 3, ConvSpec::unit(1), true),
            bn2: BatchNorm2d::new(out_c),
            drop,
        }
    }

    pub fn forward(&self, fw: &mut Forward, scope: &str, x: TensorId) -> Result<TensorId> {
        let mut h = self.conv1.forward(fw, &child_scope(scope, "conv1"), x)?;
        h = dropblock(fw, h, &self.drop)?;
        h = self.bn1.forward(fw, &child_scope(scope, "bn1"), h)?;
        h = fw.tape.relu(h);
        h = self.conv2.forward(fw, &child_scope(scope, "conv2"), h)?;
        h = dropblock(fw, h, &self.drop)?;
        h = self.bn2.forward(fw, &child_scope(scope, "bn2"), h)?;
        Ok(fw.tape.relu(h))
    }
}

impl Params for D2brConv {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor, ParamKind)) {
        self.conv1.visit(&child_scope(prefix, "conv1"), f);
        self.bn1.visit(&child_scope(prefix, "bn1"), f);
        self.conv2.visit(&child_scope(prefix, "conv2"), f);
        self.bn2.visit(&child_scope(prefix, "bn2"), f);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor, ParamKind)) {
        self.conv1.visit_mut(&child_scope(prefix, "conv1"), f);
        self.bn1.visit_mut(&child_scope(prefix, "bn1"), f);
        self.conv2.visit_mut(&child_scope(prefix, "conv2"), f);
        self.bn2.visit_mut(&child_scope(prefix, "bn2"), f);
    }
}

// ---------------------------------------------------------------------------
// Plain double conv, the classic U-Net block. Ablation baseline only.
// ---------------------------------------------------------------------------

#[derive(Clone, Debug)]
pub struct PlainConv {
    pub conv1: Conv2d,
    pub bn1: BatchNorm2d,
    pub conv2: Conv2d,
    pub bn2: BatchNorm2d,
}

impl PlainConv {
    pub fn new(rng: &mut Rng, in_c: usize, out_c: usize) -> Self {
        PlainConv {
            conv1: Conv2d::new(rng, in_c, out_c, 3, ConvSpec::unit(1), true),
            bn1: BatchNorm2d::new(out_c),
            conv2: Conv2d::new(rng, out_c, out_c, 3, ConvSpec::unit(1), true),
            bn2: BatchNorm2d::new(out_c),
        }
    }

    pub fn forward(&self, fw: &mut Forward, scope: &str, x: TensorId) -> Result<TensorId> {
        let mut h = self.conv1.forward(fw, &child_scope(scope, "conv1"), x)?;
        h = self.bn1.forward(fw, &child_scope(scope, "bn1"), h)?;
        h = fw.tape.relu(h);
        h = self.conv2.forward(fw, &child_scope(scope, "conv2"), h)?;
        h = self.bn2.forward(fw, &child_scope(scope, "bn2"), h)?;
        Ok(fw.tape.relu(h))
    }
}

impl Params for PlainConv {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor, ParamKind)) {
        self.conv1.visit(&child_scope(prefix, "conv1"), f);
        self.bn1.visit(&child_scope(prefix, "bn1"), f);
        self.conv2.visit(&child_scope(prefix, "conv2"), f);
        self.bn2.visit(&child_scope(prefix, "bn2"), f);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor, ParamKind)) {
        self.conv1.visit_mut(&child_scope(prefix, "conv1"), f);
        self.bn1.visit_mut(&child_scope(prefix, "bn1"), f);
        self.conv2.visit_mut(&child_scope(prefix, "conv2"), f);
        self.bn2.visit_mut(&child_scope(prefix, "bn2"), f);
    }
}
