//! S2-MLP Link skip connector: a channel-tripling per-position MLP, two
//! directional spatial-shift branches plus an unshifted branch, split
//! attention fusion over the three branches, and a channel-restoring MLP.
//!
//! Inside the link tensors are channel-last [N, H, W, C]; NCHW is converted
//! at entry and exit.

use crate::autodiff::{Tape, TensorId};
use crate::blocks::{child_scope, Forward, Linear, ParamKind, Params};
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Branch count of the split attention stack (F1 shifted, F2 shifted, F3).
pub const BRANCHES: usize = 3;

fn check_channels(op: &'static str, c: usize) -> Result<()> {
    if c % 4 != 0 {
        return Err(Error::shape(
            op,
            format!("channel count {} must be divisible by 4", c),
        ));
    }
    Ok(())
}

/// Shift a [N, H, W, C] tensor one step along `axis` (1 = H, 2 = W).
/// `toward_zero` moves content toward index 0 and keeps the vacated last
/// line at its pre-shift value; otherwise content moves away from 0 and the
/// first line is kept.
fn shift_line(tape: &mut Tape, x: TensorId, axis: usize, toward_zero: bool) -> Result<TensorId> {
    let dims = tape.shape(x).to_vec();
    let len = dims[axis];
    if len < 2 {
        return Ok(x);
    }
    let full: Vec<std::ops::Range<usize>> = dims.iter().map(|&d| 0..d).collect();
    let mut a = full.clone();
    let mut b = full;
    if toward_zero {
        // out[.., 0..len-1, ..] = x[.., 1..len, ..]; out[.., len-1, ..] = x[.., len-1, ..]
        a[axis] = 1..len;
        b[axis] = len - 1..len;
    } else {
        // out[.., 0, ..] = x[.., 0, ..]; out[.., 1..len, ..] = x[.., 0..len-1, ..]
        a[axis] = 0..1;
        b[axis] = 0..len - 1;
    }
    let first = tape.slice(x, &a)?;
    let second = tape.slice(x, &b)?;
    tape.concat(&[first, second], axis)
}

/// Shift schedule applied per channel quarter.
fn spatial_shift(tape: &mut Tape, x: TensorId, dirs: [(usize, bool); 4]) -> Result<TensorId> {
    let dims = tape.shape(x).to_vec();
    if dims.len() != 4 {
        return Err(Error::shape("spatial_shift", format!("expected [N,H,W,C], got {:?}", dims)));
    }
    let c = dims[3];
    check_channels("spatial_shift", c)?;
    let q = c / 4;
    let mut parts = Vec::with_capacity(4);
    for (i, &(axis, toward)) in dirs.iter().enumerate() {
        let mut r: Vec<std::ops::Range<usize>> = dims.iter().map(|&d| 0..d).collect();
        r[3] = i * q..(i + 1) * q;
        let quarter = tape.slice(x, &r)?;
        parts.push(shift_line(tape, quarter, axis, toward)?);
    }
    tape.concat(&parts, 3)
}

/// First shift schedule: quarters move (W->0, W<-0, H->0, H<-0).
pub fn spatial_shift_ss1(tape: &mut Tape, x: TensorId) -> Result<TensorId> {
    spatial_shift(tape, x, [(2, true), (2, false), (1, true), (1, false)])
}

/// Second shift schedule: H and W exchange roles relative to SS1.
pub fn spatial_shift_ss2(tape: &mut Tape, x: TensorId) -> Result<TensorId> {
    spatial_shift(tape, x, [(1, true), (1, false), (2, true), (2, false)])
}

/// Split-attention parameters: pooled bottleneck MLP producing per-branch,
/// per-channel softmax weights.
#[derive(Clone, Debug)]
pub struct SplitAttention {
    pub mlp1: Linear, // C -> C/2
    pub mlp2: Linear, // C/2 -> k*C
}

impl SplitAttention {
    pub fn new(rng: &mut Rng, channels: usize, k: usize) -> Self {
        SplitAttention {
            mlp1: Linear::new(rng, channels, channels / 2),
            mlp2: Linear::new(rng, channels / 2, k * channels),
        }
    }

    /// parts: k tensors, each [N, n, C]. Output [N, n, C] = sum_k w_k * part_k
    /// where the weights softmax-normalize over k per (batch, channel).
    pub fn forward(&self, fw: &mut Forward, scope: &str, parts: &[TensorId]) -> Result<TensorId> {
        if parts.is_empty() {
            return Err(Error::shape("split_attention", "no branches"));
        }
        let dims = fw.tape.shape(parts[0]).to_vec();
        for &p in parts {
            if fw.tape.shape(p) != dims {
                return Err(Error::shape(
                    "split_attention",
                    format!("branch shapes differ: {:?} vs {:?}", dims, fw.tape.shape(p)),
                ));
            }
        }
        let k = parts.len();
        let (n, tokens, c) = (dims[0], dims[1], dims[2]);

        // stack to [N, k, n, C]
        let stacked: Result<Vec<TensorId>> = parts
            .iter()
            .map(|&p| fw.tape.reshape(p, &[n, 1, tokens, c]))
            .collect();
        let x_all = fw.tape.concat(&stacked?, 1)?;

        // pooled representation over branches and positions -> [N, C]
        let a = fw.tape.mean(x_all, &[1, 2], false)?;
        let hidden = self.mlp1.forward(fw, &child_scope(scope, "mlp1"), a)?;
        let hidden = fw.tape.gelu(hidden);
        let ahat = self.mlp2.forward(fw, &child_scope(scope, "mlp2"), hidden)?; // [N, kC]
        let ahat = fw.tape.reshape(ahat, &[n, k, c])?;
        let abar = fw.tape.softmax(ahat, 1)?; // weights over k

        let attention = fw.tape.reshape(abar, &[n, k, 1, c])?;
        let weighted = fw.tape.mul(x_all, attention)?;
        let summed = fw.tape.sum(weighted, &[1], false)?; // [N, n, C]
        Ok(summed)
    }
}

impl Params for SplitAttention {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor, ParamKind)) {
        self.mlp1.visit(&child_scope(prefix, "mlp1"), f);
        self.mlp2.visit(&child_scope(prefix, "mlp2"), f);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor, ParamKind)) {
        self.mlp1.visit_mut(&child_scope(prefix, "mlp1"), f);
        self.mlp2.visit_mut(&child_scope(prefix, "mlp2"), f);
    }
}

/// The full skip connector.
#[derive(Clone, Debug)]
pub struct S2Link {
    pub channels: usize,
    pub mlp1: Linear, // C -> 3C
    pub attn: SplitAttention,
    pub mlp2: Linear, // C -> C
}

impl S2Link {
    pub fn new(rng: &mut Rng, channels: usize) -> Result<Self> {
        check_channels("s2_link", channels)?;
        Ok(S2Link {
            channels,
            mlp1: Linear::new(rng, channels, BRANCHES * channels),
            attn: SplitAttention::new(rng, channels, BRANCHES),
            mlp2: Linear::new(rng, channels, channels),
        })
    }

    pub fn forward(&self, fw: &mut Forward, scope: &str, x: TensorId) -> Result<TensorId> {
        let dims = fw.tape.shape(x).to_vec(); // NCHW
        if dims.len() != 4 || dims[1] != self.channels {
            return Err(Error::shape(
                "s2_link",
                format!("expected [N,{},H,W], got {:?}", self.channels, dims),
            ));
        }
        let (n, c, h, w) = (dims[0], dims[1], dims[2], dims[3]);
        let cl = fw.tape.permute(x, &[0, 2, 3, 1])?; // [N, H, W, C]
        let expanded = self.mlp1.forward(fw, &child_scope(scope, "mlp1"), cl)?; // [N,H,W,3C]

        let full: Vec<std::ops::Range<usize>> = [n, h, w, 3 * c].iter().map(|&d| 0..d).collect();
        let take = |fw: &mut Forward, lo: usize| -> Result<TensorId> {
            let mut r = full.clone();
            r[3] = lo * c..(lo + 1) * c;
            fw.tape.slice(expanded, &r)
        };
        let f1 = take(fw, 0)?;
        let f2 = take(fw, 1)?;
        let f3 = take(fw, 2)?;

        let f1 = spatial_shift_ss1(fw.tape, f1)?;
        let f2 = spatial_shift_ss2(fw.tape, f2)?;

        let flat = |fw: &mut Forward, t: TensorId| fw.tape.reshape(t, &[n, h * w, c]);
        let parts = [flat(fw, f1)?, flat(fw, f2)?, flat(fw, f3)?];
        let fused = self.attn.forward(fw, &child_scope(scope, "attn"), &parts)?;

        let restored = self.mlp2.forward(fw, &child_scope(scope, "mlp2"), fused)?;
        let grid = fw.tape.reshape(restored, &[n, h, w, c])?;
        fw.tape.permute(grid, &[0, 3, 1, 2])
    }
}

impl Params for S2Link {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor, ParamKind)) {
        self.mlp1.visit(&child_scope(prefix, "mlp1"), f);
        self.attn.visit(&child_scope(prefix, "attn"), f);
        self.mlp2.visit(&child_scope(prefix, "mlp2"), f);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor, ParamKind)) {
        self.mlp1.visit_mut(&child_scope(prefix, "mlp1"), f);
        self.attn.visit_mut(&child_scope(prefix, "attn"), f);
        self.mlp2.visit_mut(&child_scope(prefix, "mlp2"), f);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn shift_on(x: &Tensor, ss1: bool) -> Tensor {
        let mut tape = Tape::new();
        let id = tape.constant(x.clone());
        let out = if ss1 {
            spatial_shift_ss1(&mut tape, id).unwrap()
        } else {
            spatial_shift_ss2(&mut tape, id).unwrap()
        };
        tape.value(out).clone()
    }

    #[test]
    fn single_pixel_is_identity() {
        let x = Tensor::new(vec![1, 1, 1, 4], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(shift_on(&x, true), x);
        assert_eq!(shift_on(&x, false), x);
    }

    #[test]
    fn constant_input_is_fixed_point() {
        let x = Tensor::full(&[1, 3, 3, 4], 0.7);
        assert_eq!(shift_on(&x, true), x);
        assert_eq!(shift_on(&x, false), x);
    }

    #[test]
    fn ss1_matches_case_by_case_oracle() {
        // [1, 2, 2, 4] with distinct values
        let x = Tensor::new(vec![1, 2, 2, 4], (0..16).map(|v| v as f64).collect()).unwrap();
        let y = shift_on(&x, true);
        let mut expect = x.clone();
        // quarter 0 (channel 0): along W toward 0: out[h, 0] = x[h, 1], out[h, 1] = x[h, 1]
        for h in 0..2 {
            expect.set(&[0, h, 0, 0], x.at(&[0, h, 1, 0]));
            expect.set(&[0, h, 1, 0], x.at(&[0, h, 1, 0]));
        }
        // quarter 1 (channel 1): along W away: out[h, 1] = x[h, 0], out[h, 0] = x[h, 0]
        for h in 0..2 {
            expect.set(&[0, h, 1, 1], x.at(&[0, h, 0, 1]));
            expect.set(&[0, h, 0, 1], x.at(&[0, h, 0, 1]));
        }
        // quarter 2 (channel 2): along H toward 0
        for w in 0..2 {
            expect.set(&[0, 0, w, 2], x.at(&[0, 1, w, 2]));
            expect.set(&[0, 1, w, 2], x.at(&[0, 1, w, 2]));
        }
        // quarter 3 (channel 3): along H away
        for w in 0..2 {
            expect.set(&[0, 1, w, 3], x.at(&[0, 0, w, 3]));
            expect.set(&[0, 0, w, 3], x.at(&[0, 0, w, 3]));
        }
        assert_eq!(y, expect);
    }

    #[test]
    fn ss1_and_ss2_differ_on_generic_input() {
        let mut rng = Rng::new(21);
        let x = Tensor::rand_uniform(&mut rng, &[1, 3, 4, 4], -1.0, 1.0);
        assert_ne!(shift_on(&x, true).data(), shift_on(&x, false).data());
    }

    #[test]
    fn non_divisible_channels_rejected() {
        let x = Tensor::zeros(&[1, 2, 2, 3]);
        let mut tape = Tape::new();
        let id = tape.constant(x);
        assert!(spatial_shift_ss1(&mut tape, id).is_err());
    }

    #[test]
    fn split_attention_k1_is_identity() {
        let mut rng = Rng::new(22);
        let attn = SplitAttention::new(&mut rng, 4, 1);
        let x = Tensor::rand_uniform(&mut rng, &[1, 4, 4], -1.0, 1.0);
        let mut tape = Tape::new();
        let id = tape.constant(x.clone());
        let mut fw = Forward::new(&mut tape, false, Rng::new(0));
        let out = attn.forward(&mut fw, "a", &[id]).unwrap();
        for (a, b) in tape.value(out).data().iter().zip(x.data().iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_attention_mlps_give_mean_of_parts() {
        let mut rng = Rng::new(23);
        let mut attn = SplitAttention::new(&mut rng, 4, 3);
        attn.visit_mut("a", &mut |_, t, _| *t = Tensor::zeros(t.shape()));
        let parts: Vec<Tensor> = (0..3)
            .map(|_| Tensor::rand_uniform(&mut rng, &[2, 5, 4], -1.0, 1.0))
            .collect();
        let mut tape = Tape::new();
        let ids: Vec<TensorId> = parts.iter().map(|p| tape.constant(p.clone())).collect();
        let mut fw = Forward::new(&mut tape, false, Rng::new(0));
        let out = attn.forward(&mut fw, "a", &ids).unwrap();
        let out = tape.value(out);
        for i in 0..out.numel() {
            let mean = (parts[0].data()[i] + parts[1].data()[i] + parts[2].data()[i]) / 3.0;
            assert!((out.data()[i] - mean).abs() < 1e-12);
        }
    }

    #[test]
    fn mismatched_branch_shapes_rejected() {
        let mut rng = Rng::new(24);
        let attn = SplitAttention::new(&mut rng, 4, 2);
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[1, 4, 4]));
        let b = tape.constant(Tensor::zeros(&[1, 5, 4]));
        let mut fw = Forward::new(&mut tape, false, Rng::new(0));
        assert!(attn.forward(&mut fw, "a", &[a, b]).is_err());
    }

    #[test]
    fn link_preserves_shape() {
        let mut rng = Rng::new(25);
        let link = S2Link::new(&mut rng, 8).unwrap();
        let x = Tensor::rand_uniform(&mut rng, &[1, 8, 4, 4], -1.0, 1.0);
        let mut tape = Tape::new();
        let id = tape.constant(x);
        let mut fw = Forward::new(&mut tape, false, Rng::new(0));
        let out = link.forward(&mut fw, "s", id).unwrap();
        assert_eq!(tape.shape(out), &[1, 8, 4, 4]);
    }

    #[test]
    fn identity_wiring_keeps_constants() {
        // mlp1 stacks three identities, attention MLPs are zero (uniform
        // weights), mlp2 is the identity: a constant input passes through.
        let c = 4;
        let mut rng = Rng::new(26);
        let mut link = S2Link::new(&mut rng, c).unwrap();
        let mut w1 = Tensor::zeros(&[c, 3 * c]);
        for i in 0..c {
            for rep in 0..3 {
                w1.set(&[i, rep * c + i], 1.0);
            }
        }
        link.mlp1.w = w1;
        link.mlp1.b = Tensor::zeros(&[3 * c]);
        link.attn.mlp1.w = Tensor::zeros(&[c, c / 2]);
        link.attn.mlp1.b = Tensor::zeros(&[c / 2]);
        link.attn.mlp2.w = Tensor::zeros(&[c / 2, 3 * c]);
        link.attn.mlp2.b = Tensor::zeros(&[3 * c]);
        let mut w2 = Tensor::zeros(&[c, c]);
        for i in 0..c {
            w2.set(&[i, i], 1.0);
        }
        link.mlp2.w = w2;
        link.mlp2.b = Tensor::zeros(&[c]);

        let x = Tensor::full(&[1, c, 3, 3], 0.42);
        let mut tape = Tape::new();
        let id = tape.constant(x.clone());
        let mut fw = Forward::new(&mut tape, false, Rng::new(0));
        let out = link.forward(&mut fw, "s", id).unwrap();
        for (a, b) in tape.value(out).data().iter().zip(x.data().iter()) {
            assert!((a - b).abs() < 1e-12, "{} vs {}", a, b);
        }
    }
}
