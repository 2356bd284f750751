//! RM-SViT bottleneck: grid-initialized super tokens, iterative sparse
//! association, multi-head attention refinement with a residual + layer
//! norm, and association-weighted token upsampling.
//!
//! Token layout is channel-last: X is [N, n, C] with n = H*W, super tokens
//! S are [N, m, C] with m = (H/h)*(W/w), and the association Q is [N, n, m].

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, TensorId};
use crate::blocks::{child_scope, Conv2d, Forward, Linear, ParamKind, Params};
use crate::error::{Error, Result};
use crate::ops::ConvSpec;
use crate::rng::Rng;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct RmSvitConfig {
    /// Grid cell size (h, w); every cell becomes one initial super token.
    pub grid: (usize, usize),
    /// Association/update iterations before the final association.
    pub n_iter: usize,
    /// Attention branch count; must divide the channel width.
    pub heads: usize,
    /// Restrict each token's association to the 3x3 super-token neighborhood.
    pub sparse: bool,
    /// Block gradients through the association iterations (speed knob).
    #[serde(default)]
    pub detach_iters: bool,
}

impl Default for RmSvitConfig {
    fn default() -> Self {
        RmSvitConfig {
            grid: (8, 8),
            n_iter: 1,
            heads: 4,
            sparse: true,
            detach_iters: false,
        }
    }
}

/// Grid geometry for a feature map: cell counts and token count.
#[derive(Clone, Copy, Debug)]
pub struct GridInfo {
    pub gh: usize,
    pub gw: usize,
    pub h: usize,
    pub w: usize,
    pub m: usize,
    pub n: usize,
}

pub fn grid_info(height: usize, width: usize, grid: (usize, usize)) -> Result<GridInfo> {
    let (ch, cw) = grid;
    if ch == 0 || cw == 0 || height % ch != 0 || width % cw != 0 {
        return Err(Error::Config(format!(
            "super-token grid {}x{} must divide the {}x{} feature map",
            ch, cw, height, width
        )));
    }
    let gh = height / ch;
    let gw = width / cw;
    Ok(GridInfo {
        gh,
        gw,
        h: height,
        w: width,
        m: gh * gw,
        n: height * width,
    })
}

/// Flatten an NCHW map into channel-last tokens [N, n, C].
pub fn to_tokens(tape: &mut Tape, x: TensorId) -> Result<TensorId> {
    let s = tape.shape(x).to_vec();
    let t = tape.permute(x, &[0, 2, 3, 1])?;
    tape.reshape(t, &[s[0], s[2] * s[3], s[1]])
}

/// Fold channel-last tokens [N, n, C] back to NCHW.
pub fn from_tokens(tape: &mut Tape, x: TensorId, h: usize, w: usize) -> Result<TensorId> {
    let s = tape.shape(x).to_vec();
    let t = tape.reshape(x, &[s[0], h, w, s[2]])?;
    tape.permute(t, &[0, 3, 1, 2])
}

/// Initial super tokens: the mean feature of every grid cell. [N, m, C].
pub fn init_supertokens(tape: &mut Tape, x: TensorId, grid: (usize, usize)) -> Result<TensorId> {
    let s = tape.shape(x).to_vec();
    let (n, c, height, width) = (s[0], s[1], s[2], s[3]);
    let gi = grid_info(height, width, grid)?;
    let r = tape.reshape(x, &[n, c, gi.gh, grid.0, gi.gw, grid.1])?;
    let p = tape.permute(r, &[0, 2, 4, 1, 3, 5])?; // [N, gh, gw, C, h, w]
    let m = tape.mean(p, &[4, 5], false)?; // [N, gh, gw, C]
    tape.reshape(m, &[n, gi.m, c])
}

/// 1/0 mask [n, m]: token i may associate with its 9 nearest super tokens,
/// a 3x3 cell window centered on the token's cell and shifted (not clipped)
/// at the grid border, so every token keeps min(9, m)-many candidates.
pub fn sparse_mask(gi: &GridInfo, grid: (usize, usize)) -> Tensor {
    let window = |c: usize, cells: usize| -> (usize, usize) {
        if cells <= 3 {
            return (0, cells);
        }
        let start = (c as isize - 1).clamp(0, cells as isize - 3) as usize;
        (start, start + 3)
    };
    let mut mask = vec![0.0; gi.n * gi.m];
    for y in 0..gi.h {
        for x in 0..gi.w {
            let token = y * gi.w + x;
            let (cy, cx) = (y / grid.0, x / grid.1);
            let (y0, y1) = window(cy, gi.gh);
            let (x0, x1) = window(cx, gi.gw);
            for jy in y0..y1 {
                for jx in x0..x1 {
                    mask[token * gi.m + jy * gi.gw + jx] = 1.0;
                }
            }
        }
    }
    Tensor::new(vec![gi.n, gi.m], mask).expect("sparse mask")
}

/// Q[i, j] = softmax_j(X_i . S_j / sqrt(C)), optionally restricted by a mask.
pub fn associate(
    tape: &mut Tape,
    tokens: TensorId,
    supertokens: TensorId,
    mask: Option<&Tensor>,
) -> Result<TensorId> {
    let c = *tape.shape(tokens).last().unwrap();
    let st = tape.permute(supertokens, &[0, 2, 1])?; // [N, C, m]
    let logits = tape.matmul(tokens, st)?; // [N, n, m]
    let scaled = tape.mul_scalar(logits, 1.0 / (c as f64).sqrt());
    match mask {
        Some(m) => tape.softmax_masked(scaled, 2, m),
        None => tape.softmax(scaled, 2),
    }
}

/// S = column-normalized(Q)^T X. A column with zero mass keeps the previous
/// super token (cannot happen with softmax rows, but the contract is kept).
pub fn update_supertokens(
    tape: &mut Tape,
    q: TensorId,
    tokens: TensorId,
    s_prev: TensorId,
) -> Result<TensorId> {
    let colsum = tape.sum(q, &[1], true)?; // [N, 1, m]
    let has_zero = tape.value(colsum).data().iter().any(|&v| v <= 0.0);
    if !has_zero {
        let qhat = tape.div(q, colsum)?;
        let qt = tape.permute(qhat, &[0, 2, 1])?; // [N, m, n]
        return tape.matmul(qt, tokens);
    }
    // degenerate columns: normalize against a clamped mass and splice the
    // previous super tokens back in
    let safe = tape.clamp(colsum, 1e-30, f64::INFINITY);
    let qhat = tape.div(q, safe)?;
    let qt = tape.permute(qhat, &[0, 2, 1])?;
    let updated = tape.matmul(qt, tokens)?;
    let cs = tape.value(colsum).clone();
    let dims = tape.shape(updated).to_vec(); // [N, m, C]
    let mut pos = Tensor::zeros(&[dims[0], dims[1], 1]);
    for (i, &v) in cs.data().iter().enumerate() {
        pos.data_mut()[i] = if v > 0.0 { 1.0 } else { 0.0 };
    }
    let neg = pos.map(|v| 1.0 - v);
    let posm = tape.constant(pos);
    let negm = tape.constant(neg);
    let keep_new = tape.mul(updated, posm)?;
    let keep_old = tape.mul(s_prev, negm)?;
    tape.add(keep_new, keep_old)
}

/// X_out[i] = sum_j Q[i, j] * S[j], folded back to NCHW.
pub fn token_upsample(
    tape: &mut Tape,
    q: TensorId,
    s_refined: TensorId,
    h: usize,
    w: usize,
) -> Result<TensorId> {
    let x = tape.matmul(q, s_refined)?; // [N, n, C]
    from_tokens(tape, x, h, w)
}

// ---------------------------------------------------------------------------
// the bottleneck block
// ---------------------------------------------------------------------------

#[derive(Clone, Debug)]
pub struct RmSvit {
    pub cfg: RmSvitConfig,
    pub channels: usize,
    pub q_proj: Linear,
    pub k_proj: Linear,
    pub v_proj: Linear,
    pub out_conv: Conv2d,
    pub ln_gain: Tensor,
    pub ln_bias: Tensor,
}

impl RmSvit {
    pub fn new(rng: &mut Rng, channels: usize, cfg: RmSvitConfig) -> Result<Self> {
        if cfg.heads == 0 || channels % cfg.heads != 0 {
            return Err(Error::Config(format!(
                "attention heads {} must divide channel width {}",
                cfg.heads, channels
            )));
        }
        Ok(RmSvit {
            cfg,
            channels,
            q_proj: Linear::new(rng, channels, channels),
            k_proj: Linear::new(rng, channels, channels),
            v_proj: Linear::new(rng, channels, channels),
            out_conv: Conv2d::new(rng, channels, channels, 1, ConvSpec::unit(0), true),
            ln_gain: Tensor::ones(&[channels]),
            ln_bias: Tensor::zeros(&[channels]),
        })
    }

    /// Multi-head attention over the super tokens, 1x1 conv projection on
    /// the super-token grid, residual sum, layer norm.
    pub fn rmba(
        &self,
        fw: &mut Forward,
        scope: &str,
        s: TensorId,
        gh: usize,
        gw: usize,
    ) -> Result<TensorId> {
        let dims = fw.tape.shape(s).to_vec(); // [N, m, C]
        let (n, m, c) = (dims[0], dims[1], dims[2]);
        let heads = self.cfg.heads;
        let dh = c / heads;

        let q = self.q_proj.forward(fw, &child_scope(scope, "q"), s)?;
        let k = self.k_proj.forward(fw, &child_scope(scope, "k"), s)?;
        let v = self.v_proj.forward(fw, &child_scope(scope, "v"), s)?;

        let split = |fw: &mut Forward, t: TensorId| -> Result<TensorId> {
            let r = fw.tape.reshape(t, &[n, m, heads, dh])?;
            fw.tape.permute(r, &[0, 2, 1, 3]) // [N, heads, m, dh]
        };
        let qh = split(fw, q)?;
        let kh = split(fw, k)?;
        let vh = split(fw, v)?;

        let kt = fw.tape.permute(kh, &[0, 1, 3, 2])?; // [N, heads, dh, m]
        let logits = fw.tape.matmul(qh, kt)?; // [N, heads, m, m]
        let scaled = fw.tape.mul_scalar(logits, 1.0 / (dh as f64).sqrt());
        let attn = fw.tape.softmax(scaled, 3)?;
        let ctx = fw.tape.matmul(attn, vh)?; // [N, heads, m, dh]
        let merged = fw.tape.permute(ctx, &[0, 2, 1, 3])?;
        let merged = fw.tape.reshape(merged, &[n, m, c])?;

        // 1x1 conv projection on the super-token grid
        let grid = from_tokens(fw.tape, merged, gh, gw)?;
        let proj = self.out_conv.forward(fw, &child_scope(scope, "proj"), grid)?;
        let proj = to_tokens(fw.tape, proj)?;

        let res = fw.tape.add(proj, s)?;
        let gain = fw.param(child_scope(scope, "ln.gain"), &self.ln_gain);
        let bias = fw.param(child_scope(scope, "ln.bias"), &self.ln_bias);
        fw.tape.layernorm(res, gain, bias, 1e-5)
    }

    /// Full bottleneck pass; output has the input's NCHW shape.
    pub fn forward(&self, fw: &mut Forward, scope: &str, x: TensorId) -> Result<TensorId> {
        let dims = fw.tape.shape(x).to_vec();
        let (c, height, width) = (dims[1], dims[2], dims[3]);
        if c != self.channels {
            return Err(Error::shape(
                "rm_svit",
                format!("configured for {} channels, input has {}", self.channels, c),
            ));
        }
        let gi = grid_info(height, width, self.cfg.grid)?;
        let mask = if self.cfg.sparse {
            Some(sparse_mask(&gi, self.cfg.grid))
        } else {
            None
        };

        let tokens = to_tokens(fw.tape, x)?;
        let mut s = init_supertokens(fw.tape, x, self.cfg.grid)?;
        for _ in 0..self.cfg.n_iter {
            let q = associate(fw.tape, tokens, s, mask.as_ref())?;
            s = update_supertokens(fw.tape, q, tokens, s)?;
            if self.cfg.detach_iters {
                s = fw.tape.detach(s);
            }
        }
        let q_final = associate(fw.tape, tokens, s, mask.as_ref())?;
        let refined = self.rmba(fw, scope, s, gi.gh, gi.gw)?;
        token_upsample(fw.tape, q_final, refined, height, width)
    }
}

impl Params for RmSvit {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor, ParamKind)) {
        self.q_proj.visit(&child_scope(prefix, "q"), f);
        self.k_proj.visit(&child_scope(prefix, "k"), f);
        self.v_proj.visit(&child_scope(prefix, "v"), f);
        self.out_conv.visit(&child_scope(prefix, "proj"), f);
        f(child_scope(prefix, "ln.gain"), &self.ln_gain, ParamKind::Trainable);
        f(child_scope(prefix, "ln.bias"), &self.ln_bias, ParamKind::Trainable);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor, ParamKind)) {
        self.q_proj.visit_mut(&child_scope(prefix, "q"), f);
        self.k_proj.visit_mut(&child_scope(prefix, "k"), f);
        self.v_proj.visit_mut(&child_scope(prefix, "v"), f);
        self.out_conv.visit_mut(&child_scope(prefix, "proj"), f);
        f(child_scope(prefix, "ln.gain"), &mut self.ln_gain, ParamKind::Trainable);
        f(child_scope(prefix, "ln.bias"), &mut self.ln_bias, ParamKind::Trainable);
    }
}
