//! The full U-shaped network: DWF encoder head, three D2BR + maxpool
//! downsampling stages, RM-SViT bottleneck, DWF decoder head, three
//! transposed-conv upsampling stages with S2-MLP Link skips, 1x1 sigmoid
//! output.
//!
//! Every building block can be switched back to its plain U-Net counterpart
//! (`structured_convs`, `use_rm_svit`, `use_s2_links`) so single-block
//! ablation variants and the classic baseline share one implementation.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, TensorId};
use crate::blocks::{
    child_scope, Conv2d, ConvTranspose2d, D2brConv, DropBlockParams, DwfConv, Forward, ParamKind,
    Params, PlainConv,
};
use crate::error::{Error, Result};
use crate::ops::ConvSpec;
use crate::rng::Rng;
use crate::s2link::S2Link;
use crate::svit::{RmSvit, RmSvitConfig};
use crate::tensor::Tensor;

/// Downsampling stages; fixed by the architecture.
pub const DEPTH: usize = 3;

fn default_true() -> bool {
    true
}
fn default_lka_repeats() -> usize {
    1
}
fn default_in_channels() -> usize {
    1
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ModelConfig {
    #[serde(default = "default_in_channels")]
    pub in_channels: usize,
    pub base_channels: usize,
    /// (H, W); must be divisible by 2^3 = 8.
    pub input_size: (usize, usize),
    #[serde(default)]
    pub rm_svit: RmSvitConfig,
    #[serde(default)]
    pub dropblock: DropBlockParams,
    /// LKA repetitions per DWF conv sub-stage.
    #[serde(default = "default_lka_repeats")]
    pub lka_repeats: usize,
    /// Use DWF/D2BR blocks instead of plain double convs.
    #[serde(default = "default_true")]
    pub structured_convs: bool,
    #[serde(default = "default_true")]
    pub use_rm_svit: bool,
    #[serde(default = "default_true")]
    pub use_s2_links: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            in_channels: 1,
            base_channels: 16,
            input_size: (128, 128),
            rm_svit: RmSvitConfig::default(),
            dropblock: DropBlockParams::default(),
            lka_repeats: 1,
            structured_convs: true,
            use_rm_svit: true,
            use_s2_links: true,
        }
    }
}

impl ModelConfig {
    /// Channel width at encoder stage k (0 = full resolution).
    pub fn stage_channels(&self, stage: usize) -> usize {
        self.base_channels << stage
    }

    pub fn bottleneck_channels(&self) -> usize {
        self.stage_channels(DEPTH)
    }

    pub fn validate(&self) -> Result<()> {
        let (h, w) = self.input_size;
        let div = 1 << DEPTH;
        if self.in_channels == 0 || self.base_channels == 0 {
            return Err(Error::Config("channel widths must be positive".into()));
        }
        if h % div != 0 || w % div != 0 {
            return Err(Error::Config(format!(
                "input size {}x{} must be divisible by {} ({} downsamplings)",
                h, w, div, DEPTH
            )));
        }
        let (bh, bw) = (h / div, w / div);
        if self.use_rm_svit {
            let (gh, gw) = self.rm_svit.grid;
            if gh == 0 || gw == 0 || bh % gh != 0 || bw % gw != 0 {
                return Err(Error::Config(format!(
                    "bottleneck map {}x{} is not divisible by the super-token grid {}x{}",
                    bh, bw, gh, gw
                )));
            }
            let c = self.bottleneck_channels();
            if self.rm_svit.heads == 0 || c % self.rm_svit.heads != 0 {
                return Err(Error::Config(format!(
                    "attention heads {} must divide bottleneck channels {}",
                    self.rm_svit.heads, c
                )));
            }
        }
        if self.use_s2_links && self.base_channels % 4 != 0 {
            return Err(Error::Config(format!(
                "base_channels {} must be divisible by 4 for the spatial-shift links",
                self.base_channels
            )));
        }
        self.dropblock.validate()?;
        Ok(())
    }
}

/// Encoder/decoder conv stage: structured block or the plain baseline block.
#[derive(Clone, Debug)]
pub enum ConvBlock {
    Dwf(DwfConv),
    D2br(D2brConv),
    Plain(PlainConv),
}

impl ConvBlock {
    fn forward(&self, fw: &mut Forward, scope: &str, x: TensorId) -> Result<TensorId> {
        match self {
            ConvBlock::Dwf(b) => b.forward(fw, &child_scope(scope, "dwf"), x),
            ConvBlock::D2br(b) => b.forward(fw, &child_scope(scope, "d2br"), x),
            ConvBlock::Plain(b) => b.forward(fw, &child_scope(scope, "conv"), x),
        }
    }
}

impl Params for ConvBlock {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor, ParamKind)) {
        match self {
            ConvBlock::Dwf(b) => b.visit(&child_scope(prefix, "dwf"), f),
            ConvBlock::D2br(b) => b.visit(&child_scope(prefix, "d2br"), f),
            ConvBlock::Plain(b) => b.visit(&child_scope(prefix, "conv"), f),
        }
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor, ParamKind)) {
        match self {
            ConvBlock::Dwf(b) => b.visit_mut(&child_scope(prefix, "dwf"), f),
            ConvBlock::D2br(b) => b.visit_mut(&child_scope(prefix, "d2br"), f),
            ConvBlock::Plain(b) => b.visit_mut(&child_scope(prefix, "conv"), f),
        }
    }
}

#[derive(Clone, Debug)]
pub struct Model {
    pub cfg: ModelConfig,
    enc0: ConvBlock,
    downs: Vec<ConvBlock>,
    svit: Option<RmSvit>,
    dec_head: Option<ConvBlock>,
    ups: Vec<ConvTranspose2d>,
    links: Option<Vec<S2Link>>,
    decs: Vec<ConvBlock>,
    head: Conv2d,
}

impl Model {
    /// Deterministic seeded build: Kaiming-uniform conv/linear weights,
    /// zero biases, unit norm gains.
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Model> {
        cfg.validate()?;
        let mut rng = Rng::new(seed);
        let b = cfg.base_channels;
        let drop = cfg.dropblock;

        let enc0 = if cfg.structured_convs {
            ConvBlock::Dwf(DwfConv::new(&mut rng, cfg.in_channels, b, cfg.lka_repeats))
        } else {
            ConvBlock::Plain(PlainConv::new(&mut rng, cfg.in_channels, b))
        };

        let mut downs = Vec::with_capacity(DEPTH);
        for k in 0..DEPTH {
            let (ci, co) = (cfg.stage_channels(k), cfg.stage_channels(k + 1));
            downs.push(if cfg.structured_convs {
                ConvBlock::D2br(D2brConv::new(&mut rng, ci, co, drop))
            } else {
                ConvBlock::Plain(PlainConv::new(&mut rng, ci, co))
            });
        }

        let cb = cfg.bottleneck_channels();
        let svit = if cfg.use_rm_svit {
            Some(RmSvit::new(&mut rng, cb, cfg.rm_svit)?)
        } else {
            None
        };

        let dec_head = if cfg.structured_convs {
            Some(ConvBlock::Dwf(DwfConv::new(&mut rng, cb, cb, cfg.lka_repeats)))
        } else {
            None
        };

        let mut ups = Vec::with_capacity(DEPTH);
        let mut decs = Vec::with_capacity(DEPTH);
        let mut links = if cfg.use_s2_links { Some(Vec::with_capacity(DEPTH)) } else { None };
        for k in (0..DEPTH).rev() {
            // stage k: upsample 2^(k+1)*b -> 2^k*b, concat with skip, conv back
            let (ci, co) = (cfg.stage_channels(k + 1), cfg.stage_channels(k));
            ups.push(ConvTranspose2d::new(&mut rng, ci, co));
            if let Some(links) = links.as_mut() {
                links.push(S2Link::new(&mut rng, co)?);
            }
            decs.push(if cfg.structured_convs {
                ConvBlock::D2br(D2brConv::new(&mut rng, ci, co, drop))
            } else {
                ConvBlock::Plain(PlainConv::new(&mut rng, ci, co))
            });
        }

        let head = Conv2d::new(&mut rng, b, 1, 1, ConvSpec::unit(0), true);

        Ok(Model {
            cfg,
            enc0,
            downs,
            svit,
            dec_head,
            ups,
            links,
            decs,
            head,
        })
    }

    /// Forward pass on the tape; output is N x 1 x H x W of sigmoid
    /// probabilities.
    pub fn forward(&self, fw: &mut Forward, x: TensorId) -> Result<TensorId> {
        let dims = fw.tape.shape(x).to_vec();
        let (h, w) = self.cfg.input_size;
        if dims.len() != 4 || dims[1] != self.cfg.in_channels || dims[2] != h || dims[3] != w {
            return Err(Error::shape(
                "model",
                format!(
                    "expected [N,{},{},{}], got {:?}",
                    self.cfg.in_channels, h, w, dims
                ),
            ));
        }

        let mut skips = Vec::with_capacity(DEPTH);
        let mut cur = self.enc0.forward(fw, "enc0", x)?;
        skips.push(cur);
        for (k, down) in self.downs.iter().enumerate() {
            let pooled = fw.tape.maxpool2d(cur)?;
            cur = down.forward(fw, &format!("down{}", k + 1), pooled)?;
            if k + 1 < DEPTH {
                skips.push(cur);
            }
        }

        if let Some(svit) = &self.svit {
            cur = svit.forward(fw, "bottleneck.rmsvit", cur)?;
        }
        if let Some(head) = &self.dec_head {
            cur = head.forward(fw, "dec_head", cur)?;
        }

        for (i, up) in self.ups.iter().enumerate() {
            let skip_idx = DEPTH - 1 - i; // deepest skip first
            let upsampled = up.forward(fw, &format!("up{}", i + 1), cur)?;
            let skip = skips[skip_idx];
            let routed = match &self.links {
                Some(links) => {
                    links[i].forward(fw, &format!("skip{}.s2link", skip_idx), skip)?
                }
                None => skip,
            };
            let cat = fw.tape.concat(&[routed, upsampled], 1)?;
            cur = self.decs[i].forward(fw, &format!("dec{}", i + 1), cat)?;
        }

        let logits = self.head.forward(fw, "head", cur)?;
        Ok(fw.tape.sigmoid(logits))
    }

    /// Eval-mode inference outside any training step.
    pub fn infer(&self, x: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let xid = tape.constant(x.clone());
        let mut fw = Forward::new(&mut tape, false, Rng::new(0));
        let out = self.forward(&mut fw, xid)?;
        Ok(tape.value(out).clone())
    }

    /// Named tensors in tree order.
    pub fn named_tensors(&self) -> Vec<(String, Tensor, ParamKind)> {
        let mut out = Vec::new();
        self.visit("", &mut |name, t, kind| out.push((name, t.clone(), kind)));
        out
    }

    pub fn trainable_count(&self) -> usize {
        let mut n = 0;
        self.visit("", &mut |_, t, kind| {
            if kind == ParamKind::Trainable {
                n += t.numel();
            }
        });
        n
    }

    /// Write running-stat updates captured during a training step.
    pub fn apply_stat_updates(&mut self, updates: &[(String, Tensor)]) -> Result<()> {
        use std::collections::HashMap;
        let mut pending: HashMap<&str, &Tensor> =
            updates.iter().map(|(n, t)| (n.as_str(), t)).collect();
        self.visit_mut("", &mut |name, t, _| {
            if let Some(new) = pending.remove(name.as_str()) {
                *t = new.clone();
            }
        });
        if !pending.is_empty() {
            let mut names: Vec<&str> = pending.keys().copied().collect();
            names.sort_unstable();
            return Err(Error::Config(format!(
                "stat updates for unknown tensors: {}",
                names.join(", ")
            )));
        }
        Ok(())
    }
}

impl Params for Model {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor, ParamKind)) {
        self.enc0.visit(&child_scope(prefix, "enc0"), f);
        for (k, d) in self.downs.iter().enumerate() {
            d.visit(&child_scope(prefix, &format!("down{}", k + 1)), f);
        }
        if let Some(svit) = &self.svit {
            svit.visit(&child_scope(prefix, "bottleneck.rmsvit"), f);
        }
        if let Some(head) = &self.dec_head {
            head.visit(&child_scope(prefix, "dec_head"), f);
        }
        for (i, up) in self.ups.iter().enumerate() {
            up.visit(&child_scope(prefix, &format!("up{}", i + 1)), f);
            if let Some(links) = &self.links {
                links[i].visit(
                    &child_scope(prefix, &format!("skip{}.s2link", DEPTH - 1 - i)),
                    f,
                );
            }
            self.decs[i].visit(&child_scope(prefix, &format!("dec{}", i + 1)), f);
        }
        self.head.visit(&child_scope(prefix, "head"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor, ParamKind)) {
        self.enc0.visit_mut(&child_scope(prefix, "enc0"), f);
        for (k, d) in self.downs.iter_mut().enumerate() {
            d.visit_mut(&child_scope(prefix, &format!("down{}", k + 1)), f);
        }
        if let Some(svit) = &mut self.svit {
            svit.visit_mut(&child_scope(prefix, "bottleneck.rmsvit"), f);
        }
        if let Some(head) = &mut self.dec_head {
            head.visit_mut(&child_scope(prefix, "dec_head"), f);
        }
        for i in 0..self.ups.len() {
            self.ups[i].visit_mut(&child_scope(prefix, &format!("up{}", i + 1)), f);
            if let Some(links) = &mut self.links {
                links[i].visit_mut(
                    &child_scope(prefix, &format!("skip{}.s2link", DEPTH - 1 - i)),
                    f,
                );
            }
            self.decs[i].visit_mut(&child_scope(prefix, &format!("dec{}", i + 1)), f);
        }
        self.head.visit_mut(&child_scope(prefix, "head"), f);
    }
}
