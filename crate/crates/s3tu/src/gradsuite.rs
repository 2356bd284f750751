//! Named finite-difference check cases covering every differentiable op and
//! block: the standard suite behind the `gradcheck` CLI command and the
//! gradient acceptance tests.

use std::collections::HashMap;

use crate::autodiff::TensorId;
use crate::blocks::{
    D2brConv, DropBlockParams, DwfConv, Forward, Lka, ParamKind, Params, ScalableRelu,
};
use crate::error::{Error, Result};
use crate::gradcheck::{check, rand_input, CheckConfig, CheckReport, ForwardFn};
use crate::metrics::bce_dice_loss;
use crate::model::{Model, ModelConfig};
use crate::ops::ConvSpec;
use crate::rng::Rng;
use crate::s2link::{spatial_shift_ss1, spatial_shift_ss2, S2Link, SplitAttention};
use crate::svit::{RmSvit, RmSvitConfig};
use crate::tensor::Tensor;

pub const CASES: &[&str] = &[
    "conv2d",
    "conv2d_grouped",
    "pool_and_upconv",
    "matmul_softmax",
    "scalar_ops",
    "batchnorm_train",
    "batchnorm_eval",
    "layernorm",
    "scalable_relu",
    "lka",
    "dwf",
    "d2br_eval",
    "rm_svit_iter0",
    "rm_svit_iter1",
    "rm_svit_iter2",
    "ss1",
    "ss2",
    "split_attention",
    "s2_link",
    "model_tiny",
    "bce_dice",
];

/// Run one named case.
pub fn run_case(name: &str, cfg: &CheckConfig) -> Result<CheckReport> {
    let mut rng = Rng::new(0xC0FFEE ^ name.len() as u64);
    match name {
        "conv2d" => {
            let x = rand_input(&mut rng, &[2, 3, 5, 5]);
            let w = rand_input(&mut rng, &[4, 3, 3, 3]);
            let b = rand_input(&mut rng, &[4]);
            let f: ForwardFn = &|t, ids| {
                let y = t.conv2d(ids[0], ids[1], Some(ids[2]), ConvSpec::unit(1))?;
                let sq = t.mul(y, y)?;
                t.mean_all(sq)
            };
            check(name, &[x, w, b], f, cfg)
        }
        "conv2d_grouped" => {
            // depthwise, dilated, stride 2
            let x = rand_input(&mut rng, &[1, 4, 7, 7]);
            let w = rand_input(&mut rng, &[4, 1, 3, 3]);
            let f: ForwardFn = &|t, ids| {
                let spec = ConvSpec {
                    stride: 2,
                    pad: 2,
                    dilation: 2,
                    groups: 4,
                };
                let y = t.conv2d(ids[0], ids[1], None, spec)?;
                let sq = t.mul(y, y)?;
                t.mean_all(sq)
            };
            check(name, &[x, w], f, cfg)
        }
        "pool_and_upconv" => {
            let x = rand_input(&mut rng, &[1, 2, 4, 4]);
            let w = rand_input(&mut rng, &[2, 3, 2, 2]);
            let b = rand_input(&mut rng, &[3]);
            let f: ForwardFn = &|t, ids| {
                let p = t.maxpool2d(ids[0])?;
                let y = t.conv_transpose2d(p, ids[1], Some(ids[2]))?;
                let sq = t.mul(y, y)?;
                t.mean_all(sq)
            };
            check(name, &[x, w, b], f, cfg)
        }
        "matmul_softmax" => {
            // attention-shaped computation with a batched matmul
            let q = rand_input(&mut rng, &[2, 3, 4]);
            let k = rand_input(&mut rng, &[2, 3, 4]);
            let v = rand_input(&mut rng, &[2, 3, 4]);
            let f: ForwardFn = &|t, ids| {
                let kt = t.permute(ids[1], &[0, 2, 1])?;
                let logits = t.matmul(ids[0], kt)?;
                let attn = t.softmax(logits, 2)?;
                let y = t.matmul(attn, ids[2])?;
                let sq = t.mul(y, y)?;
                t.mean_all(sq)
            };
            check(name, &[q, k, v], f, cfg)
        }
        "scalar_ops" => {
            let x = rand_input(&mut rng, &[8]);
            let f: ForwardFn = &|t, ids| {
                let s = t.sigmoid(ids[0]);
                let g = t.gelu(ids[0]);
                let e0 = t.mul_scalar(ids[0], 0.3);
                let e = t.exp(e0);
                let sg = t.mul(s, g)?;
                let mix = t.add(sg, e)?;
                let shifted = t.add_scalar(mix, 2.0);
                let l = t.ln(shifted)?;
                let d = t.div(l, shifted)?;
                let sub = t.sub(d, s)?;
                t.mean_all(sub)
            };
            check(name, &[x], f, cfg)
        }
        "batchnorm_train" => {
            let x = rand_input(&mut rng, &[4, 2, 3, 3]);
            let gamma = rand_input(&mut rng, &[2]);
            let beta = rand_input(&mut rng, &[2]);
            let f: ForwardFn = &|t, ids| {
                let (y, _, _) = t.batchnorm_train(ids[0], ids[1], ids[2], 1e-5)?;
                let sq = t.mul(y, y)?;
                t.mean_all(sq)
            };
            check(name, &[x, gamma, beta], f, cfg)
        }
        "batchnorm_eval" => {
            let x = rand_input(&mut rng, &[2, 3, 3, 3]);
            let gamma = rand_input(&mut rng, &[3]);
            let beta = rand_input(&mut rng, &[3]);
            let f: ForwardFn = &|t, ids| {
                let mean = Tensor::new(vec![3], vec![0.1, -0.2, 0.3]).unwrap();
                let var = Tensor::new(vec![3], vec![0.9, 1.1, 0.7]).unwrap();
                let y = t.batchnorm_eval(ids[0], ids[1], ids[2], &mean, &var, 1e-5)?;
                let sq = t.mul(y, y)?;
                t.mean_all(sq)
            };
            check(name, &[x, gamma, beta], f, cfg)
        }
        "layernorm" => {
            let x = rand_input(&mut rng, &[3, 6]);
            let gain = rand_input(&mut rng, &[6]);
            let bias = rand_input(&mut rng, &[6]);
            let f: ForwardFn = &|t, ids| {
                let y = t.layernorm(ids[0], ids[1], ids[2], 1e-5)?;
                let sq = t.mul(y, y)?;
                t.mean_all(sq)
            };
            check(name, &[x, gain, bias], f, cfg)
        }
        "scalable_relu" => {
            let act = ScalableRelu::new(3);
            block_case(name, &act, "srelu", rand_input(&mut rng, &[1, 3, 4, 4]), cfg, |fw, x| {
                let a = act.clone();
                a.forward(fw, "srelu", x)
            })
        }
        "lka" => {
            let lka = Lka::new(&mut rng, 2);
            let x = rand_input(&mut rng, &[1, 2, 6, 6]);
            block_case(name, &lka, "lka", x, cfg, |fw, x| lka.forward(fw, "lka", x))
        }
        "dwf" => {
            let dwf = DwfConv::new(&mut rng, 2, 3, 1);
            let x = rand_input(&mut rng, &[1, 2, 6, 6]);
            block_case(name, &dwf, "dwf", x, cfg, |fw, x| dwf.forward(fw, "dwf", x))
        }
        "d2br_eval" => {
            let blk = D2brConv::new(&mut rng, 2, 3, DropBlockParams::default());
            let x = rand_input(&mut rng, &[1, 2, 6, 6]);
            block_case(name, &blk, "d2br", x, cfg, |fw, x| blk.forward(fw, "d2br", x))
        }
        "rm_svit_iter0" | "rm_svit_iter1" | "rm_svit_iter2" => {
            let n_iter = name.as_bytes()[name.len() - 1] - b'0';
            let svit = RmSvit::new(
                &mut rng,
                4,
                RmSvitConfig {
                    grid: (2, 2),
                    n_iter: n_iter as usize,
                    heads: 2,
                    sparse: true,
                    detach_iters: false,
                },
            )?;
            let x = rand_input(&mut rng, &[1, 4, 8, 8]);
            block_case(name, &svit, "svit", x, cfg, |fw, x| svit.forward(fw, "svit", x))
        }
        "ss1" => {
            let x = rand_input(&mut rng, &[1, 3, 3, 4]);
            let f: ForwardFn = &|t, ids| {
                let y = spatial_shift_ss1(t, ids[0])?;
                let sq = t.mul(y, y)?;
                t.mean_all(sq)
            };
            check(name, &[x], f, cfg)
        }
        "ss2" => {
            let x = rand_input(&mut rng, &[1, 3, 3, 4]);
            let f: ForwardFn = &|t, ids| {
                let y = spatial_shift_ss2(t, ids[0])?;
                let sq = t.mul(y, y)?;
                t.mean_all(sq)
            };
            check(name, &[x], f, cfg)
        }
        "split_attention" => {
            let attn = SplitAttention::new(&mut rng, 4, 3);
            let mut names = Vec::new();
            let mut params = vec![
                rand_input(&mut rng, &[1, 4, 4]),
                rand_input(&mut rng, &[1, 4, 4]),
                rand_input(&mut rng, &[1, 4, 4]),
            ];
            attn.visit("attn", &mut |n, t, k| {
                if k == ParamKind::Trainable {
                    names.push(n);
                    params.push(t.clone());
                }
            });
            let f: ForwardFn = &|t, ids| {
                let bindings: HashMap<String, TensorId> = names
                    .iter()
                    .cloned()
                    .zip(ids[3..].iter().copied())
                    .collect();
                let mut fw = Forward::with_bindings(t, false, Rng::new(0), bindings);
                let y = attn.forward(&mut fw, "attn", &ids[0..3])?;
                let sq = t.mul(y, y)?;
                t.mean_all(sq)
            };
            check(name, &params, f, cfg)
        }
        "s2_link" => {
            let link = S2Link::new(&mut rng, 4)?;
            let x = rand_input(&mut rng, &[1, 4, 4, 4]);
            block_case(name, &link, "link", x, cfg, |fw, x| link.forward(fw, "link", x))
        }
        "model_tiny" => {
            let model = Model::new(tiny_model_config(), 42)?;
            let x = rand_input(&mut rng, &[1, 1, 32, 32]).map(|v| v.abs());
            // A 3x-pooled relu network has thousands of kinks; probe windows
            // that straddle one say nothing about the gradient rule, so the
            // whole-model check runs with a smaller step plus the smoothness
            // screen. Per-block cases above stay strict at step 1e-4.
            let local = CheckConfig {
                max_coords: 3,
                eps: 1e-5,
                smooth_screen: true,
                ..*cfg
            };
            block_case(name, &model, "", x, &local, |fw, x| model.forward(fw, x))
        }
        "bce_dice" => {
            let logits = rand_input(&mut rng, &[12]).map(|v| v * 2.0);
            let mask: Vec<f64> = (0..12).map(|_| f64::from(rng.bernoulli(0.5))).collect();
            let g = Tensor::new(vec![12], mask)?;
            let f = move |t: &mut crate::autodiff::Tape, ids: &[TensorId]| -> Result<TensorId> {
                let p = t.sigmoid(ids[0]);
                let gt = t.constant(g.clone());
                bce_dice_loss(t, p, gt, 0.5, 0.5)
            };
            check(name, &[logits], &f, cfg)
        }
        other => Err(Error::Config(format!(
            "unknown gradcheck case '{other}'; known: {}",
            CASES.join(", ")
        ))),
    }
}

/// Tiny full-model configuration used by the gradient check. The smallest
/// base width compatible with the spatial-shift links (channels divisible
/// by 4) is 4.
pub fn tiny_model_config() -> ModelConfig {
    ModelConfig {
        in_channels: 1,
        base_channels: 4,
        input_size: (32, 32),
        rm_svit: RmSvitConfig {
            grid: (2, 2),
            n_iter: 1,
            heads: 2,
            sparse: true,
            detach_iters: false,
        },
        dropblock: DropBlockParams::default(),
        lka_repeats: 1,
        structured_convs: true,
        use_rm_svit: true,
        use_s2_links: true,
    }
}

/// Run every case whose name contains `scope` (all cases when None).
pub fn run_suite(scope: Option<&str>, cfg: &CheckConfig) -> Result<Vec<CheckReport>> {
    let selected: Vec<&&str> = CASES
        .iter()
        .filter(|c| scope.map_or(true, |s| c.contains(s)))
        .collect();
    if selected.is_empty() {
        return Err(Error::Config(format!(
            "no gradcheck case matches '{}'; known: {}",
            scope.unwrap_or(""),
            CASES.join(", ")
        )));
    }
    selected.iter().map(|c| run_case(c, cfg)).collect()
}

/// Drive a Params block through the checker: parameters bind to leaves in
/// visitor order, the input is the first leaf, the loss is mean(out^2).
fn block_case<B: Params>(
    name: &str,
    block: &B,
    scope: &str,
    input: Tensor,
    cfg: &CheckConfig,
    run: impl Fn(&mut Forward, TensorId) -> Result<TensorId>,
) -> Result<CheckReport> {
    let mut names = Vec::new();
    let mut params = vec![input];
    block.visit(scope, &mut |n, t, k| {
        if k == ParamKind::Trainable {
            names.push(n);
            params.push(t.clone());
        }
    });
    let f = |t: &mut crate::autodiff::Tape, ids: &[TensorId]| -> Result<TensorId> {
        let bindings: HashMap<String, TensorId> = names
            .iter()
            .cloned()
            .zip(ids[1..].iter().copied())
            .collect();
        let mut fw = Forward::with_bindings(t, false, Rng::new(0), bindings);
        let y = run(&mut fw, ids[0])?;
        let sq = t.mul(y, y)?;
        t.mean_all(sq)
    };
    check(name, &params, &f, cfg)
}
