//! Acceptance suite. Each test prints one pass/fail line; run with
//!
//! ```text
//! cargo test -p s3tu-cli --test acceptance -- --nocapture --test-threads 1
//! ```
//!
//! The training-based criteria share one seeded run (c07); the ablation and
//! reproducibility criteria reuse it, so the whole suite trains five models.

use std::sync::OnceLock;
use std::time::{Duration, Instant};

use s3tu::blocks::{dropblock_mask, DropBlockParams, Forward};
use s3tu::data::{generate_synthetic, SamplePair, SynthConfig};
use s3tu::gradcheck::CheckConfig;
use s3tu::gradsuite;
use s3tu::metrics;
use s3tu::model::ModelConfig;
use s3tu::ops::{self, ConvSpec};
use s3tu::rng::Rng;
use s3tu::svit::{self, grid_info, sparse_mask, RmSvitConfig};
use s3tu::tensor::Tensor;
use s3tu::autodiff::Tape;
use s3tu_cli::trainer::{self, split_train_val, TrainConfig, TrainOutcome};

fn report(criterion: &str, pass: bool, detail: &str) {
    println!(
        "[acceptance] {criterion}: {} ({detail})",
        if pass { "PASS" } else { "FAIL" }
    );
    assert!(pass, "{criterion} failed: {detail}");
}

// ---------------------------------------------------------------------------
// shared training runs
// ---------------------------------------------------------------------------

/// Tiny-but-real scale: base 16, 64x64 patches, 200 train / 50 val samples.
fn accept_model_cfg() -> ModelConfig {
    ModelConfig {
        in_channels: 1,
        base_channels: 16,
        input_size: (64, 64),
        rm_svit: RmSvitConfig {
            grid: (4, 4),
            n_iter: 1,
            heads: 4,
            sparse: true,
            detach_iters: false,
        },
        // half the default drop rate: at ~150 optimizer steps the full
        // network cannot absorb heavy DropBlock and still converge inside
        // the toy budget (the regularizer's own statistics are gated
        // separately in c06)
        dropblock: DropBlockParams {
            block_size: 7,
            drop_prob: 0.05,
        },
        lka_repeats: 1,
        structured_convs: true,
        use_rm_svit: true,
        use_s2_links: true,
    }
}

fn accept_synth_cfg() -> SynthConfig {
    SynthConfig {
        size: 64,
        n_samples: 250,
        seed: 20_240_101,
        blob_count: (1, 3),
        radius: (4.0, 14.0),
        contrast: (0.55, 0.95),
        noise_sigma: 0.05,
        irregularity: 0.15,
        background: 0.15,
    }
}

/// Budget frozen after calibration: the cosine horizon scales with the
/// epoch count, so short budgets also decay the lr faster and learn less
/// per epoch; 12 epochs put the full model at validation Dice ~0.97 while
/// staying well under the 30-epoch / 30-minute caps.
fn accept_train_cfg() -> TrainConfig {
    TrainConfig {
        lr: 0.001,
        batch_size: 16,
        epochs: 12,
        warmup_epochs: 1,
        seed: 42,
        w_bce: 0.5,
        w_dice: 0.5,
        val_fraction: 0.2,
        out_dir: None,
    }
}

struct MainRun {
    outcome: TrainOutcome,
    wall: Duration,
}

fn dataset() -> &'static (Vec<SamplePair>, Vec<SamplePair>) {
    static DATA: OnceLock<(Vec<SamplePair>, Vec<SamplePair>)> = OnceLock::new();
    DATA.get_or_init(|| {
        let samples = generate_synthetic(&accept_synth_cfg()).expect("synth dataset");
        split_train_val(&samples, 0.2)
    })
}

fn main_run() -> &'static MainRun {
    static RUN: OnceLock<MainRun> = OnceLock::new();
    RUN.get_or_init(|| {
        let (tr, va) = dataset();
        let start = Instant::now();
        let outcome =
            trainer::train(&accept_model_cfg(), &accept_train_cfg(), tr, va).expect("training");
        MainRun {
            outcome,
            wall: start.elapsed(),
        }
    })
}

// ---------------------------------------------------------------------------
// criteria
// ---------------------------------------------------------------------------

#[test]
fn c01_paper_scale_results_documented_not_reproduced() {
    // Full-scale results (DSC 89.04, mIoU 90.70, Pre 90.73, Sen 93.70 on
    // LIDC-IDRI) need the real dataset and GPU-scale training; this
    // repository documents them as reference only and gates on the
    // synthetic-task criteria below.
    let readme = std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/../../README.md"))
        .unwrap_or_default();
    let documented = ["89.04", "90.70", "90.73", "93.70"]
        .iter()
        .all(|v| readme.contains(v));
    report(
        "c01 reference-only paper results",
        documented,
        "README lists the full-scale reference metrics",
    );
}

#[test]
fn c02_gradient_suite_under_two_minutes() {
    let start = Instant::now();
    let reports = gradsuite::run_suite(None, &CheckConfig::default()).expect("suite runs");
    let elapsed = start.elapsed();
    for r in &reports {
        println!("    {}", r.line());
    }
    let all_pass = reports.iter().all(|r| r.pass);
    report(
        "c02 gradient suite",
        all_pass && elapsed < Duration::from_secs(120),
        &format!("{} cases in {:.1}s", reports.len(), elapsed.as_secs_f64()),
    );
}

#[test]
fn c03_oracle_equivalence() {
    let mut rng = Rng::new(0xACCE97);
    let mut max_err = 0.0f64;
    let mut conv_err = 0.0f64;
    let mut instances = 0;

    // conv2d vs a naive 7-loop oracle
    for _ in 0..100 {
        let n = 1 + rng.below(2);
        let g = 1 + rng.below(2);
        let (cig, cog) = (1 + rng.below(2), 1 + rng.below(2));
        let k = [1usize, 3][rng.below(2)];
        let pad = rng.below(2);
        let h = k.max(1 + rng.below(7));
        let w = k.max(1 + rng.below(7));
        let x = Tensor::rand_uniform(&mut rng, &[n, g * cig, h, w], -1.0, 1.0);
        let wt = Tensor::rand_uniform(&mut rng, &[g * cog, cig, k, k], -1.0, 1.0);
        let spec = ConvSpec {
            stride: 1,
            pad,
            dilation: 1,
            groups: g,
        };
        let fast = ops::conv2d_fwd(&x, &wt, None, &spec).unwrap();
        let (ho, wo) = ops::conv2d_out_dims(h, w, k, k, &spec).unwrap();
        for ni in 0..n {
            for c_out in 0..g * cog {
                let gi = c_out / cog;
                for oh in 0..ho {
                    for ow in 0..wo {
                        let mut acc = 0.0;
                        for cil in 0..cig {
                            for khi in 0..k {
                                for kwi in 0..k {
                                    let ih = (oh + khi) as isize - pad as isize;
                                    let iw = (ow + kwi) as isize - pad as isize;
                                    if ih >= 0 && iw >= 0 && (ih as usize) < h && (iw as usize) < w
                                    {
                                        acc += x.at(&[ni, gi * cig + cil, ih as usize, iw as usize])
                                            * wt.at(&[c_out, cil, khi, kwi]);
                                    }
                                }
                            }
                        }
                        conv_err = conv_err.max((acc - fast.at(&[ni, c_out, oh, ow])).abs());
                    }
                }
            }
        }
        instances += 1;
    }

    // batched matmul vs triple loop
    for _ in 0..100 {
        let (b, m, k, n) = (1 + rng.below(3), 1 + rng.below(4), 1 + rng.below(4), 1 + rng.below(4));
        let a = Tensor::rand_uniform(&mut rng, &[b, m, k], -1.0, 1.0);
        let bb = Tensor::rand_uniform(&mut rng, &[b, k, n], -1.0, 1.0);
        let fast = ops::matmul(&a, &bb).unwrap();
        for bi in 0..b {
            for i in 0..m {
                for j in 0..n {
                    let mut acc = 0.0;
                    for p in 0..k {
                        acc += a.at(&[bi, i, p]) * bb.at(&[bi, p, j]);
                    }
                    max_err = max_err.max((acc - fast.at(&[bi, i, j])).abs());
                }
            }
        }
        instances += 1;
    }

    // batch norm vs per-channel loops
    for _ in 0..100 {
        let (n, c, h, w) = (2 + rng.below(2), 1 + rng.below(3), 1 + rng.below(3), 1 + rng.below(3));
        let x = Tensor::rand_uniform(&mut rng, &[n, c, h, w], -2.0, 2.0);
        let gamma = Tensor::rand_uniform(&mut rng, &[c], 0.5, 1.5);
        let beta = Tensor::rand_uniform(&mut rng, &[c], -0.5, 0.5);
        let (mean, var) = ops::batch_stats(&x);
        let fast = ops::batchnorm_apply(&x, &gamma, &beta, &mean, &var, 1e-5);
        let mfl = (n * h * w) as f64;
        for ci in 0..c {
            let mut mu = 0.0;
            for ni in 0..n {
                for y in 0..h {
                    for xx in 0..w {
                        mu += x.at(&[ni, ci, y, xx]);
                    }
                }
            }
            mu /= mfl;
            let mut v2 = 0.0;
            for ni in 0..n {
                for y in 0..h {
                    for xx in 0..w {
                        v2 += (x.at(&[ni, ci, y, xx]) - mu).powi(2);
                    }
                }
            }
            v2 /= mfl;
            for ni in 0..n {
                for y in 0..h {
                    for xx in 0..w {
                        let want = (x.at(&[ni, ci, y, xx]) - mu) / (v2 + 1e-5).sqrt()
                            * gamma.data()[ci]
                            + beta.data()[ci];
                        max_err = max_err.max((want - fast.at(&[ni, ci, y, xx])).abs());
                    }
                }
            }
        }
        instances += 1;
    }

    // association + update vs scalar oracles
    for _ in 0..100 {
        let (n, nt, m, c) = (1, 2 + rng.below(5), 1 + rng.below(4), 1 + rng.below(4));
        let tokens = Tensor::rand_uniform(&mut rng, &[n, nt, c], -1.0, 1.0);
        let sup = Tensor::rand_uniform(&mut rng, &[n, m, c], -1.0, 1.0);
        let mut tape = Tape::new();
        let t = tape.constant(tokens.clone());
        let s = tape.constant(sup.clone());
        let q = svit::associate(&mut tape, t, s, None).unwrap();
        let qv = tape.value(q).clone();
        for i in 0..nt {
            let mut logits = vec![0.0; m];
            for j in 0..m {
                let mut dot = 0.0;
                for d in 0..c {
                    dot += tokens.at(&[0, i, d]) * sup.at(&[0, j, d]);
                }
                logits[j] = dot / (c as f64).sqrt();
            }
            let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = logits.iter().map(|&l| (l - mx).exp()).sum();
            for j in 0..m {
                let want = (logits[j] - mx).exp() / z;
                max_err = max_err.max((want - qv.at(&[0, i, j])).abs());
            }
        }
        let prev = tape.constant(Tensor::zeros(&[n, m, c]));
        let s_new = svit::update_supertokens(&mut tape, q, t, prev).unwrap();
        let sv = tape.value(s_new).clone();
        for j in 0..m {
            let colsum: f64 = (0..nt).map(|i| qv.at(&[0, i, j])).sum();
            for d in 0..c {
                let mut acc = 0.0;
                for i in 0..nt {
                    acc += qv.at(&[0, i, j]) / colsum * tokens.at(&[0, i, d]);
                }
                max_err = max_err.max((acc - sv.at(&[0, j, d])).abs());
            }
        }
        instances += 1;
    }

    // split attention vs scalar pipeline (uniform-weight special case plus
    // random weights through the library oracle battery is in the unit
    // tests; here the zero-MLP mean identity seals the wiring)
    for _ in 0..100 {
        let mut attn = s3tu::s2link::SplitAttention::new(&mut rng, 4, 3);
        use s3tu::blocks::Params;
        attn.visit_mut("a", &mut |_, t, _| *t = Tensor::zeros(t.shape()));
        let parts: Vec<Tensor> = (0..3)
            .map(|_| Tensor::rand_uniform(&mut rng, &[1, 3, 4], -1.0, 1.0))
            .collect();
        let mut tape = Tape::new();
        let ids: Vec<_> = parts.iter().map(|p| tape.constant(p.clone())).collect();
        let mut fw = Forward::new(&mut tape, false, Rng::new(0));
        let out = attn.forward(&mut fw, "a", &ids).unwrap();
        let ov = tape.value(out);
        for i in 0..ov.numel() {
            let want = (parts[0].data()[i] + parts[1].data()[i] + parts[2].data()[i]) / 3.0;
            max_err = max_err.max((want - ov.data()[i]).abs());
        }
        instances += 1;
    }

    // metrics vs confusion counting
    for _ in 0..100 {
        let p = Tensor::new(vec![16], (0..16).map(|_| rng.next_f64()).collect()).unwrap();
        let g = Tensor::new(vec![16], (0..16).map(|_| f64::from(rng.bernoulli(0.5))).collect())
            .unwrap();
        let (mut tp, mut fp, mut tn, mut fneg) = (0.0, 0.0, 0.0, 0.0);
        for (&pv, &gv) in p.data().iter().zip(g.data().iter()) {
            match (pv >= 0.5, gv != 0.0) {
                (true, true) => tp += 1.0,
                (true, false) => fp += 1.0,
                (false, false) => tn += 1.0,
                (false, true) => fneg += 1.0,
            }
        }
        let dsc_want = if 2.0 * tp + fp + fneg == 0.0 {
            1.0
        } else {
            2.0 * tp / (2.0 * tp + fp + fneg)
        };
        max_err = max_err.max((metrics::dsc(&p, &g, false).unwrap() - dsc_want).abs());
        max_err = max_err.max((metrics::accuracy(&p, &g).unwrap() - (tp + tn) / 16.0).abs());
        instances += 1;
    }

    let pass = conv_err < 1e-10 && max_err < 1e-9;
    report(
        "c03 oracle equivalence",
        pass,
        &format!("{instances} instances, conv err {conv_err:.2e}, other err {max_err:.2e}"),
    );
}

#[test]
fn c04_grid_exactness_and_q_normalization() {
    let mut rng = Rng::new(0xE41);
    let mut worst = 0.0f64;
    let mut configs = 0;
    for (h, w) in [(8usize, 8usize), (16, 16), (8, 16), (24, 16)] {
        for cell in [(1usize, 1usize), (2, 2), (4, 4), (8, 8), (2, 4)] {
            if h % cell.0 != 0 || w % cell.1 != 0 {
                continue;
            }
            let gi = grid_info(h, w, cell).unwrap();
            assert_eq!(gi.m * cell.0 * cell.1, h * w, "Eq-1 arithmetic must be exact");
            let x = Tensor::rand_uniform(&mut rng, &[1, 4, h, w], -1.0, 1.0);
            let mut tape = Tape::new();
            let xid = tape.constant(x);
            let tokens = svit::to_tokens(&mut tape, xid).unwrap();
            let s0 = svit::init_supertokens(&mut tape, xid, cell).unwrap();
            let mask = sparse_mask(&gi, cell);
            let q = svit::associate(&mut tape, tokens, s0, Some(&mask)).unwrap();
            let qv = tape.value(q);
            for i in 0..gi.n {
                let row: f64 = (0..gi.m).map(|j| qv.at(&[0, i, j])).sum();
                worst = worst.max((row - 1.0).abs());
                for j in 0..gi.m {
                    let v = qv.at(&[0, i, j]);
                    assert!((0.0..=1.0).contains(&v));
                }
            }
            configs += 1;
        }
    }
    report(
        "c04 Eq-1 exactness + Q rows",
        worst < 1e-9,
        &format!("{configs} grid configs, worst row-sum error {worst:.2e}"),
    );
}

#[test]
fn c05_spatial_shift_conservation() {
    let mut rng = Rng::new(0x55);
    let mut tensors = 0;
    while tensors < 256 {
        let c = [4usize, 8][rng.below(2)];
        let h = 2 + rng.below(5);
        let w = 2 + rng.below(5);
        let x = Tensor::rand_uniform(&mut rng, &[1, h, w, c], -1.0, 1.0);
        for first in [true, false] {
            let mut tape = Tape::new();
            let id = tape.constant(x.clone());
            let out = if first {
                s3tu::s2link::spatial_shift_ss1(&mut tape, id).unwrap()
            } else {
                s3tu::s2link::spatial_shift_ss2(&mut tape, id).unwrap()
            };
            let y = tape.value(out);
            let q = c / 4;
            let dirs: [(usize, bool); 4] = if first {
                [(2, true), (2, false), (1, true), (1, false)]
            } else {
                [(1, true), (1, false), (2, true), (2, false)]
            };
            for ch in 0..c {
                let (axis, toward) = dirs[ch / q];
                for yy in 0..h {
                    for xx in 0..w {
                        let dst = match (axis, toward) {
                            (1, true) => yy.checked_sub(1).map(|d| (d, xx)),
                            (1, false) => (yy + 1 < h).then_some((yy + 1, xx)),
                            (2, true) => xx.checked_sub(1).map(|d| (yy, d)),
                            (2, false) => (xx + 1 < w).then_some((yy, xx + 1)),
                            _ => unreachable!(),
                        };
                        if let Some((dy, dx)) = dst {
                            assert_eq!(
                                y.at(&[0, dy, dx, ch]),
                                x.at(&[0, yy, xx, ch]),
                                "interior value not conserved"
                            );
                        }
                    }
                }
            }
            // constant fixed point
            let cst = Tensor::full(&[1, h, w, c], 0.25);
            let mut tape2 = Tape::new();
            let cid = tape2.constant(cst.clone());
            let cout = if first {
                s3tu::s2link::spatial_shift_ss1(&mut tape2, cid).unwrap()
            } else {
                s3tu::s2link::spatial_shift_ss2(&mut tape2, cid).unwrap()
            };
            assert_eq!(tape2.value(cout), &cst);
        }
        tensors += 1;
    }
    report("c05 shift conservation", true, "256 random tensors, exact");
}

#[test]
fn c06_dropblock_statistics() {
    let p = DropBlockParams {
        block_size: 7,
        drop_prob: 0.1,
    };
    let mut zeroed = 0usize;
    let mut total = 0usize;
    for t in 0..10_000u64 {
        let mut rng = Rng::for_stream(0xD20B, t);
        let mask = dropblock_mask(&mut rng, &[1, 1, 16, 16], &p).unwrap();
        zeroed += mask.data().iter().filter(|&&v| v == 0.0).count();
        total += mask.numel();
        // geometry: every zero cell lies inside a fully-zero 7x7 square
        if t % 50 == 0 {
            for y in 0..16usize {
                for x in 0..16usize {
                    if mask.at(&[0, 0, y, x]) != 0.0 {
                        continue;
                    }
                    let mut covered = false;
                    'outer: for sy in y.saturating_sub(6)..=y.min(9) {
                        for sx in x.saturating_sub(6)..=x.min(9) {
                            let all_zero = (0..7).all(|dy| {
                                (0..7).all(|dx| mask.at(&[0, 0, sy + dy, sx + dx]) == 0.0)
                            });
                            if all_zero {
                                covered = true;
                                break 'outer;
                            }
                        }
                    }
                    assert!(covered, "zero at ({y},{x}) outside any full 7x7 square");
                }
            }
        }
    }
    let rate = zeroed as f64 / total as f64;
    report(
        "c06 DropBlock statistics",
        (0.08..=0.12).contains(&rate),
        &format!("realized drop fraction {rate:.4} over 10000 trials"),
    );
}

#[test]
fn c07_end_to_end_synthetic_training() {
    let run = main_run();
    let dsc = run.outcome.log.best_dsc;
    let best_epoch = run.outcome.log.best_epoch;
    let sen = run.outcome.log.epochs[best_epoch].val.sensitivity;
    let within_time = run.wall < Duration::from_secs(30 * 60);
    // trained parameters must stay finite throughout
    let mut finite = true;
    for (name, t, _) in run.outcome.final_model.named_tensors() {
        if !t.is_finite() {
            println!("    non-finite parameter: {name}");
            finite = false;
        }
    }
    report(
        "c07 synthetic training",
        dsc >= 0.90 && sen >= 0.90 && within_time && finite,
        &format!(
            "best val DSC {dsc:.4}, sensitivity {sen:.4} at epoch {best_epoch}, wall {:.1} min",
            run.wall.as_secs_f64() / 60.0
        ),
    );
}

#[test]
fn c08_ablation_direction() {
    let full = main_run().outcome.log.best_dsc;
    let (tr, va) = dataset();
    let mut details = vec![format!("full {full:.4}")];
    let mut pass = true;
    for (name, cfg) in [
        (
            "+structured-convs",
            ModelConfig {
                use_rm_svit: false,
                use_s2_links: false,
                ..accept_model_cfg()
            },
        ),
        (
            "+rm-svit",
            ModelConfig {
                structured_convs: false,
                use_s2_links: false,
                ..accept_model_cfg()
            },
        ),
        (
            "+s2-links",
            ModelConfig {
                structured_convs: false,
                use_rm_svit: false,
                ..accept_model_cfg()
            },
        ),
    ] {
        let outcome = trainer::train(&cfg, &accept_train_cfg(), tr, va).expect("variant training");
        let dsc = outcome.log.best_dsc;
        details.push(format!("{name} {dsc:.4}"));
        if full < dsc - 0.02 {
            pass = false;
        }
    }
    report("c08 ablation direction", pass, &details.join(", "));
}

#[test]
fn c09_reproducibility() {
    let first = main_run();
    let (tr, va) = dataset();
    let second =
        trainer::train(&accept_model_cfg(), &accept_train_cfg(), tr, va).expect("second run");

    let logs_match = first.outcome.log.canonical_json() == second.log.canonical_json();

    let mut buf_a = Vec::new();
    s3tu::checkpoint::save(&first.outcome.best_model, &mut buf_a).unwrap();
    let mut buf_b = Vec::new();
    s3tu::checkpoint::save(&second.best_model, &mut buf_b).unwrap();
    let ckpt_match = buf_a == buf_b;

    report(
        "c09 reproducibility",
        logs_match && ckpt_match,
        &format!(
            "canonical logs identical: {logs_match}, checkpoints identical: {ckpt_match} ({} bytes)",
            buf_a.len()
        ),
    );
}

#[test]
fn c10_cli_contract() {
    use std::process::Command;
    let dir = std::env::temp_dir().join("s3tu_acceptance_cli");
    let _ = std::fs::remove_dir_all(&dir);
    std::fs::create_dir_all(&dir).unwrap();

    // gradcheck exits 0 on a correct build
    let out = Command::new(env!("CARGO_BIN_EXE_s3tu"))
        .args(["gradcheck", "--scope", "ss"])
        .output()
        .unwrap();
    let gradcheck_ok = out.status.code() == Some(0);

    // train -> eval -> predict round trip on a small config
    let model_cfg = dir.join("model.json");
    std::fs::write(
        &model_cfg,
        r#"{"base_channels":4,"input_size":[16,16],
            "rm_svit":{"grid":[1,1],"n_iter":1,"heads":2,"sparse":true},
            "dropblock":{"block_size":1,"drop_prob":0.05}}"#,
    )
    .unwrap();
    let train_cfg = dir.join("train.json");
    std::fs::write(&train_cfg, r#"{"epochs":2,"batch_size":4,"seed":3}"#).unwrap();
    let synth_cfg = dir.join("synth.json");
    std::fs::write(
        &synth_cfg,
        r#"{"size":16,"n_samples":10,"seed":55,"blob_count":[1,1],
            "radius":[2.0,4.0],"contrast":[0.7,0.9],"noise_sigma":0.02,
            "irregularity":0.1}"#,
    )
    .unwrap();
    let run_dir = dir.join("run");
    let train_ok = Command::new(env!("CARGO_BIN_EXE_s3tu"))
        .args(["train", "--model-config"])
        .arg(&model_cfg)
        .arg("--train-config")
        .arg(&train_cfg)
        .arg("--data")
        .arg(&synth_cfg)
        .arg("--out")
        .arg(&run_dir)
        .status()
        .unwrap()
        .code()
        == Some(0);

    let report_path = dir.join("report.json");
    let eval_ok = Command::new(env!("CARGO_BIN_EXE_s3tu"))
        .args(["eval", "--checkpoint"])
        .arg(run_dir.join("checkpoint.s3ck"))
        .arg("--data")
        .arg(&synth_cfg)
        .arg("--report")
        .arg(&report_path)
        .status()
        .unwrap()
        .code()
        == Some(0);
    let report_valid = std::fs::read_to_string(&report_path)
        .ok()
        .and_then(|s| serde_json::from_str::<serde_json::Value>(&s).ok())
        .map(|v| v.get("dsc").is_some() && v.get("n_samples").is_some())
        .unwrap_or(false);

    // held-out image
    let held = s3tu::data::synth_sample(
        &SynthConfig {
            seed: 777,
            ..serde_json::from_str(&std::fs::read_to_string(&synth_cfg).unwrap()).unwrap()
        },
        0,
    )
    .unwrap();
    let image = dir.join("held.pgm");
    s3tu::data::save_pgm(&held.image, &image).unwrap();
    let mask_path = dir.join("mask.pgm");
    let predict_ok = Command::new(env!("CARGO_BIN_EXE_s3tu"))
        .args(["predict", "--checkpoint"])
        .arg(run_dir.join("checkpoint.s3ck"))
        .arg("--image")
        .arg(&image)
        .arg("--out")
        .arg(&mask_path)
        .status()
        .unwrap()
        .code()
        == Some(0);
    let mask_binary = s3tu::data::load_pgm(&mask_path)
        .map(|m| m.data().iter().all(|&v| v == 0.0 || v == 1.0))
        .unwrap_or(false);

    report(
        "c10 CLI contract",
        gradcheck_ok && train_ok && eval_ok && report_valid && predict_ok && mask_binary,
        &format!(
            "gradcheck {gradcheck_ok}, train {train_ok}, eval {eval_ok}, report {report_valid}, predict {predict_ok}, binary mask {mask_binary}"
        ),
    );
}
