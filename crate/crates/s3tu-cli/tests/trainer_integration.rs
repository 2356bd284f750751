//! Trainer behaviour on a miniature problem: loss decreases, runs are
//! reproducible bit for bit, lr=0 leaves parameters untouched, checkpoint
//! selection tracks the running best.

use s3tu::blocks::{DropBlockParams, ParamKind, Params};
use s3tu::data::{generate_synthetic, SynthConfig};
use s3tu::model::ModelConfig;
use s3tu::svit::RmSvitConfig;
use s3tu::tensor::Tensor;
use s3tu_cli::trainer::{split_train_val, train, TrainConfig, TrainOutcome};

fn tiny_model() -> ModelConfig {
    ModelConfig {
        in_channels: 1,
        base_channels: 4,
        input_size: (16, 16),
        rm_svit: RmSvitConfig {
            grid: (1, 1),
            n_iter: 1,
            heads: 2,
            sparse: true,
            detach_iters: false,
        },
        dropblock: DropBlockParams {
            block_size: 1,
            drop_prob: 0.05,
        },
        ..ModelConfig::default()
    }
}

fn tiny_data() -> (Vec<s3tu::data::SamplePair>, Vec<s3tu::data::SamplePair>) {
    let cfg = SynthConfig {
        size: 16,
        n_samples: 10,
        seed: 77,
        blob_count: (1, 1),
        radius: (2.0, 4.0),
        contrast: (0.7, 0.9),
        noise_sigma: 0.02,
        irregularity: 0.1,
        background: 0.1,
    };
    let samples = generate_synthetic(&cfg).unwrap();
    split_train_val(&samples, 0.2)
}

fn tiny_train_cfg(epochs: usize) -> TrainConfig {
    TrainConfig {
        epochs,
        batch_size: 4,
        seed: 5,
        ..TrainConfig::default()
    }
}

fn run(epochs: usize) -> TrainOutcome {
    let (tr, va) = tiny_data();
    train(&tiny_model(), &tiny_train_cfg(epochs), &tr, &va).unwrap()
}

#[test]
fn loss_decreases_on_smoke_run() {
    let out = run(2);
    let first = out.log.steps.first().unwrap().loss;
    let last = out.log.steps.last().unwrap().loss;
    assert!(last < first, "loss did not decrease: {first} -> {last}");
}

#[test]
fn identical_seeds_give_identical_logs_and_models() {
    let a = run(2);
    let b = run(2);
    assert_eq!(a.log.canonical_json(), b.log.canonical_json());
    let tensors_a = a.final_model.named_tensors();
    let tensors_b = b.final_model.named_tensors();
    assert_eq!(tensors_a.len(), tensors_b.len());
    for ((na, ta, _), (nb, tb, _)) in tensors_a.iter().zip(tensors_b.iter()) {
        assert_eq!(na, nb);
        assert_eq!(ta, tb, "tensor {na} differs between identical runs");
    }
}

#[test]
fn zero_lr_keeps_parameters_bitwise() {
    let (tr, va) = tiny_data();
    let cfg = TrainConfig {
        lr: 0.0,
        ..tiny_train_cfg(1)
    };
    // compare against the freshly built model
    let reference = s3tu::model::Model::new(tiny_model(), cfg.seed).unwrap();
    let out = train(&tiny_model(), &cfg, &tr, &va).unwrap();
    let mut before = Vec::new();
    reference.visit("", &mut |name, t, kind| {
        if kind == ParamKind::Trainable {
            before.push((name, t.clone()));
        }
    });
    let mut after: Vec<(String, Tensor)> = Vec::new();
    out.final_model.visit("", &mut |name, t, kind| {
        if kind == ParamKind::Trainable {
            after.push((name, t.clone()));
        }
    });
    for ((na, ta), (nb, tb)) in before.iter().zip(after.iter()) {
        assert_eq!(na, nb);
        let max_delta = ta
            .data()
            .iter()
            .zip(tb.data().iter())
            .map(|(x, y)| (x - y).abs())
            .fold(0.0f64, f64::max);
        assert!(max_delta == 0.0, "{na} moved by {max_delta}");
    }
}

#[test]
fn best_dsc_is_running_maximum() {
    let out = run(3);
    let mut running = f64::NEG_INFINITY;
    for e in &out.log.epochs {
        running = running.max(e.val.dsc);
        assert_eq!(e.best_dsc_so_far, running);
    }
    assert_eq!(out.log.best_dsc, running);
}

#[test]
fn empty_training_set_rejected() {
    let (_, va) = tiny_data();
    assert!(train(&tiny_model(), &tiny_train_cfg(1), &[], &va).is_err());
}

#[test]
fn stat_updates_change_running_stats_only_in_training() {
    let out = run(1);
    let fresh = s3tu::model::Model::new(tiny_model(), 5).unwrap();
    let mut changed = 0;
    let mut fresh_stats = Vec::new();
    fresh.visit("", &mut |name, t, kind| {
        if kind == ParamKind::Stat {
            fresh_stats.push((name, t.clone()));
        }
    });
    let mut i = 0;
    out.final_model.visit("", &mut |name, t, kind| {
        if kind == ParamKind::Stat {
            assert_eq!(fresh_stats[i].0, name);
            if t != &fresh_stats[i].1 {
                changed += 1;
            }
            i += 1;
        }
    });
    assert!(changed > 0, "running stats never updated during training");
}

#[test]
fn evaluate_report_equals_independent_per_sample_mean() {
    let (tr, va) = tiny_data();
    let out = train(&tiny_model(), &tiny_train_cfg(1), &tr, &va).unwrap();
    let report = s3tu_cli::trainer::evaluate(&out.final_model, &va, 4, true).unwrap();
    let per = report.per_sample.as_ref().unwrap();
    assert_eq!(per.len(), va.len());
    let mean = |f: fn(&s3tu::metrics::SampleMetrics) -> f64| {
        per.iter().map(f).sum::<f64>() / per.len() as f64
    };
    assert!((report.dsc - mean(|s| s.dsc)).abs() < 1e-12);
    assert!((report.acc - mean(|s| s.acc)).abs() < 1e-12);
    assert!((report.miou - mean(|s| s.miou)).abs() < 1e-12);
    assert!((report.precision - mean(|s| s.precision)).abs() < 1e-12);
    assert!((report.sensitivity - mean(|s| s.sensitivity)).abs() < 1e-12);

    // recompute one sample end to end
    let s = &va[0];
    let p = s3tu_cli::trainer::predict(&out.final_model, &s.image).unwrap();
    let m = s3tu::metrics::sample_metrics(&s.id, &p, &s.mask).unwrap();
    assert!((m.dsc - per[0].dsc).abs() < 1e-12);
}

#[test]
fn diverged_training_aborts_with_diagnostics() {
    let (tr, va) = tiny_data();
    let cfg = TrainConfig {
        lr: 1e12, // deliberately unstable
        epochs: 3,
        ..tiny_train_cfg(3)
    };
    match train(&tiny_model(), &cfg, &tr, &va) {
        Err(s3tu::error::Error::Numerical(msg)) => {
            assert!(msg.contains("epoch"), "diagnostic should name the step: {msg}");
            assert!(msg.contains("lr"), "diagnostic should include the lr: {msg}");
        }
        Err(other) => panic!("expected a numerical failure, got {other}"),
        Ok(_) => panic!("training with lr 1e12 should not survive"),
    }
}
