use s3tu::blocks::DropBlockParams;
use s3tu::data::{generate_synthetic, SynthConfig};
use s3tu::model::ModelConfig;
use s3tu::svit::RmSvitConfig;
use s3tu_cli::trainer::{split_train_val, train, TrainConfig};

fn main() {
    let variant = std::env::args().nth(1).unwrap_or_else(|| "full".into());
    let epochs: usize = std::env::args().nth(2).and_then(|s| s.parse().ok()).unwrap_or(12);
    let drop: f64 = std::env::args().nth(3).and_then(|s| s.parse().ok()).unwrap_or(0.05);
    let synth = SynthConfig {
        size: 64,
        n_samples: 250,
        seed: 20_240_101,
        blob_count: (1, 3),
        radius: (4.0, 14.0),
        contrast: (0.55, 0.95),
        noise_sigma: 0.05,
        irregularity: 0.15,
        background: 0.15,
    };
    let samples = generate_synthetic(&synth).unwrap();
    let (tr, va) = split_train_val(&samples, 0.2);
    let mut cfg = ModelConfig {
        base_channels: 16,
        input_size: (64, 64),
        rm_svit: RmSvitConfig { grid: (4, 4), ..Default::default() },
        dropblock: DropBlockParams { block_size: 7, drop_prob: drop },
        ..Default::default()
    };
    match variant.as_str() {
        "full" => {}
        "b1" => { cfg.use_rm_svit = false; cfg.use_s2_links = false; }
        "b2" => { cfg.structured_convs = false; cfg.use_s2_links = false; }
        "b3" => { cfg.structured_convs = false; cfg.use_rm_svit = false; }
        _ => panic!("unknown variant"),
    }
    let tcfg = TrainConfig { epochs, seed: 42, ..TrainConfig::default() };
    let out = train(&cfg, &tcfg, &tr, &va).unwrap();
    for e in &out.log.epochs {
        eprintln!("  epoch {:>2} val_dsc {:.4} sen {:.4} ({} ms)", e.epoch, e.val.dsc, e.val.sensitivity, e.wall_ms);
    }
    println!("{variant} epochs={epochs} drop={drop}: best dsc {:.4} at epoch {}", out.log.best_dsc, out.log.best_epoch);
}
