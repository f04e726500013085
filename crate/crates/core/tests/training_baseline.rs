use flowrec::objectives::GfnVariant;
use flowrec::pipeline::{run_benchmark, BenchmarkConfig};
use serde::{Deserialize, Serialize};

const BASELINE: &str = concat!(env!("CARGO_MANIFEST_DIR"), "/tests/baselines/tb_loss_drop.json");

#[derive(Debug, Serialize, Deserialize)]
struct LossDrop {
    seed: u64,
    epochs: usize,
    epoch1_tb_loss: f64,
    min_tb_loss: f64,
    drop: f64,
}

fn measure() -> LossDrop {
    let mut cfg = BenchmarkConfig::default();
    cfg.train.loss.variant = GfnVariant::Tb;
    cfg.train.early_stop_patience = cfg.train.epochs;
    let run = run_benchmark(&cfg).unwrap();
    let h = &run.outcome.history;
    assert_eq!(h.len(), 30);
    let first = h[0].train_gfn;
    let min = h.iter().map(|e| e.train_gfn).fold(f64::INFINITY, f64::min);
    LossDrop {
        seed: cfg.seed,
        epochs: h.len(),
        epoch1_tb_loss: first,
        min_tb_loss: min,
        drop: 1.0 - min / first,
    }
}

#[test]
fn tb_loss_halves_within_thirty_epochs() {
    let got = measure();
    if std::env::var_os("FLOWREC_WRITE_BASELINE").is_some() {
        std::fs::write(BASELINE, serde_json::to_string_pretty(&got).unwrap() + "\n").unwrap();
    }
    let want: LossDrop = serde_json::from_str(&std::fs::read_to_string(BASELINE).unwrap()).unwrap();
    println!(
        "tb loss drop {:.4} (epoch 1 {:.4}, best {:.4})",
        got.drop, got.epoch1_tb_loss, got.min_tb_loss
    );
    assert!(got.drop >= 0.5, "{got:?}");
    assert!((got.drop - want.drop).abs() < 1e-3, "measured {got:?}, baseline {want:?}");
}
