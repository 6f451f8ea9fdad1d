//! Trains a few head/alignment configurations on the default synthetic data
//! and prints per-condition EERs.
//!
//! Run: `cargo run --release -p xmalign-core --example ablation -- [seeds]`

use std::time::Instant;

use xmalign_core::{
    generate_dataset, make_report, run_training, score_trials, AlignMetric, FlatConfig,
    HeadMode, SyntheticConfig, TrainingConfig,
};

fn main() {
    let seeds: u64 = std::env::args()
        .nth(1)
        .and_then(|s| s.parse().ok())
        .unwrap_or(3);
    let extra = std::env::args().nth(2).unwrap_or_default();
    let data = generate_dataset(&SyntheticConfig::default()).expect("dataset");
    let rows = [
        ("shared  ce only   ", HeadMode::Shared, AlignMetric::None, 0.0),
        ("shared  mse   1.0 ", HeadMode::Shared, AlignMetric::Mse, 1.0),
        ("shared  mse   0.1 ", HeadMode::Shared, AlignMetric::Mse, 0.1),
        ("separate mse  1.0 ", HeadMode::Separate, AlignMetric::Mse, 1.0),
        ("shared  cosine 1.0", HeadMode::Shared, AlignMetric::Cosine, 1.0),
    ];
    println!("{:<20} {:>6} {:>8} {:>8} {:>8} {:>7}", "config", "seed", "heard", "unheard", "overall", "secs");
    for (name, head, align, lambda) in rows {
        for seed in 0..seeds {
            let mut cfg = TrainingConfig {
                head_mode: head,
                align_metric: align,
                lambda,
                seed,
                ..TrainingConfig::default()
            };
            for kv in extra.split(';').filter(|s| !s.is_empty()) {
                let (k, v) = kv.split_once('=').expect("key=value");
                cfg.set(k.trim(), v.trim()).expect("override");
            }
            let start = Instant::now();
            let out = run_training(&cfg, &data, None).expect("training");
            let scores = score_trials(&out.model, &data, &data.trials, name).expect("scoring");
            let report = make_report(&scores, &data.trials).expect("report");
            println!(
                "{:<20} {:>6} {:>8.2} {:>8.2} {:>8.2} {:>7.1}",
                name,
                seed,
                report.eer_heard().unwrap_or(f64::NAN),
                report.eer_unheard().unwrap_or(f64::NAN),
                report.overall,
                start.elapsed().as_secs_f64()
            );
        }
    }
}
