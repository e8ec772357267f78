//! Quick training diagnostic: teacher prompt tuning on each task family,
//! reporting loss and accuracy trajectories. Useful when tuning backbone
//! init scales or suite difficulty.
//!
//! Usage: cargo run --release -p mpt-core --example calibrate [train_size] [epochs]

use mpt_core::numerics::{tag_from_str, Rng};
use mpt_core::prompts::init_vanilla_prompt;
use mpt_core::taskgen::{evaluate, Split};
use mpt_core::trainer::{build_model, build_suite, train_vanilla, RunConfig};

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let train_size: usize = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(500);
    let epochs: usize = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(10);

    let mut cfg = RunConfig::default();
    cfg.train_size = train_size;
    cfg.dev_size = 100;
    cfg.test_size = 100;

    let model = build_model(&cfg).expect("model");
    let suite = build_suite(&cfg).expect("suite");

    for corpus in suite.all() {
        let mut rng = Rng::new(7).derive(tag_from_str(&corpus.task_id));
        let untrained = init_vanilla_prompt(&model, cfg.l, &mut rng.derive(99)).expect("init");
        let untrained_acc = evaluate(&model, &untrained.matrix, corpus, Split::Dev).expect("eval");

        let start = std::time::Instant::now();
        let (prompt, report) =
            train_vanilla(&model, corpus, epochs, cfg.lr_shared, &cfg, &mut rng).expect("train");
        let secs = start.elapsed().as_secs_f64();
        let trained_acc = evaluate(&model, &prompt.matrix, corpus, Split::Dev).expect("eval");

        let first = report.epochs.first().map(|e| e.l_plm).unwrap_or(f64::NAN);
        let last = report.epochs.last().map(|e| e.l_plm).unwrap_or(f64::NAN);
        println!(
            "{:18} untrained_acc={:.3} trained_acc={:.3} loss {:.3} -> {:.3}  ({:.1}s, {} epochs)",
            corpus.task_id, untrained_acc, trained_acc, first, last, secs, epochs
        );
    }
}
