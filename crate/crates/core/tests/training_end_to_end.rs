//! End-to-end training oracles on the default suite: an untrained prompt
//! scores at chance, a trained teacher prompt actually solves the copy
//! task. Slowest test in the core crate (one full teacher run, ~10s).

use mpt_core::numerics::Rng;
use mpt_core::taskgen::{evaluate, generate_task, Split, SplitSizes, TaskFamily};
use mpt_core::trainer::{build_model, build_suite, train_teacher, RunConfig};

#[test]
fn untrained_prompt_scores_at_chance_on_fixed_length_three() {
    // Dedicated length-3 copy task: with vocab 20 a random prompt must stay
    // at or below the loose 5% chance bound.
    let cfg = RunConfig::default();
    let model = build_model(&cfg).unwrap();
    let corpus = generate_task(
        "copy_len3",
        TaskFamily::Copy,
        20,
        SplitSizes {
            train: 50,
            dev: 200,
            test: 50,
        },
        (3, 3),
        &mut Rng::new(77),
    )
    .unwrap();

    for seed in 0..5 {
        let prompt = mpt_core::init_vanilla_prompt(&model, cfg.l, &mut Rng::new(seed)).unwrap();
        let acc = evaluate(&model, &prompt.matrix, &corpus, Split::Dev).unwrap();
        assert!(acc <= 0.05, "untrained prompt scored {acc} (seed {seed})");
    }
}

#[test]
fn trained_copy_teacher_reaches_high_accuracy() {
    let cfg = RunConfig::default();
    let model = build_model(&cfg).unwrap();
    let suite = build_suite(&cfg).unwrap();
    let corpus = suite.sources.iter().find(|c| c.task_id == "copy").unwrap();

    let mut rng = Rng::new(0);
    let untrained = mpt_core::init_vanilla_prompt(&model, cfg.l, &mut rng.derive(1)).unwrap();
    let before = evaluate(&model, &untrained.matrix, corpus, Split::Dev).unwrap();

    let (prompt, _) = train_teacher(&model, corpus, &cfg, &mut rng).unwrap();
    let after = evaluate(&model, &prompt.matrix, corpus, Split::Dev).unwrap();

    assert!(
        after >= 0.5 && after >= before + 0.3,
        "trained copy accuracy {after} never took off (untrained {before})"
    );
}
