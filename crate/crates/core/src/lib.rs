//! Multitask prompt tuning over a small frozen encoder-decoder transformer.
//!
//! The pipeline has three stages. Per-task teacher prompts are trained by
//! vanilla prompt tuning. Source training then learns a decomposition —
//! one shared prompt matrix plus rank-one task factors, combined by a
//! Hadamard product — by distilling from the teachers across a multitask
//! mixture. Target adaptation re-composes the shared matrix with fresh
//! factors and tunes both at separate learning rates. A synthetic seq2seq
//! task suite makes every mechanism testable in minutes on a laptop.

pub mod analysis;
pub mod checkpoint;
pub mod config;
pub mod error;
pub mod model;
pub mod numerics;
pub mod objectives;
pub mod prompts;
pub mod sampling;
pub mod taskgen;
pub mod tokens;
pub mod trainer;

pub use analysis::{efficiency_report, prompt_embedding, similarity_matrix, SimilarityMatrix};
pub use config::{parse_config, parse_config_str, serialize_config};
pub use error::{Error, Result};
pub use model::{
    backward_to_prompt, encode, forward, greedy_decode, init_model, task_loss,
    task_loss_with_grad, ForwardTrace, FrozenModel, ModelConfig, ModelInit,
};
pub use numerics::{Matrix, Rng, Vector};
pub use objectives::{
    batch_objective, hidden_mse_loss, kl_logits_loss, prompt_distance_loss, total_loss,
    DistillConfig, DistillationBatchResult,
};
pub use prompts::{
    average_factors, chain_gradients, compose, compress, init_decomposition, init_vanilla_prompt,
    param_count, ParamCount, ParamCountMode, SharedPrompt, TaskFactors, VanillaPrompt,
};
pub use sampling::{
    make_source_batches, proportional_batch, stochastic_task_subset, BatchManifest, MixingSpec,
};
pub use taskgen::{
    evaluate, few_shot, generate_task, Example, FewShotSample, Split, SplitSizes, TaskCorpus,
    TaskFamily,
};
pub use trainer::{
    adapt_target, adapt_target_group, build_model, build_suite, run_ablation_grid, sgd_step,
    train_source, train_teacher, OptimizerKind, RunConfig, TeacherSet, TrainReport,
};
