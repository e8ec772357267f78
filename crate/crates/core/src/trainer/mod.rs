//! The three training procedures: per-task teacher prompt tuning, multitask
//! source training under the distillation objective, and target adaptation
//! with two-speed learning rates; plus the grouped-target variant, the
//! ablation grid, and the few-shot comparison harness.

mod loops;
mod optimizer;
mod pipeline;
mod report;

pub use loops::{
    adapt_target, adapt_target_group, train_source, train_teacher, train_vanilla, GroupOutcome,
    SourceOutcome, TargetOutcome,
};
pub use optimizer::{sgd_step, sgd_step_vec, Optimizer, OptimizerKind};
pub use pipeline::{
    adaptation_strategy_ablation, build_model, build_suite, few_shot_compare, find_task,
    full_source_stage, run_ablation_grid, seed_means, train_all_teachers, AblationCell,
    AblationTable, AdaptationStrategyResult, FewShotComparison, SuiteCorpora,
};
pub use report::{EpochLosses, TrainReport};

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::model::{ModelConfig, ModelInit};
use crate::objectives::DistillConfig;
use crate::prompts::VanillaPrompt;

/// One trained teacher prompt per source task.
pub type TeacherSet = BTreeMap<String, VanillaPrompt>;

/// Every trainer hyperparameter, with the desk-scale defaults.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    /// Prompt length (rows of the prompt matrix).
    pub l: usize,
    /// Distillation loss weight.
    pub lambda: f64,
    /// Distillation softmax temperature.
    pub temperature: f64,
    /// Learning rate for the shared component (also used for vanilla
    /// prompt tuning).
    pub lr_shared: f64,
    /// Task-vector learning rate during source training.
    pub lr_specific_source: f64,
    /// Task-vector learning rate during target adaptation (the fast speed).
    pub lr_specific_target: f64,
    pub teacher_epochs: usize,
    pub source_epochs: usize,
    pub target_epochs: usize,
    pub batch_size: usize,
    /// Examples-proportional mixing cap.
    pub mixing_cap: usize,
    pub seeds: Vec<u64>,
    pub optimizer: OptimizerKind,

    // ablation flags
    pub decomposition: bool,
    pub distillation: bool,
    pub distill_logits: bool,
    pub distill_hidden: bool,
    pub prompt_distance: bool,
    pub stochastic_sampling: bool,
    pub freeze_shared: bool,
    pub freeze_specific: bool,

    pub few_shot_k: usize,
    pub few_shot_draws: usize,

    // backbone
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub enc_layers: usize,
    pub dec_layers: usize,
    pub ff_dim: usize,
    pub max_src_len: usize,
    pub max_tgt_len: usize,
    pub model_init: ModelInit,

    // synthetic suite
    pub source_tasks: Vec<String>,
    pub target_tasks: Vec<String>,
    pub train_size: usize,
    pub dev_size: usize,
    pub test_size: usize,
    pub min_len: usize,
    pub max_len: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            l: 8,
            lambda: 0.9,
            temperature: 2.0,
            lr_shared: 0.3,
            lr_specific_source: 0.3,
            lr_specific_target: 0.4,
            teacher_epochs: 30,
            source_epochs: 20,
            target_epochs: 30,
            batch_size: 16,
            mixing_cap: 1 << 15,
            seeds: vec![0, 1, 2],
            optimizer: OptimizerKind::Sgd,
            decomposition: true,
            distillation: true,
            distill_logits: true,
            distill_hidden: true,
            prompt_distance: false,
            stochastic_sampling: true,
            freeze_shared: false,
            freeze_specific: false,
            few_shot_k: 16,
            few_shot_draws: 10,
            vocab_size: 20,
            d_model: 16,
            n_heads: 2,
            enc_layers: 1,
            dec_layers: 1,
            ff_dim: 32,
            max_src_len: 24,
            max_tgt_len: 12,
            model_init: ModelInit::Anchored,
            source_tasks: vec![
                "copy".into(),
                "reverse".into(),
                "map_sub_a".into(),
                "classify_parity".into(),
            ],
            target_tasks: vec!["sort".into(), "map_sub_b".into()],
            train_size: 2000,
            dev_size: 200,
            test_size: 200,
            min_len: 3,
            max_len: 8,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        if self.l == 0 {
            return Err(Error::InvalidConfig("l must be >= 1".into()));
        }
        if self.lambda < 0.0 || !self.lambda.is_finite() {
            return Err(Error::InvalidConfig(format!(
                "lambda must be nonnegative, got {}",
                self.lambda
            )));
        }
        if !(self.temperature > 0.0) {
            return Err(Error::InvalidConfig(format!(
                "temperature must be positive, got {}",
                self.temperature
            )));
        }
        for (name, lr) in [
            ("lr_shared", self.lr_shared),
            ("lr_specific_source", self.lr_specific_source),
            ("lr_specific_target", self.lr_specific_target),
        ] {
            if !(lr > 0.0) {
                return Err(Error::InvalidConfig(format!(
                    "{name} must be positive, got {lr}"
                )));
            }
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidConfig("batch_size must be >= 1".into()));
        }
        if self.mixing_cap == 0 {
            return Err(Error::InvalidConfig("mixing_cap must be >= 1".into()));
        }
        if self.seeds.is_empty() {
            return Err(Error::InvalidConfig("seeds must list at least one seed".into()));
        }
        if self.prompt_distance && self.distillation {
            return Err(Error::InvalidConfig(
                "prompt_distance replaces the distillation losses; disable distillation to use it"
                    .into(),
            ));
        }
        if self.min_len == 0 || self.min_len > self.max_len {
            return Err(Error::InvalidConfig(format!(
                "bad length range {}..{}",
                self.min_len, self.max_len
            )));
        }
        if self.few_shot_k == 0 || self.few_shot_k > self.train_size {
            return Err(Error::InvalidConfig(format!(
                "few_shot_k {} out of range for train_size {}",
                self.few_shot_k, self.train_size
            )));
        }
        if self.few_shot_draws == 0 {
            return Err(Error::InvalidConfig("few_shot_draws must be >= 1".into()));
        }
        if self.train_size == 0 || self.dev_size == 0 || self.test_size == 0 {
            return Err(Error::InvalidConfig("split sizes must be >= 1".into()));
        }
        if self.source_tasks.is_empty() || self.target_tasks.is_empty() {
            return Err(Error::InvalidConfig(
                "source_tasks and target_tasks must be nonempty".into(),
            ));
        }
        if self.l + self.max_len > self.max_src_len {
            return Err(Error::InvalidConfig(format!(
                "l {} + max_len {} exceeds max_src_len {}",
                self.l, self.max_len, self.max_src_len
            )));
        }
        if self.max_len + 1 > self.max_tgt_len {
            return Err(Error::InvalidConfig(format!(
                "max_len {} + 1 exceeds max_tgt_len {}",
                self.max_len, self.max_tgt_len
            )));
        }
        self.model_config().validate()
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            vocab_size: self.vocab_size,
            d_model: self.d_model,
            n_heads: self.n_heads,
            enc_layers: self.enc_layers,
            dec_layers: self.dec_layers,
            ff_dim: self.ff_dim,
            max_src_len: self.max_src_len,
            max_tgt_len: self.max_tgt_len,
        }
    }

    /// Distillation configuration implied by the ablation flags.
    pub fn distill_config(&self) -> DistillConfig {
        DistillConfig {
            lambda: self.lambda,
            temperature: self.temperature,
            use_logits_kl: self.distillation && self.distill_logits,
            use_hidden_mse: self.distillation && self.distill_hidden,
            use_prompt_distance: self.prompt_distance,
        }
    }

    /// Whether source training needs teacher prompts at all.
    pub fn needs_teachers(&self) -> bool {
        self.distill_config().needs_teacher()
    }
}

// Stream tags for deriving stage-specific generators from a run seed.
// Keeping every stage on its own substream means one stage's draw count
// cannot perturb another, which is what makes ablation cells comparable.
pub(crate) mod streams {
    pub const MODEL: u64 = 0x6d6f_64656c;
    pub const SUITE: u64 = 0x7375_697465;
    pub const TEACHER: u64 = 0x7465_6163;
    pub const SOURCE_INIT: u64 = 0x7372_6369;
    pub const SOURCE_BATCH: u64 = 0x7372_6362;
    pub const TARGET: u64 = 0x7467_7464;
    pub const FEW_SHOT: u64 = 0x6673_686f;
}

/// Substream tag of the source-stage prompt initialization; exposed so
/// reference implementations in tests can replay the exact stream.
pub const STREAM_SOURCE_INIT: u64 = streams::SOURCE_INIT;
/// Substream tag of the source-stage batch schedule.
pub const STREAM_SOURCE_BATCH: u64 = streams::SOURCE_BATCH;
/// Substream tag of teacher training; the CLI derives per-task generators
/// from it the same way [`train_all_teachers`] does.
pub const STREAM_TEACHER: u64 = streams::TEACHER;
/// Substream tag of target adaptation.
pub const STREAM_TARGET: u64 = streams::TARGET;

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_is_valid() {
        RunConfig::default().validate().unwrap();
    }

    #[test]
    fn validation_catches_bad_values() {
        let mut cfg = RunConfig::default();
        cfg.lambda = -1.0;
        assert!(cfg.validate().is_err());

        let mut cfg = RunConfig::default();
        cfg.prompt_distance = true; // while distillation is on
        assert!(cfg.validate().is_err());
        cfg.distillation = false;
        assert!(cfg.validate().is_ok());

        let mut cfg = RunConfig::default();
        cfg.l = 20; // 20 + 8 > 24
        assert!(cfg.validate().is_err());

        let mut cfg = RunConfig::default();
        cfg.seeds.clear();
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn distill_config_follows_flags() {
        let mut cfg = RunConfig::default();
        assert!(cfg.distill_config().use_logits_kl);
        assert!(cfg.distill_config().use_hidden_mse);
        cfg.distill_hidden = false;
        assert!(cfg.distill_config().use_logits_kl);
        assert!(!cfg.distill_config().use_hidden_mse);
        cfg.distillation = false;
        assert!(!cfg.needs_teachers());
        cfg.prompt_distance = true;
        assert!(cfg.needs_teachers());
    }
}
