//! The three training procedures.
//!
//! Vanilla prompt tuning doubles as teacher training and as the prompt-
//! tuning baseline: it runs the same batch objective with frozen identity
//! factors, so "no decomposition" is literally the decomposition with unit
//! task vectors that never update.

use std::collections::BTreeMap;
use std::time::Instant;

use crate::error::{Error, Result};
use crate::model::FrozenModel;
use crate::numerics::{Matrix, Rng};
use crate::objectives::{batch_objective, DistillConfig};
use crate::prompts::{
    average_factors, compose, init_decomposition, init_vanilla_prompt, SharedPrompt, TaskFactors,
    VanillaPrompt,
};
use crate::sampling::{make_source_batches, MixingSpec};
use crate::taskgen::{evaluate, Example, Split, TaskCorpus};
use crate::trainer::report::{EpochLosses, TrainReport};
use crate::trainer::{streams, Optimizer, RunConfig, TeacherSet};

pub struct SourceOutcome {
    pub shared: SharedPrompt,
    pub factors: Vec<TaskFactors>,
    pub report: TrainReport,
}

pub struct TargetOutcome {
    pub shared: SharedPrompt,
    pub factors: TaskFactors,
    pub report: TrainReport,
}

pub struct GroupOutcome {
    pub shared: SharedPrompt,
    pub factors: Vec<TaskFactors>,
    pub report: TrainReport,
}

/// Accumulates one batch's losses and gradients, then applies a single
/// optimizer step. Shared by all three stages.
struct StepAccumulator {
    grad_shared: Matrix,
    grad_factors: BTreeMap<String, (crate::numerics::Vector, crate::numerics::Vector)>,
    losses: EpochLosses,
}

impl StepAccumulator {
    fn new(l: usize, d: usize) -> Self {
        StepAccumulator {
            grad_shared: Matrix::zeros(l, d),
            grad_factors: BTreeMap::new(),
            losses: EpochLosses::default(),
        }
    }

    fn add_task_result(
        &mut self,
        result: &crate::objectives::DistillationBatchResult,
        task_id: &str,
        weight: f64,
    ) -> Result<()> {
        self.losses.l_plm += weight * result.l_plm;
        self.losses.l_logits += weight * result.l_logits;
        self.losses.l_hidden += weight * result.l_hidden;
        self.losses.l_total += weight * result.l_total;
        self.grad_shared.add_scaled(&result.grad_shared, weight)?;
        let (du, dv) = &result.grad_factors[task_id];
        let entry = self
            .grad_factors
            .entry(task_id.to_string())
            .or_insert_with(|| {
                (
                    crate::numerics::Vector::zeros(du.len()),
                    crate::numerics::Vector::zeros(dv.len()),
                )
            });
        entry.0.add_scaled(du, weight)?;
        entry.1.add_scaled(dv, weight)?;
        Ok(())
    }
}

/// Applies one optimizer step to the decomposition from accumulated
/// gradients, honoring the freeze flags and the two learning rates.
#[allow(clippy::too_many_arguments)]
fn apply_step(
    opt: &mut Optimizer,
    shared: &mut SharedPrompt,
    factors: &mut BTreeMap<String, TaskFactors>,
    acc: &StepAccumulator,
    update_shared: bool,
    update_specific: bool,
    lr_shared: f64,
    lr_specific: f64,
) -> Result<()> {
    if update_shared {
        opt.step_matrix("shared", &mut shared.matrix, &acc.grad_shared, lr_shared)?;
    }
    if update_specific {
        for (task, (du, dv)) in &acc.grad_factors {
            let f = factors
                .get_mut(task)
                .ok_or_else(|| Error::arg("apply_step", format!("unknown task {task}")))?;
            opt.step_vector(&format!("u:{task}"), &mut f.u, du, lr_specific)?;
            opt.step_vector(&format!("v:{task}"), &mut f.v, dv, lr_specific)?;
        }
    }
    Ok(())
}

fn mean_epoch(sums: EpochLosses, batches: usize) -> EpochLosses {
    let n = batches.max(1) as f64;
    EpochLosses {
        l_plm: sums.l_plm / n,
        l_logits: sums.l_logits / n,
        l_hidden: sums.l_hidden / n,
        l_total: sums.l_total / n,
    }
}

/// Vanilla prompt tuning: a single prompt matrix against the task loss.
/// Used for source teachers and as the target-side prompt-tuning baseline.
pub fn train_vanilla(
    model: &FrozenModel,
    corpus: &TaskCorpus,
    epochs: usize,
    lr: f64,
    cfg: &RunConfig,
    rng: &mut Rng,
) -> Result<(VanillaPrompt, TrainReport)> {
    let start = Instant::now();
    let prompt = init_vanilla_prompt(model, cfg.l, rng)?;
    let mut shared = SharedPrompt {
        matrix: prompt.matrix,
    };
    let d = model.config().d_model;
    let identity = TaskFactors::identity(corpus.task_id.clone(), cfg.l, d);
    let mut factors = BTreeMap::new();
    factors.insert(corpus.task_id.clone(), identity.clone());

    let mut opt = Optimizer::new(cfg.optimizer);
    let plain = DistillConfig::plain();
    let mut report = TrainReport {
        seed: rng.seed(),
        ..TrainReport::default()
    };

    let steps = (corpus.train.len() / cfg.batch_size).max(1);
    let mut order: Vec<usize> = (0..corpus.train.len()).collect();
    for _ in 0..epochs {
        rng.shuffle(&mut order);
        let mut sums = EpochLosses::default();
        for chunk in order.chunks(cfg.batch_size).take(steps) {
            let examples: Vec<Example> =
                chunk.iter().map(|&i| corpus.train[i].clone()).collect();
            let result = batch_objective(model, &shared, &identity, None, &examples, &plain)?;
            let mut acc = StepAccumulator::new(cfg.l, d);
            acc.add_task_result(&result, &corpus.task_id, 1.0)?;
            apply_step(
                &mut opt,
                &mut shared,
                &mut factors,
                &acc,
                true,
                false,
                lr,
                lr,
            )?;
            sums.l_plm += acc.losses.l_plm;
            sums.l_total += acc.losses.l_total;
        }
        report.epochs.push(mean_epoch(sums, steps.max(1)));
    }

    let trained = VanillaPrompt {
        matrix: shared.matrix,
    };
    let dev_acc = evaluate(model, &trained.matrix, corpus, Split::Dev)?;
    report.evals.push((corpus.task_id.clone(), dev_acc));
    report.wall_clock_secs = start.elapsed().as_secs_f64();
    Ok((trained, report))
}

/// Teacher prompt for one source task: vanilla prompt tuning with the
/// configured teacher schedule.
pub fn train_teacher(
    model: &FrozenModel,
    corpus: &TaskCorpus,
    cfg: &RunConfig,
    rng: &mut Rng,
) -> Result<(VanillaPrompt, TrainReport)> {
    train_vanilla(model, corpus, cfg.teacher_epochs, cfg.lr_shared, cfg, rng)
}

/// Multitask source training: learns the shared prompt (and task vectors,
/// when decomposition is on) across all source tasks under the configured
/// distillation objective.
pub fn train_source(
    model: &FrozenModel,
    corpora: &[TaskCorpus],
    teachers: Option<&TeacherSet>,
    cfg: &RunConfig,
    rng: &Rng,
) -> Result<SourceOutcome> {
    cfg.validate()?;
    let start = Instant::now();
    let d = model.config().d_model;
    let dcfg = cfg.distill_config();

    let mut by_task: BTreeMap<String, &TaskCorpus> = BTreeMap::new();
    for corpus in corpora {
        if by_task.insert(corpus.task_id.clone(), corpus).is_some() {
            return Err(Error::arg(
                "train_source",
                format!("duplicate task id {}", corpus.task_id),
            ));
        }
    }
    let task_ids: Vec<String> = by_task.keys().cloned().collect();

    if dcfg.needs_teacher() {
        let teachers = teachers.ok_or_else(|| {
            Error::arg("train_source", "distillation enabled but no teachers supplied")
        })?;
        for id in &task_ids {
            if !teachers.contains_key(id) {
                return Err(Error::MissingArtifact(format!(
                    "no teacher prompt for source task {id}"
                )));
            }
        }
    }

    // Separate streams so the batch schedule is identical across ablation
    // flags for a given seed.
    let mut init_rng = rng.derive(streams::SOURCE_INIT);
    let mut batch_rng = rng.derive(streams::SOURCE_BATCH);

    let (mut shared, factor_list) = if cfg.decomposition {
        init_decomposition(model, cfg.l, &task_ids, &mut init_rng)?
    } else {
        let prompt = init_vanilla_prompt(model, cfg.l, &mut init_rng)?;
        let identity = task_ids
            .iter()
            .map(|id| TaskFactors::identity(id.clone(), cfg.l, d))
            .collect();
        (
            SharedPrompt {
                matrix: prompt.matrix,
            },
            identity,
        )
    };
    let mut factors: BTreeMap<String, TaskFactors> = factor_list
        .into_iter()
        .map(|f| (f.task_id.clone(), f))
        .collect();

    let sizes: BTreeMap<String, usize> = by_task
        .iter()
        .map(|(id, c)| (id.clone(), c.train.len()))
        .collect();
    let total_train: usize = sizes.values().sum();
    let spec = MixingSpec::new(sizes, cfg.mixing_cap)?;
    let steps_per_epoch = (total_train / cfg.batch_size).max(1);

    let mut opt = Optimizer::new(cfg.optimizer);
    let mut report = TrainReport {
        seed: rng.seed(),
        ..TrainReport::default()
    };

    for _ in 0..cfg.source_epochs {
        let manifests = make_source_batches(
            &spec,
            cfg.batch_size,
            steps_per_epoch,
            cfg.stochastic_sampling,
            &mut batch_rng,
        )?;
        let mut sums = EpochLosses::default();
        for manifest in &manifests {
            let mut acc = StepAccumulator::new(cfg.l, d);
            let batch_n = manifest.slots.len() as f64;
            for (task, idxs) in manifest.by_task() {
                let corpus = by_task[task];
                let examples: Vec<Example> =
                    idxs.iter().map(|&i| corpus.train[i].clone()).collect();
                let teacher = teachers.and_then(|t| t.get(task));
                let result =
                    batch_objective(model, &shared, &factors[task], teacher, &examples, &dcfg)?;
                acc.add_task_result(&result, task, idxs.len() as f64 / batch_n)?;
            }
            apply_step(
                &mut opt,
                &mut shared,
                &mut factors,
                &acc,
                true,
                cfg.decomposition,
                cfg.lr_shared,
                cfg.lr_specific_source,
            )?;
            sums.l_plm += acc.losses.l_plm;
            sums.l_logits += acc.losses.l_logits;
            sums.l_hidden += acc.losses.l_hidden;
            sums.l_total += acc.losses.l_total;
        }
        report.epochs.push(mean_epoch(sums, manifests.len()));
    }

    for id in &task_ids {
        let composed = compose(&shared, &factors[id])?;
        let acc = evaluate(model, &composed, by_task[id], Split::Dev)?;
        report.evals.push((id.clone(), acc));
    }
    report.wall_clock_secs = start.elapsed().as_secs_f64();

    Ok(SourceOutcome {
        shared,
        factors: factors.into_values().collect(),
        report,
    })
}

/// Target adaptation: initialize the target prompt as the Hadamard
/// re-composition of the transferred shared matrix with averaged source
/// vectors, then tune under the task loss with two-speed learning rates.
pub fn adapt_target(
    model: &FrozenModel,
    shared_src: &SharedPrompt,
    source_factors: &[TaskFactors],
    corpus: &TaskCorpus,
    cfg: &RunConfig,
    rng: &mut Rng,
) -> Result<TargetOutcome> {
    cfg.validate()?;
    let start = Instant::now();
    let d = model.config().d_model;

    let mut shared = shared_src.clone();
    let init_factors = if cfg.decomposition {
        average_factors(source_factors, corpus.task_id.clone())?
    } else {
        TaskFactors::identity(corpus.task_id.clone(), cfg.l, d)
    };
    let mut factors = BTreeMap::new();
    factors.insert(corpus.task_id.clone(), init_factors);

    let update_shared = !cfg.freeze_shared;
    let update_specific = cfg.decomposition && !cfg.freeze_specific;

    let mut opt = Optimizer::new(cfg.optimizer);
    let plain = DistillConfig::plain();
    let mut report = TrainReport {
        seed: rng.seed(),
        ..TrainReport::default()
    };

    if update_shared || update_specific {
        let steps = (corpus.train.len() / cfg.batch_size).max(1);
        let mut order: Vec<usize> = (0..corpus.train.len()).collect();
        for _ in 0..cfg.target_epochs {
            rng.shuffle(&mut order);
            let mut sums = EpochLosses::default();
            let mut batches = 0usize;
            for chunk in order.chunks(cfg.batch_size).take(steps) {
                let examples: Vec<Example> =
                    chunk.iter().map(|&i| corpus.train[i].clone()).collect();
                let current = factors[&corpus.task_id].clone();
                let result =
                    batch_objective(model, &shared, &current, None, &examples, &plain)?;
                let mut acc = StepAccumulator::new(cfg.l, d);
                acc.add_task_result(&result, &corpus.task_id, 1.0)?;
                apply_step(
                    &mut opt,
                    &mut shared,
                    &mut factors,
                    &acc,
                    update_shared,
                    update_specific,
                    cfg.lr_shared,
                    cfg.lr_specific_target,
                )?;
                sums.l_plm += acc.losses.l_plm;
                sums.l_total += acc.losses.l_total;
                batches += 1;
            }
            report.epochs.push(mean_epoch(sums, batches));
        }
    }

    let factors = factors.remove(&corpus.task_id).expect("inserted above");
    let composed = compose(&shared, &factors)?;
    report
        .evals
        .push((format!("{}/dev", corpus.task_id), evaluate(model, &composed, corpus, Split::Dev)?));
    report.evals.push((
        format!("{}/test", corpus.task_id),
        evaluate(model, &composed, corpus, Split::Test)?,
    ));
    report.wall_clock_secs = start.elapsed().as_secs_f64();

    Ok(TargetOutcome {
        shared,
        factors,
        report,
    })
}

/// Multitask adaptation to a group of target tasks: one shared matrix for
/// the whole group, per-task vectors, proportional mixing over the targets.
pub fn adapt_target_group(
    model: &FrozenModel,
    shared_src: &SharedPrompt,
    source_factors: &[TaskFactors],
    target_corpora: &[TaskCorpus],
    cfg: &RunConfig,
    rng: &Rng,
) -> Result<GroupOutcome> {
    cfg.validate()?;
    if target_corpora.len() < 2 {
        return Err(Error::arg(
            "adapt_target_group",
            format!(
                "grouped adaptation needs >= 2 target tasks, got {}",
                target_corpora.len()
            ),
        ));
    }
    let start = Instant::now();
    let d = model.config().d_model;

    let mut by_task: BTreeMap<String, &TaskCorpus> = BTreeMap::new();
    for corpus in target_corpora {
        if by_task.insert(corpus.task_id.clone(), corpus).is_some() {
            return Err(Error::arg(
                "adapt_target_group",
                format!("duplicate task id {}", corpus.task_id),
            ));
        }
    }

    let mut shared = shared_src.clone();
    let mut factors: BTreeMap<String, TaskFactors> = BTreeMap::new();
    for id in by_task.keys() {
        let f = if cfg.decomposition {
            average_factors(source_factors, id.clone())?
        } else {
            TaskFactors::identity(id.clone(), cfg.l, d)
        };
        factors.insert(id.clone(), f);
    }

    let sizes: BTreeMap<String, usize> = by_task
        .iter()
        .map(|(id, c)| (id.clone(), c.train.len()))
        .collect();
    let total_train: usize = sizes.values().sum();
    let spec = MixingSpec::new(sizes, cfg.mixing_cap)?;
    let steps_per_epoch = (total_train / cfg.batch_size).max(1);

    let mut batch_rng = rng.derive(streams::TARGET);
    let mut opt = Optimizer::new(cfg.optimizer);
    let plain = DistillConfig::plain();
    let mut report = TrainReport {
        seed: rng.seed(),
        ..TrainReport::default()
    };

    let update_shared = !cfg.freeze_shared;
    let update_specific = cfg.decomposition && !cfg.freeze_specific;
    for _ in 0..cfg.target_epochs {
        let manifests =
            make_source_batches(&spec, cfg.batch_size, steps_per_epoch, false, &mut batch_rng)?;
        let mut sums = EpochLosses::default();
        for manifest in &manifests {
            let mut acc = StepAccumulator::new(cfg.l, d);
            let batch_n = manifest.slots.len() as f64;
            for (task, idxs) in manifest.by_task() {
                let corpus = by_task[task];
                let examples: Vec<Example> =
                    idxs.iter().map(|&i| corpus.train[i].clone()).collect();
                let result =
                    batch_objective(model, &shared, &factors[task], None, &examples, &plain)?;
                acc.add_task_result(&result, task, idxs.len() as f64 / batch_n)?;
            }
            apply_step(
                &mut opt,
                &mut shared,
                &mut factors,
                &acc,
                update_shared,
                update_specific,
                cfg.lr_shared,
                cfg.lr_specific_target,
            )?;
            sums.l_plm += acc.losses.l_plm;
            sums.l_total += acc.losses.l_total;
        }
        report.epochs.push(mean_epoch(sums, manifests.len()));
    }

    for (id, corpus) in &by_task {
        let composed = compose(&shared, &factors[id])?;
        report.evals.push((
            format!("{id}/test"),
            evaluate(model, &composed, corpus, Split::Test)?,
        ));
    }
    report.wall_clock_secs = start.elapsed().as_secs_f64();

    Ok(GroupOutcome {
        shared,
        factors: factors.into_values().collect(),
        report,
    })
}
