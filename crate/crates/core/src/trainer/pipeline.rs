//! End-to-end drivers: suite construction, the decomposition/distillation
//! ablation grid, the target adaptation-strategy ablation, and the few-shot
//! comparison against the prompt-tuning baseline.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::model::FrozenModel;
use crate::numerics::{tag_from_str, Rng};
use crate::prompts::compose;
use crate::taskgen::{
    evaluate, family_for_task_id, few_shot, generate_task, Split, SplitSizes, TaskCorpus,
};
use crate::trainer::loops::{adapt_target, train_source, train_teacher, train_vanilla};
use crate::trainer::{streams, RunConfig, TeacherSet};

/// The generated source and target corpora of one run.
pub struct SuiteCorpora {
    pub sources: Vec<TaskCorpus>,
    pub targets: Vec<TaskCorpus>,
}

impl SuiteCorpora {
    pub fn all(&self) -> impl Iterator<Item = &TaskCorpus> {
        self.sources.iter().chain(self.targets.iter())
    }
}

/// The frozen backbone for a run. Derived from the first seed only, so the
/// per-seed repetitions of an experiment share one "pretrained" model and
/// differ only in prompt initialization and batch schedules.
pub fn build_model(cfg: &RunConfig) -> Result<FrozenModel> {
    cfg.validate()?;
    let mut rng = Rng::new(cfg.seeds[0]).derive(streams::MODEL);
    FrozenModel::init(&cfg.model_config(), cfg.model_init, &mut rng)
}

/// Generates every task in the suite, each from its own named substream of
/// the first seed.
pub fn build_suite(cfg: &RunConfig) -> Result<SuiteCorpora> {
    cfg.validate()?;
    let base = Rng::new(cfg.seeds[0]).derive(streams::SUITE);
    let sizes = SplitSizes {
        train: cfg.train_size,
        dev: cfg.dev_size,
        test: cfg.test_size,
    };
    let gen = |id: &String| -> Result<TaskCorpus> {
        generate_task(
            id.clone(),
            family_for_task_id(id)?,
            cfg.vocab_size,
            sizes,
            (cfg.min_len, cfg.max_len),
            &mut base.derive(tag_from_str(id)),
        )
    };
    Ok(SuiteCorpora {
        sources: cfg.source_tasks.iter().map(gen).collect::<Result<_>>()?,
        targets: cfg.target_tasks.iter().map(gen).collect::<Result<_>>()?,
    })
}

/// Trains one teacher per source task, each on its own substream of `seed`.
pub fn train_all_teachers(
    model: &FrozenModel,
    sources: &[TaskCorpus],
    cfg: &RunConfig,
    seed: u64,
) -> Result<TeacherSet> {
    let base = Rng::new(seed).derive(streams::TEACHER);
    let mut teachers = TeacherSet::new();
    for corpus in sources {
        let mut rng = base.derive(tag_from_str(&corpus.task_id));
        let (prompt, _) = train_teacher(model, corpus, cfg, &mut rng)?;
        teachers.insert(corpus.task_id.clone(), prompt);
    }
    Ok(teachers)
}

/// One cell of the decomposition x distillation grid.
#[derive(Clone, Debug)]
pub struct AblationCell {
    pub decomposition: bool,
    pub distillation: bool,
    /// Mean target test accuracy, one entry per seed.
    pub per_seed_accuracy: Vec<f64>,
    pub mean_accuracy: f64,
}

#[derive(Clone, Debug)]
pub struct AblationTable {
    pub seeds: Vec<u64>,
    /// Cells in fixed order: (off,off), (off,on), (on,off), (on,on).
    pub cells: Vec<AblationCell>,
}

impl AblationTable {
    pub fn cell(&self, decomposition: bool, distillation: bool) -> &AblationCell {
        self.cells
            .iter()
            .find(|c| c.decomposition == decomposition && c.distillation == distillation)
            .expect("all four cells present")
    }

    /// Text table plus the per-seed accuracy rows.
    pub fn export(&self) -> String {
        let mut out = String::from("decomposition\tdistillation\tmean_target_accuracy\n");
        for cell in &self.cells {
            out.push_str(&format!(
                "{}\t{}\t{:.4}\n",
                if cell.decomposition { "on" } else { "off" },
                if cell.distillation { "on" } else { "off" },
                cell.mean_accuracy
            ));
        }
        for (i, &seed) in self.seeds.iter().enumerate() {
            let row: Vec<String> = self
                .cells
                .iter()
                .map(|c| format!("{:.4}", c.per_seed_accuracy[i]))
                .collect();
            out.push_str(&format!("seed\t{seed}\t{}\n", row.join("\t")));
        }
        out
    }
}

/// Runs source training with the given flags and adapts to every target;
/// returns the mean target test accuracy. Shared by the ablation drivers.
fn source_then_adapt(
    model: &FrozenModel,
    suite: &SuiteCorpora,
    teachers: Option<&TeacherSet>,
    cfg: &RunConfig,
    seed: u64,
) -> Result<f64> {
    let source_rng = Rng::new(seed);
    let outcome = train_source(model, &suite.sources, teachers, cfg, &source_rng)?;
    let mut accs = Vec::with_capacity(suite.targets.len());
    for target in &suite.targets {
        let mut rng = Rng::new(seed)
            .derive(streams::TARGET)
            .derive(tag_from_str(&target.task_id));
        let adapted = adapt_target(model, &outcome.shared, &outcome.factors, target, cfg, &mut rng)?;
        let composed = compose(&adapted.shared, &adapted.factors)?;
        accs.push(evaluate(model, &composed, target, Split::Test)?);
    }
    Ok(accs.iter().sum::<f64>() / accs.len() as f64)
}

/// The 2x2 decomposition x distillation grid over the configured seeds.
/// Within one seed all four cells share the task data, the teachers, and —
/// because the batch stream is derived from the seed alone — identical
/// batch manifests.
pub fn run_ablation_grid(
    model: &FrozenModel,
    suite: &SuiteCorpora,
    cfg: &RunConfig,
) -> Result<AblationTable> {
    cfg.validate()?;
    let combos = [(false, false), (false, true), (true, false), (true, true)];
    let mut cells: Vec<AblationCell> = combos
        .iter()
        .map(|&(decomposition, distillation)| AblationCell {
            decomposition,
            distillation,
            per_seed_accuracy: Vec::new(),
            mean_accuracy: 0.0,
        })
        .collect();

    for &seed in &cfg.seeds {
        // Teachers are trained once per seed and shared by the cells that
        // distill from them.
        let teachers = if combos.iter().any(|&(_, distill)| distill) {
            Some(train_all_teachers(model, &suite.sources, cfg, seed)?)
        } else {
            None
        };
        for (cell, &(decomposition, distillation)) in cells.iter_mut().zip(combos.iter()) {
            let mut cell_cfg = cfg.clone();
            cell_cfg.decomposition = decomposition;
            cell_cfg.distillation = distillation;
            cell_cfg.prompt_distance = false;
            let acc = source_then_adapt(model, suite, teachers.as_ref(), &cell_cfg, seed)?;
            cell.per_seed_accuracy.push(acc);
        }
    }
    for cell in &mut cells {
        cell.mean_accuracy =
            cell.per_seed_accuracy.iter().sum::<f64>() / cell.per_seed_accuracy.len() as f64;
    }
    Ok(AblationTable {
        seeds: cfg.seeds.clone(),
        cells,
    })
}

/// Target adaptation-strategy ablation: full two-component updates vs
/// freezing the shared matrix vs freezing the task vectors, from one shared
/// source-trained decomposition per seed.
#[derive(Clone, Debug)]
pub struct AdaptationStrategyResult {
    pub seeds: Vec<u64>,
    /// Mean target accuracy per seed for (full, freeze_shared,
    /// freeze_specific).
    pub full: Vec<f64>,
    pub freeze_shared: Vec<f64>,
    pub freeze_specific: Vec<f64>,
}

pub fn adaptation_strategy_ablation(
    model: &FrozenModel,
    suite: &SuiteCorpora,
    cfg: &RunConfig,
) -> Result<AdaptationStrategyResult> {
    cfg.validate()?;
    let mut result = AdaptationStrategyResult {
        seeds: cfg.seeds.clone(),
        full: Vec::new(),
        freeze_shared: Vec::new(),
        freeze_specific: Vec::new(),
    };
    for &seed in &cfg.seeds {
        let teachers = cfg
            .needs_teachers()
            .then(|| train_all_teachers(model, &suite.sources, cfg, seed))
            .transpose()?;
        let source_rng = Rng::new(seed);
        let outcome = train_source(model, &suite.sources, teachers.as_ref(), cfg, &source_rng)?;

        let eval_variant = |freeze_shared: bool, freeze_specific: bool| -> Result<f64> {
            let mut variant = cfg.clone();
            variant.freeze_shared = freeze_shared;
            variant.freeze_specific = freeze_specific;
            let mut accs = Vec::new();
            for target in &suite.targets {
                let mut rng = Rng::new(seed)
                    .derive(streams::TARGET)
                    .derive(tag_from_str(&target.task_id));
                let adapted = adapt_target(
                    model,
                    &outcome.shared,
                    &outcome.factors,
                    target,
                    &variant,
                    &mut rng,
                )?;
                let composed = compose(&adapted.shared, &adapted.factors)?;
                accs.push(evaluate(model, &composed, target, Split::Test)?);
            }
            Ok(accs.iter().sum::<f64>() / accs.len() as f64)
        };

        result.full.push(eval_variant(false, false)?);
        result.freeze_shared.push(eval_variant(true, false)?);
        result.freeze_specific.push(eval_variant(false, true)?);
    }
    Ok(result)
}

/// Paired few-shot comparison on one target task: adaptation initialized
/// from the source-trained decomposition vs vanilla prompt tuning from
/// scratch, same draws, mean test accuracy over the draws.
#[derive(Clone, Debug)]
pub struct FewShotComparison {
    pub task_id: String,
    pub k: usize,
    pub per_draw: Vec<(f64, f64)>,
    pub mpt_mean: f64,
    pub pt_mean: f64,
}

pub fn few_shot_compare(
    model: &FrozenModel,
    shared: &crate::prompts::SharedPrompt,
    source_factors: &[crate::prompts::TaskFactors],
    target: &TaskCorpus,
    cfg: &RunConfig,
    seed: u64,
) -> Result<FewShotComparison> {
    cfg.validate()?;
    let base = Rng::new(seed)
        .derive(streams::FEW_SHOT)
        .derive(tag_from_str(&target.task_id));
    let mut per_draw = Vec::with_capacity(cfg.few_shot_draws);
    for draw in 0..cfg.few_shot_draws {
        let draw_rng = base.derive(draw as u64);
        let sample = few_shot(target, cfg.few_shot_k, &mut draw_rng.derive(1))?;
        let shots = target.with_train(sample.examples);

        let mpt_acc = {
            let mut rng = draw_rng.derive(2);
            let adapted = adapt_target(model, shared, source_factors, &shots, cfg, &mut rng)?;
            let composed = compose(&adapted.shared, &adapted.factors)?;
            evaluate(model, &composed, target, Split::Test)?
        };
        let pt_acc = {
            let mut rng = draw_rng.derive(3);
            let (prompt, _) =
                train_vanilla(model, &shots, cfg.target_epochs, cfg.lr_shared, cfg, &mut rng)?;
            evaluate(model, &prompt.matrix, target, Split::Test)?
        };
        per_draw.push((mpt_acc, pt_acc));
    }
    let n = per_draw.len() as f64;
    Ok(FewShotComparison {
        task_id: target.task_id.clone(),
        k: cfg.few_shot_k,
        mpt_mean: per_draw.iter().map(|(m, _)| m).sum::<f64>() / n,
        pt_mean: per_draw.iter().map(|(_, p)| p).sum::<f64>() / n,
        per_draw,
    })
}

/// Convenience: teachers for all sources then source training, as the CLI
/// stages do it.
pub fn full_source_stage(
    model: &FrozenModel,
    suite: &SuiteCorpora,
    cfg: &RunConfig,
    seed: u64,
) -> Result<(Option<TeacherSet>, crate::trainer::SourceOutcome)> {
    let teachers = cfg
        .needs_teachers()
        .then(|| train_all_teachers(model, &suite.sources, cfg, seed))
        .transpose()?;
    let outcome = train_source(model, &suite.sources, teachers.as_ref(), cfg, &Rng::new(seed))?;
    Ok((teachers, outcome))
}

/// Looks a task up by id across the whole suite.
pub fn find_task<'a>(suite: &'a SuiteCorpora, id: &str) -> Result<&'a TaskCorpus> {
    suite
        .all()
        .find(|c| c.task_id == id)
        .ok_or_else(|| Error::MissingArtifact(format!("task {id} not in the suite")))
}

/// Per-seed mean as a map keyed by seed, for report rendering.
pub fn seed_means(seeds: &[u64], values: &[f64]) -> BTreeMap<u64, f64> {
    seeds.iter().copied().zip(values.iter().copied()).collect()
}
