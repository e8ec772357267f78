//! Multitask batch construction.
//!
//! Each source batch is built in two stages: draw K uniformly from
//! {2..kappa} and pick K distinct tasks, then fill the batch slots by
//! examples-proportional mixing over the chosen tasks, with per-task sizes
//! clipped at a cap so giant tasks cannot drown the mixture.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::numerics::Rng;

/// Task train-split sizes and the mixing cap.
#[derive(Clone, Debug)]
pub struct MixingSpec {
    /// Train-split size per task id. Ordered so iteration is deterministic.
    pub task_sizes: BTreeMap<String, usize>,
    /// Effective size ceiling per task when computing mixing weights.
    pub cap: usize,
}

impl MixingSpec {
    pub fn new(task_sizes: BTreeMap<String, usize>, cap: usize) -> Result<Self> {
        if cap == 0 {
            return Err(Error::arg("MixingSpec", "cap must be >= 1"));
        }
        if task_sizes.is_empty() {
            return Err(Error::arg("MixingSpec", "no tasks"));
        }
        if let Some((id, _)) = task_sizes.iter().find(|(_, &s)| s == 0) {
            return Err(Error::arg(
                "MixingSpec",
                format!("task {id} has an empty train split"),
            ));
        }
        Ok(MixingSpec { task_sizes, cap })
    }

    pub fn task_ids(&self) -> Vec<&str> {
        self.task_sizes.keys().map(String::as_str).collect()
    }
}

/// One batch worth of (task, train-example index) slots.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BatchManifest {
    pub slots: Vec<(String, usize)>,
    pub batch_size: usize,
    /// Seed of the generator stream that produced this manifest.
    pub seed: u64,
    /// Tasks that were eligible when the batch was drawn.
    pub allowed_tasks: Vec<String>,
}

impl BatchManifest {
    /// Slots grouped by task, in sorted task order.
    pub fn by_task(&self) -> BTreeMap<&str, Vec<usize>> {
        let mut grouped: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
        for (task, idx) in &self.slots {
            grouped.entry(task.as_str()).or_default().push(*idx);
        }
        grouped
    }
}

/// Draws K uniformly from {2, ..., kappa} inclusive, then K distinct task
/// indices uniformly without replacement. Returns the chosen indices.
pub fn stochastic_task_subset(kappa: usize, rng: &mut Rng) -> Result<Vec<usize>> {
    if kappa < 2 {
        return Err(Error::arg(
            "stochastic_task_subset",
            format!("kappa must be >= 2, got {kappa}"),
        ));
    }
    let k = rng.range_inclusive(2, kappa);
    Ok(rng.sample_distinct(kappa, k))
}

/// Fills `batch_size` slots. Each slot's task is drawn with probability
/// `min(size, cap) / sum(min(size_j, cap))` over the allowed tasks; the
/// example index is uniform over that task's full train split.
pub fn proportional_batch(
    spec: &MixingSpec,
    allowed_tasks: &[&str],
    batch_size: usize,
    rng: &mut Rng,
) -> Result<BatchManifest> {
    if allowed_tasks.is_empty() {
        return Err(Error::arg("proportional_batch", "empty task set"));
    }
    if batch_size == 0 {
        return Err(Error::arg("proportional_batch", "batch_size must be >= 1"));
    }
    let mut weights = Vec::with_capacity(allowed_tasks.len());
    let mut sizes = Vec::with_capacity(allowed_tasks.len());
    for &task in allowed_tasks {
        let size = *spec
            .task_sizes
            .get(task)
            .ok_or_else(|| Error::arg("proportional_batch", format!("unknown task {task}")))?;
        weights.push(size.min(spec.cap) as f64);
        sizes.push(size);
    }
    let total: f64 = weights.iter().sum();

    let mut slots = Vec::with_capacity(batch_size);
    for _ in 0..batch_size {
        let mut dart = rng.uniform() * total;
        let mut pick = allowed_tasks.len() - 1;
        for (i, w) in weights.iter().enumerate() {
            dart -= w;
            if dart <= 0.0 {
                pick = i;
                break;
            }
        }
        let example = rng.below(sizes[pick]);
        slots.push((allowed_tasks[pick].to_string(), example));
    }
    Ok(BatchManifest {
        slots,
        batch_size,
        seed: rng.seed(),
        allowed_tasks: allowed_tasks.iter().map(|s| s.to_string()).collect(),
    })
}

/// Deterministic stream of source batches: per batch, draw a stochastic task
/// subset (or use all tasks when `stochastic` is off), then mix
/// proportionally within it.
pub fn make_source_batches(
    spec: &MixingSpec,
    batch_size: usize,
    steps: usize,
    stochastic: bool,
    rng: &mut Rng,
) -> Result<Vec<BatchManifest>> {
    let ids = spec.task_ids();
    let kappa = ids.len();
    let mut batches = Vec::with_capacity(steps);
    for _ in 0..steps {
        let allowed: Vec<&str> = if stochastic && kappa >= 2 {
            stochastic_task_subset(kappa, rng)?
                .into_iter()
                .map(|i| ids[i])
                .collect()
        } else {
            ids.clone()
        };
        batches.push(proportional_batch(spec, &allowed, batch_size, rng)?);
    }
    Ok(batches)
}

/// Diagnostic export: one line per batch,
/// `batch_idx<TAB>task_id:example_idx,...`.
pub fn export_manifests(batches: &[BatchManifest]) -> String {
    let mut out = String::new();
    for (idx, batch) in batches.iter().enumerate() {
        out.push_str(&idx.to_string());
        out.push('\t');
        let line: Vec<String> = batch
            .slots
            .iter()
            .map(|(task, ex)| format!("{task}:{ex}"))
            .collect();
        out.push_str(&line.join(","));
        out.push('\n');
    }
    out
}
