//! Operator surface: one subcommand per pipeline stage, a lock file per
//! output directory, and a content-hash manifest refreshed after every run.
//!
//! Output layout under `--out`:
//!   config.txt            resolved configuration of the run
//!   model.mptm            frozen backbone checkpoint
//!   tasks/                task corpora (train/dev/test per task)
//!   teachers/             one vanilla prompt checkpoint per source task
//!   source/               the source-trained decomposition
//!   targets/<task>/       adapted decomposition + compressed deployment
//!   targets/group/        grouped-target adaptation
//!   reports/              text reports (ablation, few-shot, similarity...)
//!   manifest.txt          sha256 of every artifact above

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use clap::{Parser, Subcommand};
use sha2::{Digest, Sha256};

use mpt_core::checkpoint;
use mpt_core::config::{parse_config_str, serialize_config};
use mpt_core::numerics::{tag_from_str, Rng};

use mpt_core::taskgen::{read_corpus, write_corpus, TaskCorpus};
use mpt_core::trainer::{
    self, adapt_target, adapt_target_group, run_ablation_grid, train_source, train_teacher,
    RunConfig, SuiteCorpora, TeacherSet,
};
use mpt_core::{analysis, FrozenModel};

#[derive(Parser, Debug)]
#[command(
    name = "mpt",
    about = "Multitask prompt tuning on a synthetic seq2seq suite",
    version
)]
pub struct Cli {
    /// Config file (flat `key = value`); defaults apply when omitted.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,

    /// Output directory for checkpoints and reports.
    #[arg(long, global = true, default_value = "mpt-out")]
    pub out: PathBuf,

    /// Override the config seed list with a single seed.
    #[arg(long, global = true, env = "MPT_SEED")]
    pub seed: Option<u64>,

    /// Extra config assignments, e.g. `--set lambda=0.5` (repeatable).
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    /// Generate the synthetic task suite.
    GenTasks,
    /// Train one teacher prompt per source task.
    TrainTeachers,
    /// Multitask source training of the shared decomposition.
    TrainSource,
    /// Adapt the transferred prompt to each target task separately.
    AdaptTarget,
    /// Adapt to all target tasks jointly with one shared matrix.
    AdaptGroup,
    /// Few-shot comparison against the prompt-tuning baseline.
    FewShot,
    /// Decomposition x distillation ablation grid over the config seeds.
    Ablate,
    /// Prompt similarity analysis over adapted targets.
    Analyze,
    /// Parameter-efficiency report.
    Report,
}

impl Command {
    fn stage_name(&self) -> &'static str {
        match self {
            Command::GenTasks => "gen-tasks",
            Command::TrainTeachers => "train-teachers",
            Command::TrainSource => "train-source",
            Command::AdaptTarget => "adapt-target",
            Command::AdaptGroup => "adapt-group",
            Command::FewShot => "few-shot",
            Command::Ablate => "ablate",
            Command::Analyze => "analyze",
            Command::Report => "report",
        }
    }
}

/// Holds the output-directory lock for the duration of a run.
struct DirLock {
    path: PathBuf,
}

impl DirLock {
    fn acquire(out: &Path) -> Result<DirLock> {
        fs::create_dir_all(out)?;
        let path = out.join(".lock");
        match fs::OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(_) => Ok(DirLock { path }),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(anyhow!(
                "output directory {} is locked by another invocation (remove {} if stale)",
                out.display(),
                path.display()
            )),
            Err(e) => Err(e.into()),
        }
    }
}

impl Drop for DirLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

fn resolve_config(cli: &Cli) -> Result<RunConfig> {
    let mut text = match &cli.config {
        Some(path) => fs::read_to_string(path)
            .with_context(|| format!("config {}", path.display()))?,
        None => String::new(),
    };
    for assignment in &cli.overrides {
        if !assignment.contains('=') {
            bail!("--set expects KEY=VALUE, got `{assignment}`");
        }
        text.push('\n');
        text.push_str(assignment);
    }
    let mut cfg = parse_config_str(&text)?;
    if let Some(seed) = cli.seed {
        cfg.seeds = vec![seed];
    }
    cfg.validate()?;
    Ok(cfg)
}

fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path)?;
    let mut hasher = Sha256::new();
    hasher.update(&bytes);
    Ok(format!("{:x}", hasher.finalize()))
}

fn collect_files(dir: &Path, base: &Path, into: &mut Vec<PathBuf>) -> Result<()> {
    let mut entries: Vec<_> = fs::read_dir(dir)?.collect::<std::io::Result<_>>()?;
    entries.sort_by_key(|e| e.file_name());
    for entry in entries {
        let path = entry.path();
        if path.is_dir() {
            collect_files(&path, base, into)?;
        } else {
            let rel = path.strip_prefix(base).expect("under base");
            let name = rel.to_string_lossy();
            if name == "manifest.txt" || name == ".lock" {
                continue;
            }
            into.push(rel.to_path_buf());
        }
    }
    Ok(())
}

/// Rewrites `manifest.txt`: one `<sha256>  <relative path>` line per
/// artifact, sorted by path.
fn write_manifest(out: &Path) -> Result<()> {
    let mut files = Vec::new();
    collect_files(out, out, &mut files)?;
    files.sort();
    let mut text = String::new();
    for rel in files {
        let hash = sha256_file(&out.join(&rel))?;
        text.push_str(&format!("{hash}  {}\n", rel.to_string_lossy()));
    }
    fs::write(out.join("manifest.txt"), text)?;
    Ok(())
}

fn load_model(out: &Path) -> Result<FrozenModel> {
    let path = out.join("model.mptm");
    if !path.exists() {
        bail!(
            "missing artifact {} (run train-teachers first)",
            path.display()
        );
    }
    Ok(checkpoint::load_model(&path)?)
}

fn load_suite(out: &Path, cfg: &RunConfig) -> Result<SuiteCorpora> {
    let dir = out.join("tasks");
    let read = |id: &String| -> Result<TaskCorpus> {
        read_corpus(&dir, id).with_context(|| format!("task {id} (run gen-tasks first)"))
    };
    Ok(SuiteCorpora {
        sources: cfg.source_tasks.iter().map(read).collect::<Result<_>>()?,
        targets: cfg.target_tasks.iter().map(read).collect::<Result<_>>()?,
    })
}

fn load_teachers(out: &Path, cfg: &RunConfig) -> Result<TeacherSet> {
    let mut teachers = TeacherSet::new();
    for id in &cfg.source_tasks {
        let path = out.join("teachers").join(format!("{id}.mptv"));
        if !path.exists() {
            bail!(
                "missing artifact {} (run train-teachers first)",
                path.display()
            );
        }
        teachers.insert(id.clone(), checkpoint::load_vanilla(&path)?);
    }
    Ok(teachers)
}

/// Loads the source-stage decomposition; a vanilla checkpoint (written when
/// decomposition is ablated) loads as a shared matrix with identity factors.
fn load_source(
    out: &Path,
    cfg: &RunConfig,
) -> Result<(mpt_core::SharedPrompt, Vec<mpt_core::TaskFactors>)> {
    let decomposed = out.join("source").join("decomposition.mptp");
    let vanilla = out.join("source").join("shared.mptv");
    if decomposed.exists() {
        Ok(checkpoint::load_decomposition(&decomposed)?)
    } else if vanilla.exists() {
        let prompt = checkpoint::load_vanilla(&vanilla)?;
        let (l, d) = prompt.matrix.shape();
        let factors = cfg
            .source_tasks
            .iter()
            .map(|id| mpt_core::TaskFactors::identity(id.clone(), l, d))
            .collect();
        Ok((mpt_core::SharedPrompt { matrix: prompt.matrix }, factors))
    } else {
        bail!(
            "missing artifact {} (run train-source first)",
            decomposed.display()
        )
    }
}

fn stage_seed(cfg: &RunConfig) -> u64 {
    cfg.seeds[0]
}

fn cmd_gen_tasks(out: &Path, cfg: &RunConfig) -> Result<()> {
    let suite = trainer::build_suite(cfg)?;
    let dir = out.join("tasks");
    for corpus in suite.all() {
        write_corpus(corpus, &dir)?;
    }
    println!(
        "wrote {} tasks to {}",
        cfg.source_tasks.len() + cfg.target_tasks.len(),
        dir.display()
    );
    Ok(())
}

fn cmd_train_teachers(out: &Path, cfg: &RunConfig) -> Result<()> {
    let suite = load_suite(out, cfg)?;
    let model = trainer::build_model(cfg)?;
    checkpoint::save_model(&model, &out.join("model.mptm"))?;

    let seed = stage_seed(cfg);
    let base = Rng::new(seed).derive_teacher_stream();
    let dir = out.join("teachers");
    fs::create_dir_all(&dir)?;
    for corpus in &suite.sources {
        let mut rng = base.derive(tag_from_str(&corpus.task_id));
        let (prompt, report) = train_teacher(&model, corpus, cfg, &mut rng)?;
        checkpoint::save_vanilla(&prompt, &dir.join(format!("{}.mptv", corpus.task_id)))?;
        fs::write(
            dir.join(format!("{}.report.txt", corpus.task_id)),
            report.export(),
        )?;
        let dev = report.evals.first().map(|(_, a)| *a).unwrap_or(0.0);
        println!("teacher {}: dev accuracy {dev:.3}", corpus.task_id);
    }
    Ok(())
}

fn cmd_train_source(out: &Path, cfg: &RunConfig) -> Result<()> {
    let suite = load_suite(out, cfg)?;
    let model = load_model(out)?;
    let teachers = if cfg.needs_teachers() {
        Some(load_teachers(out, cfg)?)
    } else {
        None
    };
    let seed = stage_seed(cfg);
    let outcome = train_source(&model, &suite.sources, teachers.as_ref(), cfg, &Rng::new(seed))?;

    let dir = out.join("source");
    fs::create_dir_all(&dir)?;

    // diagnostic: the first epoch's batch manifests
    let sizes: BTreeMap<String, usize> = suite
        .sources
        .iter()
        .map(|c| (c.task_id.clone(), c.train.len()))
        .collect();
    let total: usize = sizes.values().sum();
    let spec = mpt_core::MixingSpec::new(sizes, cfg.mixing_cap)?;
    let steps = (total / cfg.batch_size).max(1);
    let mut batch_rng = Rng::new(seed).derive(trainer::STREAM_SOURCE_BATCH);
    let manifests = mpt_core::make_source_batches(
        &spec,
        cfg.batch_size,
        steps,
        cfg.stochastic_sampling,
        &mut batch_rng,
    )?;
    fs::write(dir.join("batches.txt"), mpt_core::sampling::export_manifests(&manifests))?;
    if cfg.decomposition {
        checkpoint::save_decomposition(
            &outcome.shared,
            &outcome.factors,
            &dir.join("decomposition.mptp"),
        )?;
    } else {
        checkpoint::save_vanilla(
            &mpt_core::VanillaPrompt {
                matrix: outcome.shared.matrix.clone(),
            },
            &dir.join("shared.mptv"),
        )?;
    }
    fs::write(dir.join("report.txt"), outcome.report.export())?;
    for (task, acc) in &outcome.report.evals {
        println!("source {task}: dev accuracy {acc:.3}");
    }
    Ok(())
}

fn cmd_adapt_target(out: &Path, cfg: &RunConfig) -> Result<()> {
    let suite = load_suite(out, cfg)?;
    let model = load_model(out)?;
    let (shared, factors) = load_source(out, cfg)?;
    let seed = stage_seed(cfg);

    for target in &suite.targets {
        let mut rng = Rng::new(seed)
            .derive_target_stream()
            .derive(tag_from_str(&target.task_id));
        let adapted = adapt_target(&model, &shared, &factors, target, cfg, &mut rng)?;
        let dir = out.join("targets").join(&target.task_id);
        fs::create_dir_all(&dir)?;
        checkpoint::save_decomposition(
            &adapted.shared,
            std::slice::from_ref(&adapted.factors),
            &dir.join("adapted.mptp"),
        )?;
        let compressed = mpt_core::compress(&adapted.shared, &adapted.factors)?;
        checkpoint::save_vanilla(&compressed, &dir.join("compressed.mptv"))?;
        fs::write(dir.join("report.txt"), adapted.report.export())?;
        for (label, acc) in &adapted.report.evals {
            println!("target {label}: accuracy {acc:.3}");
        }
    }
    Ok(())
}

fn cmd_adapt_group(out: &Path, cfg: &RunConfig) -> Result<()> {
    let suite = load_suite(out, cfg)?;
    let model = load_model(out)?;
    let (shared, factors) = load_source(out, cfg)?;
    let seed = stage_seed(cfg);

    let group = adapt_target_group(&model, &shared, &factors, &suite.targets, cfg, &Rng::new(seed))?;
    let dir = out.join("targets").join("group");
    fs::create_dir_all(&dir)?;
    checkpoint::save_decomposition(&group.shared, &group.factors, &dir.join("adapted.mptp"))?;

    let mut report = group.report.export();
    let tau = suite.targets.len() as u64;
    let per_task = mpt_core::param_count(
        cfg.l as u64,
        cfg.d_model as u64,
        mpt_core::ParamCountMode::GroupedPerTask { tau },
    );
    report.push_str(&format!(
        "params\tper-task\t{}\n",
        per_task
            .exact_integer()
            .map(|v| v.to_string())
            .unwrap_or_else(|| format!("{:.1}", per_task.as_f64()))
    ));
    fs::write(dir.join("report.txt"), report)?;
    for (label, acc) in &group.report.evals {
        println!("group {label}: accuracy {acc:.3}");
    }
    Ok(())
}

fn cmd_few_shot(out: &Path, cfg: &RunConfig) -> Result<()> {
    let suite = load_suite(out, cfg)?;
    let model = load_model(out)?;
    let mut text = String::from("task\tseed\tk\tmpt_mean\tpt_mean\n");
    for target in &suite.targets {
        for &seed in &cfg.seeds {
            let (_, outcome) = trainer::full_source_stage(&model, &suite, cfg, seed)?;
            let cmp = trainer::few_shot_compare(
                &model,
                &outcome.shared,
                &outcome.factors,
                target,
                cfg,
                seed,
            )?;
            println!(
                "few-shot {} seed {seed}: MPT {:.4} vs PT {:.4}",
                target.task_id, cmp.mpt_mean, cmp.pt_mean
            );
            text.push_str(&format!(
                "{}\t{seed}\t{}\t{:.6}\t{:.6}\n",
                target.task_id, cmp.k, cmp.mpt_mean, cmp.pt_mean
            ));
        }
    }
    let dir = out.join("reports");
    fs::create_dir_all(&dir)?;
    fs::write(dir.join("few_shot.txt"), text)?;
    Ok(())
}

fn cmd_ablate(out: &Path, cfg: &RunConfig) -> Result<()> {
    let suite = load_suite(out, cfg)?;
    let model = load_model(out)?;
    let table = run_ablation_grid(&model, &suite, cfg)?;
    let dir = out.join("reports");
    fs::create_dir_all(&dir)?;
    fs::write(dir.join("ablation.txt"), table.export())?;
    print!("{}", table.export());
    Ok(())
}

fn cmd_analyze(out: &Path, cfg: &RunConfig) -> Result<()> {
    let targets_dir = out.join("targets");
    let mut embeddings = BTreeMap::new();
    for id in cfg.target_tasks.iter().chain(cfg.source_tasks.iter()) {
        let path = targets_dir.join(id).join("adapted.mptp");
        if !path.exists() {
            continue;
        }
        let (shared, factors) = checkpoint::load_decomposition(&path)?;
        let factors = factors
            .into_iter()
            .next()
            .ok_or_else(|| anyhow!("{}: no task factors", path.display()))?;
        embeddings.insert(id.clone(), analysis::prompt_embedding(&shared, &factors)?);
    }
    if embeddings.len() < 2 {
        bail!("analyze needs at least two adapted targets under {}", targets_dir.display());
    }
    let sim = analysis::similarity_matrix(&embeddings)?;
    let dir = out.join("reports");
    fs::create_dir_all(&dir)?;
    fs::write(dir.join("similarity.txt"), sim.export_text())?;
    fs::write(dir.join("similarity.ppm"), sim.export_heatmap_ppm(32))?;
    print!("{}", sim.export_text());
    Ok(())
}

fn cmd_report(out: &Path, cfg: &RunConfig) -> Result<()> {
    let tau = cfg.target_tasks.len().max(2) as u64;
    let text = analysis::efficiency_report_text(cfg.l as u64, cfg.d_model as u64, tau);
    let paper = analysis::efficiency_report_text(100, 768, 8);
    let dir = out.join("reports");
    fs::create_dir_all(&dir)?;
    fs::write(dir.join("params.txt"), format!("{text}\n{paper}"))?;
    print!("{text}");
    Ok(())
}

/// Executes one invocation end to end: resolve config, lock the output
/// directory, run the stage, refresh the manifest.
pub fn run(cli: &Cli) -> Result<()> {
    let cfg = resolve_config(cli)?;
    let out = cli.out.clone();
    let _lock = DirLock::acquire(&out)?;
    fs::write(out.join("config.txt"), serialize_config(&cfg))?;

    let stage = cli.command.stage_name();
    let result = match cli.command {
        Command::GenTasks => cmd_gen_tasks(&out, &cfg),
        Command::TrainTeachers => cmd_train_teachers(&out, &cfg),
        Command::TrainSource => cmd_train_source(&out, &cfg),
        Command::AdaptTarget => cmd_adapt_target(&out, &cfg),
        Command::AdaptGroup => cmd_adapt_group(&out, &cfg),
        Command::FewShot => cmd_few_shot(&out, &cfg),
        Command::Ablate => cmd_ablate(&out, &cfg),
        Command::Analyze => cmd_analyze(&out, &cfg),
        Command::Report => cmd_report(&out, &cfg),
    };
    result.with_context(|| format!("stage {stage}"))?;
    write_manifest(&out)?;
    Ok(())
}

/// Rng helpers that reuse the trainer's stage streams.
trait StageStreams {
    fn derive_teacher_stream(&self) -> Rng;
    fn derive_target_stream(&self) -> Rng;
}

impl StageStreams for Rng {
    fn derive_teacher_stream(&self) -> Rng {
        self.derive(trainer::STREAM_TEACHER)
    }
    fn derive_target_stream(&self) -> Rng {
        self.derive(trainer::STREAM_TARGET)
    }
}
