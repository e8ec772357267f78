//! Flat `key = value` config files.
//!
//! One assignment per line, `#` starts a comment, unknown keys are errors,
//! missing keys fall back to the documented defaults. The format is
//! deliberately flat so configs diff cleanly across experiments.

use std::path::Path;

use crate::error::{Error, Result};
use crate::model::ModelInit;
use crate::trainer::{OptimizerKind, RunConfig};

fn parse_bool(line: usize, key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "on" | "1" => Ok(true),
        "false" | "off" | "0" => Ok(false),
        other => Err(Error::ConfigParse {
            line,
            msg: format!("{key}: expected true/false, got {other}"),
        }),
    }
}

fn parse_num<T: std::str::FromStr>(line: usize, key: &str, value: &str) -> Result<T> {
    value.parse::<T>().map_err(|_| Error::ConfigParse {
        line,
        msg: format!("{key}: cannot parse {value}"),
    })
}

fn parse_list(value: &str) -> Vec<String> {
    value
        .split(',')
        .map(|s| s.trim().to_string())
        .filter(|s| !s.is_empty())
        .collect()
}

/// Parses config text into a [`RunConfig`], starting from defaults.
pub fn parse_config_str(text: &str) -> Result<RunConfig> {
    let mut cfg = RunConfig::default();
    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        let content = raw.split('#').next().unwrap_or("").trim();
        if content.is_empty() {
            continue;
        }
        let (key, value) = content.split_once('=').ok_or_else(|| Error::ConfigParse {
            line,
            msg: format!("expected key = value, got {content}"),
        })?;
        let key = key.trim();
        let value = value.trim();
        match key {
            "l" => cfg.l = parse_num(line, key, value)?,
            "lambda" => cfg.lambda = parse_num(line, key, value)?,
            "temperature" => cfg.temperature = parse_num(line, key, value)?,
            "lr_shared" => cfg.lr_shared = parse_num(line, key, value)?,
            "lr_specific_source" => cfg.lr_specific_source = parse_num(line, key, value)?,
            "lr_specific_target" => cfg.lr_specific_target = parse_num(line, key, value)?,
            "teacher_epochs" => cfg.teacher_epochs = parse_num(line, key, value)?,
            "source_epochs" => cfg.source_epochs = parse_num(line, key, value)?,
            "target_epochs" => cfg.target_epochs = parse_num(line, key, value)?,
            "batch_size" => cfg.batch_size = parse_num(line, key, value)?,
            "mixing_cap" => cfg.mixing_cap = parse_num(line, key, value)?,
            "seeds" => {
                cfg.seeds = parse_list(value)
                    .iter()
                    .map(|s| parse_num(line, key, s))
                    .collect::<Result<_>>()?;
            }
            "optimizer" => cfg.optimizer = OptimizerKind::parse(value).map_err(|e| {
                Error::ConfigParse {
                    line,
                    msg: e.to_string(),
                }
            })?,
            "decomposition" => cfg.decomposition = parse_bool(line, key, value)?,
            "distillation" => cfg.distillation = parse_bool(line, key, value)?,
            "distill_logits" => cfg.distill_logits = parse_bool(line, key, value)?,
            "distill_hidden" => cfg.distill_hidden = parse_bool(line, key, value)?,
            "prompt_distance" => cfg.prompt_distance = parse_bool(line, key, value)?,
            "stochastic_sampling" => cfg.stochastic_sampling = parse_bool(line, key, value)?,
            "freeze_shared" => cfg.freeze_shared = parse_bool(line, key, value)?,
            "freeze_specific" => cfg.freeze_specific = parse_bool(line, key, value)?,
            "few_shot_k" => cfg.few_shot_k = parse_num(line, key, value)?,
            "few_shot_draws" => cfg.few_shot_draws = parse_num(line, key, value)?,
            "vocab_size" => cfg.vocab_size = parse_num(line, key, value)?,
            "d_model" => cfg.d_model = parse_num(line, key, value)?,
            "n_heads" => cfg.n_heads = parse_num(line, key, value)?,
            "enc_layers" => cfg.enc_layers = parse_num(line, key, value)?,
            "dec_layers" => cfg.dec_layers = parse_num(line, key, value)?,
            "ff_dim" => cfg.ff_dim = parse_num(line, key, value)?,
            "max_src_len" => cfg.max_src_len = parse_num(line, key, value)?,
            "max_tgt_len" => cfg.max_tgt_len = parse_num(line, key, value)?,
            "model_init" => {
                cfg.model_init = match value {
                    "gaussian" => ModelInit::Gaussian,
                    "anchored" => ModelInit::Anchored,
                    other => {
                        return Err(Error::ConfigParse {
                            line,
                            msg: format!("model_init: expected gaussian or anchored, got {other}"),
                        })
                    }
                }
            }
            "source_tasks" => cfg.source_tasks = parse_list(value),
            "target_tasks" => cfg.target_tasks = parse_list(value),
            "train_size" => cfg.train_size = parse_num(line, key, value)?,
            "dev_size" => cfg.dev_size = parse_num(line, key, value)?,
            "test_size" => cfg.test_size = parse_num(line, key, value)?,
            "min_len" => cfg.min_len = parse_num(line, key, value)?,
            "max_len" => cfg.max_len = parse_num(line, key, value)?,
            other => {
                return Err(Error::ConfigParse {
                    line,
                    msg: format!("unknown key {other}"),
                })
            }
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Reads and parses a config file.
pub fn parse_config(path: &Path) -> Result<RunConfig> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::MissingArtifact(format!("config {}: {e}", path.display())))?;
    parse_config_str(&text)
}

/// Serializes a config with every key explicit; `parse_config_str` of the
/// output reproduces the config exactly.
pub fn serialize_config(cfg: &RunConfig) -> String {
    let seeds: Vec<String> = cfg.seeds.iter().map(u64::to_string).collect();
    let mut out = String::new();
    let mut kv = |k: &str, v: String| {
        out.push_str(k);
        out.push_str(" = ");
        out.push_str(&v);
        out.push('\n');
    };
    kv("l", cfg.l.to_string());
    kv("lambda", format!("{}", cfg.lambda));
    kv("temperature", format!("{}", cfg.temperature));
    kv("lr_shared", format!("{}", cfg.lr_shared));
    kv("lr_specific_source", format!("{}", cfg.lr_specific_source));
    kv("lr_specific_target", format!("{}", cfg.lr_specific_target));
    kv("teacher_epochs", cfg.teacher_epochs.to_string());
    kv("source_epochs", cfg.source_epochs.to_string());
    kv("target_epochs", cfg.target_epochs.to_string());
    kv("batch_size", cfg.batch_size.to_string());
    kv("mixing_cap", cfg.mixing_cap.to_string());
    kv("seeds", seeds.join(","));
    kv("optimizer", cfg.optimizer.name().to_string());
    kv("decomposition", cfg.decomposition.to_string());
    kv("distillation", cfg.distillation.to_string());
    kv("distill_logits", cfg.distill_logits.to_string());
    kv("distill_hidden", cfg.distill_hidden.to_string());
    kv("prompt_distance", cfg.prompt_distance.to_string());
    kv("stochastic_sampling", cfg.stochastic_sampling.to_string());
    kv("freeze_shared", cfg.freeze_shared.to_string());
    kv("freeze_specific", cfg.freeze_specific.to_string());
    kv("few_shot_k", cfg.few_shot_k.to_string());
    kv("few_shot_draws", cfg.few_shot_draws.to_string());
    kv("vocab_size", cfg.vocab_size.to_string());
    kv("d_model", cfg.d_model.to_string());
    kv("n_heads", cfg.n_heads.to_string());
    kv("enc_layers", cfg.enc_layers.to_string());
    kv("dec_layers", cfg.dec_layers.to_string());
    kv("ff_dim", cfg.ff_dim.to_string());
    kv("max_src_len", cfg.max_src_len.to_string());
    kv("max_tgt_len", cfg.max_tgt_len.to_string());
    kv(
        "model_init",
        match cfg.model_init {
            ModelInit::Gaussian => "gaussian".to_string(),
            ModelInit::Anchored => "anchored".to_string(),
        },
    );
    kv("source_tasks", cfg.source_tasks.join(","));
    kv("target_tasks", cfg.target_tasks.join(","));
    kv("train_size", cfg.train_size.to_string());
    kv("dev_size", cfg.dev_size.to_string());
    kv("test_size", cfg.test_size.to_string());
    kv("min_len", cfg.min_len.to_string());
    kv("max_len", cfg.max_len.to_string());
    out
}
