//! Synthetic seq2seq tasks.
//!
//! Six families, each with a closed-form source-to-target relation so every
//! generated example can be re-checked by an oracle: copy, reverse, sort,
//! per-task token substitution, and two single-token classification tasks.
//! Splits are disjoint by source content. Token ids 0..3 are reserved
//! (pad, bos, eos, sep); task content uses the rest of the vocabulary.

use std::collections::HashSet;
use std::fmt;
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{greedy_decode, FrozenModel};
use crate::numerics::{Matrix, Rng};
use crate::tokens;

pub type Example = (Vec<usize>, Vec<usize>);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TaskFamily {
    Copy,
    Reverse,
    Sort,
    MapSubstitute,
    ClassifyParity,
    ClassifyMajority,
}

impl TaskFamily {
    pub fn parse(s: &str) -> Result<TaskFamily> {
        match s {
            "copy" => Ok(TaskFamily::Copy),
            "reverse" => Ok(TaskFamily::Reverse),
            "sort" => Ok(TaskFamily::Sort),
            "map-substitute" => Ok(TaskFamily::MapSubstitute),
            "classify-parity" => Ok(TaskFamily::ClassifyParity),
            "classify-majority" => Ok(TaskFamily::ClassifyMajority),
            other => Err(Error::arg("TaskFamily", format!("unknown family {other}"))),
        }
    }
}

impl fmt::Display for TaskFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self {
            TaskFamily::Copy => "copy",
            TaskFamily::Reverse => "reverse",
            TaskFamily::Sort => "sort",
            TaskFamily::MapSubstitute => "map-substitute",
            TaskFamily::ClassifyParity => "classify-parity",
            TaskFamily::ClassifyMajority => "classify-majority",
        };
        f.write_str(name)
    }
}

/// Maps a suite task id to its family. Ids follow the convention
/// `copy`, `reverse`, `sort`, `map_sub_<variant>`, `classify_parity`,
/// `classify_majority`.
pub fn family_for_task_id(id: &str) -> Result<TaskFamily> {
    if id.starts_with("copy") {
        Ok(TaskFamily::Copy)
    } else if id.starts_with("reverse") {
        Ok(TaskFamily::Reverse)
    } else if id.starts_with("sort") {
        Ok(TaskFamily::Sort)
    } else if id.starts_with("map_sub") {
        Ok(TaskFamily::MapSubstitute)
    } else if id.starts_with("classify_parity") {
        Ok(TaskFamily::ClassifyParity)
    } else if id.starts_with("classify_majority") {
        Ok(TaskFamily::ClassifyMajority)
    } else {
        Err(Error::arg(
            "family_for_task_id",
            format!("cannot infer a task family from id {id}"),
        ))
    }
}

/// A named supervised seq2seq dataset with train/dev/test splits.
#[derive(Clone, Debug)]
pub struct TaskCorpus {
    pub task_id: String,
    pub family: TaskFamily,
    pub vocab_size: usize,
    pub train: Vec<Example>,
    pub dev: Vec<Example>,
    pub test: Vec<Example>,
    /// Generation seed (metadata; 0 for corpora loaded from disk).
    pub seed: u64,
    pub len_range: (usize, usize),
    /// Substitution table over the whole vocabulary, for the
    /// map-substitute family.
    pub substitution: Option<Vec<usize>>,
}

impl TaskCorpus {
    pub fn split(&self, which: Split) -> &[Example] {
        match which {
            Split::Train => &self.train,
            Split::Dev => &self.dev,
            Split::Test => &self.test,
        }
    }

    /// Clone with the train split replaced (used for few-shot adaptation).
    pub fn with_train(&self, train: Vec<Example>) -> TaskCorpus {
        TaskCorpus {
            train,
            ..self.clone()
        }
    }

    /// Applies the family's closed-form relation to a source sequence.
    pub fn oracle_target(&self, src: &[usize]) -> Result<Vec<usize>> {
        oracle_target(self.family, self.substitution.as_deref(), self.vocab_size, src)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Dev,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Dev => "dev",
            Split::Test => "test",
        })
    }
}

/// Number of examples to generate per split.
#[derive(Clone, Copy, Debug)]
pub struct SplitSizes {
    pub train: usize,
    pub dev: usize,
    pub test: usize,
}

// Parity labels sit at the extremes of the content alphabet so they stay
// maximally distinguishable.
fn parity_labels(vocab_size: usize) -> (usize, usize) {
    (tokens::NUM_RESERVED, vocab_size - 1)
}

fn oracle_target(
    family: TaskFamily,
    substitution: Option<&[usize]>,
    vocab_size: usize,
    src: &[usize],
) -> Result<Vec<usize>> {
    match family {
        TaskFamily::Copy => Ok(src.to_vec()),
        TaskFamily::Reverse => Ok(src.iter().rev().copied().collect()),
        TaskFamily::Sort => {
            let mut out = src.to_vec();
            out.sort_unstable();
            Ok(out)
        }
        TaskFamily::MapSubstitute => {
            let table = substitution.ok_or_else(|| {
                Error::arg("oracle_target", "map-substitute task without a table")
            })?;
            Ok(src.iter().map(|&t| table[t]).collect())
        }
        TaskFamily::ClassifyParity => {
            let (even, odd) = parity_labels(vocab_size);
            let sum: usize = src.iter().sum();
            Ok(vec![if sum % 2 == 0 { even } else { odd }])
        }
        TaskFamily::ClassifyMajority => {
            // most frequent token; smallest id wins ties
            let mut best = src[0];
            let mut best_count = 0;
            let mut seen = src.to_vec();
            seen.sort_unstable();
            seen.dedup();
            for &cand in &seen {
                let count = src.iter().filter(|&&t| t == cand).count();
                if count > best_count {
                    best = cand;
                    best_count = count;
                }
            }
            Ok(vec![best])
        }
    }
}

/// Generates a task corpus with disjoint splits. Sources are uniform over
/// content tokens and lengths; targets come from the family oracle.
pub fn generate_task(
    task_id: impl Into<String>,
    family: TaskFamily,
    vocab_size: usize,
    sizes: SplitSizes,
    len_range: (usize, usize),
    rng: &mut Rng,
) -> Result<TaskCorpus> {
    let task_id = task_id.into();
    if vocab_size < tokens::NUM_RESERVED + 2 {
        return Err(Error::arg(
            "generate_task",
            format!(
                "vocab_size must be >= {} (reserved specials plus content), got {vocab_size}",
                tokens::NUM_RESERVED + 2
            ),
        ));
    }
    let (min_len, max_len) = len_range;
    if min_len == 0 || min_len > max_len {
        return Err(Error::arg(
            "generate_task",
            format!("bad length range {min_len}..{max_len}"),
        ));
    }
    if sizes.train == 0 || sizes.dev == 0 || sizes.test == 0 {
        return Err(Error::arg("generate_task", "every split needs >= 1 example"));
    }

    let substitution = match family {
        TaskFamily::MapSubstitute => {
            // Permute the content alphabet; specials map to themselves.
            let mut table: Vec<usize> = (0..vocab_size).collect();
            let mut content: Vec<usize> = (tokens::NUM_RESERVED..vocab_size).collect();
            rng.shuffle(&mut content);
            for (offset, &target) in content.iter().enumerate() {
                table[tokens::NUM_RESERVED + offset] = target;
            }
            Some(table)
        }
        _ => None,
    };

    let total = sizes.train + sizes.dev + sizes.test;
    let mut seen: HashSet<Vec<usize>> = HashSet::with_capacity(total);
    let mut examples: Vec<Example> = Vec::with_capacity(total);
    let content_range = vocab_size - tokens::NUM_RESERVED;
    let mut attempts: usize = 0;
    let attempt_budget = total.saturating_mul(200);
    while examples.len() < total {
        attempts += 1;
        if attempts > attempt_budget {
            return Err(Error::arg(
                "generate_task",
                format!(
                    "could not draw {total} distinct sources from vocab {vocab_size} and lengths {min_len}..{max_len}"
                ),
            ));
        }
        let len = rng.range_inclusive(min_len, max_len);
        let src: Vec<usize> = (0..len)
            .map(|_| tokens::NUM_RESERVED + rng.below(content_range))
            .collect();
        if !seen.insert(src.clone()) {
            continue;
        }
        let tgt = oracle_target(family, substitution.as_deref(), vocab_size, &src)?;
        examples.push((src, tgt));
    }

    let test = examples.split_off(sizes.train + sizes.dev);
    let dev = examples.split_off(sizes.train);
    Ok(TaskCorpus {
        task_id,
        family,
        vocab_size,
        train: examples,
        dev,
        test,
        seed: rng.seed(),
        len_range,
        substitution,
    })
}

/// A deterministic draw of `k` training examples.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FewShotSample {
    pub task_id: String,
    pub k: usize,
    pub examples: Vec<Example>,
    pub seed: u64,
}

/// Uniform sample of `k` train examples without replacement.
pub fn few_shot(corpus: &TaskCorpus, k: usize, rng: &mut Rng) -> Result<FewShotSample> {
    if k == 0 || k > corpus.train.len() {
        return Err(Error::arg(
            "few_shot",
            format!("k = {k} out of range for train size {}", corpus.train.len()),
        ));
    }
    let picks = rng.sample_distinct(corpus.train.len(), k);
    Ok(FewShotSample {
        task_id: corpus.task_id.clone(),
        k,
        examples: picks.iter().map(|&i| corpus.train[i].clone()).collect(),
        seed: rng.seed(),
    })
}

/// Greedy-decode exact-match accuracy of a prompt on one split.
pub fn evaluate(
    model: &FrozenModel,
    prompt: &Matrix,
    corpus: &TaskCorpus,
    split: Split,
) -> Result<f64> {
    let examples = corpus.split(split);
    if examples.is_empty() {
        return Err(Error::arg(
            "evaluate",
            format!("{split} split of task {} is empty", corpus.task_id),
        ));
    }
    let mut hits = 0usize;
    for (src, tgt) in examples {
        if &greedy_decode(model, prompt, src)? == tgt {
            hits += 1;
        }
    }
    Ok(hits as f64 / examples.len() as f64)
}

fn format_split(corpus: &TaskCorpus, examples: &[Example]) -> String {
    let mut out = format!(
        "#task {} family={} vocab={} seed={}\n",
        corpus.task_id, corpus.family, corpus.vocab_size, corpus.seed
    );
    for (src, tgt) in examples {
        let s: Vec<String> = src.iter().map(usize::to_string).collect();
        let t: Vec<String> = tgt.iter().map(usize::to_string).collect();
        out.push_str(&s.join(" "));
        out.push('\t');
        out.push_str(&t.join(" "));
        out.push('\n');
    }
    out
}

/// Writes `<id>.train.txt`, `<id>.dev.txt`, `<id>.test.txt` under `dir`.
pub fn write_corpus(corpus: &TaskCorpus, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    for (split, examples) in [
        ("train", &corpus.train),
        ("dev", &corpus.dev),
        ("test", &corpus.test),
    ] {
        let path = dir.join(format!("{}.{split}.txt", corpus.task_id));
        std::fs::write(path, format_split(corpus, examples))?;
    }
    Ok(())
}

fn parse_split(text: &str) -> Result<(String, TaskFamily, usize, u64, Vec<Example>)> {
    let mut lines = text.lines().enumerate();
    let (_, header) = lines
        .next()
        .ok_or_else(|| Error::CorpusParse {
            line: 1,
            msg: "empty file".into(),
        })?;
    let header = header.strip_prefix("#task ").ok_or_else(|| Error::CorpusParse {
        line: 1,
        msg: "missing #task header".into(),
    })?;
    let mut task_id = None;
    let mut family = None;
    let mut vocab = None;
    let mut seed = 0u64;
    for (i, field) in header.split_whitespace().enumerate() {
        if i == 0 {
            task_id = Some(field.to_string());
            continue;
        }
        let (key, value) = field.split_once('=').ok_or_else(|| Error::CorpusParse {
            line: 1,
            msg: format!("malformed header field {field}"),
        })?;
        match key {
            "family" => family = Some(TaskFamily::parse(value)?),
            "vocab" => {
                vocab = Some(value.parse::<usize>().map_err(|_| Error::CorpusParse {
                    line: 1,
                    msg: format!("bad vocab {value}"),
                })?)
            }
            "seed" => {
                seed = value.parse::<u64>().map_err(|_| Error::CorpusParse {
                    line: 1,
                    msg: format!("bad seed {value}"),
                })?
            }
            other => {
                return Err(Error::CorpusParse {
                    line: 1,
                    msg: format!("unknown header key {other}"),
                })
            }
        }
    }
    let task_id = task_id.ok_or_else(|| Error::CorpusParse {
        line: 1,
        msg: "header missing task id".into(),
    })?;
    let family = family.ok_or_else(|| Error::CorpusParse {
        line: 1,
        msg: "header missing family".into(),
    })?;
    let vocab = vocab.ok_or_else(|| Error::CorpusParse {
        line: 1,
        msg: "header missing vocab".into(),
    })?;

    let parse_tokens = |line_no: usize, text: &str| -> Result<Vec<usize>> {
        text.split_whitespace()
            .map(|tok| {
                let id = tok.parse::<usize>().map_err(|_| Error::CorpusParse {
                    line: line_no,
                    msg: format!("bad token {tok}"),
                })?;
                if id >= vocab {
                    return Err(Error::CorpusParse {
                        line: line_no,
                        msg: format!("token id {id} >= vocab {vocab}"),
                    });
                }
                Ok(id)
            })
            .collect()
    };

    let mut examples = Vec::new();
    for (idx, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let line_no = idx + 1;
        let (src, tgt) = line.split_once('\t').ok_or_else(|| Error::CorpusParse {
            line: line_no,
            msg: "missing tab between source and target".into(),
        })?;
        examples.push((parse_tokens(line_no, src)?, parse_tokens(line_no, tgt)?));
    }
    Ok((task_id, family, vocab, seed, examples))
}

/// Reads the three split files of a task back into a corpus. The
/// map-substitute table is not stored on disk, so reloaded corpora support
/// training and evaluation but not fresh oracle queries.
pub fn read_corpus(dir: &Path, task_id: &str) -> Result<TaskCorpus> {
    let mut splits = Vec::with_capacity(3);
    for split in ["train", "dev", "test"] {
        let path = dir.join(format!("{task_id}.{split}.txt"));
        let text = std::fs::read_to_string(&path).map_err(|e| {
            Error::MissingArtifact(format!("corpus file {}: {e}", path.display()))
        })?;
        splits.push(parse_split(&text)?);
    }
    let (id, family, vocab, seed, train) = splits.remove(0);
    let (_, _, _, _, dev) = splits.remove(0);
    let (_, _, _, _, test) = splits.remove(0);
    let len_range = train
        .iter()
        .map(|(src, _)| src.len())
        .fold((usize::MAX, 0), |(lo, hi), len| (lo.min(len), hi.max(len)));
    Ok(TaskCorpus {
        task_id: id,
        family,
        vocab_size: vocab,
        train,
        dev,
        test,
        seed,
        len_range,
        substitution: None,
    })
}
