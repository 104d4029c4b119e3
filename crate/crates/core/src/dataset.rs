//! Training pools, dev sets and n-gram contamination filtering.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use rand::seq::index;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::registry::{LabeledExample, TaskSpec};
use crate::rng::{str_seed, stream};
use crate::text::{tokenize, TokenUnit};

const POOL_STREAM: u64 = 1;
const DEV_STREAM: u64 = 2;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplingRule {
    pub per_class_cap: usize,
    pub per_task_cap: usize,
    /// Total pool size for specific tasks, sampled uniformly across classes.
    pub overrides: BTreeMap<String, usize>,
}

impl Default for SamplingRule {
    fn default() -> Self {
        Self {
            per_class_cap: 128,
            per_task_cap: 256,
            overrides: BTreeMap::from([("iflytek".to_string(), 512)]),
        }
    }
}

impl SamplingRule {
    pub fn validate(&self) -> Result<(), DatasetError> {
        if self.per_class_cap == 0 || self.per_task_cap == 0 || self.overrides.values().any(|&c| c == 0) {
            return Err(DatasetError::ZeroCap);
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum DatasetError {
    #[error("sampling caps must be >= 1")]
    ZeroCap,
    #[error("task {task_id}: label {label:?} has no examples for the stratified dev set")]
    EmptyClass { task_id: String, label: String },
    #[error("n-gram length must be >= 1")]
    ZeroN,
}

/// `min(k, len)` positions drawn uniformly without replacement, ascending.
fn pick(len: usize, k: usize, rng: &mut rand_chacha::ChaCha8Rng) -> Vec<usize> {
    let mut v = index::sample(rng, len, k.min(len)).into_vec();
    v.sort_unstable();
    v
}

fn by_label<'a>(task: &TaskSpec, examples: &'a [LabeledExample]) -> Vec<Vec<&'a LabeledExample>> {
    task.label_set
        .iter()
        .map(|l| examples.iter().filter(|e| e.gold_label() == Some(l.as_str())).collect())
        .collect()
}

/// Seeded training pool: `min(cap, class size)` per class for classification,
/// `min(cap, n)` overall for generation, or a uniform draw of the override
/// size when the task has one. Output keeps class order, then input order.
pub fn sample_training_pool(
    task: &TaskSpec,
    examples: &[LabeledExample],
    rule: &SamplingRule,
    seed: u64,
) -> Result<Vec<LabeledExample>, DatasetError> {
    rule.validate()?;
    let base = [str_seed(&task.task_id), POOL_STREAM];
    if let Some(&cap) = rule.overrides.get(&task.task_id) {
        let mut rng = stream(seed, &base);
        return Ok(pick(examples.len(), cap, &mut rng)
            .into_iter()
            .map(|i| examples[i].clone())
            .collect());
    }
    if task.format.is_generation() {
        let mut rng = stream(seed, &base);
        return Ok(pick(examples.len(), rule.per_task_cap, &mut rng)
            .into_iter()
            .map(|i| examples[i].clone())
            .collect());
    }
    let mut out = Vec::new();
    for (c, class) in by_label(task, examples).into_iter().enumerate() {
        let mut rng = stream(seed, &[base[0], base[1], c as u64]);
        out.extend(
            pick(class.len(), rule.per_class_cap, &mut rng)
                .into_iter()
                .map(|i| class[i].clone()),
        );
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DevSet {
    pub examples: Vec<LabeledExample>,
    pub warnings: Vec<String>,
}

impl DevSet {
    pub fn ids(&self) -> BTreeSet<&str> {
        self.examples.iter().map(|e| e.id.as_str()).collect()
    }
}

pub const DEV_UNIFORM: usize = 32;
pub const DEV_PER_LABEL: usize = 8;
/// Label count from which the dev set is stratified.
pub const DEV_STRATIFY_FROM: usize = 5;

/// Seeded dev set: 32 uniform examples for generation tasks and tasks with
/// fewer than 5 labels, otherwise 8 per label.
pub fn build_dev_set(task: &TaskSpec, examples: &[LabeledExample], seed: u64) -> Result<DevSet, DatasetError> {
    let base = [str_seed(&task.task_id), DEV_STREAM];
    let mut warnings = Vec::new();
    let mut out = Vec::new();
    if task.format.is_generation() || task.label_set.len() < DEV_STRATIFY_FROM {
        if examples.len() < DEV_UNIFORM {
            warnings.push(format!(
                "task {}: only {} examples available for a dev set of {DEV_UNIFORM}",
                task.task_id,
                examples.len()
            ));
        }
        let mut rng = stream(seed, &base);
        out.extend(
            pick(examples.len(), DEV_UNIFORM, &mut rng)
                .into_iter()
                .map(|i| examples[i].clone()),
        );
    } else {
        for (c, class) in by_label(task, examples).into_iter().enumerate() {
            let label = &task.label_set[c];
            if class.is_empty() {
                return Err(DatasetError::EmptyClass {
                    task_id: task.task_id.clone(),
                    label: label.clone(),
                });
            }
            if class.len() < DEV_PER_LABEL {
                warnings.push(format!(
                    "task {}: label {label:?} has only {} examples for {DEV_PER_LABEL} dev slots",
                    task.task_id,
                    class.len()
                ));
            }
            let mut rng = stream(seed, &[base[0], base[1], c as u64]);
            out.extend(
                pick(class.len(), DEV_PER_LABEL, &mut rng)
                    .into_iter()
                    .map(|i| class[i].clone()),
            );
        }
    }
    Ok(DevSet {
        examples: out,
        warnings,
    })
}

/// Dev set first, then a training pool drawn from the remaining examples, so
/// the two never share an example id.
pub fn split_dev_and_pool(
    task: &TaskSpec,
    examples: &[LabeledExample],
    rule: &SamplingRule,
    seed: u64,
) -> Result<(DevSet, Vec<LabeledExample>), DatasetError> {
    let dev = build_dev_set(task, examples, seed)?;
    let taken = dev.ids();
    let rest: Vec<LabeledExample> = examples
        .iter()
        .filter(|e| !taken.contains(e.id.as_str()))
        .cloned()
        .collect();
    let pool = sample_training_pool(task, &rest, rule, seed)?;
    Ok((dev, pool))
}

/// Text fields an example contributes to n-gram matching. Windows never span
/// two fields.
fn fields(ex: &LabeledExample) -> impl Iterator<Item = &str> {
    ex.segments.iter().map(String::as_str).chain(ex.gold_text())
}

fn window_hash(window: &[&str]) -> u128 {
    let mut h = Sha256::new();
    for (i, t) in window.iter().enumerate() {
        if i > 0 {
            h.update([0x1f]);
        }
        h.update(t.as_bytes());
    }
    let d = h.finalize();
    u128::from_be_bytes(d[..16].try_into().expect("16 bytes"))
}

#[derive(Debug, Clone, PartialEq, Eq)]
struct Exemplar {
    tokens: Vec<String>,
    source_id: String,
}

/// Hashed n-gram windows of a protected corpus. Each hash keeps the distinct
/// windows behind it, so lookups are exact.
#[derive(Debug, Clone)]
pub struct NGramIndex {
    n: usize,
    unit: TokenUnit,
    windows: HashMap<u128, Vec<Exemplar>>,
}

impl NGramIndex {
    pub fn n(&self) -> usize {
        self.n
    }

    pub fn unit(&self) -> TokenUnit {
        self.unit
    }

    /// Number of distinct windows.
    pub fn len(&self) -> usize {
        self.windows.values().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.windows.is_empty()
    }

    /// Protected example holding `window`, if any.
    pub fn lookup(&self, window: &[&str]) -> Option<&str> {
        self.windows
            .get(&window_hash(window))?
            .iter()
            .find(|e| e.tokens.len() == window.len() && e.tokens.iter().zip(window).all(|(a, b)| a == b))
            .map(|e| e.source_id.as_str())
    }

    /// First protected example sharing a window with `ex`.
    pub fn first_hit(&self, ex: &LabeledExample) -> Option<&str> {
        fields(ex).find_map(|f| {
            let toks = tokenize(f, self.unit);
            toks.windows(self.n).find_map(|w| self.lookup(w))
        })
    }
}

/// Indexes every length-`n` window of every protected example. The first
/// example containing a window is recorded as its source.
pub fn build_ngram_index(protected: &[LabeledExample], n: usize, unit: TokenUnit) -> Result<NGramIndex, DatasetError> {
    if n == 0 {
        return Err(DatasetError::ZeroN);
    }
    let per_example: Vec<Vec<(u128, Vec<String>)>> = protected
        .par_iter()
        .map(|ex| {
            fields(ex)
                .flat_map(|f| {
                    tokenize(f, unit)
                        .windows(n)
                        .map(|w| (window_hash(w), w.iter().map(|t| t.to_string()).collect()))
                        .collect::<Vec<_>>()
                })
                .collect()
        })
        .collect();
    let mut windows: HashMap<u128, Vec<Exemplar>> = HashMap::new();
    for (ex, wins) in protected.iter().zip(per_example) {
        for (h, tokens) in wins {
            let slot = windows.entry(h).or_default();
            if !slot.iter().any(|e| e.tokens == tokens) {
                slot.push(Exemplar {
                    tokens,
                    source_id: ex.id.clone(),
                });
            }
        }
    }
    Ok(NGramIndex { n, unit, windows })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Removal {
    pub example_id: String,
    pub matched_test_id: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FilterOutcome {
    pub kept: Vec<LabeledExample>,
    pub removed: Vec<LabeledExample>,
    /// One record per removed example, aligned with `removed`.
    pub report: Vec<Removal>,
}

/// Removes every training example that shares a window with the index.
/// Input order is preserved in both halves.
pub fn contamination_filter(train: &[LabeledExample], index: &NGramIndex) -> FilterOutcome {
    let hits: Vec<Option<String>> = train
        .par_iter()
        .map(|ex| index.first_hit(ex).map(str::to_string))
        .collect();
    let mut out = FilterOutcome {
        kept: Vec::new(),
        removed: Vec::new(),
        report: Vec::new(),
    };
    for (ex, hit) in train.iter().zip(hits) {
        match hit {
            Some(matched_test_id) => {
                out.report.push(Removal {
                    example_id: ex.id.clone(),
                    matched_test_id,
                });
                out.removed.push(ex.clone());
            }
            None => out.kept.push(ex.clone()),
        }
    }
    out
}
