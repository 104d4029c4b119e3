//! Self-training: retrieve task-similar unlabeled text, pseudo-label the
//! confident part and grow the training sets epoch by epoch.

use std::collections::{BTreeMap, BTreeSet};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::{BackendError, EmbedBackend, EmbedRequest, RefreshBackend, RefreshRequest};
use crate::gps::DynError;
use crate::prompt::PromptTemplate;
use crate::registry::{Gold, LabeledExample, TaskSpec};
use crate::scoring::ScoringContext;

pub const DEFAULT_TAU: f64 = 0.9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UnlabeledExample {
    pub source_id: String,
    pub segments: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub embedding: Option<Vec<f64>>,
}

impl UnlabeledExample {
    pub fn new(source_id: impl Into<String>, segments: Vec<String>) -> Self {
        Self {
            source_id: source_id.into(),
            segments,
            embedding: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PseudoLabel {
    pub source_id: String,
    pub segments: Vec<String>,
    pub prediction: Gold,
    pub confidence: f64,
    pub epoch: usize,
    pub model_version: u64,
}

impl PseudoLabel {
    pub fn to_example(&self) -> LabeledExample {
        LabeledExample::new(self.source_id.clone(), self.segments.clone(), self.prediction.clone())
    }
}

#[derive(Debug, Error)]
pub enum SelfTrainError {
    #[error("k must be >= 1")]
    ZeroK,
    #[error("{0} has a zero-norm vector")]
    ZeroNorm(String),
    #[error("{0} has a non-finite vector")]
    NonFinite(String),
    #[error("vector for {id} has dimension {got}, expected {want}")]
    Dim { id: String, got: usize, want: usize },
    #[error("no query vectors")]
    NoQueries,
    #[error("{0} has no embedding and no embed client was given")]
    MissingEmbedding(String),
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error("tau must be in (0, 1], got {0}")]
    Tau(f64),
    #[error("epochs must be >= 1")]
    ZeroEpochs,
    #[error("task {0} has an unlabeled pool but is not in the task list")]
    UnknownTask(String),
    #[error("{source_id}: confidence {confidence} is outside [0, 1]")]
    Confidence { source_id: String, confidence: f64 },
    #[error("task {task_id}, {source_id}: {source}")]
    Label {
        task_id: String,
        source_id: String,
        #[source]
        source: DynError,
    },
}

fn norm(id: &str, v: &[f64]) -> Result<f64, SelfTrainError> {
    if v.iter().any(|x| !x.is_finite()) {
        return Err(SelfTrainError::NonFinite(id.to_string()));
    }
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n == 0.0 {
        return Err(SelfTrainError::ZeroNorm(id.to_string()));
    }
    Ok(n)
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb)
}

/// Text sent to the embedder for a multi-segment example.
pub fn embedding_text(segments: &[String]) -> String {
    segments.join("\n")
}

/// The `k` pool items with the highest maximum cosine similarity to any
/// query, descending, ties by `source_id`. Items without an embedding are
/// embedded through `embedder` in one request.
pub fn retrieve_similar(
    pool: &[UnlabeledExample],
    queries: &[Vec<f64>],
    k: usize,
    embedder: Option<&dyn EmbedBackend>,
) -> Result<Vec<(UnlabeledExample, f64)>, SelfTrainError> {
    if k == 0 {
        return Err(SelfTrainError::ZeroK);
    }
    let first = queries.first().ok_or(SelfTrainError::NoQueries)?;
    let dim = first.len();
    for (i, q) in queries.iter().enumerate() {
        let id = format!("query {i}");
        if q.len() != dim {
            return Err(SelfTrainError::Dim {
                id,
                got: q.len(),
                want: dim,
            });
        }
        norm(&id, q)?;
    }

    let missing: Vec<usize> = (0..pool.len()).filter(|&i| pool[i].embedding.is_none()).collect();
    let mut computed: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
    if !missing.is_empty() {
        let client = embedder.ok_or_else(|| SelfTrainError::MissingEmbedding(pool[missing[0]].source_id.clone()))?;
        let req = EmbedRequest {
            texts: missing.iter().map(|&i| embedding_text(&pool[i].segments)).collect(),
        };
        let resp = client.embed(&req)?;
        resp.validate(&req)?;
        computed.extend(missing.into_iter().zip(resp.vectors));
    }

    let mut scored = Vec::with_capacity(pool.len());
    for (i, item) in pool.iter().enumerate() {
        let v = item
            .embedding
            .as_ref()
            .or_else(|| computed.get(&i))
            .expect("embedded above");
        if v.len() != dim {
            return Err(SelfTrainError::Dim {
                id: item.source_id.clone(),
                got: v.len(),
                want: dim,
            });
        }
        norm(&item.source_id, v)?;
        let sim = queries.iter().map(|q| cosine(q, v)).fold(f64::NEG_INFINITY, f64::max);
        let mut out = item.clone();
        out.embedding = Some(v.clone());
        scored.push((out, sim));
    }
    scored.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.source_id.cmp(&b.0.source_id)));
    scored.truncate(k);
    Ok(scored)
}

/// Produces a prediction and a confidence in `[0, 1]` for unlabeled input.
pub trait PseudoLabeler: Sync {
    fn label(&self, task: &TaskSpec, example: &UnlabeledExample) -> Result<(Gold, f64), DynError>;
}

/// Labels through the task's scoring context and best prompt.
pub struct BackendLabeler {
    pub contexts: BTreeMap<String, (ScoringContext, PromptTemplate)>,
}

impl PseudoLabeler for BackendLabeler {
    fn label(&self, task: &TaskSpec, example: &UnlabeledExample) -> Result<(Gold, f64), DynError> {
        let (ctx, template) = self
            .contexts
            .get(&task.task_id)
            .ok_or_else(|| format!("no scoring context for task {}", task.task_id))?;
        let inf = ctx.infer(template, &example.source_id, &example.segments)?;
        Ok((inf.prediction, inf.confidence))
    }
}

/// Fixed answers keyed by `source_id`.
#[derive(Debug, Clone, Default)]
pub struct ScriptedLabeler {
    pub answers: BTreeMap<String, (Gold, f64)>,
}

impl PseudoLabeler for ScriptedLabeler {
    fn label(&self, _task: &TaskSpec, example: &UnlabeledExample) -> Result<(Gold, f64), DynError> {
        self.answers
            .get(&example.source_id)
            .cloned()
            .ok_or_else(|| format!("no scripted answer for {}", example.source_id).into())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SelfTrainConfig {
    pub tau: f64,
    pub tau_overrides: BTreeMap<String, f64>,
    /// Number of epochs run.
    pub epochs: usize,
}

impl Default for SelfTrainConfig {
    fn default() -> Self {
        Self {
            tau: DEFAULT_TAU,
            tau_overrides: BTreeMap::new(),
            epochs: 1,
        }
    }
}

impl SelfTrainConfig {
    pub fn tau_for(&self, task_id: &str) -> f64 {
        self.tau_overrides.get(task_id).copied().unwrap_or(self.tau)
    }

    pub fn validate(&self) -> Result<(), SelfTrainError> {
        for &t in std::iter::once(&self.tau).chain(self.tau_overrides.values()) {
            if !(t > 0.0 && t <= 1.0) {
                return Err(SelfTrainError::Tau(t));
            }
        }
        if self.epochs == 0 {
            return Err(SelfTrainError::ZeroEpochs);
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub model_version: u64,
    pub inferred: BTreeMap<String, usize>,
    pub added: BTreeMap<String, usize>,
    /// Over the examples added this epoch.
    pub mean_confidence: Option<f64>,
}

/// Choices the procedure makes on its own, recorded with every run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelfTrainPolicy {
    pub confidence_rule: String,
    pub threshold_rule: String,
    pub selected_leave_pool: bool,
}

impl Default for SelfTrainPolicy {
    fn default() -> Self {
        Self {
            confidence_rule: "classification: top softmax probability over length-normalized choice scores; generation: mean per-token probability of the greedy decode".into(),
            threshold_rule: "select when confidence >= tau".into(),
            selected_leave_pool: true,
        }
    }
}

/// Training set of one task: the original examples, untouched, plus
/// pseudo-labeled additions in the order they were selected.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct AugmentedSet {
    pub original: Vec<LabeledExample>,
    pub pseudo: Vec<PseudoLabel>,
}

impl AugmentedSet {
    pub fn len(&self) -> usize {
        self.original.len() + self.pseudo.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn examples(&self) -> Vec<LabeledExample> {
        self.original
            .iter()
            .cloned()
            .chain(self.pseudo.iter().map(PseudoLabel::to_example))
            .collect()
    }

    fn ids(&self) -> BTreeSet<String> {
        self.original
            .iter()
            .map(|e| e.id.clone())
            .chain(self.pseudo.iter().map(|p| p.source_id.clone()))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelfTrainResult {
    pub train: BTreeMap<String, AugmentedSet>,
    /// What is left of each unlabeled pool.
    pub remaining: BTreeMap<String, Vec<UnlabeledExample>>,
    pub epochs: Vec<EpochStats>,
    pub policy: SelfTrainPolicy,
}

/// A failed run: the error plus every epoch completed before it.
#[derive(Debug, Error)]
#[error("self-training failed in epoch {epoch}: {source}")]
pub struct SelfTrainFailure {
    pub epoch: usize,
    #[source]
    pub source: SelfTrainError,
    pub partial: Box<SelfTrainResult>,
}

/// Runs `config.epochs` rounds of: refresh the model on the current training
/// data, label every remaining pool item, and move those at or above the
/// task's threshold into its training set. A round that fails leaves the
/// state as it was after the previous round.
pub fn self_train(
    refresher: &dyn RefreshBackend,
    labeler: &dyn PseudoLabeler,
    tasks: &[TaskSpec],
    train: BTreeMap<String, Vec<LabeledExample>>,
    unlabeled: BTreeMap<String, Vec<UnlabeledExample>>,
    config: &SelfTrainConfig,
) -> Result<SelfTrainResult, SelfTrainFailure> {
    let mut state = SelfTrainResult {
        train: tasks
            .iter()
            .map(|t| {
                let original = train.get(&t.task_id).cloned().unwrap_or_default();
                (
                    t.task_id.clone(),
                    AugmentedSet {
                        original,
                        pseudo: Vec::new(),
                    },
                )
            })
            .collect(),
        remaining: tasks
            .iter()
            .map(|t| {
                (
                    t.task_id.clone(),
                    unlabeled.get(&t.task_id).cloned().unwrap_or_default(),
                )
            })
            .collect(),
        epochs: Vec::new(),
        policy: SelfTrainPolicy::default(),
    };
    let fail = |epoch: usize, source: SelfTrainError, state: &SelfTrainResult| SelfTrainFailure {
        epoch,
        source,
        partial: Box::new(state.clone()),
    };
    if let Err(e) = config.validate() {
        return Err(fail(0, e, &state));
    }
    if let Some(stray) = unlabeled.keys().find(|k| !state.train.contains_key(*k)) {
        return Err(fail(0, SelfTrainError::UnknownTask(stray.clone()), &state));
    }

    for epoch in 1..=config.epochs {
        let train_size = state.train.values().map(AugmentedSet::len).sum();
        let model_version = match refresher.refresh(&RefreshRequest { train_size }) {
            Ok(r) => r.model_version,
            Err(e) => return Err(fail(epoch, e.into(), &state)),
        };
        let mut selections: BTreeMap<String, Vec<PseudoLabel>> = BTreeMap::new();
        let mut stats = EpochStats {
            epoch,
            model_version,
            inferred: BTreeMap::new(),
            added: BTreeMap::new(),
            mean_confidence: None,
        };
        for task in tasks {
            let pool = &state.remaining[&task.task_id];
            let tau = config.tau_for(&task.task_id);
            let labels: Result<Vec<(Gold, f64)>, SelfTrainError> = pool
                .par_iter()
                .map(|ex| {
                    let (gold, confidence) = labeler.label(task, ex).map_err(|source| SelfTrainError::Label {
                        task_id: task.task_id.clone(),
                        source_id: ex.source_id.clone(),
                        source,
                    })?;
                    if !(0.0..=1.0).contains(&confidence) {
                        return Err(SelfTrainError::Confidence {
                            source_id: ex.source_id.clone(),
                            confidence,
                        });
                    }
                    Ok((gold, confidence))
                })
                .collect();
            let labels = match labels {
                Ok(l) => l,
                Err(e) => return Err(fail(epoch, e, &state)),
            };
            let mut seen = state.train[&task.task_id].ids();
            let picked: Vec<PseudoLabel> = pool
                .iter()
                .zip(labels)
                .filter(|(_, (_, c))| *c >= tau)
                .filter(|(ex, _)| seen.insert(ex.source_id.clone()))
                .map(|(ex, (prediction, confidence))| PseudoLabel {
                    source_id: ex.source_id.clone(),
                    segments: ex.segments.clone(),
                    prediction,
                    confidence,
                    epoch,
                    model_version,
                })
                .collect();
            stats.inferred.insert(task.task_id.clone(), pool.len());
            stats.added.insert(task.task_id.clone(), picked.len());
            selections.insert(task.task_id.clone(), picked);
        }

        let added: Vec<f64> = selections.values().flatten().map(|p| p.confidence).collect();
        stats.mean_confidence = (!added.is_empty()).then(|| added.iter().sum::<f64>() / added.len() as f64);
        for (task_id, picked) in selections {
            let ids: BTreeSet<&str> = picked.iter().map(|p| p.source_id.as_str()).collect();
            state
                .remaining
                .get_mut(&task_id)
                .expect("task present")
                .retain(|u| !ids.contains(u.source_id.as_str()));
            state
                .train
                .get_mut(&task_id)
                .expect("task present")
                .pseudo
                .extend(picked);
        }
        state.epochs.push(stats);
    }
    Ok(state)
}
