//! Task catalog: manifest loading, validation, lookups and corpus loading.
//!
//! Both the manifest and the corpora are JSON-lines files. Every record is
//! validated on load, and errors carry the line (manifest) or record index
//! (corpus) they came from.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::prompt::MASK_MARKER;

/// Gold text marking an NER example with no entity of the requested type.
pub const BLANK: &str = "blank";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum TaskType {
    #[serde(rename = "SENTI")]
    Senti,
    #[serde(rename = "NEWS")]
    News,
    #[serde(rename = "INTENT")]
    Intent,
    #[serde(rename = "NLI")]
    Nli,
    #[serde(rename = "STS")]
    Sts,
    #[serde(rename = "PARA")]
    Para,
    #[serde(rename = "QAM")]
    Qam,
    #[serde(rename = "MRC")]
    Mrc,
    #[serde(rename = "NER")]
    Ner,
    #[serde(rename = "SUMM")]
    Summ,
    #[serde(rename = "KEYS")]
    Keys,
    #[serde(rename = "WSC")]
    Wsc,
    #[serde(rename = "APP")]
    App,
    Objection,
    Profile,
    Execution,
    Mention,
    Violation,
    Acception,
}

impl TaskType {
    pub const ALL: [TaskType; 19] = [
        TaskType::Senti,
        TaskType::News,
        TaskType::Intent,
        TaskType::Nli,
        TaskType::Sts,
        TaskType::Para,
        TaskType::Qam,
        TaskType::Mrc,
        TaskType::Ner,
        TaskType::Summ,
        TaskType::Keys,
        TaskType::Wsc,
        TaskType::App,
        TaskType::Objection,
        TaskType::Profile,
        TaskType::Execution,
        TaskType::Mention,
        TaskType::Violation,
        TaskType::Acception,
    ];

    pub fn is_production(self) -> bool {
        matches!(
            self,
            TaskType::Objection
                | TaskType::Profile
                | TaskType::Execution
                | TaskType::Mention
                | TaskType::Violation
                | TaskType::Acception
        )
    }
}

impl fmt::Display for TaskType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        // serde names are the canonical spelling
        let s = serde_json::to_value(self).ok();
        let name = s.as_ref().and_then(|v| v.as_str()).unwrap_or("?");
        f.write_str(name)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskFormat {
    Classification,
    SpanGeneration,
    FreeGeneration,
}

impl TaskFormat {
    pub fn is_generation(self) -> bool {
        !matches!(self, TaskFormat::Classification)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricKind {
    Auc,
    MicroF1,
    StringF1,
    PosF1,
    Rouge1,
}

impl MetricKind {
    pub fn allowed_for(self, format: TaskFormat) -> bool {
        match self {
            MetricKind::Auc | MetricKind::MicroF1 => format == TaskFormat::Classification,
            MetricKind::Rouge1 => format == TaskFormat::FreeGeneration,
            MetricKind::StringF1 | MetricKind::PosF1 => format == TaskFormat::SpanGeneration,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            MetricKind::Auc => "auc",
            MetricKind::MicroF1 => "micro_f1",
            MetricKind::StringF1 => "string_f1",
            MetricKind::PosF1 => "pos_f1",
            MetricKind::Rouge1 => "rouge1",
        }
    }
}

/// A registered task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskSpec {
    pub task_id: String,
    pub task_type: TaskType,
    pub split: Split,
    pub format: TaskFormat,
    #[serde(default)]
    pub label_set: Vec<String>,
    pub metric: MetricKind,
    pub arity: usize,
    pub data_path: PathBuf,
    /// Label treated as positive by AUC. Defaults to `label_set[1]`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub positive_label: Option<String>,
}

impl TaskSpec {
    /// Checks the per-task invariants; returns the violated rule.
    pub fn validate(&self) -> Result<(), String> {
        if self.task_id.trim().is_empty() {
            return Err("task_id must be non-empty".into());
        }
        if !(1..=2).contains(&self.arity) {
            return Err(format!("arity must be 1 or 2, got {}", self.arity));
        }
        match self.format {
            TaskFormat::Classification => {
                if self.label_set.len() < 2 {
                    return Err("classification task needs at least 2 labels".into());
                }
                let mut seen = HashSet::new();
                for l in &self.label_set {
                    if l.is_empty() {
                        return Err("labels must be non-empty".into());
                    }
                    if !seen.insert(l.as_str()) {
                        return Err(format!("duplicate label {l:?}"));
                    }
                }
            }
            _ => {
                if !self.label_set.is_empty() {
                    return Err("generation task must have an empty label_set".into());
                }
            }
        }
        if !self.metric.allowed_for(self.format) {
            return Err(format!(
                "metric/format mismatch: metric {} is not valid for {:?} tasks",
                self.metric.name(),
                self.format
            ));
        }
        if let Some(p) = &self.positive_label {
            if !self.label_set.contains(p) {
                return Err(format!("positive_label {p:?} not in label_set"));
            }
        }
        Ok(())
    }

    /// The label ranked by AUC.
    pub fn positive_label(&self) -> Option<&str> {
        self.positive_label
            .as_deref()
            .or_else(|| self.label_set.get(1).map(String::as_str))
    }
}

#[derive(Debug, Error)]
pub enum RegistryError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error("task {task_id}: {rule}")]
    Invalid { task_id: String, rule: String },
    #[error("task {task_id} declared twice (lines {first} and {second})")]
    DuplicateTask {
        task_id: String,
        first: usize,
        second: usize,
    },
    #[error("unknown task {0}")]
    UnknownTask(String),
}

/// Immutable, validated task catalog.
#[derive(Debug, Clone, PartialEq)]
pub struct Registry {
    tasks: Vec<TaskSpec>,
    by_id: HashMap<String, usize>,
    by_type_split: BTreeMap<(TaskType, Split), Vec<usize>>,
}

impl Registry {
    pub fn from_tasks(tasks: Vec<TaskSpec>) -> Result<Self, RegistryError> {
        let mut by_id = HashMap::new();
        let mut by_type_split: BTreeMap<_, Vec<usize>> = BTreeMap::new();
        for (i, t) in tasks.iter().enumerate() {
            t.validate().map_err(|rule| RegistryError::Invalid {
                task_id: t.task_id.clone(),
                rule,
            })?;
            if let Some(first) = by_id.insert(t.task_id.clone(), i) {
                return Err(RegistryError::DuplicateTask {
                    task_id: t.task_id.clone(),
                    first: first + 1,
                    second: i + 1,
                });
            }
            by_type_split.entry((t.task_type, t.split)).or_default().push(i);
        }
        Ok(Self {
            tasks,
            by_id,
            by_type_split,
        })
    }

    pub fn len(&self) -> usize {
        self.tasks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tasks.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &TaskSpec> {
        self.tasks.iter()
    }

    pub fn get(&self, task_id: &str) -> Option<&TaskSpec> {
        self.by_id.get(task_id).map(|&i| &self.tasks[i])
    }

    pub fn require(&self, task_id: &str) -> Result<&TaskSpec, RegistryError> {
        self.get(task_id)
            .ok_or_else(|| RegistryError::UnknownTask(task_id.to_string()))
    }

    /// Tasks of one type and split, in manifest order.
    pub fn query(&self, task_type: TaskType, split: Split) -> Vec<&TaskSpec> {
        self.by_type_split
            .get(&(task_type, split))
            .map(|ix| ix.iter().map(|&i| &self.tasks[i]).collect())
            .unwrap_or_default()
    }

    pub fn count_by(&self, task_type: TaskType, split: Split) -> usize {
        self.by_type_split.get(&(task_type, split)).map_or(0, Vec::len)
    }

    pub fn by_split(&self, split: Split) -> impl Iterator<Item = &TaskSpec> {
        self.tasks.iter().filter(move |t| t.split == split)
    }
}

/// Loads a registry manifest. Relative `data_path`s are resolved against the
/// manifest's directory.
pub fn load_registry(path: impl AsRef<Path>) -> Result<Registry, RegistryError> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|source| RegistryError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let base = path.parent().unwrap_or_else(|| Path::new(""));
    let mut tasks = Vec::new();
    let mut lines_of = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line_no = i + 1;
        let line = line.map_err(|source| RegistryError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let mut spec: TaskSpec = serde_json::from_str(&line).map_err(|e| RegistryError::Parse {
            path: path.to_path_buf(),
            line: line_no,
            message: e.to_string(),
        })?;
        if spec.data_path.is_relative() {
            spec.data_path = base.join(&spec.data_path);
        }
        tasks.push(spec);
        lines_of.push(line_no);
    }
    Registry::from_tasks(tasks).map_err(|e| match e {
        // report manifest lines rather than record positions
        RegistryError::DuplicateTask { task_id, first, second } => RegistryError::DuplicateTask {
            task_id,
            first: lines_of[first - 1],
            second: lines_of[second - 1],
        },
        other => other,
    })
}

/// Gold annotation of an example: a verbalizer for classification, a target
/// string for generation formats.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Gold {
    Label(String),
    Text(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct LabeledExample {
    /// Stable identity. Taken from the corpus record or `"{task_id}#{index}"`.
    pub id: String,
    pub segments: Vec<String>,
    pub gold: Gold,
}

impl LabeledExample {
    pub fn new(id: impl Into<String>, segments: Vec<String>, gold: Gold) -> Self {
        Self {
            id: id.into(),
            segments,
            gold,
        }
    }

    pub fn gold_label(&self) -> Option<&str> {
        match &self.gold {
            Gold::Label(l) => Some(l),
            Gold::Text(_) => None,
        }
    }

    pub fn gold_text(&self) -> Option<&str> {
        match &self.gold {
            Gold::Text(t) => Some(t),
            Gold::Label(_) => None,
        }
    }

    /// False for NER negatives whose gold text is the blank marker.
    pub fn is_positive(&self) -> bool {
        self.gold_text() != Some(BLANK)
    }

    /// Gold as plain text, whichever kind it is.
    pub fn gold_str(&self) -> &str {
        match &self.gold {
            Gold::Label(s) | Gold::Text(s) => s,
        }
    }
}

#[derive(Debug, Error)]
pub enum DataError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("record {record}: malformed: {message}")]
    Malformed { record: usize, message: String },
    #[error("record {record}: expected {expected} segment(s), found {found}")]
    Arity {
        record: usize,
        expected: usize,
        found: usize,
    },
    #[error("record {record}: unknown label {label:?}")]
    UnknownLabel { record: usize, label: String },
    #[error("record {record}: {message}")]
    GoldMismatch { record: usize, message: String },
    #[error("record {record}: contains the reserved marker {MASK_MARKER}")]
    ReservedMarker { record: usize },
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct CorpusRecord {
    #[serde(default)]
    id: Option<String>,
    segments: Vec<String>,
    #[serde(default)]
    label: Option<String>,
    #[serde(default)]
    target: Option<String>,
}

/// Parses one corpus line and checks it against `task`.
pub fn parse_example(task: &TaskSpec, record: usize, line: &str) -> Result<LabeledExample, DataError> {
    let rec: CorpusRecord = serde_json::from_str(line).map_err(|e| DataError::Malformed {
        record,
        message: e.to_string(),
    })?;
    if rec.segments.len() != task.arity {
        return Err(DataError::Arity {
            record,
            expected: task.arity,
            found: rec.segments.len(),
        });
    }
    let gold = match (task.format, rec.label, rec.target) {
        (TaskFormat::Classification, Some(label), None) => {
            if !task.label_set.contains(&label) {
                return Err(DataError::UnknownLabel { record, label });
            }
            Gold::Label(label)
        }
        (f, None, Some(target)) if f.is_generation() => Gold::Text(target),
        (f, _, _) => {
            let want = if f.is_generation() { "target" } else { "label" };
            return Err(DataError::GoldMismatch {
                record,
                message: format!("{f:?} task needs exactly one gold field, `{want}`"),
            });
        }
    };
    let ex = LabeledExample {
        id: rec.id.unwrap_or_else(|| format!("{}#{record}", task.task_id)),
        segments: rec.segments,
        gold,
    };
    if ex
        .segments
        .iter()
        .chain(std::iter::once(&ex.gold_str().to_string()))
        .any(|s| s.contains(MASK_MARKER))
    {
        return Err(DataError::ReservedMarker { record });
    }
    Ok(ex)
}

/// Loads the task's corpus. Record indices in errors are 0-based positions
/// among non-blank lines.
pub fn load_examples(task: &TaskSpec) -> Result<Vec<LabeledExample>, DataError> {
    let file = File::open(&task.data_path).map_err(|source| DataError::Io {
        path: task.data_path.clone(),
        source,
    })?;
    let mut out = Vec::new();
    for line in BufReader::new(file).lines() {
        let line = line.map_err(|source| DataError::Io {
            path: task.data_path.clone(),
            source,
        })?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(parse_example(task, out.len(), &line)?);
    }
    Ok(out)
}

/// Serializes an example back into the corpus line format.
pub fn example_to_line(ex: &LabeledExample) -> String {
    let mut obj = serde_json::Map::new();
    obj.insert("id".into(), ex.id.clone().into());
    obj.insert("segments".into(), ex.segments.clone().into());
    match &ex.gold {
        Gold::Label(l) => obj.insert("label".into(), l.clone().into()),
        Gold::Text(t) => obj.insert("target".into(), t.clone().into()),
    };
    serde_json::Value::Object(obj).to_string()
}
