//! Soft prompt composition for unseen tasks from a store of per-task
//! embeddings and a task-similarity profile.

use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::stream;

pub const DEFAULT_SIGMA: f64 = 0.02;
const PROFILE_TOLERANCE: f64 = 1e-6;
const STORE_MAGIC: &str = "promptsearch-embeddings 1";

/// A `rows × cols` row-major matrix of soft token embeddings for one task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskEmbedding {
    pub task_id: String,
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

#[derive(Debug, Error)]
pub enum SoftPromptError {
    #[error("embedding {task_id} is {rows}x{cols} but holds {len} values")]
    Shape {
        task_id: String,
        rows: usize,
        cols: usize,
        len: usize,
    },
    #[error("embedding {0} has a non-finite value")]
    NonFinite(String),
    #[error("embedding {task_id} is {got:?}, expected {want:?}")]
    DimMismatch {
        task_id: String,
        got: (usize, usize),
        want: (usize, usize),
    },
    #[error("empty embedding store")]
    EmptyStore,
    #[error("profile does not match the store: {0}")]
    Coverage(String),
    #[error("invalid profile: {0}")]
    Probability(String),
    #[error("dimensions must be positive")]
    ZeroDim,
    #[error("sigma must be finite and positive")]
    Sigma,
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("{path}: {message}")]
    Format { path: String, message: String },
}

impl TaskEmbedding {
    pub fn new(task_id: impl Into<String>, rows: usize, cols: usize, data: Vec<f64>) -> Result<Self, SoftPromptError> {
        let e = Self {
            task_id: task_id.into(),
            rows,
            cols,
            data,
        };
        e.validate()?;
        Ok(e)
    }

    pub fn validate(&self) -> Result<(), SoftPromptError> {
        if self.rows * self.cols != self.data.len() {
            return Err(SoftPromptError::Shape {
                task_id: self.task_id.clone(),
                rows: self.rows,
                cols: self.cols,
                len: self.data.len(),
            });
        }
        if self.data.iter().any(|v| !v.is_finite()) {
            return Err(SoftPromptError::NonFinite(self.task_id.clone()));
        }
        Ok(())
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }
}

/// Classifier probabilities over training tasks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimilarityProfile {
    pub probs: BTreeMap<String, f64>,
}

impl SimilarityProfile {
    pub fn new<K: Into<String>>(probs: impl IntoIterator<Item = (K, f64)>) -> Result<Self, SoftPromptError> {
        let p = Self {
            probs: probs.into_iter().map(|(k, v)| (k.into(), v)).collect(),
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<(), SoftPromptError> {
        for (k, &v) in &self.probs {
            if !(0.0..=1.0).contains(&v) {
                return Err(SoftPromptError::Probability(format!("{k} has probability {v}")));
            }
        }
        let sum: f64 = self.probs.values().sum();
        if (sum - 1.0).abs() > PROFILE_TOLERANCE {
            return Err(SoftPromptError::Probability(format!("probabilities sum to {sum}")));
        }
        Ok(())
    }

    pub fn get(&self, task_id: &str) -> Option<f64> {
        self.probs.get(task_id).copied()
    }
}

/// Checks the store is non-empty and uniform, and that `profile` names
/// exactly its tasks. Returns probabilities in store order.
fn aligned(store: &[TaskEmbedding], profile: &SimilarityProfile) -> Result<Vec<f64>, SoftPromptError> {
    let first = store.first().ok_or(SoftPromptError::EmptyStore)?;
    for e in store {
        e.validate()?;
        if e.shape() != first.shape() {
            return Err(SoftPromptError::DimMismatch {
                task_id: e.task_id.clone(),
                got: e.shape(),
                want: first.shape(),
            });
        }
    }
    profile.validate()?;
    if profile.probs.len() != store.len() {
        return Err(SoftPromptError::Coverage(format!(
            "{} profile entries for {} stored tasks",
            profile.probs.len(),
            store.len()
        )));
    }
    store
        .iter()
        .map(|e| {
            profile
                .get(&e.task_id)
                .ok_or_else(|| SoftPromptError::Coverage(format!("no probability for {}", e.task_id)))
        })
        .collect()
}

/// `Σ prob_i · E_i` elementwise, accumulated with fused multiply-adds.
/// Zero-weight tasks are skipped, so a one-hot profile returns the selected
/// matrix bit for bit.
pub fn compose_weighted(
    store: &[TaskEmbedding],
    profile: &SimilarityProfile,
    task_id: &str,
) -> Result<TaskEmbedding, SoftPromptError> {
    let probs = aligned(store, profile)?;
    let (rows, cols) = store[0].shape();
    let mut acc: Option<Vec<f64>> = None;
    for (e, &p) in store.iter().zip(&probs) {
        if p == 0.0 {
            continue;
        }
        match &mut acc {
            None => acc = Some(e.data.iter().map(|v| p * v).collect()),
            Some(a) => a.iter_mut().zip(&e.data).for_each(|(a, v)| *a = p.mul_add(*v, *a)),
        }
    }
    let data = acc.unwrap_or_else(|| vec![0.0; rows * cols]);
    TaskEmbedding::new(task_id, rows, cols, data)
}

/// Index of the most probable task; the earliest in store order on ties.
pub fn argmax_task(store: &[TaskEmbedding], profile: &SimilarityProfile) -> Result<usize, SoftPromptError> {
    let probs = aligned(store, profile)?;
    let mut best = 0;
    for (i, &p) in probs.iter().enumerate() {
        if p > probs[best] {
            best = i;
        }
    }
    Ok(best)
}

/// Copy of the most similar task's embedding.
pub fn compose_top1(
    store: &[TaskEmbedding],
    profile: &SimilarityProfile,
    task_id: &str,
) -> Result<TaskEmbedding, SoftPromptError> {
    let k = argmax_task(store, profile)?;
    Ok(TaskEmbedding {
        task_id: task_id.to_string(),
        ..store[k].clone()
    })
}

/// I.i.d. `N(0, sigma²)` values, deterministic in `seed`.
pub fn random_init(
    task_id: &str,
    rows: usize,
    cols: usize,
    seed: u64,
    sigma: f64,
) -> Result<TaskEmbedding, SoftPromptError> {
    if rows == 0 || cols == 0 {
        return Err(SoftPromptError::ZeroDim);
    }
    let normal = Normal::new(0.0, sigma).map_err(|_| SoftPromptError::Sigma)?;
    if !(sigma.is_finite() && sigma > 0.0) {
        return Err(SoftPromptError::Sigma);
    }
    let mut rng = stream(seed, &[]);
    let data = (0..rows * cols).map(|_| normal.sample(&mut rng)).collect();
    TaskEmbedding::new(task_id, rows, cols, data)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ComposeMethod {
    #[default]
    Weighted,
    Top1,
    Random,
}

/// How per-sample profiles are combined.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SampleAggregation {
    /// Average the profiles, then compose once.
    #[default]
    AverageProfiles,
    /// Compose per sample, then average the embeddings.
    AverageEmbeddings,
}

/// Composes from one profile per unlabeled sample.
pub fn compose_per_sample(
    store: &[TaskEmbedding],
    profiles: &[SimilarityProfile],
    method: ComposeMethod,
    aggregation: SampleAggregation,
    task_id: &str,
) -> Result<TaskEmbedding, SoftPromptError> {
    let compose = |p: &SimilarityProfile| match method {
        ComposeMethod::Weighted => compose_weighted(store, p, task_id),
        ComposeMethod::Top1 => compose_top1(store, p, task_id),
        ComposeMethod::Random => Err(SoftPromptError::Probability("random init takes no profile".into())),
    };
    if profiles.is_empty() {
        return Err(SoftPromptError::Probability("no per-sample profiles".into()));
    }
    let n = profiles.len() as f64;
    match aggregation {
        SampleAggregation::AverageProfiles => {
            let mut mean: BTreeMap<String, f64> = BTreeMap::new();
            for p in profiles {
                for (k, v) in &p.probs {
                    *mean.entry(k.clone()).or_insert(0.0) += v / n;
                }
            }
            compose(&SimilarityProfile { probs: mean })
        }
        SampleAggregation::AverageEmbeddings => {
            let parts = profiles.iter().map(compose).collect::<Result<Vec<_>, _>>()?;
            let mut out = parts[0].clone();
            out.data.iter_mut().for_each(|v| *v = 0.0);
            for p in &parts {
                out.data.iter_mut().zip(&p.data).for_each(|(a, v)| *a += v / n);
            }
            Ok(out)
        }
    }
}

fn format_err(path: &Path, message: impl Into<String>) -> SoftPromptError {
    SoftPromptError::Format {
        path: path.display().to_string(),
        message: message.into(),
    }
}

/// Writes a store: a text header (magic, `rows cols count`, one task id per
/// line, `data`) followed by every matrix as little-endian f32 in header order.
pub fn write_store(path: impl AsRef<Path>, store: &[TaskEmbedding]) -> Result<(), SoftPromptError> {
    let path = path.as_ref();
    let first = store.first().ok_or(SoftPromptError::EmptyStore)?;
    let mut out = Vec::new();
    writeln!(out, "{STORE_MAGIC}")?;
    writeln!(out, "{} {} {}", first.rows, first.cols, store.len())?;
    for e in store {
        e.validate()?;
        if e.shape() != first.shape() {
            return Err(SoftPromptError::DimMismatch {
                task_id: e.task_id.clone(),
                got: e.shape(),
                want: first.shape(),
            });
        }
        if e.task_id.contains('\n') || e.task_id.is_empty() {
            return Err(format_err(path, "task ids must be non-empty single lines"));
        }
        writeln!(out, "{}", e.task_id)?;
    }
    writeln!(out, "data")?;
    for e in store {
        for v in &e.data {
            out.extend_from_slice(&(*v as f32).to_le_bytes());
        }
    }
    std::fs::write(path, out)?;
    Ok(())
}

pub fn read_store(path: impl AsRef<Path>) -> Result<Vec<TaskEmbedding>, SoftPromptError> {
    let path = path.as_ref();
    let mut r = BufReader::new(std::fs::File::open(path)?);
    let mut line = String::new();
    let mut next_line = |r: &mut BufReader<std::fs::File>| -> Result<String, SoftPromptError> {
        line.clear();
        if r.read_line(&mut line)? == 0 {
            return Err(format_err(path, "truncated header"));
        }
        Ok(line.trim_end_matches('\n').to_string())
    };
    if next_line(&mut r)? != STORE_MAGIC {
        return Err(format_err(path, "not an embedding store"));
    }
    let dims: Vec<usize> = next_line(&mut r)?
        .split_whitespace()
        .map(|t| t.parse().map_err(|_| format_err(path, "bad dimension line")))
        .collect::<Result<_, _>>()?;
    let [rows, cols, count] = dims[..] else {
        return Err(format_err(path, "dimension line needs rows, cols and count"));
    };
    let ids = (0..count).map(|_| next_line(&mut r)).collect::<Result<Vec<_>, _>>()?;
    if next_line(&mut r)? != "data" {
        return Err(format_err(path, "missing data marker"));
    }
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    if bytes.len() != rows * cols * count * 4 {
        return Err(format_err(
            path,
            format!("expected {} data bytes, found {}", rows * cols * count * 4, bytes.len()),
        ));
    }
    let mut values = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64);
    ids.into_iter()
        .map(|id| TaskEmbedding::new(id, rows, cols, values.by_ref().take(rows * cols).collect()))
        .collect()
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ProfileRecord {
    task_id: String,
    prob: f64,
}

/// Reads a profile file: one `{"task_id", "prob"}` JSON object per line.
pub fn read_profile(path: impl AsRef<Path>) -> Result<SimilarityProfile, SoftPromptError> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path)?;
    let mut probs = BTreeMap::new();
    for (i, l) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let rec: ProfileRecord =
            serde_json::from_str(l).map_err(|e| format_err(path, format!("line {}: {e}", i + 1)))?;
        if probs.insert(rec.task_id.clone(), rec.prob).is_some() {
            return Err(format_err(
                path,
                format!("line {}: duplicate task {}", i + 1, rec.task_id),
            ));
        }
    }
    let p = SimilarityProfile { probs };
    p.validate()?;
    Ok(p)
}

pub fn write_profile(path: impl AsRef<Path>, profile: &SimilarityProfile) -> Result<(), SoftPromptError> {
    let mut out = String::new();
    for (task_id, &prob) in &profile.probs {
        let rec = ProfileRecord {
            task_id: task_id.clone(),
            prob,
        };
        out.push_str(&serde_json::to_string(&rec).expect("serializable"));
        out.push('\n');
    }
    std::fs::write(path, out)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn emb(id: &str, data: &[f64]) -> TaskEmbedding {
        TaskEmbedding::new(id, 1, data.len(), data.to_vec()).unwrap()
    }

    fn profile(pairs: &[(&str, f64)]) -> SimilarityProfile {
        SimilarityProfile::new(pairs.iter().map(|(k, v)| (*k, *v))).unwrap()
    }

    #[test]
    fn weighted_fixtures() {
        let store = [emb("a", &[1.0, 2.0]), emb("b", &[3.0, 4.0])];
        let out = compose_weighted(&store, &profile(&[("a", 0.3), ("b", 0.7)]), "new").unwrap();
        assert_eq!(out.data, vec![2.4, 3.4]);
        let mean = compose_weighted(&store, &profile(&[("a", 0.5), ("b", 0.5)]), "new").unwrap();
        assert_eq!(mean.data, vec![2.0, 3.0]);
        let one_hot = profile(&[("a", 0.0), ("b", 1.0)]);
        let w = compose_weighted(&store, &one_hot, "new").unwrap();
        assert_eq!(w.data, store[1].data);
        let t = compose_top1(&store, &one_hot, "new").unwrap();
        assert_eq!(w, t);
    }

    #[test]
    fn top1_and_ties() {
        let store = [emb("a", &[1.0]), emb("b", &[2.0])];
        assert_eq!(
            compose_top1(&store, &profile(&[("a", 0.9), ("b", 0.1)]), "n")
                .unwrap()
                .data,
            [1.0]
        );
        assert_eq!(
            compose_top1(&store, &profile(&[("a", 0.5), ("b", 0.5)]), "n")
                .unwrap()
                .data,
            [1.0]
        );
    }

    #[test]
    fn invalid_inputs() {
        let store = [emb("a", &[1.0, 2.0]), emb("b", &[3.0])];
        assert!(matches!(
            compose_weighted(&store, &profile(&[("a", 0.5), ("b", 0.5)]), "n"),
            Err(SoftPromptError::DimMismatch { .. })
        ));
        assert!(SimilarityProfile::new([("a", 0.5), ("b", 0.4)]).is_err());
        assert!(SimilarityProfile::new([("a", 1.5), ("b", -0.5)]).is_err());
        let store = [emb("a", &[1.0]), emb("b", &[2.0])];
        assert!(matches!(
            compose_weighted(&store, &profile(&[("a", 0.5), ("c", 0.5)]), "n"),
            Err(SoftPromptError::Coverage(_))
        ));
    }

    #[test]
    fn random_init_statistics() {
        let a = random_init("n", 100, 100, 7, DEFAULT_SIGMA).unwrap();
        assert_eq!(a, random_init("n", 100, 100, 7, DEFAULT_SIGMA).unwrap());
        assert_ne!(a.data, random_init("n", 100, 100, 8, DEFAULT_SIGMA).unwrap().data);
        let n = a.data.len() as f64;
        let mean = a.data.iter().sum::<f64>() / n;
        let std = (a.data.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
        assert!(mean.abs() < 3.0 * DEFAULT_SIGMA / 100.0, "mean {mean}");
        assert!((std - DEFAULT_SIGMA).abs() < 0.1 * DEFAULT_SIGMA, "std {std}");
    }

    #[test]
    fn per_sample_policies() {
        let store = [emb("a", &[0.0]), emb("b", &[10.0])];
        let ps = [profile(&[("a", 0.6), ("b", 0.4)]), profile(&[("a", 0.0), ("b", 1.0)])];
        let avg_p = compose_per_sample(
            &store,
            &ps,
            ComposeMethod::Top1,
            SampleAggregation::AverageProfiles,
            "n",
        )
        .unwrap();
        assert_eq!(avg_p.data, [10.0]);
        let avg_e = compose_per_sample(
            &store,
            &ps,
            ComposeMethod::Top1,
            SampleAggregation::AverageEmbeddings,
            "n",
        )
        .unwrap();
        assert_eq!(avg_e.data, [5.0]);
    }

    #[test]
    fn store_and_profile_files() {
        let dir = tempfile::tempdir().unwrap();
        let store = vec![
            TaskEmbedding::new("tnews", 2, 2, vec![0.5, -1.25, 3.0, 0.0]).unwrap(),
            TaskEmbedding::new("ocnli", 2, 2, vec![1.0, 2.0, 4.0, 8.0]).unwrap(),
        ];
        let p = dir.path().join("store.bin");
        write_store(&p, &store).unwrap();
        assert_eq!(read_store(&p).unwrap(), store);
        std::fs::write(&p, b"junk\n").unwrap();
        assert!(read_store(&p).is_err());
        let prof = profile(&[("ocnli", 0.25), ("tnews", 0.75)]);
        let pp = dir.path().join("p.jsonl");
        write_profile(&pp, &prof).unwrap();
        assert_eq!(read_profile(&pp).unwrap(), prof);
    }

    fn store_and_profiles(
        n: usize,
        cells: usize,
    ) -> impl Strategy<Value = (Vec<TaskEmbedding>, Vec<f64>, Vec<f64>, f64)> {
        let store = prop::collection::vec(prop::collection::vec(-10.0f64..10.0, cells), n).prop_map(|rows| {
            rows.into_iter()
                .enumerate()
                .map(|(i, d)| TaskEmbedding::new(format!("t{i}"), 1, d.len(), d).unwrap())
                .collect()
        });
        (
            store,
            prop::collection::vec(0.01f64..1.0, n),
            prop::collection::vec(0.01f64..1.0, n),
            0.0f64..=1.0,
        )
    }

    fn normalized(store: &[TaskEmbedding], w: &[f64]) -> SimilarityProfile {
        let z: f64 = w.iter().sum();
        SimilarityProfile {
            probs: store.iter().zip(w).map(|(e, v)| (e.task_id.clone(), v / z)).collect(),
        }
    }

    proptest! {
        #[test]
        fn weighted_is_convex_and_linear((store, wp, wq, alpha) in store_and_profiles(4, 3)) {
            let p = normalized(&store, &wp);
            let q = normalized(&store, &wq);
            let ep = compose_weighted(&store, &p, "n").unwrap();
            let eq = compose_weighted(&store, &q, "n").unwrap();
            for c in 0..3 {
                let lo = store.iter().map(|e| e.data[c]).fold(f64::INFINITY, f64::min);
                let hi = store.iter().map(|e| e.data[c]).fold(f64::NEG_INFINITY, f64::max);
                prop_assert!(ep.data[c] >= lo - 1e-9 && ep.data[c] <= hi + 1e-9);
            }
            let blend = SimilarityProfile {
                probs: p.probs.iter().map(|(k, v)| (k.clone(), alpha * v + (1.0 - alpha) * q.probs[k])).collect(),
            };
            let eb = compose_weighted(&store, &blend, "n").unwrap();
            for c in 0..3 {
                prop_assert!((eb.data[c] - (alpha * ep.data[c] + (1.0 - alpha) * eq.data[c])).abs() < 1e-9);
            }
        }

        #[test]
        fn top1_argmax_invariant((store, wp, _wq, _a) in store_and_profiles(5, 1), power in 0.2f64..5.0) {
            let p = normalized(&store, &wp);
            let transformed: Vec<f64> = wp.iter().map(|v| v.powf(power)).collect();
            let q = normalized(&store, &transformed);
            prop_assert_eq!(argmax_task(&store, &p).unwrap(), argmax_task(&store, &q).unwrap());
        }
    }
}
