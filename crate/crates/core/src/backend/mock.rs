//! Deterministic in-process backend, configurable from a serializable spec.
//!
//! Requests are matched against `answers` by substring ("needle"), which lets
//! a fixture say "for the prompt containing this review, the gold label is
//! X" without knowing the template that rendered it.

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicU64, Ordering};

use serde::{Deserialize, Serialize};

use super::{
    BackendError, ChoiceLikelihood, EmbedBackend, EmbedRequest, EmbedResponse, GenerateBackend, GenerateRequest,
    GenerateResponse, RefreshBackend, RefreshRequest, RefreshResponse, ScoreBackend, ScoreRequest, ScoreResponse,
    TranslateBackend, TranslateRequest, TranslateResponse,
};
use crate::mutation::infill_sentinel;
use crate::rng::str_seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ScoreMode {
    /// Gold choice gets log-likelihood 0, every other choice -10.
    Oracle,
    /// Per-choice log-likelihoods from the matching answer's `scores`.
    Scripted,
    /// Pseudo-random but deterministic in (prompt, choice).
    #[default]
    Hash,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum GenerateMode {
    /// Matching answer's gold text; echo otherwise.
    Oracle,
    /// Returns the prompt text.
    #[default]
    Echo,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MockAnswer {
    pub needle: String,
    #[serde(default)]
    pub gold: Option<String>,
    #[serde(default)]
    pub scores: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MockSpec {
    pub score: ScoreMode,
    pub generate: GenerateMode,
    pub embed_dim: usize,
    pub answers: Vec<MockAnswer>,
    /// Strings used to fill masked spans in infill requests.
    pub fill_vocab: Vec<String>,
}

impl Default for MockSpec {
    fn default() -> Self {
        Self {
            score: ScoreMode::Hash,
            generate: GenerateMode::Echo,
            embed_dim: 16,
            answers: Vec::new(),
            fill_vocab: ["请", "问", "这", "段", "话", "的", "意", "思", "是", "什么"]
                .iter()
                .map(|s| s.to_string())
                .collect(),
        }
    }
}

#[derive(Debug, Default)]
pub struct MockBackend {
    spec: MockSpec,
    version: AtomicU64,
}

fn mix(parts: &[&str]) -> u64 {
    str_seed(&parts.join("\u{1f}"))
}

impl MockBackend {
    pub fn new(spec: MockSpec) -> Self {
        Self {
            spec,
            version: AtomicU64::new(0),
        }
    }

    pub fn spec(&self) -> &MockSpec {
        &self.spec
    }

    pub fn model_version(&self) -> u64 {
        self.version.load(Ordering::SeqCst)
    }

    fn answer_for(&self, prompt: &str) -> Option<&MockAnswer> {
        self.spec.answers.iter().find(|a| prompt.contains(&a.needle))
    }

    fn hash_loglik(prompt: &str, choice: &str) -> f64 {
        -((mix(&[prompt, choice]) % 10_000) as f64) / 1000.0
    }

    fn fill_infill(&self, prompt: &str) -> Option<String> {
        if !prompt.contains(&infill_sentinel(0)) {
            return None;
        }
        let vocab = &self.spec.fill_vocab;
        let mut out = String::new();
        let mut i = 0;
        while prompt.contains(&infill_sentinel(i)) {
            out.push_str(&infill_sentinel(i));
            if !vocab.is_empty() {
                let pick = mix(&[prompt, &i.to_string()]) as usize % vocab.len();
                out.push_str(&vocab[pick]);
            }
            i += 1;
        }
        out.push_str(&infill_sentinel(i));
        Some(out)
    }
}

impl ScoreBackend for MockBackend {
    fn score(&self, req: &ScoreRequest) -> Result<ScoreResponse, BackendError> {
        let answer = self.answer_for(&req.prompt_text);
        let choices = req
            .choices
            .iter()
            .map(|c| {
                let ll = match (self.spec.score, answer) {
                    (ScoreMode::Oracle, Some(a)) if a.gold.as_deref() == Some(c.as_str()) => 0.0,
                    (ScoreMode::Oracle, _) => -10.0,
                    (ScoreMode::Scripted, Some(a)) if !a.scores.is_empty() => *a.scores.get(c).unwrap_or(&-50.0),
                    _ => Self::hash_loglik(&req.prompt_text, c),
                };
                ChoiceLikelihood {
                    choice: c.clone(),
                    log_likelihood: ll,
                    token_count: c.chars().count().max(1) as u32,
                }
            })
            .collect();
        Ok(ScoreResponse { choices })
    }
}

impl GenerateBackend for MockBackend {
    fn generate(&self, req: &GenerateRequest) -> Result<GenerateResponse, BackendError> {
        let completion_text = match self.fill_infill(&req.prompt_text) {
            Some(f) => f,
            None => match (self.spec.generate, self.answer_for(&req.prompt_text)) {
                (GenerateMode::Oracle, Some(a)) if a.gold.is_some() => a.gold.clone().unwrap_or_default(),
                _ => req.prompt_text.clone(),
            },
        };
        let token_logprobs = completion_text
            .chars()
            .enumerate()
            .map(|(i, _)| -((mix(&[&completion_text, &i.to_string()]) % 100) as f64) / 1000.0)
            .collect();
        Ok(GenerateResponse {
            completion_text,
            token_logprobs,
        })
    }
}

impl TranslateBackend for MockBackend {
    fn translate(&self, req: &TranslateRequest) -> Result<TranslateResponse, BackendError> {
        Ok(TranslateResponse { text: req.text.clone() })
    }
}

impl EmbedBackend for MockBackend {
    fn embed(&self, req: &EmbedRequest) -> Result<EmbedResponse, BackendError> {
        let dim = self.spec.embed_dim.max(2);
        let vectors = req
            .texts
            .iter()
            .map(|t| {
                let mut v = vec![0.0; dim];
                for c in t.chars().filter(|c| !c.is_whitespace()) {
                    v[(str_seed(c.encode_utf8(&mut [0; 4])) % (dim as u64 - 1)) as usize] += 1.0;
                }
                v[dim - 1] = 1.0;
                v
            })
            .collect();
        Ok(EmbedResponse { vectors, dim })
    }
}

impl RefreshBackend for MockBackend {
    fn refresh(&self, _req: &RefreshRequest) -> Result<RefreshResponse, BackendError> {
        let model_version = self.version.fetch_add(1, Ordering::SeqCst) + 1;
        Ok(RefreshResponse { model_version })
    }
}
