//! Prompt fitness: render a template over a dev set, query the language model
//! and reduce the predictions with the task metric.

use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::{BackendError, GenerateBackend, GenerateRequest, ScoreBackend, ScoreRequest, ScoreResponse};
use crate::gps::{DynError, Scorer};
use crate::metrics::{self, MetricError, PredictionRecord};
use crate::prompt::{PromptTemplate, RenderStyle, TemplateError};
use crate::registry::{Gold, LabeledExample, MetricKind, TaskFormat, TaskSpec};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChoiceScore {
    pub choice: String,
    pub log_likelihood: f64,
    pub token_count: u32,
    /// `log_likelihood / token_count`.
    pub length_normalized: f64,
}

impl ChoiceScore {
    pub fn new(choice: impl Into<String>, log_likelihood: f64, token_count: u32) -> Self {
        assert!(token_count > 0, "token_count must be positive");
        Self {
            choice: choice.into(),
            log_likelihood,
            token_count,
            length_normalized: log_likelihood / token_count as f64,
        }
    }
}

#[derive(Debug, Error)]
pub enum ScoringError {
    #[error("dev set is empty")]
    EmptyDev,
    #[error("no choices to predict from")]
    NoChoices,
    #[error("task {task_id}: {reason}")]
    Mismatch { task_id: String, reason: String },
    #[error("example {id}: {source}")]
    Template {
        id: String,
        #[source]
        source: TemplateError,
    },
    #[error("example {id}: {source}")]
    Backend {
        id: String,
        #[source]
        source: BackendError,
    },
    #[error(transparent)]
    Metric(#[from] MetricError),
}

/// The choice with the highest length-normalized log-likelihood. Ties go to
/// the earlier entry, so callers pass scores in label-set order.
pub fn predict_choice(scores: &[ChoiceScore]) -> Result<&str, ScoringError> {
    let mut best: Option<&ChoiceScore> = None;
    for s in scores {
        if best.is_none_or(|b| s.length_normalized > b.length_normalized) {
            best = Some(s);
        }
    }
    best.map(|b| b.choice.as_str()).ok_or(ScoringError::NoChoices)
}

/// Softmax over length-normalized log-likelihoods, in input order.
pub fn choice_probabilities(scores: &[ChoiceScore]) -> Vec<f64> {
    let max = scores
        .iter()
        .map(|s| s.length_normalized)
        .fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = scores.iter().map(|s| (s.length_normalized - max).exp()).collect();
    let z: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / z).collect()
}

/// Language-model client matching the task format.
#[derive(Clone)]
pub enum LmClient {
    Score(Arc<dyn ScoreBackend>),
    Generate(Arc<dyn GenerateBackend>),
}

/// Fixed settings for scoring a task.
#[derive(Clone)]
pub struct ScoringContext {
    pub task: TaskSpec,
    pub client: LmClient,
    pub style: RenderStyle,
    pub max_new_tokens: u32,
}

/// Per-example outcome. `probabilities` follows label-set order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExamplePrediction {
    pub example_id: String,
    pub record: PredictionRecord,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub probabilities: Vec<f64>,
    /// Mean per-token probability of a generated completion.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mean_token_prob: Option<f64>,
}

/// Model output for an unlabeled input.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Inference {
    pub prediction: Gold,
    pub confidence: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub metric: MetricKind,
    pub score: f64,
    /// In dev-set order.
    pub predictions: Vec<ExamplePrediction>,
}

impl ScoringContext {
    pub fn new(task: TaskSpec, client: LmClient) -> Result<Self, ScoringError> {
        let ok = matches!(
            (&client, task.format.is_generation()),
            (LmClient::Score(_), false) | (LmClient::Generate(_), true)
        );
        if !ok {
            return Err(ScoringError::Mismatch {
                task_id: task.task_id.clone(),
                reason: format!(
                    "{:?} task needs a {} client",
                    task.format,
                    if task.format.is_generation() {
                        "generate"
                    } else {
                        "score"
                    }
                ),
            });
        }
        task.validate().map_err(|reason| ScoringError::Mismatch {
            task_id: task.task_id.clone(),
            reason,
        })?;
        Ok(Self {
            task,
            client,
            style: RenderStyle::default(),
            max_new_tokens: 64,
        })
    }

    /// Per-choice scores for one example, in label-set order.
    pub fn choice_scores(
        &self,
        template: &PromptTemplate,
        example: &LabeledExample,
    ) -> Result<Vec<ChoiceScore>, ScoringError> {
        let LmClient::Score(client) = &self.client else {
            return Err(self.mismatch("choice scores need a score client"));
        };
        let rendered = template
            .render(example, &self.style)
            .map_err(|source| ScoringError::Template {
                id: example.id.clone(),
                source,
            })?;
        let req = ScoreRequest {
            prompt_text: rendered.text,
            mask_offset: rendered.mask_offset,
            choices: self.task.label_set.clone(),
            soft_slot_len: rendered.soft_marker_count,
        };
        let backend_err = |source| ScoringError::Backend {
            id: example.id.clone(),
            source,
        };
        let resp: ScoreResponse = client.score(&req).map_err(backend_err)?;
        resp.validate(&req).map_err(backend_err)?;
        Ok(resp
            .choices
            .into_iter()
            .map(|c| ChoiceScore::new(c.choice, c.log_likelihood, c.token_count))
            .collect())
    }

    fn mismatch(&self, reason: &str) -> ScoringError {
        ScoringError::Mismatch {
            task_id: self.task.task_id.clone(),
            reason: reason.into(),
        }
    }

    fn predict(&self, template: &PromptTemplate, example: &LabeledExample) -> Result<ExamplePrediction, ScoringError> {
        match (&self.client, self.task.format) {
            (LmClient::Score(_), TaskFormat::Classification) => {
                let gold = example
                    .gold_label()
                    .ok_or_else(|| self.mismatch("classification example has a text gold"))?;
                let scores = self.choice_scores(template, example)?;
                let probabilities = choice_probabilities(&scores);
                let predicted = predict_choice(&scores)?;
                let mut record = PredictionRecord::label(Some(predicted), gold);
                if let Some(pos) = self.task.positive_label() {
                    let i = self.task.label_set.iter().position(|l| l == pos).expect("validated");
                    record.ranking_score = Some(probabilities[i]);
                }
                Ok(ExamplePrediction {
                    example_id: example.id.clone(),
                    record,
                    probabilities,
                    mean_token_prob: None,
                })
            }
            (LmClient::Generate(client), f) if f.is_generation() => {
                let gold = example
                    .gold_text()
                    .ok_or_else(|| self.mismatch("generation example has a label gold"))?;
                let rendered = template
                    .render(example, &self.style)
                    .map_err(|source| ScoringError::Template {
                        id: example.id.clone(),
                        source,
                    })?;
                let resp = client
                    .generate(&GenerateRequest::greedy(rendered.text, self.max_new_tokens))
                    .map_err(|source| ScoringError::Backend {
                        id: example.id.clone(),
                        source,
                    })?;
                let lp = &resp.token_logprobs;
                Ok(ExamplePrediction {
                    example_id: example.id.clone(),
                    record: PredictionRecord::text(resp.completion_text.trim(), gold),
                    probabilities: Vec::new(),
                    mean_token_prob: (!lp.is_empty())
                        .then(|| lp.iter().map(|v| v.exp()).sum::<f64>() / lp.len() as f64),
                })
            }
            _ => Err(self.mismatch("client role does not match task format")),
        }
    }

    /// Predicts every dev example (in parallel, collected by position) and
    /// applies the task metric. Any example failure fails the whole call.
    pub fn evaluate(&self, template: &PromptTemplate, dev: &[LabeledExample]) -> Result<Evaluation, ScoringError> {
        if dev.is_empty() {
            return Err(ScoringError::EmptyDev);
        }
        let predictions: Vec<ExamplePrediction> = dev
            .par_iter()
            .map(|ex| self.predict(template, ex))
            .collect::<Result<_, _>>()?;
        let score = metric_value(self.task.metric, &self.task, &predictions)?;
        Ok(Evaluation {
            metric: self.task.metric,
            score,
            predictions,
        })
    }

    /// Prediction and confidence for an input without gold. Classification
    /// confidence is the top softmax probability; generation confidence is
    /// the mean per-token probability of the greedy decode (0 when the
    /// backend reports no log-probabilities).
    pub fn infer(&self, template: &PromptTemplate, id: &str, segments: &[String]) -> Result<Inference, ScoringError> {
        let placeholder_gold = if self.task.format.is_generation() {
            Gold::Text(String::new())
        } else {
            Gold::Label(self.task.label_set[0].clone())
        };
        let ex = LabeledExample::new(id, segments.to_vec(), placeholder_gold);
        let p = self.predict(template, &ex)?;
        Ok(match p.record.predicted_label {
            Some(label) => Inference {
                prediction: Gold::Label(label),
                confidence: p.probabilities.iter().copied().fold(0.0, f64::max),
            },
            None => Inference {
                prediction: Gold::Text(p.record.predicted_text.unwrap_or_default()),
                confidence: p.mean_token_prob.unwrap_or(0.0),
            },
        })
    }

    pub fn score_prompt(&self, template: &PromptTemplate, dev: &[LabeledExample]) -> Result<f64, ScoringError> {
        self.evaluate(template, dev).map(|e| e.score)
    }
}

/// Applies `metric` to predictions sorted by example identity, so the result
/// does not depend on dev-set order.
fn metric_value(metric: MetricKind, task: &TaskSpec, predictions: &[ExamplePrediction]) -> Result<f64, ScoringError> {
    let mut order: Vec<&ExamplePrediction> = predictions.iter().collect();
    order.sort_by(|a, b| {
        a.example_id
            .cmp(&b.example_id)
            .then_with(|| format!("{:?}", a.record).cmp(&format!("{:?}", b.record)))
    });
    let records: Vec<PredictionRecord> = order.into_iter().map(|p| p.record.clone()).collect();
    let value = match metric {
        MetricKind::Auc => {
            let pos = task.positive_label().ok_or_else(|| ScoringError::Mismatch {
                task_id: task.task_id.clone(),
                reason: "AUC needs a positive label".into(),
            })?;
            metrics::auc(&records, pos)?
        }
        MetricKind::MicroF1 => metrics::micro_f1(&records)?,
        MetricKind::StringF1 => metrics::mean_string_f1(&records)?,
        MetricKind::PosF1 => metrics::pos_f1(&records)?,
        MetricKind::Rouge1 => metrics::mean_rouge1(&records)?,
    };
    Ok(value)
}

impl Scorer<PromptTemplate> for ScoringContext {
    fn score(&self, candidate: &PromptTemplate, dev: &[LabeledExample]) -> Result<f64, DynError> {
        Ok(self.score_prompt(candidate, dev)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::mock::{GenerateMode, MockAnswer, MockBackend, MockSpec, ScoreMode};
    use crate::registry::{Split, TaskType};
    use std::collections::BTreeMap;

    fn task(format: TaskFormat, metric: MetricKind, labels: &[&str]) -> TaskSpec {
        TaskSpec {
            task_id: "t".into(),
            task_type: if format.is_generation() {
                TaskType::Summ
            } else {
                TaskType::Senti
            },
            split: Split::Test,
            format,
            label_set: labels.iter().map(|s| s.to_string()).collect(),
            metric,
            arity: 1,
            data_path: "x".into(),
            positive_label: None,
        }
    }

    fn label_ex(i: usize, gold: &str) -> LabeledExample {
        LabeledExample::new(format!("e{i}"), vec![format!("样本{i}号")], Gold::Label(gold.into()))
    }

    fn answer(needle: String, gold: &str, scores: &[(&str, f64)]) -> MockAnswer {
        MockAnswer {
            needle,
            gold: Some(gold.into()),
            scores: scores
                .iter()
                .map(|(k, v)| (k.to_string(), *v))
                .collect::<BTreeMap<_, _>>(),
        }
    }

    #[test]
    fn predict_choice_rules() {
        assert_eq!(predict_choice(&[ChoiceScore::new("a", -3.0, 1)]).unwrap(), "a");
        let s = [ChoiceScore::new("yes", -1.0, 1), ChoiceScore::new("no", -4.0, 2)];
        assert_eq!(predict_choice(&s).unwrap(), "yes");
        let tie = [ChoiceScore::new("b", -2.0, 1), ChoiceScore::new("a", -4.0, 2)];
        assert_eq!(predict_choice(&tie).unwrap(), "b");
        assert!(matches!(predict_choice(&[]), Err(ScoringError::NoChoices)));
    }

    #[test]
    fn oracle_backend_is_perfect() {
        let labels = ["差", "中", "好"];
        let dev: Vec<_> = (0..9).map(|i| label_ex(i, labels[i % 3])).collect();
        let answers = dev
            .iter()
            .map(|e| answer(e.segments[0].clone(), e.gold_str(), &[]))
            .collect();
        let backend = Arc::new(MockBackend::new(MockSpec {
            score: ScoreMode::Oracle,
            answers,
            ..Default::default()
        }));
        let ctx = ScoringContext::new(
            task(TaskFormat::Classification, MetricKind::MicroF1, &labels),
            LmClient::Score(backend),
        )
        .unwrap();
        let t = PromptTemplate::new("[X]怎么样？[MASK]", 1).unwrap();
        assert_eq!(ctx.score_prompt(&t, &dev).unwrap(), 1.0);
    }

    #[test]
    fn scripted_auc_fixture() {
        // positive-class probabilities 0.9, 0.8, 0.3, 0.2 with gold pos, neg, pos, neg
        let probs = [0.9f64, 0.8, 0.3, 0.2];
        let golds = ["是", "否", "是", "否"];
        let dev: Vec<_> = golds.iter().enumerate().map(|(i, g)| label_ex(i, g)).collect();
        let answers = dev
            .iter()
            .zip(probs)
            .map(|(e, p)| {
                answer(
                    e.segments[0].clone(),
                    e.gold_str(),
                    &[("否", (1.0 - p).ln()), ("是", p.ln())],
                )
            })
            .collect();
        let backend = Arc::new(MockBackend::new(MockSpec {
            score: ScoreMode::Scripted,
            answers,
            ..Default::default()
        }));
        let ctx = ScoringContext::new(
            task(TaskFormat::Classification, MetricKind::Auc, &["否", "是"]),
            LmClient::Score(backend),
        )
        .unwrap();
        let t = PromptTemplate::new("[X][MASK]", 1).unwrap();
        let eval = ctx.evaluate(&t, &dev).unwrap();
        assert_eq!(eval.score, 0.75);
        for (p, want) in eval.predictions.iter().zip(probs) {
            assert!((p.record.ranking_score.unwrap() - want).abs() < 1e-12);
        }
    }

    #[test]
    fn generation_echo_gold() {
        let dev: Vec<_> = (0..4)
            .map(|i| {
                LabeledExample::new(
                    format!("g{i}"),
                    vec![format!("文章{i}")],
                    Gold::Text(format!("摘要 {i} 号")),
                )
            })
            .collect();
        let answers = dev
            .iter()
            .map(|e| answer(e.segments[0].clone(), e.gold_str(), &[]))
            .collect();
        let backend = Arc::new(MockBackend::new(MockSpec {
            generate: GenerateMode::Oracle,
            answers,
            ..Default::default()
        }));
        let ctx = ScoringContext::new(
            task(TaskFormat::FreeGeneration, MetricKind::Rouge1, &[]),
            LmClient::Generate(backend),
        )
        .unwrap();
        let t = PromptTemplate::new("[X]的摘要是[MASK]", 1).unwrap();
        assert_eq!(ctx.score_prompt(&t, &dev).unwrap(), 1.0);
    }

    #[test]
    fn order_invariant_and_role_checked() {
        let labels = ["a", "b"];
        let dev: Vec<_> = (0..20).map(|i| label_ex(i, labels[i % 2])).collect();
        let backend: Arc<MockBackend> = Arc::new(MockBackend::default());
        let ctx = ScoringContext::new(
            task(TaskFormat::Classification, MetricKind::Auc, &labels),
            LmClient::Score(backend.clone()),
        )
        .unwrap();
        let t = PromptTemplate::new("[X]？[MASK]", 1).unwrap();
        let a = ctx.score_prompt(&t, &dev).unwrap();
        let mut rev = dev.clone();
        rev.reverse();
        assert_eq!(a.to_bits(), ctx.score_prompt(&t, &rev).unwrap().to_bits());
        assert!(matches!(ctx.score_prompt(&t, &[]), Err(ScoringError::EmptyDev)));
        assert!(ScoringContext::new(
            task(TaskFormat::Classification, MetricKind::Auc, &labels),
            LmClient::Generate(backend)
        )
        .is_err());
    }
}
