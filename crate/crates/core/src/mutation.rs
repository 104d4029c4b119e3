//! Prompt mutators: mask infill, back-translation and paraphrase.
//!
//! Every mutator rewrites only the description of a template. Soft slot
//! length and verbalizer options are carried over untouched, and every output
//! is re-validated so an invalid template never reaches a population.

use std::sync::Arc;

use rand::seq::index;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::{BackendError, GenerateBackend, GenerateRequest, TranslateBackend, TranslateRequest};
use crate::gps::{DynError, MutationNote, MutationSlot, Mutator, Offspring};
use crate::prompt::{parse_description, validate_description, Piece, Placeholder, PromptTemplate, MASK_MARKER};
use crate::text::is_cjk;

/// Paraphrase meta-prompt shipped with the crate. `{description}` marks where
/// the source description goes.
pub const DEFAULT_META_PROMPT: &str = include_str!("../assets/paraphrase_prompt.txt");
pub const META_PROMPT_SLOT: &str = "{description}";

/// Span sentinel in infill requests, T5 style.
pub fn infill_sentinel(i: usize) -> String {
    format!("<extra_id_{i}>")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MutatorKind {
    MaskInfill,
    BackTranslate,
    Paraphrase,
    Mock,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MutationSettings {
    pub mask_fraction: f64,
    /// Invalid backend outputs tolerated before giving up.
    pub max_retries: u32,
    pub source_lang: String,
    pub pivot_lang: String,
    pub max_new_tokens: u32,
    /// Placeholder shield for translation, `open{index}close`.
    pub shield_open: String,
    pub shield_close: String,
}

impl Default for MutationSettings {
    fn default() -> Self {
        Self {
            mask_fraction: 0.25,
            max_retries: 3,
            source_lang: "zh".into(),
            pivot_lang: "en".into(),
            max_new_tokens: 64,
            shield_open: "⟦".into(),
            shield_close: "⟧".into(),
        }
    }
}

#[derive(Debug, Error)]
pub enum MutationError {
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error("description has no maskable tokens")]
    NoMaskableTokens,
    #[error("mask fraction must be in [0, 1), got {0}")]
    BadFraction(f64),
    #[error("meta prompt has no {META_PROMPT_SLOT} insertion point")]
    MetaPrompt,
    #[error("placeholder {0} did not survive the round trip")]
    PlaceholderLost(String),
    #[error("backend output rejected {attempts} time(s); last reason: {reason}")]
    InvalidOutput { attempts: u32, reason: String },
}

/// A unit of a description as seen by the infill mutator.
#[derive(Debug, Clone, PartialEq, Eq)]
enum Unit {
    Token(String),
    Fixed(String),
}

/// Splits a description into maskable tokens (single CJK characters or runs
/// of other non-whitespace characters) and fixed material (whitespace and
/// placeholder markers).
fn units(description: &str) -> Vec<Unit> {
    let mut out = Vec::new();
    for piece in parse_description(description) {
        match piece {
            Piece::Slot(p) => out.push(Unit::Fixed(p.marker().to_string())),
            Piece::Text(s) => {
                let mut run = String::new();
                let mut run_is_space = false;
                let flush = |run: &mut String, is_space: bool, out: &mut Vec<Unit>| {
                    if !run.is_empty() {
                        let r = std::mem::take(run);
                        out.push(if is_space { Unit::Fixed(r) } else { Unit::Token(r) });
                    }
                };
                for c in s.chars() {
                    if is_cjk(c) {
                        flush(&mut run, run_is_space, &mut out);
                        out.push(Unit::Token(c.to_string()));
                    } else {
                        let sp = c.is_whitespace();
                        if sp != run_is_space {
                            flush(&mut run, run_is_space, &mut out);
                            run_is_space = sp;
                        }
                        run.push(c);
                    }
                }
                flush(&mut run, run_is_space, &mut out);
            }
        }
    }
    out
}

/// Maskable tokens of a description, in order.
pub fn maskable_tokens(description: &str) -> Vec<String> {
    units(description)
        .into_iter()
        .filter_map(|u| match u {
            Unit::Token(t) => Some(t),
            Unit::Fixed(_) => None,
        })
        .collect()
}

/// Parses `<extra_id_0>fill0<extra_id_1>fill1...` into `count` fills.
fn parse_fills(completion: &str, count: usize) -> Result<Vec<String>, String> {
    let mut fills = Vec::with_capacity(count);
    for k in 0..count {
        let open = infill_sentinel(k);
        let start = completion
            .find(&open)
            .ok_or_else(|| format!("completion lacks {open}"))?
            + open.len();
        let rest = &completion[start..];
        let end = rest.find(&infill_sentinel(k + 1)).unwrap_or(rest.len());
        fills.push(rest[..end].trim().to_string());
    }
    Ok(fills)
}

/// Replaces `ceil(mask_fraction · n)` randomly chosen maskable tokens with
/// backend infills. A fraction of zero masks nothing and makes no call.
pub fn mutate_mask_infill(
    template: &PromptTemplate,
    client: &dyn GenerateBackend,
    settings: &MutationSettings,
    rng: &mut ChaCha8Rng,
) -> Result<Offspring<PromptTemplate>, MutationError> {
    let fraction = settings.mask_fraction;
    if !(0.0..1.0).contains(&fraction) {
        return Err(MutationError::BadFraction(fraction));
    }
    let base = units(&template.description);
    let token_at: Vec<usize> = base
        .iter()
        .enumerate()
        .filter_map(|(i, u)| matches!(u, Unit::Token(_)).then_some(i))
        .collect();
    let n = token_at.len();
    if n == 0 {
        return Err(MutationError::NoMaskableTokens);
    }
    let m = (fraction * n as f64).ceil() as usize;
    if m == 0 {
        return Ok(Offspring::plain(template.clone()));
    }

    let mut last_reason = String::new();
    for attempt in 0..=settings.max_retries {
        let mut picked = index::sample(rng, n, m).into_vec();
        picked.sort_unstable();
        let masked_units: Vec<usize> = picked.iter().map(|&p| token_at[p]).collect();

        let mut prompt = String::new();
        for (i, u) in base.iter().enumerate() {
            match masked_units.iter().position(|&mu| mu == i) {
                Some(k) => prompt.push_str(&infill_sentinel(k)),
                None => match u {
                    Unit::Token(s) | Unit::Fixed(s) => prompt.push_str(s),
                },
            }
        }
        let resp = client.generate(&GenerateRequest::greedy(prompt, settings.max_new_tokens))?;
        let fills = match parse_fills(&resp.completion_text, m) {
            Ok(f) => f,
            Err(reason) => {
                last_reason = reason;
                continue;
            }
        };
        let mut description = String::new();
        for (i, u) in base.iter().enumerate() {
            match masked_units.iter().position(|&mu| mu == i) {
                Some(k) => description.push_str(&fills[k]),
                None => match u {
                    Unit::Token(s) | Unit::Fixed(s) => description.push_str(s),
                },
            }
        }
        match validate_description(&description, template.arity) {
            Ok(()) => {
                return Ok(Offspring {
                    genome: PromptTemplate {
                        description,
                        ..template.clone()
                    },
                    note: MutationNote {
                        retries: attempt,
                        mask_reappended: false,
                    },
                })
            }
            Err(e) => last_reason = e.to_string(),
        }
    }
    Err(MutationError::InvalidOutput {
        attempts: settings.max_retries + 1,
        reason: last_reason,
    })
}

fn shield(description: &str, settings: &MutationSettings) -> (String, Vec<Placeholder>) {
    let mut out = String::new();
    let mut slots = Vec::new();
    for piece in parse_description(description) {
        match piece {
            Piece::Text(s) => out.push_str(s),
            Piece::Slot(p) => {
                out.push_str(&format!(
                    "{}{}{}",
                    settings.shield_open,
                    slots.len(),
                    settings.shield_close
                ));
                slots.push(p);
            }
        }
    }
    (out, slots)
}

fn unshield(text: &str, slots: &[Placeholder], settings: &MutationSettings) -> Result<String, MutationError> {
    let mut out = text.to_string();
    for (i, p) in slots.iter().enumerate() {
        let s = format!("{}{}{}", settings.shield_open, i, settings.shield_close);
        if out.matches(&s).count() != 1 {
            return Err(MutationError::PlaceholderLost(p.marker().to_string()));
        }
        out = out.replacen(&s, p.marker(), 1);
    }
    if out.contains(&settings.shield_open) {
        return Err(MutationError::PlaceholderLost(format!(
            "unexpected {}",
            settings.shield_open
        )));
    }
    Ok(out)
}

/// Round-trips the description through the pivot language with placeholders
/// shielded by sentinels.
pub fn mutate_backtranslate(
    template: &PromptTemplate,
    client: &dyn TranslateBackend,
    settings: &MutationSettings,
) -> Result<Offspring<PromptTemplate>, MutationError> {
    let (shielded, slots) = shield(&template.description, settings);
    let there = client.translate(&TranslateRequest {
        text: shielded,
        source: settings.source_lang.clone(),
        target: settings.pivot_lang.clone(),
    })?;
    let back = client.translate(&TranslateRequest {
        text: there.text,
        source: settings.pivot_lang.clone(),
        target: settings.source_lang.clone(),
    })?;
    let description = unshield(&back.text, &slots, settings)?;
    validate_description(&description, template.arity).map_err(|e| MutationError::PlaceholderLost(e.to_string()))?;
    Ok(Offspring::plain(PromptTemplate {
        description,
        ..template.clone()
    }))
}

/// First non-empty line of a completion with surrounding quotes removed.
fn parse_paraphrase(completion: &str) -> Option<String> {
    let line = completion.lines().map(str::trim).find(|l| !l.is_empty())?;
    let quotes: &[char] = &['"', '\'', '“', '”', '「', '」', '『', '』'];
    let line = line.trim_matches(quotes).trim();
    (!line.is_empty()).then(|| line.to_string())
}

/// Asks a generator for a similar description. A completion that drops the
/// mask marker gets it re-appended (and flagged); one that loses an input
/// placeholder is rejected and retried.
pub fn mutate_paraphrase(
    template: &PromptTemplate,
    client: &dyn GenerateBackend,
    meta_prompt: &str,
    settings: &MutationSettings,
) -> Result<Offspring<PromptTemplate>, MutationError> {
    if !meta_prompt.contains(META_PROMPT_SLOT) {
        return Err(MutationError::MetaPrompt);
    }
    let prompt = meta_prompt.replacen(META_PROMPT_SLOT, &template.description, 1);
    let mut last_reason = String::new();
    for attempt in 0..=settings.max_retries {
        let resp = client.generate(&GenerateRequest::greedy(prompt.clone(), settings.max_new_tokens))?;
        let Some(mut description) = parse_paraphrase(&resp.completion_text) else {
            last_reason = "empty completion".into();
            continue;
        };
        let mut reappended = false;
        if !description.contains(MASK_MARKER) {
            description.push_str(MASK_MARKER);
            reappended = true;
        }
        match validate_description(&description, template.arity) {
            Ok(()) => {
                return Ok(Offspring {
                    genome: PromptTemplate {
                        description,
                        ..template.clone()
                    },
                    note: MutationNote {
                        retries: attempt,
                        mask_reappended: reappended,
                    },
                })
            }
            Err(e) => last_reason = e.to_string(),
        }
    }
    Err(MutationError::InvalidOutput {
        attempts: settings.max_retries + 1,
        reason: last_reason,
    })
}

pub struct MaskInfillMutator {
    pub client: Arc<dyn GenerateBackend>,
    pub settings: MutationSettings,
}

impl Mutator<PromptTemplate> for MaskInfillMutator {
    fn mutate(
        &self,
        parent: &PromptTemplate,
        _slot: MutationSlot,
        rng: &mut ChaCha8Rng,
    ) -> Result<Offspring<PromptTemplate>, DynError> {
        Ok(mutate_mask_infill(parent, self.client.as_ref(), &self.settings, rng)?)
    }
}

pub struct BackTranslateMutator {
    pub client: Arc<dyn TranslateBackend>,
    pub settings: MutationSettings,
}

impl Mutator<PromptTemplate> for BackTranslateMutator {
    fn mutate(
        &self,
        parent: &PromptTemplate,
        _slot: MutationSlot,
        _rng: &mut ChaCha8Rng,
    ) -> Result<Offspring<PromptTemplate>, DynError> {
        Ok(mutate_backtranslate(parent, self.client.as_ref(), &self.settings)?)
    }
}

pub struct ParaphraseMutator {
    pub client: Arc<dyn GenerateBackend>,
    pub meta_prompt: String,
    pub settings: MutationSettings,
}

impl Mutator<PromptTemplate> for ParaphraseMutator {
    fn mutate(
        &self,
        parent: &PromptTemplate,
        _slot: MutationSlot,
        _rng: &mut ChaCha8Rng,
    ) -> Result<Offspring<PromptTemplate>, DynError> {
        Ok(mutate_paraphrase(
            parent,
            self.client.as_ref(),
            &self.meta_prompt,
            &self.settings,
        )?)
    }
}

/// Backend-free mutator: inserts a word drawn from `vocab` right before the
/// mask marker.
#[derive(Debug, Clone)]
pub struct MockMutator {
    pub vocab: Vec<String>,
}

impl Default for MockMutator {
    fn default() -> Self {
        Self {
            vocab: ["请", "回答", "判断", "一下", "是否"]
                .iter()
                .map(|s| s.to_string())
                .collect(),
        }
    }
}

impl Mutator<PromptTemplate> for MockMutator {
    fn mutate(
        &self,
        parent: &PromptTemplate,
        _slot: MutationSlot,
        rng: &mut ChaCha8Rng,
    ) -> Result<Offspring<PromptTemplate>, DynError> {
        let word = &self.vocab[rng.random_range(0..self.vocab.len())];
        let description = parent
            .description
            .replacen(MASK_MARKER, &format!("{word}{MASK_MARKER}"), 1);
        Ok(Offspring::plain(PromptTemplate {
            description,
            ..parent.clone()
        }))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::{GenerateResponse, TranslateResponse};
    use crate::rng::stream;
    use std::sync::Mutex;

    fn gen_resp(s: &str) -> GenerateResponse {
        GenerateResponse {
            completion_text: s.into(),
            token_logprobs: vec![],
        }
    }

    fn template(d: &str, arity: usize) -> PromptTemplate {
        PromptTemplate::new(d, arity)
            .unwrap()
            .with_verbalizers(vec!["积极".into(), "消极".into()])
            .unwrap()
            .with_soft_slot(3)
    }

    /// Re-fills every sentinel with the original token it hides, found by
    /// aligning the masked prompt against the original description.
    fn echo_originals(original: String) -> impl Fn(&GenerateRequest) -> Result<GenerateResponse, BackendError> {
        move |req| {
            let mut out = String::new();
            let mut orig = original.as_str();
            let mut masked = req.prompt_text.as_str();
            let mut k = 0;
            loop {
                let s = infill_sentinel(k);
                let Some(at) = masked.find(&s) else { break };
                let prefix = &masked[..at];
                orig = &orig[prefix.len()..];
                let c = orig.chars().next().unwrap();
                let tok_len = if is_cjk(c) {
                    c.len_utf8()
                } else {
                    orig.find(|ch: char| ch.is_whitespace() || is_cjk(ch) || ch == '[')
                        .unwrap_or(orig.len())
                };
                out.push_str(&s);
                out.push_str(&orig[..tok_len]);
                orig = &orig[tok_len..];
                masked = &masked[at + s.len()..];
                k += 1;
            }
            out.push_str(&infill_sentinel(k));
            Ok(gen_resp(&out))
        }
    }

    #[test]
    fn tokenizer_keeps_placeholders_fixed() {
        assert_eq!(
            maskable_tokens("这句话：[X]。回答：[MASK]"),
            ["这", "句", "话", "：", "。", "回", "答", "："]
        );
        assert_eq!(maskable_tokens("Q: [X] A: [MASK]"), ["Q:", "A:"]);
    }

    #[test]
    fn infill_identity_echo() {
        let t = template("这句话：[X]。回答：[MASK]", 1);
        let settings = MutationSettings {
            mask_fraction: 0.5,
            ..Default::default()
        };
        let client = echo_originals(t.description.clone());
        let out = mutate_mask_infill(&t, &client, &settings, &mut stream(3, &[])).unwrap();
        assert_eq!(out.genome, t);
        let t2 = template("Please read [X] and answer [MASK] now", 1);
        let client = echo_originals(t2.description.clone());
        let out = mutate_mask_infill(&t2, &client, &settings, &mut stream(4, &[])).unwrap();
        assert_eq!(out.genome, t2);
    }

    #[test]
    fn infill_zero_fraction_is_identity() {
        let t = template("Q: [X] A: [MASK]", 1);
        let client = |_: &GenerateRequest| -> Result<GenerateResponse, BackendError> { panic!("no call expected") };
        let settings = MutationSettings {
            mask_fraction: 0.0,
            ..Default::default()
        };
        assert_eq!(
            mutate_mask_infill(&t, &client, &settings, &mut stream(0, &[]))
                .unwrap()
                .genome,
            t
        );
    }

    #[test]
    fn infill_hand_trace() {
        let t = template("这句话：[X]。回答：[MASK]", 1);
        let settings = MutationSettings {
            mask_fraction: 0.5,
            ..Default::default()
        };
        let fill_all = |req: &GenerateRequest| -> Result<GenerateResponse, BackendError> {
            let k = (0..)
                .take_while(|i| req.prompt_text.contains(&infill_sentinel(*i)))
                .count();
            let s: String = (0..k).map(|i| format!("{}文", infill_sentinel(i))).collect();
            Ok(gen_resp(&s))
        };
        let out = mutate_mask_infill(&t, &fill_all, &settings, &mut stream(11, &[])).unwrap();

        // ceil(0.5 · 8) = 4 positions, drawn from the same seeded stream
        let mut picked = index::sample(&mut stream(11, &[]), 8, 4).into_vec();
        picked.sort_unstable();
        let mut toks = ["这", "句", "话", "：", "。", "回", "答", "："];
        for p in &picked {
            toks[*p] = "文";
        }
        let expected = format!(
            "{}{}{}{}[X]{}{}{}{}[MASK]",
            toks[0], toks[1], toks[2], toks[3], toks[4], toks[5], toks[6], toks[7]
        );
        assert_eq!(out.genome.description, expected);
        assert_eq!(out.genome.description.matches('文').count(), 4);
        assert_eq!(out.genome.verbalizer_prompt, t.verbalizer_prompt);
        assert_eq!(out.genome.soft_slot_len, 3);
    }

    #[test]
    fn infill_rejects_marker_injection_then_errors() {
        let t = template("Q: [X] A: [MASK]", 1);
        let settings = MutationSettings {
            mask_fraction: 0.5,
            max_retries: 2,
            ..Default::default()
        };
        let calls = Mutex::new(0);
        let bad = |_: &GenerateRequest| -> Result<GenerateResponse, BackendError> {
            *calls.lock().unwrap() += 1;
            Ok(gen_resp("<extra_id_0>[MASK]"))
        };
        let err = mutate_mask_infill(&t, &bad, &settings, &mut stream(0, &[])).unwrap_err();
        assert!(matches!(err, MutationError::InvalidOutput { attempts: 3, .. }));
        assert_eq!(*calls.lock().unwrap(), 3);
        let empty = PromptTemplate::new("[X][MASK]", 1).unwrap();
        assert!(matches!(
            mutate_mask_infill(&empty, &bad, &settings, &mut stream(0, &[])),
            Err(MutationError::NoMaskableTokens)
        ));
    }

    fn identity(req: &TranslateRequest) -> Result<TranslateResponse, BackendError> {
        Ok(TranslateResponse { text: req.text.clone() })
    }

    #[test]
    fn backtranslate_identity_and_case_pair() {
        let settings = MutationSettings::default();
        let t = template("What is the attitude of [X]? [MASK]", 1);
        assert_eq!(mutate_backtranslate(&t, &identity, &settings).unwrap().genome, t);
        let case_pair = |req: &TranslateRequest| -> Result<TranslateResponse, BackendError> {
            let text = if req.target == "en" {
                req.text.to_ascii_uppercase()
            } else {
                req.text.to_ascii_lowercase()
            };
            Ok(TranslateResponse { text })
        };
        let lower = template("what is the attitude of [X]? [MASK]", 1);
        assert_eq!(
            mutate_backtranslate(&lower, &case_pair, &settings).unwrap().genome,
            lower
        );
    }

    #[test]
    fn backtranslate_scripted_rewrite() {
        let settings = MutationSettings::default();
        let t = template("“[X]”这句汽车评论的态度是什么？[MASK]。", 1);
        let rewrite = |req: &TranslateRequest| -> Result<TranslateResponse, BackendError> {
            let text = if req.target == "zh" {
                req.text.replace("态度是什么", "是什么态度")
            } else {
                req.text.clone()
            };
            Ok(TranslateResponse { text })
        };
        let out = mutate_backtranslate(&t, &rewrite, &settings).unwrap().genome;
        assert_eq!(out.description, "“[X]”这句汽车评论的是什么态度？[MASK]。");
        assert_eq!(out.verbalizer_prompt, t.verbalizer_prompt);
    }

    #[test]
    fn backtranslate_lost_placeholder_is_an_error() {
        let settings = MutationSettings::default();
        let t = template("[X1] 和 [X2] 一样吗 [MASK]", 2);
        let drop_one = |req: &TranslateRequest| -> Result<TranslateResponse, BackendError> {
            Ok(TranslateResponse {
                text: req.text.replace("⟦1⟧", ""),
            })
        };
        assert!(matches!(
            mutate_backtranslate(&t, &drop_one, &settings),
            Err(MutationError::PlaceholderLost(m)) if m == "[X2]"
        ));
    }

    #[test]
    fn paraphrase_verbatim_and_fixed() {
        let settings = MutationSettings::default();
        let t = template("[X1]和[X2]意思相同吗？[MASK]", 2);
        let verbatim = |req: &GenerateRequest| -> Result<GenerateResponse, BackendError> {
            assert!(req.prompt_text.contains("[X1]和[X2]意思相同吗？[MASK]"));
            Ok(gen_resp("[X1]和[X2]意思相同吗？[MASK]\n"))
        };
        assert_eq!(
            mutate_paraphrase(&t, &verbatim, DEFAULT_META_PROMPT, &settings)
                .unwrap()
                .genome,
            t
        );
        let fixed = |_: &GenerateRequest| Ok(gen_resp("“请判断[X1]与[X2]是否同义：[MASK]”"));
        let out = mutate_paraphrase(&t, &fixed, DEFAULT_META_PROMPT, &settings).unwrap();
        assert_eq!(out.genome.description, "请判断[X1]与[X2]是否同义：[MASK]");
        assert_eq!(out.note, MutationNote::default());
    }

    #[test]
    fn paraphrase_retries_then_adopts() {
        let settings = MutationSettings::default();
        let t = template("[X1]和[X2]意思相同吗？[MASK]", 2);
        let replies = Mutex::new(vec!["[X1]与[X2]同义吗？", "只有[X2]？[MASK]"]);
        let scripted = |_: &GenerateRequest| Ok(gen_resp(replies.lock().unwrap().pop().unwrap()));
        let out = mutate_paraphrase(&t, &scripted, DEFAULT_META_PROMPT, &settings).unwrap();
        assert_eq!(out.note.retries, 1);
        // second reply dropped the mask, so it is re-appended and flagged
        assert_eq!(out.genome.description, "[X1]与[X2]同义吗？[MASK]");
        assert!(out.note.mask_reappended);
        assert!(matches!(
            mutate_paraphrase(&t, &scripted, "no slot", &settings),
            Err(MutationError::MetaPrompt)
        ));
    }

    #[test]
    fn mock_mutator_is_deterministic() {
        let t = template("[X]好吗[MASK]", 1);
        let m = MockMutator::default();
        let slot = MutationSlot {
            generation: 1,
            parent_rank: 0,
            offspring: 0,
        };
        let a = m.mutate(&t, slot, &mut stream(5, &[1, 0])).unwrap().genome;
        let b = m.mutate(&t, slot, &mut stream(5, &[1, 0])).unwrap().genome;
        assert_eq!(a, b);
        a.validate().unwrap();
        assert_eq!(a.verbalizer_prompt, t.verbalizer_prompt);
    }
}
