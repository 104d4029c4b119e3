//! Hybrid prompt templates: soft slot, verbalizer options, description.
//!
//! A template renders as
//! `soft markers ++ prefix ++ "v1/v2/..." ++ suffix ++ description`, where
//! the description embeds the inputs through `[X]` (or `[X1]`/`[X2]`) and
//! carries the single `[MASK]` answer position.

use std::collections::HashSet;
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::registry::LabeledExample;

pub const MASK_MARKER: &str = "[MASK]";
pub const SOFT_MARKER: &str = "⟨p⟩";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Placeholder {
    X,
    X1,
    X2,
    Mask,
}

impl Placeholder {
    pub const ALL: [Placeholder; 4] = [Placeholder::X, Placeholder::X1, Placeholder::X2, Placeholder::Mask];

    pub fn marker(self) -> &'static str {
        match self {
            Placeholder::X => "[X]",
            Placeholder::X1 => "[X1]",
            Placeholder::X2 => "[X2]",
            Placeholder::Mask => MASK_MARKER,
        }
    }

    /// Segment index the placeholder takes its value from.
    fn segment(self) -> Option<usize> {
        match self {
            Placeholder::X | Placeholder::X1 => Some(0),
            Placeholder::X2 => Some(1),
            Placeholder::Mask => None,
        }
    }

    /// Placeholders a description of the given arity must contain.
    pub fn required(arity: usize) -> &'static [Placeholder] {
        match arity {
            1 => &[Placeholder::X, Placeholder::Mask],
            _ => &[Placeholder::X1, Placeholder::X2, Placeholder::Mask],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Piece<'a> {
    Text(&'a str),
    Slot(Placeholder),
}

/// Splits a description into literal text and placeholder markers.
pub fn parse_description(description: &str) -> Vec<Piece<'_>> {
    let mut pieces = Vec::new();
    let mut rest = description;
    while !rest.is_empty() {
        let next = Placeholder::ALL
            .iter()
            .filter_map(|p| rest.find(p.marker()).map(|at| (at, *p)))
            .min_by_key(|(at, _)| *at);
        match next {
            Some((at, p)) => {
                if at > 0 {
                    pieces.push(Piece::Text(&rest[..at]));
                }
                pieces.push(Piece::Slot(p));
                rest = &rest[at + p.marker().len()..];
            }
            None => {
                pieces.push(Piece::Text(rest));
                break;
            }
        }
    }
    pieces
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TemplateError {
    #[error("empty verbalizer set")]
    EmptyVerbalizers,
    #[error("duplicate verbalizer {0:?}")]
    DuplicateVerbalizer(String),
    #[error("verbalizer strings must be non-empty")]
    EmptyVerbalizer,
    #[error("arity must be 1 or 2, got {0}")]
    BadArity(usize),
    #[error("description must contain {marker} exactly once, found {count}")]
    PlaceholderCount { marker: &'static str, count: usize },
    #[error("description contains {0}, which is not valid for arity {1}")]
    ForeignPlaceholder(&'static str, usize),
    #[error("template has arity {template} but example has {example} segment(s)")]
    ArityMismatch { template: usize, example: usize },
}

/// Surface strings used when rendering. All configurable.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct RenderStyle {
    pub separator: String,
    pub prefix: String,
    pub suffix: String,
    pub soft_marker: String,
}

impl Default for RenderStyle {
    fn default() -> Self {
        Self {
            separator: "/".into(),
            prefix: "选项：".into(),
            suffix: "。".into(),
            soft_marker: SOFT_MARKER.into(),
        }
    }
}

/// Joins verbalizer candidates in order with the style's separator.
pub fn concat_verbalizers(candidates: &[String], style: &RenderStyle) -> Result<String, TemplateError> {
    check_verbalizers(candidates)?;
    if candidates.is_empty() {
        return Err(TemplateError::EmptyVerbalizers);
    }
    Ok(candidates.join(&style.separator))
}

fn check_verbalizers(candidates: &[String]) -> Result<(), TemplateError> {
    let mut seen = HashSet::new();
    for c in candidates {
        if c.is_empty() {
            return Err(TemplateError::EmptyVerbalizer);
        }
        if !seen.insert(c.as_str()) {
            return Err(TemplateError::DuplicateVerbalizer(c.clone()));
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PromptTemplate {
    #[serde(default)]
    pub soft_slot_len: usize,
    #[serde(default)]
    pub verbalizer_prompt: Vec<String>,
    pub description: String,
    pub arity: usize,
}

impl PromptTemplate {
    pub fn new(description: impl Into<String>, arity: usize) -> Result<Self, TemplateError> {
        let t = Self {
            soft_slot_len: 0,
            verbalizer_prompt: Vec::new(),
            description: description.into(),
            arity,
        };
        t.validate()?;
        Ok(t)
    }

    pub fn with_verbalizers(mut self, v: Vec<String>) -> Result<Self, TemplateError> {
        self.verbalizer_prompt = v;
        self.validate()?;
        Ok(self)
    }

    pub fn with_soft_slot(mut self, n: usize) -> Self {
        self.soft_slot_len = n;
        self
    }

    pub fn validate(&self) -> Result<(), TemplateError> {
        validate_description(&self.description, self.arity)?;
        check_verbalizers(&self.verbalizer_prompt)
    }

    /// Identity used for deduplication during search.
    pub fn key(&self) -> String {
        format!(
            "{}\u{1f}{}\u{1f}{}",
            self.soft_slot_len,
            self.verbalizer_prompt.join("\u{1e}"),
            self.description
        )
    }

    pub fn render(&self, example: &LabeledExample, style: &RenderStyle) -> Result<RenderedPrompt, TemplateError> {
        render(self, example, style)
    }
}

/// Checks placeholder multiplicities of a description for `arity`.
pub fn validate_description(description: &str, arity: usize) -> Result<(), TemplateError> {
    if !(1..=2).contains(&arity) {
        return Err(TemplateError::BadArity(arity));
    }
    let pieces = parse_description(description);
    let count = |p: Placeholder| pieces.iter().filter(|x| **x == Piece::Slot(p)).count();
    let required = Placeholder::required(arity);
    for p in Placeholder::ALL {
        let n = count(p);
        if required.contains(&p) {
            if n != 1 {
                return Err(TemplateError::PlaceholderCount {
                    marker: p.marker(),
                    count: n,
                });
            }
        } else if n > 0 {
            return Err(TemplateError::ForeignPlaceholder(p.marker(), arity));
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RenderedPrompt {
    pub text: String,
    /// Character (not byte) index of the mask marker in `text`.
    pub mask_offset: usize,
    pub soft_marker_count: usize,
}

pub fn render(
    template: &PromptTemplate,
    example: &LabeledExample,
    style: &RenderStyle,
) -> Result<RenderedPrompt, TemplateError> {
    if template.arity != example.segments.len() {
        return Err(TemplateError::ArityMismatch {
            template: template.arity,
            example: example.segments.len(),
        });
    }
    validate_description(&template.description, template.arity)?;

    let mut text = style.soft_marker.repeat(template.soft_slot_len);
    if !template.verbalizer_prompt.is_empty() {
        text.push_str(&style.prefix);
        text.push_str(&concat_verbalizers(&template.verbalizer_prompt, style)?);
        text.push_str(&style.suffix);
    }
    let mut mask_offset = 0;
    for piece in parse_description(&template.description) {
        match piece {
            Piece::Text(s) => text.push_str(s),
            Piece::Slot(Placeholder::Mask) => {
                mask_offset = text.chars().count();
                text.push_str(MASK_MARKER);
            }
            Piece::Slot(p) => {
                let idx = p.segment().expect("input placeholder");
                text.push_str(&example.segments[idx]);
            }
        }
    }
    Ok(RenderedPrompt {
        text,
        mask_offset,
        soft_marker_count: template.soft_slot_len,
    })
}

/// A template file record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TemplateRecord {
    pub template_id: String,
    pub task_id: String,
    #[serde(flatten)]
    pub template: PromptTemplate,
}

#[derive(Debug, Error)]
pub enum TemplateFileError {
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
    #[error("{path}:{line}: template {template_id}: {source}")]
    Invalid {
        path: PathBuf,
        line: usize,
        template_id: String,
        #[source]
        source: TemplateError,
    },
}

pub fn load_templates(path: impl AsRef<Path>) -> Result<Vec<TemplateRecord>, TemplateFileError> {
    let path = path.as_ref();
    let io = |source| TemplateFileError::Io {
        path: path.to_path_buf(),
        source,
    };
    let file = File::open(path).map_err(io)?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(io)?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: TemplateRecord = serde_json::from_str(&line).map_err(|e| TemplateFileError::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message: e.to_string(),
        })?;
        rec.template.validate().map_err(|source| TemplateFileError::Invalid {
            path: path.to_path_buf(),
            line: i + 1,
            template_id: rec.template_id.clone(),
            source,
        })?;
        out.push(rec);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::registry::Gold;
    use proptest::prelude::*;

    fn ex(segs: &[&str]) -> LabeledExample {
        LabeledExample::new(
            "e",
            segs.iter().map(|s| s.to_string()).collect(),
            Gold::Label("x".into()),
        )
    }

    #[test]
    fn concat_cases() {
        let style = RenderStyle::default();
        assert_eq!(concat_verbalizers(&["是".into()], &style).unwrap(), "是");
        assert_eq!(
            concat_verbalizers(&["积极".into(), "消极".into()], &style).unwrap(),
            "积极/消极"
        );
        assert_eq!(concat_verbalizers(&[], &style), Err(TemplateError::EmptyVerbalizers));
        assert_eq!(
            concat_verbalizers(&["a".into(), "a".into()], &style),
            Err(TemplateError::DuplicateVerbalizer("a".into()))
        );
    }

    #[test]
    fn plain_render() {
        let t = PromptTemplate::new("Q: [X] A: [MASK]", 1).unwrap();
        let r = t.render(&ex(&["hi"]), &RenderStyle::default()).unwrap();
        assert_eq!(r.text, "Q: hi A: [MASK]");
        assert_eq!(r.mask_offset, 9);
        assert_eq!(r.soft_marker_count, 0);
    }

    #[test]
    fn car_review_template() {
        let t = PromptTemplate::new("“[X]”这句汽车评论的态度是什么？[MASK]。", 1).unwrap();
        let review = "动力还可以因为搭载cvt变速箱起步发动机转速比较好。";
        let r = t.render(&ex(&[review]), &RenderStyle::default()).unwrap();
        assert_eq!(
            r.text,
            "“动力还可以因为搭载cvt变速箱起步发动机转速比较好。”这句汽车评论的态度是什么？[MASK]。"
        );
        let chars: Vec<char> = r.text.chars().collect();
        let at: String = chars[r.mask_offset..r.mask_offset + 6].iter().collect();
        assert_eq!(at, "[MASK]");
    }

    #[test]
    fn hybrid_render_pair() {
        let t = PromptTemplate::new("[X1]和[X2]相似吗？[MASK]", 2)
            .unwrap()
            .with_verbalizers(vec!["是".into(), "不是".into()])
            .unwrap()
            .with_soft_slot(4);
        let r = t
            .render(&ex(&["今天天气好", "今天是晴天"]), &RenderStyle::default())
            .unwrap();
        assert_eq!(
            r.text,
            "⟨p⟩⟨p⟩⟨p⟩⟨p⟩选项：是/不是。今天天气好和今天是晴天相似吗？[MASK]"
        );
        assert_eq!(r.soft_marker_count, 4);
        assert_eq!(r.text.matches(SOFT_MARKER).count(), 4);
    }

    #[test]
    fn invalid_templates() {
        assert!(matches!(
            PromptTemplate::new("[X] no mask", 1),
            Err(TemplateError::PlaceholderCount {
                marker: "[MASK]",
                count: 0
            })
        ));
        assert!(matches!(
            PromptTemplate::new("[X1] [X] [MASK]", 1),
            Err(TemplateError::ForeignPlaceholder("[X1]", 1))
        ));
        assert!(matches!(
            PromptTemplate::new("[X1] [X1] [X2] [MASK]", 2),
            Err(TemplateError::PlaceholderCount {
                marker: "[X1]",
                count: 2
            })
        ));
        let t = PromptTemplate::new("[X] [MASK]", 1).unwrap();
        assert!(matches!(
            t.render(&ex(&["a", "b"]), &RenderStyle::default()),
            Err(TemplateError::ArityMismatch {
                template: 1,
                example: 2
            })
        ));
    }

    #[test]
    fn segment_text_is_not_reinterpreted() {
        let t = PromptTemplate::new("[X1] vs [X2]: [MASK]", 2).unwrap();
        let r = t.render(&ex(&["[X2]", "b"]), &RenderStyle::default()).unwrap();
        assert_eq!(r.text, "[X2] vs b: [MASK]");
        assert_eq!(r.mask_offset, 11);
    }

    proptest! {
        #[test]
        fn removing_verbalizers_only_touches_that_region(
            d_pre in "[a-z的是 ]{0,8}", d_mid in "[a-z吗 ]{0,8}",
            seg in "[a-z好 ]{0,10}", soft in 0usize..5,
            v in proptest::collection::btree_set("[a-z]{1,4}", 1..4),
        ) {
            let style = RenderStyle::default();
            let desc = format!("{d_pre}[X]{d_mid}[MASK]");
            let bare = PromptTemplate::new(desc, 1).unwrap().with_soft_slot(soft);
            let with_v = bare.clone().with_verbalizers(v.into_iter().collect()).unwrap();
            let e = ex(&[&seg]);
            let a = with_v.render(&e, &style).unwrap();
            let b = bare.render(&e, &style).unwrap();
            prop_assert_eq!(&a, &with_v.render(&e, &style).unwrap());
            let markers = style.soft_marker.repeat(soft);
            let v_region = format!("{}{}{}", style.prefix, with_v.verbalizer_prompt.join("/"), style.suffix);
            prop_assert!(a.text.starts_with(&markers));
            prop_assert_eq!(a.text.replacen(&v_region, "", 1), b.text.clone());
            prop_assert_eq!(b.text.matches(SOFT_MARKER).count(), soft);
        }
    }
}
