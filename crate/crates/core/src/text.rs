//! Tokenization shared by the metrics and the contamination filter.

use serde::{Deserialize, Serialize};

/// Unit used when splitting text into tokens.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum TokenUnit {
    /// One token per non-whitespace character.
    Char,
    /// Whitespace-separated words.
    Word,
    /// Characters when the text contains any CJK codepoint, words otherwise.
    #[default]
    Auto,
}

/// Returns true for codepoints in the CJK ideograph, kana, hangul and
/// CJK punctuation / fullwidth blocks.
pub fn is_cjk(c: char) -> bool {
    matches!(c as u32,
        0x3000..=0x303F     // CJK symbols and punctuation
        | 0x3040..=0x30FF   // hiragana, katakana
        | 0x3400..=0x4DBF   // ext A
        | 0x4E00..=0x9FFF   // unified ideographs
        | 0xAC00..=0xD7AF   // hangul syllables
        | 0xF900..=0xFAFF   // compatibility ideographs
        | 0xFF00..=0xFFEF   // halfwidth and fullwidth forms
        | 0x20000..=0x2FA1F // ext B onwards
    )
}

pub fn contains_cjk(text: &str) -> bool {
    text.chars().any(is_cjk)
}

/// Resolves [`TokenUnit::Auto`] for a given text.
pub fn resolve_unit(text: &str, unit: TokenUnit) -> TokenUnit {
    match unit {
        TokenUnit::Auto if contains_cjk(text) => TokenUnit::Char,
        TokenUnit::Auto => TokenUnit::Word,
        other => other,
    }
}

/// Splits `text` into borrowed tokens. Whitespace never forms a token.
pub fn tokenize(text: &str, unit: TokenUnit) -> Vec<&str> {
    match resolve_unit(text, unit) {
        TokenUnit::Word => text.split_whitespace().collect(),
        _ => text
            .char_indices()
            .filter(|(_, c)| !c.is_whitespace())
            .map(|(i, c)| &text[i..i + c.len_utf8()])
            .collect(),
    }
}
