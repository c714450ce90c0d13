//! Script-aware text helpers shared by the corpus filter, the metrics and
//! the token estimator.

use serde::{Deserialize, Serialize};

/// CJK ideographs, kana, hangul, CJK punctuation and full-width forms.
pub fn is_cjk(c: char) -> bool {
    matches!(c as u32,
        0x2E80..=0x2FDF       // radicals
        | 0x3000..=0x303F     // CJK symbols and punctuation
        | 0x3040..=0x30FF     // hiragana, katakana
        | 0x3100..=0x31BF     // bopomofo
        | 0x31F0..=0x31FF
        | 0x3200..=0x4DBF     // enclosed, compatibility, extension A
        | 0x4E00..=0x9FFF     // unified ideographs
        | 0xAC00..=0xD7AF     // hangul syllables
        | 0xF900..=0xFAFF     // compatibility ideographs
        | 0xFE30..=0xFE4F     // compatibility forms
        | 0xFF00..=0xFFEF     // half/full-width forms
        | 0x20000..=0x3134F)  // extensions B..G
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WordCountMode {
    /// Each CJK codepoint is a word; other text is split on whitespace.
    #[default]
    Mixed,
    /// Whitespace-delimited tokens only.
    Whitespace,
}

pub fn word_count(text: &str, mode: WordCountMode) -> usize {
    match mode {
        WordCountMode::Whitespace => text.split_whitespace().count(),
        WordCountMode::Mixed => tokenize(text).len(),
    }
}

/// Metric tokenization: every CJK character is a token, runs of other
/// non-whitespace characters form word tokens.
pub fn tokenize(text: &str) -> Vec<&str> {
    let mut out = Vec::new();
    let mut word_start: Option<usize> = None;
    for (i, c) in text.char_indices() {
        if c.is_whitespace() || is_cjk(c) {
            if let Some(s) = word_start.take() {
                out.push(&text[s..i]);
            }
            if is_cjk(c) {
                out.push(&text[i..i + c.len_utf8()]);
            }
        } else if word_start.is_none() {
            word_start = Some(i);
        }
    }
    if let Some(s) = word_start {
        out.push(&text[s..]);
    }
    out
}
