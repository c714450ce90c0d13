//! Answer extraction and text-overlap metrics.
//!
//! BLEU-n is cumulative: the geometric mean of clipped 1..n-gram precisions
//! times the brevity penalty. An order with no matching n-gram contributes
//! precision [`BLEU_EPSILON`] instead of zero; orders longer than the
//! candidate itself are left out of the mean. ROUGE-N and ROUGE-L are
//! F1 scores scaled to 0..100.

use std::collections::{BTreeSet, HashMap};
use std::fmt;
use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};
use unicode_normalization::UnicodeNormalization;

use crate::corpus::Label;
use crate::entity::Entity;

pub const BLEU_EPSILON: f64 = 1e-9;

/// Answer label pulled from a response, or `Unresolved`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ExtractedAnswer {
    Resolved(Label),
    Unresolved,
}

impl ExtractedAnswer {
    pub fn label(self) -> Option<Label> {
        match self {
            ExtractedAnswer::Resolved(l) => Some(l),
            ExtractedAnswer::Unresolved => None,
        }
    }
}

impl fmt::Display for ExtractedAnswer {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ExtractedAnswer::Resolved(l) => write!(f, "{l}"),
            ExtractedAnswer::Unresolved => f.write_str("unresolved"),
        }
    }
}

impl Serialize for ExtractedAnswer {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for ExtractedAnswer {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        if s == "unresolved" {
            return Ok(ExtractedAnswer::Unresolved);
        }
        s.parse().map(ExtractedAnswer::Resolved).map_err(serde::de::Error::custom)
    }
}

fn final_answer_phrase() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| {
        Regex::new(
            r"(?:(?:正确|最终)?答案(?:应该是|应为|是|为|选)?|(?i:the\s+(?:correct\s+|final\s+|best\s+)?answer\s+(?:is|should\s+be))|(?i:answer))\s*[:：]?\s*(?:选项|选|(?i:option)\s*)?[\(（\[【]?\s*([A-E])(?:[^A-Za-z0-9]|$)",
        )
        .expect("answer regex compiles")
    })
}

fn is_label_neighbor(c: Option<char>) -> bool {
    c.is_some_and(|c| c.is_ascii_alphanumeric())
}

/// Ordered cascade: explicit final-answer phrase, a lone label on the last
/// line, then standalone labels in the last sentence. A tier with two
/// distinct labels makes the whole answer unresolved.
pub fn extract_answer(text: &str, labels: &BTreeSet<Label>) -> ExtractedAnswer {
    let text: String = text.nfkc().collect();
    let keep = |l: Label| labels.contains(&l);

    let tier1: BTreeSet<Label> = final_answer_phrase()
        .captures_iter(&text)
        .filter_map(|c| c[1].parse::<Label>().ok())
        .filter(|&l| keep(l))
        .collect();
    if let Some(answer) = single(&tier1) {
        return answer;
    }

    let last_line = text.lines().map(str::trim).rfind(|l| !l.is_empty()).unwrap_or("");
    let bare = last_line.trim_matches(|c: char| {
        c.is_whitespace() || "*.。:：()（）[]【】".contains(c)
    });
    if bare.chars().count() == 1 {
        if let Ok(l) = bare.parse::<Label>() {
            if keep(l) && bare.chars().all(|c| c.is_ascii_uppercase()) {
                return ExtractedAnswer::Resolved(l);
            }
        }
    }

    let sentence = last_sentence(&text);
    let chars: Vec<char> = sentence.chars().collect();
    let tier3: BTreeSet<Label> = chars
        .iter()
        .enumerate()
        .filter(|&(i, c)| {
            c.is_ascii_uppercase()
                && !is_label_neighbor(i.checked_sub(1).map(|p| chars[p]))
                && !is_label_neighbor(chars.get(i + 1).copied())
        })
        .filter_map(|(_, &c)| Label::from_char(c))
        .filter(|&l| keep(l))
        .collect();
    single(&tier3).unwrap_or(ExtractedAnswer::Unresolved)
}

fn single(found: &BTreeSet<Label>) -> Option<ExtractedAnswer> {
    match found.len() {
        0 => None,
        1 => found.first().map(|&l| ExtractedAnswer::Resolved(l)),
        _ => Some(ExtractedAnswer::Unresolved),
    }
}

fn last_sentence(text: &str) -> &str {
    let chars: Vec<(usize, char)> = text.char_indices().collect();
    let mut bounds = vec![0];
    for (k, &(i, c)) in chars.iter().enumerate() {
        let next = chars.get(k + 1).map(|&(_, n)| n);
        let ends = matches!(c, '。' | '！' | '？' | '!' | '?' | '\n' | '；' | ';')
            || (c == '.' && next.is_none_or(char::is_whitespace));
        if ends {
            bounds.push(i + c.len_utf8());
        }
    }
    bounds.push(text.len());
    bounds
        .windows(2)
        .rev()
        .map(|w| &text[w[0]..w[1]])
        .find(|s| s.chars().any(|c| c.is_alphanumeric()))
        .unwrap_or("")
}

fn ngram_counts<'t, 'a>(tokens: &'t [&'a str], n: usize) -> HashMap<&'t [&'a str], usize> {
    let mut counts = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *counts.entry(w).or_default() += 1;
        }
    }
    counts
}

/// Clipped matches and candidate n-gram total for one order.
fn clipped_precision(candidate: &[&str], reference: &[&str], n: usize) -> (usize, usize) {
    let cand = ngram_counts(candidate, n);
    let refc = ngram_counts(reference, n);
    let matches = cand
        .iter()
        .map(|(g, &c)| c.min(refc.get(g).copied().unwrap_or(0)))
        .sum();
    (matches, candidate.len().saturating_sub(n - 1))
}

/// Cumulative BLEU up to order `n` (n ≥ 1) against a single reference.
pub fn bleu_n(candidate: &[&str], reference: &[&str], n: usize) -> f64 {
    assert!(n >= 1, "BLEU order must be at least 1");
    if candidate.is_empty() {
        return 0.0;
    }
    let orders = n.min(candidate.len());
    let mut log_sum = 0.0;
    for order in 1..=orders {
        let (matches, total) = clipped_precision(candidate, reference, order);
        let p = if matches == 0 {
            BLEU_EPSILON
        } else {
            matches as f64 / total as f64
        };
        log_sum += p.ln();
    }
    let bp = if candidate.len() < reference.len() {
        (1.0 - reference.len() as f64 / candidate.len() as f64).exp()
    } else {
        1.0
    };
    bp * (log_sum / orders as f64).exp()
}

fn f1(p: f64, r: f64) -> f64 {
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

/// ROUGE-N F1 ×100.
pub fn rouge_n(candidate: &[&str], reference: &[&str], n: usize) -> f64 {
    let cand = ngram_counts(candidate, n);
    let refc = ngram_counts(reference, n);
    let cand_total: usize = cand.values().sum();
    let ref_total: usize = refc.values().sum();
    if cand_total == 0 || ref_total == 0 {
        return 0.0;
    }
    let overlap: usize = cand
        .iter()
        .map(|(g, &c)| c.min(refc.get(g).copied().unwrap_or(0)))
        .sum();
    100.0 * f1(overlap as f64 / cand_total as f64, overlap as f64 / ref_total as f64)
}

pub fn lcs_len(a: &[&str], b: &[&str]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y {
                prev[j] + 1
            } else {
                cur[j].max(prev[j + 1])
            };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// ROUGE-L F1 (β = 1) ×100.
pub fn rouge_l(candidate: &[&str], reference: &[&str]) -> f64 {
    if candidate.is_empty() || reference.is_empty() {
        return 0.0;
    }
    let lcs = lcs_len(candidate, reference) as f64;
    100.0 * f1(lcs / candidate.len() as f64, lcs / reference.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SeedQuality {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

/// Overlap of predicted seeds with the entities of a gold analysis.
pub fn seed_quality(predicted: &BTreeSet<Entity>, gold: &BTreeSet<Entity>) -> SeedQuality {
    if predicted.is_empty() || gold.is_empty() {
        return SeedQuality {
            precision: 0.0,
            recall: 0.0,
            f1: 0.0,
        };
    }
    let hit = predicted.intersection(gold).count() as f64;
    let precision = hit / predicted.len() as f64;
    let recall = hit / gold.len() as f64;
    SeedQuality {
        precision,
        recall,
        f1: f1(precision, recall),
    }
}

/// Every text metric for one response/reference pair.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TextMetrics {
    pub bleu_1: f64,
    pub bleu_2: f64,
    pub bleu_3: f64,
    pub bleu_4: f64,
    pub rouge_1: f64,
    pub rouge_2: f64,
    pub rouge_l: f64,
    /// Response length in metric tokens.
    pub length: usize,
}

impl TextMetrics {
    pub fn compute(candidate: &str, reference: &str) -> Self {
        let c = crate::text::tokenize(candidate);
        let r = crate::text::tokenize(reference);
        TextMetrics {
            bleu_1: bleu_n(&c, &r, 1),
            bleu_2: bleu_n(&c, &r, 2),
            bleu_3: bleu_n(&c, &r, 3),
            bleu_4: bleu_n(&c, &r, 4),
            rouge_1: rouge_n(&c, &r, 1),
            rouge_2: rouge_n(&c, &r, 2),
            rouge_l: rouge_l(&c, &r),
            length: c.len(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::tests::ent;

    fn abcde() -> BTreeSet<Label> {
        Label::ALL.into_iter().collect()
    }

    fn toks(s: &str) -> Vec<&str> {
        s.split_whitespace().collect()
    }

    #[test]
    fn explicit_phrases() {
        let l = abcde();
        assert_eq!(extract_answer("……所以答案是B。", &l), ExtractedAnswer::Resolved(Label::B));
        assert_eq!(extract_answer("Answer: D", &l), ExtractedAnswer::Resolved(Label::D));
        assert_eq!(extract_answer("答案：C", &l), ExtractedAnswer::Resolved(Label::C));
        assert_eq!(extract_answer("正确答案为（E）", &l), ExtractedAnswer::Resolved(Label::E));
        assert_eq!(
            extract_answer("Based on the findings, the answer is A.", &l),
            ExtractedAnswer::Resolved(Label::A)
        );
        assert_eq!(extract_answer("答案：Ｂ", &l), ExtractedAnswer::Resolved(Label::B));
        assert_eq!(
            extract_answer("analysis: levodopa first.\nanswer: B", &l),
            ExtractedAnswer::Resolved(Label::B)
        );
    }

    #[test]
    fn ambiguity_is_unresolved() {
        let l = abcde();
        assert_eq!(extract_answer("既可能是A也可能是C", &l), ExtractedAnswer::Unresolved);
        assert_eq!(extract_answer("答案是A。不对，答案是C。", &l), ExtractedAnswer::Unresolved);
        assert_eq!(extract_answer("无法确定。", &l), ExtractedAnswer::Unresolved);
        assert_eq!(extract_answer("", &l), ExtractedAnswer::Unresolved);
    }

    #[test]
    fn lone_label_and_last_sentence() {
        let l = abcde();
        assert_eq!(extract_answer("分析如下……\nB", &l), ExtractedAnswer::Resolved(Label::B));
        assert_eq!(extract_answer("分析如下。\n（D）", &l), ExtractedAnswer::Resolved(Label::D));
        assert_eq!(
            extract_answer("首先排除A。综合考虑应选C。", &l),
            ExtractedAnswer::Resolved(Label::C)
        );
        // words are not labels
        assert_eq!(extract_answer("The answer is amantadine", &l), ExtractedAnswer::Unresolved);
        assert_eq!(extract_answer("Take CT and MRI.", &l), ExtractedAnswer::Unresolved);
    }

    #[test]
    fn labels_outside_the_option_set_are_ignored() {
        let four: BTreeSet<Label> = [Label::A, Label::B, Label::C, Label::D].into_iter().collect();
        assert_eq!(extract_answer("答案是E", &four), ExtractedAnswer::Unresolved);
    }

    #[test]
    fn bleu_fixtures() {
        let r = toks("a b c d");
        assert!((bleu_n(&r, &r, 4) - 1.0).abs() < 1e-12);
        let v = bleu_n(&toks("a b"), &r, 1);
        assert!((v - (-1.0f64).exp()).abs() < 1e-12, "{v}");
        assert!((v - 0.367_879_44).abs() < 1e-6);
        assert!(bleu_n(&toks("a x b"), &toks("a y b"), 2) < 1e-4);
        assert!((bleu_n(&toks("a b"), &toks("a b"), 4) - 1.0).abs() < 1e-12);
        assert_eq!(bleu_n(&[], &r, 1), 0.0);
    }

    #[test]
    fn rouge_fixtures() {
        let x = toks("a b c");
        assert!((rouge_l(&x, &x) - 100.0).abs() < 1e-12);
        let v = rouge_l(&toks("a c e"), &toks("a b c d e"));
        assert!((v - 75.0).abs() < 1e-9, "{v}");
        assert_eq!(rouge_n(&toks("a b"), &toks("c d"), 1), 0.0);
        assert_eq!(rouge_l(&[], &[]), 0.0);
        assert!((rouge_n(&x, &x, 2) - 100.0).abs() < 1e-12);
    }

    #[test]
    fn seed_quality_fixtures() {
        let set = |xs: &[&str]| xs.iter().map(|s| ent(s)).collect::<BTreeSet<_>>();
        let q = seed_quality(&set(&["c", "d"]), &set(&["c", "x", "y"]));
        assert_eq!(q.precision, 0.5);
        assert!((q.recall - 1.0 / 3.0).abs() < 1e-15);
        assert!((q.f1 - 0.4).abs() < 1e-15);
        let same = seed_quality(&set(&["c", "d"]), &set(&["c", "d"]));
        assert_eq!((same.precision, same.recall, same.f1), (1.0, 1.0, 1.0));
        let none = seed_quality(&set(&["a"]), &set(&["b"]));
        assert_eq!((none.precision, none.recall, none.f1), (0.0, 0.0, 0.0));
        let empty = seed_quality(&set(&[]), &set(&["b"]));
        assert_eq!(empty.f1, 0.0);
    }

    #[test]
    fn extracted_answer_serde() {
        let s = serde_json::to_string(&ExtractedAnswer::Resolved(Label::C)).unwrap();
        assert_eq!(s, "\"C\"");
        let u: ExtractedAnswer = serde_json::from_str("\"unresolved\"").unwrap();
        assert_eq!(u, ExtractedAnswer::Unresolved);
    }
}
