//! Entity annotation of questions, options and analyses.
//!
//! Two extractors are provided: a deterministic longest-match [`Lexicon`]
//! scan and an [`LlmExtractor`] that prompts a chat model with worked
//! examples and parses its delimited list. Both emit normalized
//! [`Entity`] values, so annotations from either path are interchangeable.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;
use unicode_normalization::UnicodeNormalization;

use crate::corpus::{self, CorpusError, Dataset, Instance, RawRecord};
use crate::llm::{Client, LlmError};
use crate::par;
use crate::text::is_cjk;

#[derive(Debug, Error)]
pub enum EntityError {
    #[error("entity is empty after trimming")]
    Empty,
    #[error("lexicon line {line}: {message}")]
    Lexicon { line: usize, message: String },
}

#[derive(Debug, Error)]
pub enum ExtractError {
    #[error(transparent)]
    Llm(#[from] LlmError),
    #[error("could not parse entity list from response: {raw:?}")]
    Unparseable { raw: String },
}

/// A normalized entity surface form.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
#[serde(transparent)]
pub struct Entity(String);

impl Entity {
    pub fn new(raw: &str) -> Result<Self, EntityError> {
        normalize_entity(raw)
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }

    pub fn into_string(self) -> String {
        self.0
    }
}

impl fmt::Display for Entity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl AsRef<str> for Entity {
    fn as_ref(&self) -> &str {
        &self.0
    }
}

impl<'de> Deserialize<'de> for Entity {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        normalize_entity(&s).map_err(serde::de::Error::custom)
    }
}

fn fold(text: &str) -> String {
    let lowered: String = text.nfkc().flat_map(char::to_lowercase).collect();
    lowered.nfkc().collect()
}

/// Compatibility normalization, surrounding whitespace stripped, case-folded.
pub fn normalize_entity(raw: &str) -> Result<Entity, EntityError> {
    let mut s = fold(raw).trim().to_string();
    // Folding can expose new compatibility sequences; iterate to a fixed point.
    for _ in 0..4 {
        let next = fold(&s).trim().to_string();
        if next == s {
            break;
        }
        s = next;
    }
    if s.is_empty() {
        return Err(EntityError::Empty);
    }
    Ok(Entity(s))
}

/// Canonical entries plus alias → canonical mappings.
#[derive(Debug, Clone, Default)]
pub struct Lexicon {
    entries: BTreeSet<Entity>,
    aliases: BTreeMap<Entity, Entity>,
    trie: Trie,
}

#[derive(Debug, Clone, Default)]
struct Trie {
    nodes: Vec<TrieNode>,
}

#[derive(Debug, Clone, Default)]
struct TrieNode {
    children: HashMap<char, usize>,
    /// Canonical entity when a key ends here.
    terminal: Option<Entity>,
}

impl Trie {
    fn insert(&mut self, key: &str, canonical: Entity) {
        if self.nodes.is_empty() {
            self.nodes.push(TrieNode::default());
        }
        let mut at = 0;
        for c in key.chars() {
            at = match self.nodes[at].children.get(&c) {
                Some(&next) => next,
                None => {
                    self.nodes.push(TrieNode::default());
                    let id = self.nodes.len() - 1;
                    self.nodes[at].children.insert(c, id);
                    id
                }
            };
        }
        self.nodes[at].terminal = Some(canonical);
    }
}

fn is_word_char(c: char) -> bool {
    c.is_alphanumeric() && !is_cjk(c)
}

impl Lexicon {
    pub fn new<I, S>(entries: I) -> Result<Self, EntityError>
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let mut lex = Lexicon::default();
        for e in entries {
            lex.add_entry(e.as_ref())?;
        }
        Ok(lex)
    }

    pub fn add_entry(&mut self, raw: &str) -> Result<Entity, EntityError> {
        let e = normalize_entity(raw)?;
        self.trie.insert(e.as_str(), e.clone());
        self.entries.insert(e.clone());
        Ok(e)
    }

    /// Adds `alias` for an existing canonical entry.
    pub fn add_alias(&mut self, alias: &str, canonical: &str) -> Result<(), EntityError> {
        let canonical = normalize_entity(canonical)?;
        let alias = normalize_entity(alias)?;
        if !self.entries.contains(&canonical) {
            return Err(EntityError::Lexicon {
                line: 0,
                message: format!("alias {alias} points at unknown entry {canonical}"),
            });
        }
        if alias != canonical {
            self.trie.insert(alias.as_str(), canonical.clone());
            self.aliases.insert(alias, canonical);
        }
        Ok(())
    }

    /// One canonical entry per line, optionally followed by tab-separated
    /// aliases. Blank lines and lines starting with `#` are ignored.
    pub fn parse(text: &str) -> Result<Self, EntityError> {
        let mut lex = Lexicon::default();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim_end_matches(['\r', '\n']);
            if line.trim().is_empty() || line.trim_start().starts_with('#') {
                continue;
            }
            let mut fields = line.split('\t');
            let canonical = fields.next().unwrap_or_default();
            let with_line = |e: EntityError| EntityError::Lexicon {
                line: i + 1,
                message: e.to_string(),
            };
            let entry = lex.add_entry(canonical).map_err(with_line)?;
            for alias in fields.filter(|a| !a.trim().is_empty()) {
                lex.add_alias(alias, entry.as_str()).map_err(with_line)?;
            }
        }
        Ok(lex)
    }

    pub fn load(path: &Path) -> Result<Self, LexiconLoadError> {
        let text = corpus::read_file(path)?;
        Ok(Self::parse(&text)?)
    }

    pub fn entries(&self) -> &BTreeSet<Entity> {
        &self.entries
    }

    pub fn aliases(&self) -> &BTreeMap<Entity, Entity> {
        &self.aliases
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// Error from loading a lexicon file.
#[derive(Debug, Error)]
pub enum LexiconLoadError {
    #[error(transparent)]
    Io(#[from] CorpusError),
    #[error(transparent)]
    Lexicon(#[from] EntityError),
}

/// Greedy leftmost-longest scan over the folded text. Matches that would
/// split a Latin word are rejected.
pub fn extract_entities_lexicon(text: &str, lex: &Lexicon) -> BTreeSet<Entity> {
    let mut found = BTreeSet::new();
    if lex.trie.nodes.is_empty() {
        return found;
    }
    let chars: Vec<char> = fold(text).chars().collect();
    let mut i = 0;
    while i < chars.len() {
        let starts_word = is_word_char(chars[i]);
        if starts_word && i > 0 && is_word_char(chars[i - 1]) {
            i += 1;
            continue;
        }
        let mut at = 0;
        let mut best: Option<(usize, &Entity)> = None;
        let mut j = i;
        while j < chars.len() {
            match lex.trie.nodes[at].children.get(&chars[j]) {
                Some(&next) => at = next,
                None => break,
            }
            j += 1;
            if let Some(canonical) = &lex.trie.nodes[at].terminal {
                let ends_word = is_word_char(chars[j - 1]);
                let splits = ends_word && j < chars.len() && is_word_char(chars[j]);
                if !splits {
                    best = Some((j, canonical));
                }
            }
        }
        match best {
            Some((end, canonical)) => {
                found.insert(canonical.clone());
                i = end;
            }
            None => i += 1,
        }
    }
    found
}

/// Anything that can turn text into a set of entities.
pub trait EntityExtractor: Sync {
    fn extract(&self, text: &str) -> Result<BTreeSet<Entity>, ExtractError>;
}

impl EntityExtractor for Lexicon {
    fn extract(&self, text: &str) -> Result<BTreeSet<Entity>, ExtractError> {
        Ok(extract_entities_lexicon(text, self))
    }
}

/// A worked extraction example shown to the model.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExtractionExemplar {
    pub text: String,
    pub entities: Vec<String>,
}

pub const DEFAULT_EXTRACTION_INSTRUCTION: &str = "Extract the medical entities (diseases, symptoms, drugs, examinations, and any other medical concepts) mentioned in the text. Output one line with the entities separated by \"、\". If the text mentions no medical entity, output \"no entities found\".";

/// Prompt-based extractor.
pub struct LlmExtractor<'a> {
    client: &'a Client,
    exemplars: Vec<ExtractionExemplar>,
    instruction: String,
    max_tokens: u32,
}

impl<'a> LlmExtractor<'a> {
    pub fn new(client: &'a Client, exemplars: Vec<ExtractionExemplar>) -> Result<Self, ExtractError> {
        if exemplars.is_empty() {
            return Err(ExtractError::Llm(LlmError::Config(
                "entity extraction needs at least one exemplar".into(),
            )));
        }
        Ok(LlmExtractor {
            client,
            exemplars,
            instruction: DEFAULT_EXTRACTION_INSTRUCTION.to_string(),
            max_tokens: 256,
        })
    }

    pub fn with_instruction(mut self, instruction: impl Into<String>) -> Self {
        self.instruction = instruction.into();
        self
    }

    pub fn prompt(&self, text: &str) -> String {
        let mut p = self.instruction.clone();
        p.push_str("\n\n");
        for ex in &self.exemplars {
            p.push_str(&format!("Text: {}\nEntities: {}\n\n", ex.text, ex.entities.join("、")));
        }
        p.push_str(&format!("Text: {text}\nEntities:"));
        p
    }
}

impl EntityExtractor for LlmExtractor<'_> {
    fn extract(&self, text: &str) -> Result<BTreeSet<Entity>, ExtractError> {
        extract_entities_llm(text, self)
    }
}

pub fn extract_entities_llm(
    text: &str,
    extractor: &LlmExtractor<'_>,
) -> Result<BTreeSet<Entity>, ExtractError> {
    let req = extractor.client.request(extractor.prompt(text), extractor.max_tokens);
    let resp = extractor.client.complete(&req)?;
    parse_entity_list(&resp.text)
}

const NONE_MARKERS: [&str; 6] = ["no entities", "no entity", "none", "无", "无实体", "没有"];
const LIST_PREFIXES: [&str; 4] = ["entities", "entity", "实体", "医学实体"];
const DELIMITERS: [char; 5] = ['、', ',', '，', ';', '；'];

fn strip_list_prefix(line: &str) -> Option<&str> {
    let lower = line.trim().to_lowercase();
    for p in LIST_PREFIXES {
        if lower.starts_with(p) {
            let rest = line.trim()[p.len()..].trim_start();
            if let Some(r) = rest.strip_prefix(':').or_else(|| rest.strip_prefix('：')) {
                return Some(r);
            }
        }
    }
    None
}

/// Parses a model's delimited entity list, tolerating surrounding prose.
pub fn parse_entity_list(raw: &str) -> Result<BTreeSet<Entity>, ExtractError> {
    let trimmed = raw.trim();
    let lower = trimmed.to_lowercase();
    let bare = lower.trim_end_matches(['.', '。', '!', '！']);
    if bare.is_empty() || NONE_MARKERS.iter().any(|m| bare == *m || bare.starts_with("no entities")) {
        return Ok(BTreeSet::new());
    }

    let lines: Vec<&str> = trimmed.lines().map(str::trim).filter(|l| !l.is_empty()).collect();
    let list = lines
        .iter()
        .rev()
        .find_map(|l| strip_list_prefix(l))
        .or_else(|| lines.iter().rev().find(|l| l.contains(DELIMITERS)).copied())
        .or_else(|| {
            // single short line: one entity
            (lines.len() == 1 && lines[0].chars().count() <= 40).then_some(lines[0])
        });
    let Some(list) = list else {
        return Err(ExtractError::Unparseable {
            raw: raw.to_string(),
        });
    };
    let list = list.trim();
    if NONE_MARKERS.contains(&list.to_lowercase().trim_end_matches(['.', '。'])) {
        return Ok(BTreeSet::new());
    }
    let mut out = BTreeSet::new();
    for piece in list.split(DELIMITERS) {
        let piece = piece.trim_matches(|c: char| {
            c.is_whitespace() || "\"'“”‘’「」《》[]【】()（）.。".contains(c)
        });
        if let Ok(e) = normalize_entity(piece) {
            out.insert(e);
        }
    }
    if out.is_empty() {
        return Err(ExtractError::Unparseable {
            raw: raw.to_string(),
        });
    }
    Ok(out)
}

/// An instance with entity sets for question+options and for the analysis.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AnnotatedInstance {
    pub base: Instance,
    pub qo_entities: BTreeSet<Entity>,
    pub r_entities: BTreeSet<Entity>,
}

#[derive(Serialize)]
struct AnnotatedOut<'a> {
    #[serde(flatten)]
    base: &'a Instance,
    qo_entities: &'a BTreeSet<Entity>,
    r_entities: &'a BTreeSet<Entity>,
}

#[derive(Deserialize)]
struct AnnotatedRaw {
    #[serde(flatten)]
    record: RawRecord,
    qo_entities: Vec<String>,
    r_entities: Vec<String>,
}

fn entity_set(raw: Vec<String>, line: usize, id: &str, field: &'static str) -> Result<BTreeSet<Entity>, CorpusError> {
    raw.iter()
        .map(|s| {
            normalize_entity(s).map_err(|e| CorpusError::InvalidField {
                line,
                id: id.to_string(),
                field,
                message: e.to_string(),
            })
        })
        .collect()
}

/// Serializes annotated instances in the line-delimited annotated format.
pub fn annotated_to_jsonl(items: &[AnnotatedInstance]) -> String {
    let mut out = String::new();
    for a in items {
        let rec = AnnotatedOut {
            base: &a.base,
            qo_entities: &a.qo_entities,
            r_entities: &a.r_entities,
        };
        out.push_str(&serde_json::to_string(&rec).expect("annotated record serializes"));
        out.push('\n');
    }
    out
}

pub fn parse_annotated(text: &str) -> Result<Vec<AnnotatedInstance>, CorpusError> {
    let mut out = Vec::new();
    let mut seen = std::collections::HashSet::new();
    for (idx, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let line_no = idx + 1;
        let raw: AnnotatedRaw = serde_json::from_str(line).map_err(|e| CorpusError::Malformed {
            line: line_no,
            message: e.to_string(),
        })?;
        let base = corpus::instance_from_raw(raw.record, line_no)?;
        if !seen.insert(base.id.clone()) {
            return Err(CorpusError::DuplicateId {
                line: line_no,
                id: base.id,
            });
        }
        let qo_entities = entity_set(raw.qo_entities, line_no, &base.id, "qo_entities")?;
        let r_entities = entity_set(raw.r_entities, line_no, &base.id, "r_entities")?;
        out.push(AnnotatedInstance {
            base,
            qo_entities,
            r_entities,
        });
    }
    Ok(out)
}

pub fn load_annotated(path: &Path) -> Result<Vec<AnnotatedInstance>, CorpusError> {
    parse_annotated(&corpus::read_file(path)?)
}

pub fn save_annotated(items: &[AnnotatedInstance], path: &Path) -> Result<(), CorpusError> {
    corpus::write_file(path, annotated_to_jsonl(items).as_bytes())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FailurePolicy {
    #[default]
    Abort,
    SkipAndLog,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AnnotateOptions {
    /// Leave `r_entities` empty (test split, analysis withheld).
    pub skip_analysis: bool,
    pub policy: FailurePolicy,
    pub workers: usize,
}

impl Default for AnnotateOptions {
    fn default() -> Self {
        AnnotateOptions {
            skip_analysis: false,
            policy: FailurePolicy::Abort,
            workers: 1,
        }
    }
}

#[derive(Debug, Error)]
#[error("instance {id}: {source}")]
pub struct AnnotateError {
    pub id: String,
    #[source]
    pub source: ExtractError,
}

#[derive(Debug, Default)]
pub struct Annotation {
    pub instances: Vec<AnnotatedInstance>,
    /// Instances dropped under [`FailurePolicy::SkipAndLog`].
    pub skipped: Vec<AnnotateError>,
}

pub fn annotate_instance(
    inst: &Instance,
    extractor: &dyn EntityExtractor,
    skip_analysis: bool,
) -> Result<AnnotatedInstance, ExtractError> {
    let qo_entities = extractor.extract(&inst.question_with_options())?;
    let r_entities = if skip_analysis {
        BTreeSet::new()
    } else {
        extractor.extract(&inst.analysis)?
    };
    Ok(AnnotatedInstance {
        base: inst.clone(),
        qo_entities,
        r_entities,
    })
}

pub fn annotate_dataset(
    d: &Dataset,
    extractor: &dyn EntityExtractor,
    opts: AnnotateOptions,
) -> Result<Annotation, AnnotateError> {
    let abort = opts.policy == FailurePolicy::Abort;
    let results = par::map_ordered(d.instances(), opts.workers, abort, |_, inst| {
        annotate_instance(inst, extractor, opts.skip_analysis)
    });
    let mut out = Annotation::default();
    for (inst, r) in d.iter().zip(results) {
        match r {
            Some(Ok(a)) => out.instances.push(a),
            Some(Err(source)) => {
                let err = AnnotateError {
                    id: inst.id.clone(),
                    source,
                };
                if abort {
                    return Err(err);
                }
                log::warn!("skipping {err}");
                out.skipped.push(err);
            }
            None => {}
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn set(items: &[&str]) -> BTreeSet<Entity> {
        items.iter().map(|s| normalize_entity(s).unwrap()).collect()
    }

    #[test]
    fn normalization() {
        assert_eq!(normalize_entity("  Levodopa ").unwrap().as_str(), "levodopa");
        assert_eq!(normalize_entity("levodopa").unwrap().as_str(), "levodopa");
        assert_eq!(normalize_entity("ＣＴ１２").unwrap().as_str(), "ct12");
        assert_eq!(normalize_entity("帕金森病").unwrap().as_str(), "帕金森病");
        assert!(matches!(normalize_entity(" \t "), Err(EntityError::Empty)));
    }

    #[test]
    fn longest_match_wins() {
        let lex = Lexicon::new(["abc", "ab", "c"]).unwrap();
        assert_eq!(extract_entities_lexicon("abc", &lex), set(&["abc"]));
    }

    #[test]
    fn repeated_hits_deduplicated() {
        let lex = Lexicon::new(["ab", "c"]).unwrap();
        assert_eq!(extract_entities_lexicon("ab c ab", &lex), set(&["ab", "c"]));
        assert!(extract_entities_lexicon("xyz", &lex).is_empty());
    }

    #[test]
    fn latin_words_are_not_split() {
        let lex = Lexicon::new(["dopa", "levodopa"]).unwrap();
        assert_eq!(extract_entities_lexicon("Levodopa, not dopamine", &lex), set(&["levodopa"]));
        assert_eq!(extract_entities_lexicon("dopa.", &lex), set(&["dopa"]));
    }

    #[test]
    fn cjk_matches_inside_running_text() {
        let lex = Lexicon::new(["帕金森病", "左旋多巴", "静止性震颤"]).unwrap();
        let got = extract_entities_lexicon("患者左手静止性震颤，诊断为帕金森病，首选左旋多巴。", &lex);
        assert_eq!(got, set(&["帕金森病", "左旋多巴", "静止性震颤"]));
    }

    #[test]
    fn aliases_map_to_canonical() {
        let lex = Lexicon::parse("帕金森病\tParkinson disease\tPD\n# comment\n\n左旋多巴\tlevodopa\n").unwrap();
        assert_eq!(lex.len(), 2);
        let got = extract_entities_lexicon("PD treated with Levodopa", &lex);
        assert_eq!(got, set(&["帕金森病", "左旋多巴"]));
    }

    #[test]
    fn lexicon_rejects_empty_entry() {
        assert!(matches!(Lexicon::parse("ok\n \talias\n"), Err(EntityError::Lexicon { line: 2, .. })));
    }

    #[test]
    fn entity_list_parsing() {
        assert_eq!(parse_entity_list("帕金森病、左旋多巴").unwrap(), set(&["帕金森病", "左旋多巴"]));
        assert_eq!(
            parse_entity_list("Sure, here they are:\nEntities: Tremor, Levodopa.\n").unwrap(),
            set(&["tremor", "levodopa"])
        );
        assert_eq!(parse_entity_list("实体：发热，咳嗽").unwrap(), set(&["发热", "咳嗽"]));
        assert!(parse_entity_list("no entities found").unwrap().is_empty());
        assert!(parse_entity_list("无").unwrap().is_empty());
        assert_eq!(parse_entity_list("帕金森病").unwrap(), set(&["帕金森病"]));
        let err = parse_entity_list("I am not sure what you mean.\nPlease give more context about this.").unwrap_err();
        assert!(matches!(err, ExtractError::Unparseable { .. }));
    }

    #[test]
    fn annotated_roundtrip() {
        let inst: Instance = serde_json::from_str(
            r#"{"id":"q1","question":"Q","options":{"A":"x","B":"y"},"answer":"A","analysis":"R","metadata":{"discipline":"neuro"}}"#,
        )
        .unwrap();
        let a = AnnotatedInstance {
            base: inst,
            qo_entities: set(&["a", "b"]),
            r_entities: set(&["c"]),
        };
        let text = annotated_to_jsonl(std::slice::from_ref(&a));
        assert_eq!(parse_annotated(&text).unwrap(), vec![a]);
        assert!(text.contains(r#""qo_entities":["a","b"]"#), "{text}");
    }

    proptest! {
        #[test]
        fn normalize_is_idempotent(s in "\\PC{1,12}") {
            if let Ok(e) = normalize_entity(&s) {
                prop_assert_eq!(normalize_entity(e.as_str()).unwrap(), e);
            }
        }

        #[test]
        fn lexicon_output_is_normalized_and_pure(
            words in proptest::collection::vec("[a-dＡ-Ｄ帕金]{1,3}", 1..6),
            text in "[a-dＡ-Ｄ帕金 ]{0,24}",
        ) {
            let lex = Lexicon::new(&words).unwrap();
            let a = extract_entities_lexicon(&text, &lex);
            prop_assert_eq!(&a, &extract_entities_lexicon(&text, &lex));
            for e in &a {
                prop_assert_eq!(&normalize_entity(e.as_str()).unwrap(), e);
                prop_assert!(lex.entries().contains(e));
            }
        }
    }
}
