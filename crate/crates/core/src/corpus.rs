//! Multiple-choice QA datasets: loading, validation, filtering and splitting.
//!
//! Records are line-delimited JSON, one instance per line:
//!
//! ```text
//! {"id":"q1","question":"...","options":{"A":"...","B":"..."},"answer":"B","analysis":"...","metadata":{"discipline":"..."}}
//! ```
//!
//! `metadata` is optional. Option labels are normalized to uppercase `A`–`E`
//! on ingest (lowercase and full-width labels are accepted).

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt;
use std::fs;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::text::{word_count, WordCountMode};

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: malformed record: {message}")]
    Malformed { line: usize, message: String },
    #[error("line {line}: record {id}: invalid field `{field}`: {message}")]
    InvalidField {
        line: usize,
        id: String,
        field: &'static str,
        message: String,
    },
    #[error("line {line}: record {id}: answer label not among options ({answer})")]
    AnswerNotInOptions {
        line: usize,
        id: String,
        answer: String,
    },
    #[error("line {line}: duplicate id {id}")]
    DuplicateId { line: usize, id: String },
    #[error("test size {test_size} exceeds dataset size {n}")]
    TestSizeTooLarge { test_size: usize, n: usize },
}

/// Canonical option label.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Label {
    A,
    B,
    C,
    D,
    E,
}

impl Label {
    pub const ALL: [Label; 5] = [Label::A, Label::B, Label::C, Label::D, Label::E];

    pub fn as_char(self) -> char {
        match self {
            Label::A => 'A',
            Label::B => 'B',
            Label::C => 'C',
            Label::D => 'D',
            Label::E => 'E',
        }
    }

    /// Accepts `A`..`E` in upper, lower or full-width form.
    pub fn from_char(c: char) -> Option<Label> {
        let c = match c {
            'Ａ'..='Ｅ' => char::from_u32(c as u32 - 'Ａ' as u32 + 'A' as u32)?,
            'ａ'..='ｅ' => char::from_u32(c as u32 - 'ａ' as u32 + 'A' as u32)?,
            other => other.to_ascii_uppercase(),
        };
        match c {
            'A' => Some(Label::A),
            'B' => Some(Label::B),
            'C' => Some(Label::C),
            'D' => Some(Label::D),
            'E' => Some(Label::E),
            _ => None,
        }
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.as_char())
    }
}

impl FromStr for Label {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let mut chars = s.trim().chars();
        match (chars.next(), chars.next()) {
            (Some(c), None) => Label::from_char(c).ok_or_else(|| format!("unknown label {s:?}")),
            _ => Err(format!("unknown label {s:?}")),
        }
    }
}

impl Serialize for Label {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_char(self.as_char())
    }
}

impl<'de> Deserialize<'de> for Label {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// One exam item.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Instance {
    pub id: String,
    pub question: String,
    pub options: BTreeMap<Label, String>,
    pub answer: Label,
    pub analysis: String,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub metadata: BTreeMap<String, String>,
}

impl Instance {
    pub fn option_text(&self, label: Label) -> Option<&str> {
        self.options.get(&label).map(String::as_str)
    }

    /// Question followed by every option text, newline separated.
    pub fn question_with_options(&self) -> String {
        let mut out = self.question.clone();
        for text in self.options.values() {
            out.push('\n');
            out.push_str(text);
        }
        out
    }

    pub fn labels(&self) -> BTreeSet<Label> {
        self.options.keys().copied().collect()
    }

    /// Checks the per-instance invariants. `line` is only used for error reporting.
    pub fn validate(&self, line: usize) -> Result<(), CorpusError> {
        let invalid = |field: &'static str, message: &str| CorpusError::InvalidField {
            line,
            id: self.id.clone(),
            field,
            message: message.to_string(),
        };
        if self.id.trim().is_empty() {
            return Err(invalid("id", "empty"));
        }
        if self.question.trim().is_empty() {
            return Err(invalid("question", "empty"));
        }
        if self.analysis.trim().is_empty() {
            return Err(invalid("analysis", "empty"));
        }
        if self.options.is_empty() {
            return Err(invalid("options", "no options"));
        }
        for (label, text) in &self.options {
            if text.trim().is_empty() {
                return Err(invalid("options", &format!("option {label} is empty")));
            }
        }
        if !self.options.contains_key(&self.answer) {
            return Err(CorpusError::AnswerNotInOptions {
                line,
                id: self.id.clone(),
                answer: self.answer.to_string(),
            });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitTag {
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Dataset {
    instances: Vec<Instance>,
    pub split_tag: SplitTag,
}

impl Dataset {
    /// Builds a dataset, checking instance invariants and id uniqueness.
    pub fn new(instances: Vec<Instance>, split_tag: SplitTag) -> Result<Self, CorpusError> {
        let mut seen = HashSet::new();
        for (i, inst) in instances.iter().enumerate() {
            inst.validate(i + 1)?;
            if !seen.insert(inst.id.as_str()) {
                return Err(CorpusError::DuplicateId {
                    line: i + 1,
                    id: inst.id.clone(),
                });
            }
        }
        Ok(Dataset {
            instances,
            split_tag,
        })
    }

    pub fn empty(split_tag: SplitTag) -> Self {
        Dataset {
            instances: Vec::new(),
            split_tag,
        }
    }

    // Subsets of an already-validated dataset keep their invariants.
    fn from_validated(instances: Vec<Instance>, split_tag: SplitTag) -> Self {
        Dataset {
            instances,
            split_tag,
        }
    }

    pub fn instances(&self) -> &[Instance] {
        &self.instances
    }

    pub fn n(&self) -> usize {
        self.instances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.instances.is_empty()
    }

    pub fn iter(&self) -> std::slice::Iter<'_, Instance> {
        self.instances.iter()
    }

    pub fn get(&self, id: &str) -> Option<&Instance> {
        self.instances.iter().find(|i| i.id == id)
    }

    pub fn with_split_tag(mut self, split_tag: SplitTag) -> Self {
        self.split_tag = split_tag;
        self
    }

    /// Serializes to the line-delimited record format.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for inst in &self.instances {
            out.push_str(&serde_json::to_string(inst).expect("instance serializes"));
            out.push('\n');
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<(), CorpusError> {
        write_file(path, self.to_jsonl().as_bytes())
    }
}

impl<'a> IntoIterator for &'a Dataset {
    type Item = &'a Instance;
    type IntoIter = std::slice::Iter<'a, Instance>;

    fn into_iter(self) -> Self::IntoIter {
        self.instances.iter()
    }
}

/// Supported on-disk dataset formats.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum DatasetFormat {
    /// Plain line-delimited records.
    #[default]
    Jsonl,
    /// Annotated records; the entity fields are ignored.
    AnnotatedJsonl,
}

#[derive(Deserialize)]
pub(crate) struct RawRecord {
    id: String,
    question: String,
    options: BTreeMap<String, String>,
    answer: String,
    analysis: String,
    #[serde(default)]
    metadata: Option<BTreeMap<String, String>>,
}

pub(crate) fn instance_from_raw(raw: RawRecord, line: usize) -> Result<Instance, CorpusError> {
    let mut options = BTreeMap::new();
    for (key, text) in raw.options {
        let label: Label = key.parse().map_err(|message| CorpusError::InvalidField {
            line,
            id: raw.id.clone(),
            field: "options",
            message,
        })?;
        if options.insert(label, text).is_some() {
            return Err(CorpusError::InvalidField {
                line,
                id: raw.id.clone(),
                field: "options",
                message: format!("label {label} given twice"),
            });
        }
    }
    let answer: Label = raw
        .answer
        .parse()
        .map_err(|_| CorpusError::AnswerNotInOptions {
            line,
            id: raw.id.clone(),
            answer: raw.answer.clone(),
        })?;
    let inst = Instance {
        id: raw.id,
        question: raw.question,
        options,
        answer,
        analysis: raw.analysis,
        metadata: raw.metadata.unwrap_or_default(),
    };
    inst.validate(line)?;
    Ok(inst)
}

pub(crate) fn parse_record_line(line_no: usize, line: &str) -> Result<Instance, CorpusError> {
    let raw: RawRecord = serde_json::from_str(line).map_err(|e| CorpusError::Malformed {
        line: line_no,
        message: e.to_string(),
    })?;
    instance_from_raw(raw, line_no)
}

/// Parses dataset records from a string. Blank lines are skipped.
pub fn parse_dataset(text: &str, split_tag: SplitTag) -> Result<Dataset, CorpusError> {
    let mut instances = Vec::new();
    let mut seen = HashSet::new();
    for (idx, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let inst = parse_record_line(idx + 1, line)?;
        if !seen.insert(inst.id.clone()) {
            return Err(CorpusError::DuplicateId {
                line: idx + 1,
                id: inst.id,
            });
        }
        instances.push(inst);
    }
    Ok(Dataset::from_validated(instances, split_tag))
}

pub fn load_dataset(path: &Path, format: DatasetFormat) -> Result<Dataset, CorpusError> {
    let text = read_file(path)?;
    match format {
        DatasetFormat::Jsonl | DatasetFormat::AnnotatedJsonl => parse_dataset(&text, SplitTag::Train),
    }
}

pub(crate) fn read_file(path: &Path) -> Result<String, CorpusError> {
    fs::read_to_string(path).map_err(|source| CorpusError::Io {
        path: path.display().to_string(),
        source,
    })
}

pub(crate) fn write_file(path: &Path, bytes: &[u8]) -> Result<(), CorpusError> {
    let io_err = |source| CorpusError::Io {
        path: path.display().to_string(),
        source,
    };
    let mut f = fs::File::create(path).map_err(io_err)?;
    f.write_all(bytes).map_err(io_err)
}

/// Thresholds for [`filter_instances`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FilterConfig {
    /// Required option count; instances with any other count are dropped.
    pub min_options: usize,
    /// Analyses must contain strictly more words than this.
    pub min_analysis_words: usize,
    pub word_count: WordCountMode,
}

impl Default for FilterConfig {
    fn default() -> Self {
        FilterConfig {
            min_options: 5,
            min_analysis_words: 30,
            word_count: WordCountMode::Mixed,
        }
    }
}

pub fn filter_instances(d: &Dataset, min_options: usize, min_analysis_words: usize) -> Dataset {
    filter_with(
        d,
        &FilterConfig {
            min_options,
            min_analysis_words,
            word_count: WordCountMode::Mixed,
        },
    )
}

pub fn filter_with(d: &Dataset, cfg: &FilterConfig) -> Dataset {
    let kept = d
        .iter()
        .filter(|inst| inst.options.len() == cfg.min_options)
        .filter(|inst| word_count(&inst.analysis, cfg.word_count) > cfg.min_analysis_words)
        .cloned()
        .collect();
    Dataset::from_validated(kept, d.split_tag)
}

/// Result of a train/test split.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Split {
    pub test: Dataset,
    pub train: Dataset,
}

/// Uniform random split. Both halves keep the original relative order.
pub fn split_sample(d: &Dataset, test_size: usize, rng_seed: u64) -> Result<Split, CorpusError> {
    if test_size > d.n() {
        return Err(CorpusError::TestSizeTooLarge {
            test_size,
            n: d.n(),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let mut idx: Vec<usize> = (0..d.n()).collect();
    idx.shuffle(&mut rng);
    let chosen: BTreeSet<usize> = idx.into_iter().take(test_size).collect();
    Ok(partition(d, &chosen))
}

/// Split that allocates test slots to metadata groups in proportion to their
/// size (largest remainder), then samples uniformly within each group.
/// Instances without `key` form the group `"unknown"`.
pub fn split_stratified(
    d: &Dataset,
    test_size: usize,
    rng_seed: u64,
    key: &str,
) -> Result<Split, CorpusError> {
    if test_size > d.n() {
        return Err(CorpusError::TestSizeTooLarge {
            test_size,
            n: d.n(),
        });
    }
    let mut groups: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, inst) in d.iter().enumerate() {
        let g = inst.metadata.get(key).map(String::as_str).unwrap_or(crate::UNKNOWN_GROUP);
        groups.entry(g).or_default().push(i);
    }
    let n = d.n().max(1);
    let mut quota: Vec<(usize, usize, &str)> = Vec::new(); // (floor, remainder numerator, name)
    for (name, members) in &groups {
        let exact = members.len() * test_size;
        quota.push((exact / n, exact % n, name));
    }
    let assigned: usize = quota.iter().map(|q| q.0).sum();
    let mut order: Vec<usize> = (0..quota.len()).collect();
    order.sort_by(|&a, &b| quota[b].1.cmp(&quota[a].1).then(quota[a].2.cmp(quota[b].2)));
    for &i in order.iter().take(test_size.saturating_sub(assigned)) {
        quota[i].0 += 1;
    }
    let quotas: BTreeMap<&str, usize> = quota.iter().map(|q| (q.2, q.0)).collect();

    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let mut chosen = BTreeSet::new();
    for (name, members) in groups {
        let mut m = members;
        m.shuffle(&mut rng);
        chosen.extend(m.into_iter().take(quotas[name]));
    }
    Ok(partition(d, &chosen))
}

fn partition(d: &Dataset, chosen: &BTreeSet<usize>) -> Split {
    let mut test = Vec::with_capacity(chosen.len());
    let mut train = Vec::with_capacity(d.n() - chosen.len());
    for (i, inst) in d.iter().enumerate() {
        if chosen.contains(&i) {
            test.push(inst.clone());
        } else {
            train.push(inst.clone());
        }
    }
    Split {
        test: Dataset::from_validated(test, SplitTag::Test),
        train: Dataset::from_validated(train, SplitTag::Train),
    }
}
