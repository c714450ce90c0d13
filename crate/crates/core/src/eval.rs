//! Evaluation runs: prompt, complete, extract, score, aggregate.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{self, CorpusError, Dataset, Instance, Label};
use crate::entity::{EntityExtractor, ExtractError};
use crate::graph::KnowledgeGraph;
use crate::llm::{default_max_tokens, request_digest, Client, LlmError};
use crate::metrics::{extract_answer, seed_quality, ExtractedAnswer, SeedQuality, TextMetrics};
use crate::par;
use crate::prompt::{compose, PromptError, PromptMode, PromptSpec, Shots};
use crate::seeds::{mine_seeds, SeedQuery, SeedResult, DEFAULT_SEED_COUNT};

pub const REPORT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("invalid evaluation config: {0}")]
    Config(String),
    #[error(transparent)]
    Prompt(#[from] PromptError),
}

/// Seeds injected into an ICP prompt and how they compare with the entities
/// of the gold analysis.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedEval {
    pub entities: Vec<String>,
    /// Entities found in the gold analysis.
    pub gold_count: usize,
    #[serde(flatten)]
    pub quality: SeedQuality,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub id: String,
    pub mode: PromptMode,
    pub shots: Shots,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prompt_digest: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub response: Option<String>,
    pub extracted: ExtractedAnswer,
    pub gold: Label,
    pub correct: bool,
    /// Overlap with the gold analysis; absent for standard QA.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub metrics: Option<TextMetrics>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seeds: Option<SeedEval>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub metadata: BTreeMap<String, String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl EvalRecord {
    fn failed(inst: &Instance, spec: &PromptSpec, digest: Option<String>, error: String) -> Self {
        EvalRecord {
            id: inst.id.clone(),
            mode: spec.mode,
            shots: spec.shots,
            prompt_digest: digest,
            response: None,
            extracted: ExtractedAnswer::Unresolved,
            gold: inst.answer,
            correct: false,
            metrics: None,
            seeds: None,
            metadata: inst.metadata.clone(),
            error: Some(error),
        }
    }
}

/// Everything an evaluation run needs besides the client and test set.
pub struct PipelineConfig<'a> {
    pub spec: PromptSpec,
    /// Required for ICP unless every instance has precomputed seeds.
    pub graph: Option<&'a KnowledgeGraph>,
    /// Extracts question entities for mining and gold-analysis entities for
    /// seed scoring. Required for ICP.
    pub extractor: Option<&'a dyn EntityExtractor>,
    /// Seeds keyed by instance id, used before mining from the graph.
    pub precomputed_seeds: Option<&'a HashMap<String, SeedResult>>,
    pub k: usize,
    pub workers: usize,
    pub group_by: Vec<String>,
}

impl<'a> PipelineConfig<'a> {
    pub fn new(spec: PromptSpec) -> Self {
        PipelineConfig {
            spec,
            graph: None,
            extractor: None,
            precomputed_seeds: None,
            k: DEFAULT_SEED_COUNT,
            workers: 1,
            group_by: Vec::new(),
        }
    }

    /// Checks everything that can be checked without calling the model.
    pub fn validate(&self) -> Result<(), EvalError> {
        if self.spec.mode == PromptMode::Icp {
            if self.extractor.is_none() {
                return Err(EvalError::Config("icp mode needs an entity extractor".into()));
            }
            if self.graph.is_none() && self.precomputed_seeds.is_none() {
                return Err(EvalError::Config("icp mode needs a knowledge graph or seeds file".into()));
            }
            if self.k == 0 {
                return Err(EvalError::Config("k must be at least 1".into()));
            }
        }
        if self.spec.shots == Shots::Few {
            if self.spec.exemplars.is_empty() {
                return Err(PromptError::NoExemplars.into());
            }
            if self.spec.mode == PromptMode::Icp {
                if let Some(ex) = self.spec.exemplars.iter().find(|e| e.seeds.is_none()) {
                    return Err(PromptError::ExemplarMissingSeeds(ex.id.clone()).into());
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug)]
pub struct EvalRun {
    pub records: Vec<EvalRecord>,
    pub report: EvalReport,
    /// Instances that failed because the upstream API kept refusing.
    pub upstream_exhausted: usize,
}

enum InstanceError {
    Extract(ExtractError),
    Prompt(PromptError),
    Llm(LlmError),
    Seeds(String),
}

impl std::fmt::Display for InstanceError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            InstanceError::Extract(e) => write!(f, "entity extraction failed: {e}"),
            InstanceError::Prompt(e) => write!(f, "prompt composition failed: {e}"),
            InstanceError::Llm(e) => write!(f, "completion failed: {e}"),
            InstanceError::Seeds(m) => f.write_str(m),
        }
    }
}

fn instance_seeds(inst: &Instance, cfg: &PipelineConfig) -> Result<SeedResult, InstanceError> {
    if let Some(found) = cfg.precomputed_seeds.and_then(|m| m.get(&inst.id)) {
        return Ok(found.clone());
    }
    let (Some(graph), Some(extractor)) = (cfg.graph, cfg.extractor) else {
        return Err(InstanceError::Seeds(format!("no seeds for instance {}", inst.id)));
    };
    let qo = extractor
        .extract(&inst.question_with_options())
        .map_err(InstanceError::Extract)?;
    Ok(mine_seeds(graph, &SeedQuery::new(qo), cfg.k))
}

fn eval_instance(inst: &Instance, client: &Client, cfg: &PipelineConfig) -> (EvalRecord, bool) {
    let spec = &cfg.spec;
    let seeds = if spec.mode == PromptMode::Icp {
        match instance_seeds(inst, cfg) {
            Ok(s) => Some(s),
            Err(e) => return (EvalRecord::failed(inst, spec, None, e.to_string()), false),
        }
    } else {
        None
    };
    let prompt = match compose(inst, spec, seeds.as_ref()) {
        Ok(p) => p,
        Err(e) => {
            let msg = InstanceError::Prompt(e).to_string();
            return (EvalRecord::failed(inst, spec, None, msg), false);
        }
    };
    let req = client.request(prompt.text, default_max_tokens(prompt.estimated_tokens));
    let digest = request_digest(&req);
    let response = match client.complete(&req) {
        Ok(r) => r.text,
        Err(e) => {
            let exhausted = e.is_upstream_exhaustion();
            log::warn!("{}: {e}", inst.id);
            let msg = InstanceError::Llm(e).to_string();
            return (EvalRecord::failed(inst, spec, Some(digest), msg), exhausted);
        }
    };

    let extracted = extract_answer(&response, &inst.labels());
    let metrics = spec
        .mode
        .generates_analysis()
        .then(|| TextMetrics::compute(&response, &inst.analysis));
    let mut error = None;
    let seeds = match (seeds, cfg.extractor) {
        (Some(s), Some(extractor)) => match extractor.extract(&inst.analysis) {
            Ok(gold) => Some(SeedEval {
                entities: s.entities().map(|e| e.as_str().to_string()).collect(),
                gold_count: gold.len(),
                quality: seed_quality(&s.entity_set(), &gold),
            }),
            Err(e) => {
                error = Some(InstanceError::Extract(e).to_string());
                None
            }
        },
        _ => None,
    };
    let record = EvalRecord {
        id: inst.id.clone(),
        mode: spec.mode,
        shots: spec.shots,
        prompt_digest: Some(digest),
        response: Some(response),
        extracted,
        gold: inst.answer,
        correct: extracted == ExtractedAnswer::Resolved(inst.answer),
        metrics,
        seeds,
        metadata: inst.metadata.clone(),
        error,
    };
    (record, false)
}

/// Evaluates every test instance. Per-instance failures become unresolved
/// records carrying an error note; records keep dataset order.
pub fn run_eval(test: &Dataset, client: &Client, cfg: &PipelineConfig) -> Result<EvalRun, EvalError> {
    cfg.validate()?;
    let results = par::map_ordered(test.instances(), cfg.workers, false, |_, inst| {
        Ok::<_, std::convert::Infallible>(eval_instance(inst, client, cfg))
    });
    let mut records = Vec::with_capacity(test.n());
    let mut upstream_exhausted = 0;
    for r in results {
        let Some(Ok((record, exhausted))) = r else {
            unreachable!("every instance is evaluated")
        };
        upstream_exhausted += usize::from(exhausted);
        records.push(record);
    }
    let report = build_report(&records, &cfg.group_by);
    Ok(EvalRun {
        records,
        report,
        upstream_exhausted,
    })
}

fn mean(values: impl Iterator<Item = f64>) -> Option<f64> {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| sum / n as f64)
}

/// Percentage rounded to two decimals.
pub fn percent(correct: usize, total: usize) -> Option<f64> {
    (total > 0).then(|| (correct as f64 * 10_000.0 / total as f64).round() / 100.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricMeans {
    pub bleu_1: f64,
    pub bleu_2: f64,
    pub bleu_3: f64,
    pub bleu_4: f64,
    pub rouge_1: f64,
    pub rouge_2: f64,
    pub rouge_l: f64,
    pub length: f64,
}

impl MetricMeans {
    fn of<'r>(records: impl Iterator<Item = &'r EvalRecord> + Clone) -> Option<Self> {
        let ms = records.filter_map(|r| r.metrics.as_ref());
        let m = |f: fn(&TextMetrics) -> f64| mean(ms.clone().map(f));
        Some(MetricMeans {
            bleu_1: m(|t| t.bleu_1)?,
            bleu_2: m(|t| t.bleu_2)?,
            bleu_3: m(|t| t.bleu_3)?,
            bleu_4: m(|t| t.bleu_4)?,
            rouge_1: m(|t| t.rouge_1)?,
            rouge_2: m(|t| t.rouge_2)?,
            rouge_l: m(|t| t.rouge_l)?,
            length: m(|t| t.length as f64)?,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedMeans {
    pub seeds: f64,
    pub gold_count: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl SeedMeans {
    fn of<'r>(records: impl Iterator<Item = &'r EvalRecord> + Clone) -> Option<Self> {
        let ss = records.filter_map(|r| r.seeds.as_ref());
        let m = |f: fn(&SeedEval) -> f64| mean(ss.clone().map(f));
        Some(SeedMeans {
            seeds: m(|s| s.entities.len() as f64)?,
            gold_count: m(|s| s.gold_count as f64)?,
            precision: m(|s| s.quality.precision)?,
            recall: m(|s| s.quality.recall)?,
            f1: m(|s| s.quality.f1)?,
        })
    }
}

/// Mean metrics over one side of the correct/incorrect split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitSummary {
    pub count: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub metrics: Option<MetricMeans>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seeds: Option<SeedMeans>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub correct: SplitSummary,
    pub incorrect: SplitSummary,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupRow {
    pub group: String,
    pub count: usize,
    pub correct: usize,
    pub accuracy: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub rouge_l: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub bleu_4: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupTable {
    pub key: String,
    /// Largest group first; ties by name.
    pub rows: Vec<GroupRow>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub version: u32,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mode: Option<PromptMode>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub shots: Option<Shots>,
    pub total: usize,
    pub correct: usize,
    pub unresolved: usize,
    pub errors: usize,
    /// Percentage with two decimals; `None` when there are no instances.
    pub accuracy: Option<f64>,
    pub accuracy_undefined: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub metrics: Option<MetricMeans>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seeds: Option<SeedMeans>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub comparison: Option<Comparison>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub groups: Vec<GroupTable>,
}

fn uniform<T: PartialEq + Copy>(mut values: impl Iterator<Item = T>) -> Option<T> {
    let first = values.next()?;
    values.all(|v| v == first).then_some(first)
}

fn group_table(records: &[EvalRecord], key: &str) -> GroupTable {
    let mut buckets: BTreeMap<&str, Vec<&EvalRecord>> = BTreeMap::new();
    for r in records {
        let g = r.metadata.get(key).map(String::as_str).unwrap_or(crate::UNKNOWN_GROUP);
        buckets.entry(g).or_default().push(r);
    }
    let mut rows: Vec<GroupRow> = buckets
        .into_iter()
        .map(|(group, rs)| {
            let correct = rs.iter().filter(|r| r.correct).count();
            let metrics = MetricMeans::of(rs.iter().copied());
            GroupRow {
                group: group.to_string(),
                count: rs.len(),
                correct,
                accuracy: percent(correct, rs.len()).expect("groups are non-empty"),
                rouge_l: metrics.as_ref().map(|m| m.rouge_l),
                bleu_4: metrics.as_ref().map(|m| m.bleu_4),
            }
        })
        .collect();
    rows.sort_by(|a, b| b.count.cmp(&a.count).then_with(|| a.group.cmp(&b.group)));
    GroupTable {
        key: key.to_string(),
        rows,
    }
}

/// Aggregates records into a report. Works on records read back from disk,
/// so any records file can be re-reported with different grouping keys.
pub fn build_report(records: &[EvalRecord], group_by: &[String]) -> EvalReport {
    let total = records.len();
    let correct = records.iter().filter(|r| r.correct).count();
    let split = |want: bool| {
        let side = records.iter().filter(move |r| r.correct == want);
        SplitSummary {
            count: side.clone().count(),
            metrics: MetricMeans::of(side.clone()),
            seeds: SeedMeans::of(side),
        }
    };
    let metrics = MetricMeans::of(records.iter());
    let seeds = SeedMeans::of(records.iter());
    let comparison = (metrics.is_some() || seeds.is_some()).then(|| Comparison {
        correct: split(true),
        incorrect: split(false),
    });
    EvalReport {
        version: REPORT_VERSION,
        mode: uniform(records.iter().map(|r| r.mode)),
        shots: uniform(records.iter().map(|r| r.shots)),
        total,
        correct,
        unresolved: records
            .iter()
            .filter(|r| r.extracted == ExtractedAnswer::Unresolved)
            .count(),
        errors: records.iter().filter(|r| r.error.is_some()).count(),
        accuracy: percent(correct, total),
        accuracy_undefined: total == 0,
        metrics,
        seeds,
        comparison,
        groups: group_by
            .iter()
            .collect::<BTreeSet<_>>()
            .into_iter()
            .map(|k| group_table(records, k))
            .collect(),
    }
}

pub fn records_to_jsonl(records: &[EvalRecord]) -> String {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r).expect("record serializes"));
        out.push('\n');
    }
    out
}

pub fn parse_records(text: &str) -> Result<Vec<EvalRecord>, CorpusError> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| CorpusError::Malformed {
                line: i + 1,
                message: e.to_string(),
            })
        })
        .collect()
}

pub fn save_records(records: &[EvalRecord], path: &Path) -> Result<(), CorpusError> {
    corpus::write_file(path, records_to_jsonl(records).as_bytes())
}

pub fn load_records(path: &Path) -> Result<Vec<EvalRecord>, CorpusError> {
    parse_records(&corpus::read_file(path)?)
}

impl EvalReport {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }

    pub fn save_json(&self, path: &Path) -> Result<(), CorpusError> {
        corpus::write_file(path, self.to_json().as_bytes())
    }

    pub fn load_json(path: &Path) -> Result<Self, CorpusError> {
        serde_json::from_str(&corpus::read_file(path)?).map_err(|e| CorpusError::Malformed {
            line: e.line(),
            message: e.to_string(),
        })
    }

    /// Markdown tables. BLEU is shown ×100 like ROUGE.
    pub fn to_markdown(&self) -> String {
        let mut out = String::new();
        let title = match (self.mode, self.shots) {
            (Some(m), Some(s)) => format!("# Evaluation: {m}, {s}\n\n"),
            _ => "# Evaluation\n\n".to_string(),
        };
        out.push_str(&title);
        match self.accuracy {
            Some(a) => writeln!(out, "Accuracy: {a:.2}% ({}/{})", self.correct, self.total),
            None => writeln!(out, "Accuracy: undefined (no instances)"),
        }
        .unwrap();
        writeln!(out, "Unresolved: {}, errors: {}\n", self.unresolved, self.errors).unwrap();

        if let Some(m) = &self.metrics {
            out.push_str("| BLEU-1 | BLEU-2 | BLEU-3 | BLEU-4 | ROUGE-1 | ROUGE-2 | ROUGE-L |\n");
            out.push_str("|---|---|---|---|---|---|---|\n");
            writeln!(
                out,
                "| {:.2} | {:.2} | {:.2} | {:.2} | {:.2} | {:.2} | {:.2} |\n",
                m.bleu_1 * 100.0,
                m.bleu_2 * 100.0,
                m.bleu_3 * 100.0,
                m.bleu_4 * 100.0,
                m.rouge_1,
                m.rouge_2,
                m.rouge_l
            )
            .unwrap();
        }

        if let Some(c) = &self.comparison {
            out.push_str("## Correct vs incorrect\n\n");
            out.push_str("| | Count | ROUGE-L | BLEU-4 | Length | Gold entities | Seed P | Seed R | Seed F1 |\n");
            out.push_str("|---|---|---|---|---|---|---|---|---|\n");
            for (name, side) in [("Correct", &c.correct), ("Incorrect", &c.incorrect)] {
                let cell = |v: Option<f64>, digits: usize| match v {
                    Some(v) => format!("{v:.digits$}"),
                    None => "/".to_string(),
                };
                let m = side.metrics.as_ref();
                let s = side.seeds.as_ref();
                writeln!(
                    out,
                    "| {name} | {} | {} | {} | {} | {} | {} | {} | {} |",
                    side.count,
                    cell(m.map(|m| m.rouge_l), 2),
                    cell(m.map(|m| m.bleu_4 * 100.0), 2),
                    cell(m.map(|m| m.length), 2),
                    cell(s.map(|s| s.gold_count), 2),
                    cell(s.map(|s| s.precision), 3),
                    cell(s.map(|s| s.recall), 3),
                    cell(s.map(|s| s.f1), 3),
                )
                .unwrap();
            }
            out.push('\n');
        }

        for table in &self.groups {
            writeln!(out, "## By {}\n", table.key).unwrap();
            out.push_str("| Group | Count | Accuracy | ROUGE-L | BLEU-4 |\n|---|---|---|---|---|\n");
            for r in &table.rows {
                let rouge = r.rouge_l.map_or("/".into(), |v| format!("{v:.2}"));
                let bleu = r.bleu_4.map_or("/".into(), |v| format!("{:.2}", v * 100.0));
                writeln!(out, "| {} | {} | {:.2}% | {rouge} | {bleu} |", r.group, r.count, r.accuracy).unwrap();
            }
            out.push('\n');
        }
        out
    }
}
