//! Standard-QA, chain-of-thought and seed-padded prompts, zero- or few-shot.
//!
//! A prompt is laid out as
//!
//! ```text
//! <instruction>
//!
//! <exemplar 1>            (few-shot only)
//! ...
//!
//! question: <target question>
//! A. ...
//! E. ...
//! knowledge seeds: s1、s2   (seed-padded mode only)
//! ```
//!
//! The scaffolding strings live in a versioned template file
//! (`data/templates.toml` is the built-in default).

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{self, CorpusError, Instance, Label};
use crate::llm::{CONTEXT_WINDOW, MIN_RESPONSE_TOKENS};
use crate::seeds::SeedResult;
use crate::text::is_cjk;

pub const TEMPLATE_VERSION: u32 = 1;
const DEFAULT_TEMPLATES: &str = include_str!("../data/templates.toml");
const DEFAULT_EXEMPLARS: &str = include_str!("../data/exemplars.jsonl");

/// Prompt budget left after reserving the minimum response allowance.
pub const DEFAULT_TOKEN_BUDGET: usize = CONTEXT_WINDOW - MIN_RESPONSE_TOKENS;

#[derive(Debug, Error)]
pub enum PromptError {
    #[error("seed-padded prompt requested without seeds")]
    MissingSeeds,
    #[error("seeds supplied for {0} mode")]
    UnexpectedSeeds(PromptMode),
    #[error("few-shot prompt requested without exemplars")]
    NoExemplars,
    #[error("exemplar {0} has no seeds for seed-padded rendering")]
    ExemplarMissingSeeds(String),
    #[error("prompt core needs {needed} tokens, budget is {budget}")]
    BudgetExceeded { needed: usize, budget: usize },
    #[error("template error: {0}")]
    Template(String),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptMode {
    StandardQa,
    Cot,
    Icp,
}

impl PromptMode {
    pub const ALL: [PromptMode; 3] = [PromptMode::StandardQa, PromptMode::Cot, PromptMode::Icp];

    pub fn as_str(self) -> &'static str {
        match self {
            PromptMode::StandardQa => "standard_qa",
            PromptMode::Cot => "cot",
            PromptMode::Icp => "icp",
        }
    }

    /// Whether responses are expected to contain an analysis.
    pub fn generates_analysis(self) -> bool {
        !matches!(self, PromptMode::StandardQa)
    }
}

impl fmt::Display for PromptMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for PromptMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "standard_qa" | "qa" => Ok(PromptMode::StandardQa),
            "cot" => Ok(PromptMode::Cot),
            "icp" => Ok(PromptMode::Icp),
            other => Err(format!("unknown prompt mode {other:?}")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Shots {
    Zero,
    Few,
}

impl Shots {
    pub fn as_str(self) -> &'static str {
        match self {
            Shots::Zero => "zero",
            Shots::Few => "few",
        }
    }
}

impl fmt::Display for Shots {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Shots {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "zero" => Ok(Shots::Zero),
            "few" => Ok(Shots::Few),
            other => Err(format!("unknown shot setting {other:?}")),
        }
    }
}

/// Scaffolding strings with `{placeholder}` slots.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Templates {
    pub version: u32,
    pub instruction_standard_qa: String,
    pub instruction_cot: String,
    pub instruction_icp: String,
    pub question: String,
    pub option: String,
    pub seeds: String,
    pub seed_delimiter: String,
    pub analysis: String,
    pub answer: String,
    pub block_separator: String,
}

impl Default for Templates {
    fn default() -> Self {
        Templates::parse(DEFAULT_TEMPLATES).expect("built-in templates are valid")
    }
}

impl Templates {
    pub fn parse(text: &str) -> Result<Self, PromptError> {
        let t: Templates = toml::from_str(text).map_err(|e| PromptError::Template(e.to_string()))?;
        t.validate()?;
        Ok(t)
    }

    pub fn load(path: &Path) -> Result<Self, PromptError> {
        Self::parse(&corpus::read_file(path)?)
    }

    pub fn instruction(&self, mode: PromptMode) -> &str {
        match mode {
            PromptMode::StandardQa => &self.instruction_standard_qa,
            PromptMode::Cot => &self.instruction_cot,
            PromptMode::Icp => &self.instruction_icp,
        }
    }

    fn validate(&self) -> Result<(), PromptError> {
        if self.version != TEMPLATE_VERSION {
            return Err(PromptError::Template(format!(
                "template version {} is not supported (expected {TEMPLATE_VERSION})",
                self.version
            )));
        }
        let checks: [(&str, &str, &[&str]); 8] = [
            ("instruction_standard_qa", &self.instruction_standard_qa, &[]),
            ("instruction_cot", &self.instruction_cot, &[]),
            ("instruction_icp", &self.instruction_icp, &[]),
            ("question", &self.question, &["question"]),
            ("option", &self.option, &["label", "text"]),
            ("seeds", &self.seeds, &["seeds"]),
            ("analysis", &self.analysis, &["analysis"]),
            ("answer", &self.answer, &["answer"]),
        ];
        for (name, template, allowed) in checks {
            for slot in placeholders(template) {
                if !allowed.contains(&slot.as_str()) {
                    return Err(PromptError::Template(format!(
                        "template `{name}` uses unknown placeholder {{{slot}}}"
                    )));
                }
            }
        }
        let distinct = BTreeSet::from([
            &self.instruction_standard_qa,
            &self.instruction_cot,
            &self.instruction_icp,
        ]);
        if distinct.len() != 3 || distinct.iter().any(|s| s.trim().is_empty()) {
            return Err(PromptError::Template(
                "the three instructions must be non-empty and distinct".into(),
            ));
        }
        Ok(())
    }
}

fn placeholders(template: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut rest = template;
    while let Some(open) = rest.find('{') {
        let after = &rest[open + 1..];
        match after.find('}') {
            Some(close) if after[..close].chars().all(|c| c.is_ascii_lowercase() || c == '_') => {
                out.push(after[..close].to_string());
                rest = &after[close + 1..];
            }
            _ => rest = after,
        }
    }
    out
}

/// Single-pass substitution; substituted values are never re-scanned.
fn fill(template: &str, values: &[(&str, &str)]) -> String {
    let mut out = String::with_capacity(template.len());
    let mut rest = template;
    while let Some(open) = rest.find('{') {
        out.push_str(&rest[..open]);
        let after = &rest[open + 1..];
        let hit = after.find('}').and_then(|close| {
            let name = &after[..close];
            values
                .iter()
                .find(|(k, _)| *k == name)
                .map(|(_, v)| (close, *v))
        });
        match hit {
            Some((close, v)) => {
                out.push_str(v);
                rest = &after[close + 1..];
            }
            None => {
                out.push('{');
                rest = after;
            }
        }
    }
    out.push_str(rest);
    out
}

/// A worked example for few-shot prompts.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Exemplar {
    pub id: String,
    pub question: String,
    pub options: BTreeMap<Label, String>,
    pub answer: Label,
    pub analysis: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seeds: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub metadata: BTreeMap<String, String>,
}

impl Exemplar {
    pub fn from_instance(inst: &Instance, seeds: Option<Vec<String>>) -> Self {
        Exemplar {
            id: inst.id.clone(),
            question: inst.question.clone(),
            options: inst.options.clone(),
            answer: inst.answer,
            analysis: inst.analysis.clone(),
            seeds,
            metadata: inst.metadata.clone(),
        }
    }
}

/// Exemplar fixture: dataset records plus an optional `seeds` list.
pub fn parse_exemplars(text: &str) -> Result<Vec<Exemplar>, PromptError> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let inst = corpus::parse_record_line(i + 1, line)?;
        #[derive(Deserialize)]
        struct SeedsOnly {
            #[serde(default)]
            seeds: Option<Vec<String>>,
        }
        let extra: SeedsOnly = serde_json::from_str(line).map_err(|e| CorpusError::Malformed {
            line: i + 1,
            message: e.to_string(),
        })?;
        out.push(Exemplar::from_instance(&inst, extra.seeds));
    }
    Ok(out)
}

pub fn load_exemplars(path: &Path) -> Result<Vec<Exemplar>, PromptError> {
    parse_exemplars(&corpus::read_file(path)?)
}

/// The six built-in exemplars (two each of case analysis, clinical
/// knowledge and medical computation).
pub fn default_exemplars() -> Vec<Exemplar> {
    parse_exemplars(DEFAULT_EXEMPLARS).expect("built-in exemplars are valid")
}

/// Token estimator.
pub trait TokenCounter: Send + Sync {
    fn count(&self, text: &str) -> usize;
}

/// One token per CJK character and one per four characters of every other
/// run, rounded up per run.
#[derive(Debug, Clone, Copy, Default)]
pub struct HeuristicCounter;

impl TokenCounter for HeuristicCounter {
    fn count(&self, text: &str) -> usize {
        let mut tokens = 0;
        let mut run = 0usize;
        for c in text.chars() {
            if is_cjk(c) {
                tokens += run.div_ceil(4) + 1;
                run = 0;
            } else {
                run += 1;
            }
        }
        tokens + run.div_ceil(4)
    }
}

pub fn estimate_tokens(text: &str) -> usize {
    HeuristicCounter.count(text)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptSpec {
    pub mode: PromptMode,
    pub shots: Shots,
    pub exemplars: Vec<Exemplar>,
    pub token_budget: usize,
    pub templates: Templates,
}

impl PromptSpec {
    pub fn new(mode: PromptMode, shots: Shots) -> Self {
        PromptSpec {
            mode,
            shots,
            exemplars: if shots == Shots::Few {
                default_exemplars()
            } else {
                Vec::new()
            },
            token_budget: DEFAULT_TOKEN_BUDGET,
            templates: Templates::default(),
        }
    }

    pub fn with_exemplars(mut self, exemplars: Vec<Exemplar>) -> Self {
        self.exemplars = exemplars;
        self
    }

    pub fn with_budget(mut self, token_budget: usize) -> Self {
        self.token_budget = token_budget;
        self
    }

    pub fn with_templates(mut self, templates: Templates) -> Self {
        self.templates = templates;
        self
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RenderedPrompt {
    pub text: String,
    pub estimated_tokens: usize,
    pub mode: PromptMode,
    pub shots: Shots,
    /// Exemplars kept after budget fitting.
    pub exemplars_used: usize,
}

/// Pieces of a prompt before budget fitting.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptParts {
    pub instruction: String,
    pub exemplars: Vec<String>,
    /// Target question, options and seeds.
    pub target: String,
    pub separator: String,
}

impl PromptParts {
    fn assemble(&self, n_exemplars: usize) -> String {
        let mut blocks: Vec<&str> = vec![&self.instruction];
        blocks.extend(self.exemplars[..n_exemplars].iter().map(String::as_str));
        blocks.push(&self.target);
        blocks.join(&self.separator)
    }
}

/// Drops whole exemplars from the end until the prompt fits `budget`.
pub fn fit_to_budget(
    parts: &PromptParts,
    budget: usize,
    counter: &dyn TokenCounter,
) -> Result<(String, usize, usize), PromptError> {
    let core = parts.assemble(0);
    let core_tokens = counter.count(&core);
    if core_tokens > budget {
        return Err(PromptError::BudgetExceeded {
            needed: core_tokens,
            budget,
        });
    }
    for keep in (0..=parts.exemplars.len()).rev() {
        let text = parts.assemble(keep);
        let tokens = counter.count(&text);
        if tokens <= budget {
            if keep < parts.exemplars.len() {
                log::debug!(
                    "dropped {} exemplar(s) to fit {budget} tokens",
                    parts.exemplars.len() - keep
                );
            }
            return Ok((text, tokens, keep));
        }
    }
    unreachable!("the core alone fits the budget")
}

fn render_options(t: &Templates, options: &BTreeMap<Label, String>) -> String {
    options
        .iter()
        .map(|(label, text)| fill(&t.option, &[("label", &label.to_string()), ("text", text)]))
        .collect::<Vec<_>>()
        .join("\n")
}

fn render_seeds<S: AsRef<str>>(t: &Templates, seeds: &[S]) -> String {
    let joined = seeds
        .iter()
        .map(AsRef::as_ref)
        .collect::<Vec<_>>()
        .join(&t.seed_delimiter);
    fill(&t.seeds, &[("seeds", &joined)])
}

fn render_exemplar(t: &Templates, mode: PromptMode, ex: &Exemplar) -> Result<String, PromptError> {
    let mut lines = vec![
        fill(&t.question, &[("question", &ex.question)]),
        render_options(t, &ex.options),
    ];
    if mode == PromptMode::Icp {
        let seeds = ex
            .seeds
            .as_ref()
            .ok_or_else(|| PromptError::ExemplarMissingSeeds(ex.id.clone()))?;
        lines.push(render_seeds(t, seeds));
    }
    if mode.generates_analysis() {
        lines.push(fill(&t.analysis, &[("analysis", &ex.analysis)]));
    }
    lines.push(fill(&t.answer, &[("answer", &ex.answer.to_string())]));
    Ok(lines.join("\n"))
}

/// Splits a prompt into instruction, exemplar blocks and target block.
pub fn prompt_parts(
    instance: &Instance,
    spec: &PromptSpec,
    seeds: Option<&SeedResult>,
) -> Result<PromptParts, PromptError> {
    let t = &spec.templates;
    match (spec.mode, seeds) {
        (PromptMode::Icp, None) => return Err(PromptError::MissingSeeds),
        (mode, Some(_)) if mode != PromptMode::Icp => return Err(PromptError::UnexpectedSeeds(mode)),
        _ => {}
    }
    let exemplars = match spec.shots {
        Shots::Zero => Vec::new(),
        Shots::Few => {
            if spec.exemplars.is_empty() {
                return Err(PromptError::NoExemplars);
            }
            spec.exemplars
                .iter()
                .map(|ex| render_exemplar(t, spec.mode, ex))
                .collect::<Result<_, _>>()?
        }
    };
    let mut target = vec![
        fill(&t.question, &[("question", &instance.question)]),
        render_options(t, &instance.options),
    ];
    if let Some(seeds) = seeds {
        let names: Vec<&str> = seeds.entities().map(|e| e.as_str()).collect();
        target.push(render_seeds(t, &names));
    }
    Ok(PromptParts {
        instruction: t.instruction(spec.mode).to_string(),
        exemplars,
        target: target.join("\n"),
        separator: t.block_separator.clone(),
    })
}

pub fn compose(
    instance: &Instance,
    spec: &PromptSpec,
    seeds: Option<&SeedResult>,
) -> Result<RenderedPrompt, PromptError> {
    compose_with(instance, spec, seeds, &HeuristicCounter)
}

pub fn compose_with(
    instance: &Instance,
    spec: &PromptSpec,
    seeds: Option<&SeedResult>,
    counter: &dyn TokenCounter,
) -> Result<RenderedPrompt, PromptError> {
    let parts = prompt_parts(instance, spec, seeds)?;
    let (text, estimated_tokens, exemplars_used) = fit_to_budget(&parts, spec.token_budget, counter)?;
    Ok(RenderedPrompt {
        text,
        estimated_tokens,
        mode: spec.mode,
        shots: spec.shots,
        exemplars_used,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::tests::ent;
    use crate::seeds::Seed;

    fn instance() -> Instance {
        serde_json::from_str(
            r#"{"id":"t1","question":"Which drug is first-line for tremor in elderly Parkinson disease?","options":{"A":"Artane","B":"Levodopa","C":"Selegiline","D":"Amantadine","E":"Bromocriptine"},"answer":"B","analysis":"..."}"#,
        )
        .unwrap()
    }

    fn seeds(names: &[&str]) -> SeedResult {
        SeedResult {
            seeds: names
                .iter()
                .map(|n| Seed {
                    entity: ent(n),
                    score: 1,
                })
                .collect(),
            k: 10,
        }
    }

    #[test]
    fn token_heuristic() {
        assert_eq!(estimate_tokens(""), 0);
        assert_eq!(estimate_tokens("abcdefgh"), 2);
        assert_eq!(estimate_tokens("帕金森病。"), 5);
        assert_eq!(estimate_tokens("abc帕d"), 3);
        assert_eq!(estimate_tokens("a"), 1);
    }

    #[test]
    fn standard_qa_zero_shot() {
        let p = compose(&instance(), &PromptSpec::new(PromptMode::StandardQa, Shots::Zero), None).unwrap();
        assert!(p.text.starts_with(
            "Here is a multi-choice question about medical knowledge, please output the correct answer according to the question."
        ));
        for line in ["A. Artane", "B. Levodopa", "C. Selegiline", "D. Amantadine", "E. Bromocriptine"] {
            assert!(p.text.contains(line), "{}", p.text);
        }
        assert!(!p.text.contains("analysis"));
        assert!(!p.text.contains("step"));
        assert_eq!(p.estimated_tokens, estimate_tokens(&p.text));
    }

    #[test]
    fn icp_ends_with_seed_block() {
        let spec = PromptSpec::new(PromptMode::Icp, Shots::Zero);
        let p = compose(&instance(), &spec, Some(&seeds(&["c", "d"]))).unwrap();
        assert!(p.text.ends_with("E. Bromocriptine\nknowledge seeds: c、d"), "{}", p.text);
        assert_eq!(p, compose(&instance(), &spec, Some(&seeds(&["c", "d"]))).unwrap());
    }

    #[test]
    fn seed_argument_must_match_mode() {
        let icp = PromptSpec::new(PromptMode::Icp, Shots::Zero);
        assert!(matches!(compose(&instance(), &icp, None), Err(PromptError::MissingSeeds)));
        let cot = PromptSpec::new(PromptMode::Cot, Shots::Zero);
        assert!(matches!(
            compose(&instance(), &cot, Some(&seeds(&["c"]))),
            Err(PromptError::UnexpectedSeeds(PromptMode::Cot))
        ));
    }

    #[test]
    fn few_shot_requires_exemplars() {
        let spec = PromptSpec::new(PromptMode::Cot, Shots::Few).with_exemplars(vec![]);
        assert!(matches!(compose(&instance(), &spec, None), Err(PromptError::NoExemplars)));
    }

    #[test]
    fn default_exemplars_fixture() {
        let ex = default_exemplars();
        assert_eq!(ex.len(), 6);
        assert!(ex.iter().all(|e| e.seeds.as_ref().is_some_and(|s| !s.is_empty())));
        let kinds: BTreeSet<_> = ex.iter().map(|e| e.metadata["type"].as_str()).collect();
        assert_eq!(kinds.len(), 3);
    }

    #[test]
    fn budget_drops_trailing_exemplars() {
        let parts = PromptParts {
            instruction: "inst".into(),
            exemplars: (0..6).map(|i| format!("exemplar-{i}-xxxxxxx")).collect(),
            target: "target".into(),
            separator: "\n\n".into(),
        };
        let full = HeuristicCounter.count(&parts.assemble(6));
        let four = HeuristicCounter.count(&parts.assemble(4));
        assert!(four < full);
        let (text, tokens, kept) = fit_to_budget(&parts, four, &HeuristicCounter).unwrap();
        assert_eq!(kept, 4);
        assert!(tokens <= four);
        assert!(text.contains("exemplar-3") && !text.contains("exemplar-4"));
        assert!(text.find("exemplar-0").unwrap() < text.find("exemplar-3").unwrap());

        let (_, _, kept) = fit_to_budget(&parts, 10_000, &HeuristicCounter).unwrap();
        assert_eq!(kept, 6);

        assert!(matches!(
            fit_to_budget(&parts, 2, &HeuristicCounter),
            Err(PromptError::BudgetExceeded { .. })
        ));
    }

    #[test]
    fn substitution_is_single_pass() {
        assert_eq!(fill("q: {question}", &[("question", "{question} {x}")]), "q: {question} {x}");
        assert_eq!(fill("{a}{b}", &[("a", "1")]), "1{b}");
    }

    #[test]
    fn template_validation() {
        let bad = DEFAULT_TEMPLATES.replace("{label}. {text}", "{label}. {body}");
        assert!(matches!(Templates::parse(&bad), Err(PromptError::Template(_))));
        let wrong_version = DEFAULT_TEMPLATES.replace("version = 1", "version = 2");
        assert!(Templates::parse(&wrong_version).is_err());
    }
}
