//! Batch front-end: `annotate`, `build-graph`, `mine-seeds`, `run`, `report`.
//!
//! One experiment is one TOML config plus command-line overrides. Relative
//! paths in the config file resolve against the file's directory. Machine
//! outputs go to files; logs go to stderr.
//!
//! Exit codes: 0 success, 1 fatal config or I/O error, 2 upstream API
//! exhaustion.

use std::collections::HashMap;
use std::ffi::OsString;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::corpus::{self, load_dataset, split_sample, split_stratified, Dataset, DatasetFormat};
use crate::entity::{
    annotate_dataset, load_annotated, save_annotated, AnnotateError, AnnotateOptions, EntityExtractor,
    ExtractError, ExtractionExemplar, FailurePolicy, Lexicon, LlmExtractor,
};
use crate::eval::{build_report, load_records, run_eval, save_records, EvalReport, PipelineConfig};
use crate::graph::{build_graph_sharded, load_graph, save_graph, KnowledgeGraph};
use crate::llm::{BackendKind, Client, ClientConfig, LlmError};
use crate::prompt::{load_exemplars, PromptMode, PromptSpec, Shots, Templates, DEFAULT_TOKEN_BUDGET};
use crate::seeds::{load_seeds, mine_seeds, save_seeds, SeedQuery, SeedRecord, SeedResult, DEFAULT_SEED_COUNT};

pub const EXIT_FATAL: u8 = 1;
pub const EXIT_UPSTREAM: u8 = 2;

pub const RECORDS_FILE: &str = "records.jsonl";
pub const REPORT_JSON: &str = "report.json";
pub const REPORT_MD: &str = "report.md";
pub const CONFIG_FILE: &str = "config.toml";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExtractorKind {
    #[default]
    Lexicon,
    Llm,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsConfig {
    /// Raw dataset: input of `annotate` and the test set of `run`.
    pub dataset: Option<PathBuf>,
    /// Annotated dataset: output of `annotate`, input of `build-graph` and
    /// `mine-seeds`.
    pub annotated: Option<PathBuf>,
    pub lexicon: Option<PathBuf>,
    pub graph: Option<PathBuf>,
    pub seeds: Option<PathBuf>,
    pub exemplars: Option<PathBuf>,
    pub extraction_exemplars: Option<PathBuf>,
    pub templates: Option<PathBuf>,
    pub records: Option<PathBuf>,
    pub output_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PromptConfig {
    pub mode: PromptMode,
    pub shots: Shots,
    pub token_budget: usize,
}

impl Default for PromptConfig {
    fn default() -> Self {
        PromptConfig {
            mode: PromptMode::Icp,
            shots: Shots::Few,
            token_budget: DEFAULT_TOKEN_BUDGET,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnnotateConfig {
    /// Leave analysis entities empty.
    pub skip_analysis: bool,
    pub failure_policy: FailurePolicy,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SampleConfig {
    /// Evaluate a random subset of this size instead of the whole dataset.
    pub test_size: Option<usize>,
    /// Metadata key for a stratified subset.
    pub stratify_by: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Written into dumped configs; ignored on load.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub code_version: Option<String>,
    pub seed: u64,
    pub k: usize,
    pub workers: usize,
    pub group_by: Vec<String>,
    pub extractor: ExtractorKind,
    pub paths: PathsConfig,
    pub prompt: PromptConfig,
    pub annotate: AnnotateConfig,
    pub sample: SampleConfig,
    pub client: ClientConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            code_version: None,
            seed: 0,
            k: DEFAULT_SEED_COUNT,
            workers: 1,
            group_by: Vec::new(),
            extractor: ExtractorKind::Lexicon,
            paths: PathsConfig::default(),
            prompt: PromptConfig::default(),
            annotate: AnnotateConfig::default(),
            sample: SampleConfig::default(),
            client: ClientConfig::default(),
        }
    }
}

fn rebase(p: &mut Option<PathBuf>, base: &Path) {
    if let Some(path) = p {
        if path.is_relative() {
            *path = base.join(&*path);
        }
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        Ok(toml::from_str(text)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        let mut cfg = Self::parse(&text).with_context(|| format!("parsing config {}", path.display()))?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.rebase(base);
        Ok(cfg)
    }

    fn path_slots(&mut self) -> [&mut Option<PathBuf>; 12] {
        let p = &mut self.paths;
        [
            &mut p.dataset,
            &mut p.annotated,
            &mut p.lexicon,
            &mut p.graph,
            &mut p.seeds,
            &mut p.exemplars,
            &mut p.extraction_exemplars,
            &mut p.templates,
            &mut p.records,
            &mut p.output_dir,
            &mut self.client.cache_dir,
            &mut self.client.fixture,
        ]
    }

    fn rebase(&mut self, base: &Path) {
        for slot in self.path_slots() {
            rebase(slot, base);
        }
    }

    /// Makes every path absolute against the working directory.
    pub fn absolutize(&mut self) -> Result<()> {
        for slot in self.path_slots().into_iter().flatten() {
            *slot = std::path::absolute(&*slot)?;
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}

fn write_effective_config(cfg: &RunConfig, dir: &Path) -> Result<()> {
    let mut cfg = cfg.clone();
    cfg.absolutize()?;
    cfg.code_version = Some(env!("CARGO_PKG_VERSION").to_string());
    corpus::write_file(&dir.join(CONFIG_FILE), cfg.to_toml().as_bytes())?;
    Ok(())
}

#[derive(Debug, Parser)]
#[command(name = "seedpad", version, about = "Knowledge-seed prompting experiments")]
pub struct Cli {
    /// Experiment config (TOML).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Worker threads; also bounds in-flight API requests.
    #[arg(long, global = true)]
    pub workers: Option<usize>,
    /// RNG seed for test subsampling.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// live, cached-live or replay.
    #[arg(long, global = true, value_parser = parse_backend)]
    pub backend: Option<BackendKind>,
    /// More log output (repeatable).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

fn parse_backend(s: &str) -> Result<BackendKind, String> {
    match s {
        "live" => Ok(BackendKind::Live),
        "cached-live" => Ok(BackendKind::CachedLive),
        "replay" => Ok(BackendKind::Replay),
        _ => Err(format!("unknown backend {s:?} (expected live, cached-live or replay)")),
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Tag entities in a dataset.
    Annotate(AnnotateArgs),
    /// Build the co-occurrence graph from an annotated training set.
    BuildGraph(BuildGraphArgs),
    /// Mine knowledge seeds for every instance of an annotated set.
    MineSeeds(MineSeedsArgs),
    /// Evaluate a test set and write records and reports.
    Run(RunArgs),
    /// Rebuild reports from a records file.
    Report(ReportArgs),
}

#[derive(Debug, Args)]
pub struct AnnotateArgs {
    #[arg(long)]
    pub input: Option<PathBuf>,
    #[arg(long)]
    pub output: Option<PathBuf>,
    #[arg(long)]
    pub lexicon: Option<PathBuf>,
    /// Use the model instead of the lexicon.
    #[arg(long)]
    pub llm: bool,
    #[arg(long)]
    pub skip_analysis: bool,
    /// Log and drop instances whose extraction fails instead of aborting.
    #[arg(long)]
    pub skip_failures: bool,
}

#[derive(Debug, Args)]
pub struct BuildGraphArgs {
    #[arg(long)]
    pub input: Option<PathBuf>,
    #[arg(long)]
    pub output: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct MineSeedsArgs {
    #[arg(long)]
    pub graph: Option<PathBuf>,
    #[arg(long)]
    pub input: Option<PathBuf>,
    #[arg(long)]
    pub output: Option<PathBuf>,
    #[arg(long)]
    pub k: Option<usize>,
}

#[derive(Debug, Args)]
pub struct RunArgs {
    #[arg(long)]
    pub mode: Option<PromptMode>,
    #[arg(long)]
    pub shots: Option<Shots>,
    #[arg(long)]
    pub k: Option<usize>,
    /// Metadata keys for per-group tables (repeatable or comma-separated).
    #[arg(long, value_delimiter = ',')]
    pub group_by: Vec<String>,
    #[arg(long)]
    pub test: Option<PathBuf>,
    #[arg(long)]
    pub graph: Option<PathBuf>,
    #[arg(long)]
    pub lexicon: Option<PathBuf>,
    #[arg(long)]
    pub seeds: Option<PathBuf>,
    #[arg(long)]
    pub fixture: Option<PathBuf>,
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    #[arg(long)]
    pub records: Option<PathBuf>,
    #[arg(long, value_delimiter = ',')]
    pub group_by: Vec<String>,
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
}

/// Marks a failure caused by the upstream API giving up.
#[derive(Debug, thiserror::Error)]
#[error("{0} instance(s) failed after exhausting API retries")]
pub struct UpstreamExhausted(pub usize);

fn is_exhaustion(err: &anyhow::Error) -> bool {
    err.chain().any(|e| {
        if e.is::<UpstreamExhausted>() {
            return true;
        }
        if let Some(l) = e.downcast_ref::<LlmError>() {
            return l.is_upstream_exhaustion();
        }
        if let Some(ExtractError::Llm(l)) = e.downcast_ref::<ExtractError>() {
            return l.is_upstream_exhaustion();
        }
        if let Some(a) = e.downcast_ref::<AnnotateError>() {
            return matches!(&a.source, ExtractError::Llm(l) if l.is_upstream_exhaustion());
        }
        false
    })
}

/// Exit status for an error returned by [`execute`].
pub fn exit_code(err: &anyhow::Error) -> u8 {
    if is_exhaustion(err) {
        EXIT_UPSTREAM
    } else {
        EXIT_FATAL
    }
}

/// Parses arguments, runs the command and maps the outcome to an exit code.
pub fn main_from<I, T>(args: I) -> ExitCode
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { EXIT_FATAL } else { 0 });
        }
    };
    let level = match cli.verbose {
        0 => "info",
        1 => "debug",
        _ => "trace",
    };
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .target(env_logger::Target::Stderr)
        .try_init();
    match execute(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            log::error!("{e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn resolve_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(w) = cli.workers {
        cfg.workers = w;
    }
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(b) = cli.backend {
        cfg.client.backend = b;
    }
    if cfg.workers == 0 {
        bail!("--workers must be at least 1");
    }
    cfg.client.max_in_flight = cfg.workers;
    Ok(cfg)
}

fn set<T: Clone>(slot: &mut Option<T>, v: &Option<T>) {
    if v.is_some() {
        slot.clone_from(v);
    }
}

fn required<'a>(p: &'a Option<PathBuf>, what: &str) -> Result<&'a Path> {
    p.as_deref().with_context(|| format!("no {what} path given"))
}

fn existing<'a>(p: &'a Option<PathBuf>, what: &str) -> Result<&'a Path> {
    let path = required(p, what)?;
    if !path.exists() {
        bail!("{what} {} does not exist", path.display());
    }
    Ok(path)
}

fn ensure_dir(p: &Path) -> Result<()> {
    std::fs::create_dir_all(p).with_context(|| format!("creating output directory {}", p.display()))
}

fn ensure_parent(p: &Path) -> Result<()> {
    match p.parent() {
        Some(d) if !d.as_os_str().is_empty() => ensure_dir(d),
        _ => Ok(()),
    }
}

fn check_client_inputs(cfg: &ClientConfig) -> Result<()> {
    cfg.validate()?;
    if cfg.backend == BackendKind::Replay {
        existing(&cfg.fixture, "replay fixture")?;
    }
    Ok(())
}

/// Runs one parsed command line.
pub fn execute(cli: &Cli) -> Result<()> {
    let mut cfg = resolve_config(cli)?;
    match &cli.command {
        Command::Annotate(a) => {
            set(&mut cfg.paths.dataset, &a.input);
            set(&mut cfg.paths.annotated, &a.output);
            set(&mut cfg.paths.lexicon, &a.lexicon);
            if a.llm {
                cfg.extractor = ExtractorKind::Llm;
            }
            cfg.annotate.skip_analysis |= a.skip_analysis;
            if a.skip_failures {
                cfg.annotate.failure_policy = FailurePolicy::SkipAndLog;
            }
            cmd_annotate(&cfg)
        }
        Command::BuildGraph(a) => {
            set(&mut cfg.paths.annotated, &a.input);
            set(&mut cfg.paths.graph, &a.output);
            cmd_build_graph(&cfg)
        }
        Command::MineSeeds(a) => {
            set(&mut cfg.paths.graph, &a.graph);
            set(&mut cfg.paths.annotated, &a.input);
            set(&mut cfg.paths.seeds, &a.output);
            if let Some(k) = a.k {
                cfg.k = k;
            }
            cmd_mine_seeds(&cfg)
        }
        Command::Run(a) => {
            if let Some(m) = a.mode {
                cfg.prompt.mode = m;
            }
            if let Some(s) = a.shots {
                cfg.prompt.shots = s;
            }
            if let Some(k) = a.k {
                cfg.k = k;
            }
            if !a.group_by.is_empty() {
                cfg.group_by.clone_from(&a.group_by);
            }
            set(&mut cfg.paths.dataset, &a.test);
            set(&mut cfg.paths.graph, &a.graph);
            set(&mut cfg.paths.lexicon, &a.lexicon);
            set(&mut cfg.paths.seeds, &a.seeds);
            set(&mut cfg.paths.output_dir, &a.out_dir);
            set(&mut cfg.client.fixture, &a.fixture);
            cmd_run(&cfg)
        }
        Command::Report(a) => {
            set(&mut cfg.paths.records, &a.records);
            set(&mut cfg.paths.output_dir, &a.out_dir);
            if !a.group_by.is_empty() {
                cfg.group_by.clone_from(&a.group_by);
            }
            cmd_report(&cfg)
        }
    }
}

fn load_extraction_exemplars(path: &Path) -> Result<Vec<ExtractionExemplar>> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| serde_json::from_str(l).with_context(|| format!("{} line {}", path.display(), i + 1)))
        .collect()
}

/// Checks the inputs an extractor needs before any work starts.
fn check_extractor_inputs(cfg: &RunConfig) -> Result<()> {
    match cfg.extractor {
        ExtractorKind::Lexicon => existing(&cfg.paths.lexicon, "lexicon").map(drop),
        ExtractorKind::Llm => {
            existing(&cfg.paths.extraction_exemplars, "extraction exemplars")?;
            check_client_inputs(&cfg.client)
        }
    }
}

fn with_extractor<R>(
    cfg: &RunConfig,
    client: Option<&Client>,
    f: impl FnOnce(&dyn EntityExtractor) -> Result<R>,
) -> Result<R> {
    match cfg.extractor {
        ExtractorKind::Lexicon => {
            let path = existing(&cfg.paths.lexicon, "lexicon")?;
            let lex = Lexicon::load(path).with_context(|| format!("loading lexicon {}", path.display()))?;
            f(&lex)
        }
        ExtractorKind::Llm => {
            let exemplars = load_extraction_exemplars(existing(&cfg.paths.extraction_exemplars, "extraction exemplars")?)?;
            let client = client.context("llm extractor needs a client")?;
            let ex = LlmExtractor::new(client, exemplars)?;
            f(&ex)
        }
    }
}

pub fn cmd_annotate(cfg: &RunConfig) -> Result<()> {
    let input = existing(&cfg.paths.dataset, "dataset")?;
    let output = required(&cfg.paths.annotated, "annotated output")?;
    check_extractor_inputs(cfg)?;
    ensure_parent(output)?;

    let dataset = load_dataset(input, DatasetFormat::Jsonl)?;
    let client = match cfg.extractor {
        ExtractorKind::Llm => Some(Client::from_config(&cfg.client)?),
        ExtractorKind::Lexicon => None,
    };
    let opts = AnnotateOptions {
        skip_analysis: cfg.annotate.skip_analysis,
        policy: cfg.annotate.failure_policy,
        workers: cfg.workers,
    };
    let annotation = with_extractor(cfg, client.as_ref(), |ex| Ok(annotate_dataset(&dataset, ex, opts)?))?;
    save_annotated(&annotation.instances, output)?;
    log::info!(
        "annotated {} instance(s), skipped {} -> {}",
        annotation.instances.len(),
        annotation.skipped.len(),
        output.display()
    );
    let exhausted = annotation
        .skipped
        .iter()
        .filter(|e| matches!(&e.source, ExtractError::Llm(l) if l.is_upstream_exhaustion()))
        .count();
    if exhausted > 0 {
        return Err(UpstreamExhausted(exhausted).into());
    }
    Ok(())
}

pub fn cmd_build_graph(cfg: &RunConfig) -> Result<()> {
    let input = existing(&cfg.paths.annotated, "annotated dataset")?;
    let output = required(&cfg.paths.graph, "graph output")?;
    ensure_parent(output)?;
    let train = load_annotated(input).with_context(|| format!("reading {}", input.display()))?;
    let g = build_graph_sharded(&train, cfg.workers);
    save_graph(&g, output)?;
    log::info!(
        "graph: {} node(s), {} edge(s) from {} instance(s) -> {}",
        g.m(),
        g.edge_count(),
        train.len(),
        output.display()
    );
    Ok(())
}

fn load_graph_at(path: &Path) -> Result<KnowledgeGraph> {
    load_graph(path).with_context(|| format!("loading graph {}", path.display()))
}

pub fn cmd_mine_seeds(cfg: &RunConfig) -> Result<()> {
    let graph_path = existing(&cfg.paths.graph, "graph")?;
    let input = existing(&cfg.paths.annotated, "annotated dataset")?;
    let output = required(&cfg.paths.seeds, "seeds output")?;
    if cfg.k == 0 {
        bail!("k must be at least 1");
    }
    ensure_parent(output)?;
    let g = load_graph_at(graph_path)?;
    let items = load_annotated(input).with_context(|| format!("reading {}", input.display()))?;
    let records: Vec<SeedRecord> = items
        .iter()
        .map(|a| SeedRecord {
            id: a.base.id.clone(),
            seeds: mine_seeds(&g, &SeedQuery::new(a.qo_entities.clone()), cfg.k).seeds,
        })
        .collect();
    save_seeds(&records, output)?;
    log::info!("mined seeds for {} instance(s) -> {}", records.len(), output.display());
    Ok(())
}

/// Prompt settings of `cfg`, with template and exemplar files loaded.
pub fn prompt_spec(cfg: &RunConfig) -> Result<PromptSpec> {
    let mut spec = PromptSpec::new(cfg.prompt.mode, cfg.prompt.shots).with_budget(cfg.prompt.token_budget);
    if let Some(p) = &cfg.paths.templates {
        spec = spec.with_templates(Templates::load(p)?);
    }
    if let Some(p) = &cfg.paths.exemplars {
        spec = spec.with_exemplars(load_exemplars(p)?);
    }
    Ok(spec)
}

fn test_set(cfg: &RunConfig, path: &Path) -> Result<Dataset> {
    let d = load_dataset(path, DatasetFormat::Jsonl).with_context(|| format!("reading {}", path.display()))?;
    Ok(match (cfg.sample.test_size, &cfg.sample.stratify_by) {
        (None, _) => d,
        (Some(n), None) => split_sample(&d, n, cfg.seed)?.test,
        (Some(n), Some(key)) => split_stratified(&d, n, cfg.seed, key)?.test,
    })
}

pub fn cmd_run(cfg: &RunConfig) -> Result<()> {
    let dataset_path = existing(&cfg.paths.dataset, "test dataset")?;
    let out_dir = required(&cfg.paths.output_dir, "output directory")?;
    let icp = cfg.prompt.mode == PromptMode::Icp;
    if icp {
        if cfg.paths.graph.is_none() && cfg.paths.seeds.is_none() {
            bail!("mode icp needs a knowledge graph (--graph) or a seeds file (--seeds)");
        }
        if cfg.paths.graph.is_some() {
            existing(&cfg.paths.graph, "graph")?;
        }
        if cfg.paths.seeds.is_some() {
            existing(&cfg.paths.seeds, "seeds file")?;
        }
        check_extractor_inputs(cfg)?;
    }
    for (p, what) in [
        (&cfg.paths.templates, "templates"),
        (&cfg.paths.exemplars, "exemplars"),
    ] {
        if p.is_some() {
            existing(p, what)?;
        }
    }
    check_client_inputs(&cfg.client)?;
    let spec = prompt_spec(cfg)?;
    let test = test_set(cfg, dataset_path)?;
    let graph = match (&cfg.paths.graph, icp) {
        (Some(p), true) => Some(load_graph_at(p)?),
        _ => None,
    };
    let seeds: Option<HashMap<String, SeedResult>> = match (&cfg.paths.seeds, icp) {
        (Some(p), true) => Some(
            load_seeds(p)?
                .into_iter()
                .map(|r| (r.id, SeedResult { seeds: r.seeds, k: cfg.k }))
                .collect(),
        ),
        _ => None,
    };
    ensure_dir(out_dir)?;
    let client = Client::from_config(&cfg.client)?;

    let evaluate = |extractor: Option<&dyn EntityExtractor>| {
        let mut pipeline = PipelineConfig::new(spec.clone());
        pipeline.graph = graph.as_ref();
        pipeline.extractor = extractor;
        pipeline.precomputed_seeds = seeds.as_ref();
        pipeline.k = cfg.k;
        pipeline.workers = cfg.workers;
        pipeline.group_by.clone_from(&cfg.group_by);
        Ok(run_eval(&test, &client, &pipeline)?)
    };
    let run = if icp {
        with_extractor(cfg, Some(&client), |ex| evaluate(Some(ex)))?
    } else {
        evaluate(None)?
    };

    save_records(&run.records, &out_dir.join(RECORDS_FILE))?;
    write_report(&run.report, out_dir)?;
    write_effective_config(cfg, out_dir)?;
    log::info!(
        "{} {}: accuracy {} over {} instance(s), {} network call(s) -> {}",
        cfg.prompt.mode,
        cfg.prompt.shots,
        run.report
            .accuracy
            .map_or_else(|| "undefined".to_string(), |a| format!("{a:.2}%")),
        run.report.total,
        client.network_calls(),
        out_dir.display()
    );
    if run.upstream_exhausted > 0 {
        return Err(UpstreamExhausted(run.upstream_exhausted).into());
    }
    Ok(())
}

fn write_report(report: &EvalReport, dir: &Path) -> Result<()> {
    report.save_json(&dir.join(REPORT_JSON))?;
    corpus::write_file(&dir.join(REPORT_MD), report.to_markdown().as_bytes())?;
    Ok(())
}

pub fn cmd_report(cfg: &RunConfig) -> Result<()> {
    let records_path = existing(&cfg.paths.records, "records file")?;
    let out_dir = required(&cfg.paths.output_dir, "output directory")?;
    ensure_dir(out_dir)?;
    let records = load_records(records_path).with_context(|| format!("reading {}", records_path.display()))?;
    let report = build_report(&records, &cfg.group_by);
    write_report(&report, out_dir)?;
    write_effective_config(cfg, out_dir)?;
    log::info!("report over {} record(s) -> {}", records.len(), out_dir.display());
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_roundtrip() {
        let mut cfg = RunConfig {
            group_by: vec!["discipline".into()],
            ..Default::default()
        };
        cfg.client.backend = BackendKind::Replay;
        cfg.client.fixture = Some("fx.jsonl".into());
        assert_eq!(RunConfig::parse(&cfg.to_toml()).unwrap(), cfg);
    }

    #[test]
    fn partial_config_uses_defaults() {
        let cfg = RunConfig::parse("k = 5\n[prompt]\nmode = \"cot\"\n[client]\nbackend = \"replay\"\n").unwrap();
        assert_eq!(cfg.k, 5);
        assert_eq!(cfg.prompt.mode, PromptMode::Cot);
        assert_eq!(cfg.prompt.shots, Shots::Few);
        assert_eq!(cfg.client.backend, BackendKind::Replay);
        assert!(RunConfig::parse("bogus = 1").is_err());
        assert!(RunConfig::parse("[paths]\nlexcion = \"x\"").is_err());
    }

    #[test]
    fn relative_paths_follow_the_config_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("exp.toml");
        std::fs::write(&path, "[paths]\nlexicon = \"lex.tsv\"\ngraph = \"/abs/g.bin\"\n").unwrap();
        let cfg = RunConfig::load(&path).unwrap();
        assert_eq!(cfg.paths.lexicon.unwrap(), dir.path().join("lex.tsv"));
        assert_eq!(cfg.paths.graph.unwrap(), PathBuf::from("/abs/g.bin"));
    }

    #[test]
    fn flags_parse() {
        let cli = Cli::try_parse_from([
            "seedpad", "run", "--mode", "icp", "--shots", "few", "--k", "7", "--group-by", "a,b",
            "--backend", "replay", "--workers", "3", "--seed", "9",
        ])
        .unwrap();
        assert_eq!(cli.workers, Some(3));
        assert_eq!(cli.backend, Some(BackendKind::Replay));
        let Command::Run(r) = cli.command else { panic!() };
        assert_eq!(r.mode, Some(PromptMode::Icp));
        assert_eq!(r.group_by, ["a", "b"]);
        assert!(Cli::try_parse_from(["seedpad", "run", "--backend", "nope"]).is_err());
    }

    #[test]
    fn exhaustion_maps_to_exit_two() {
        let e: anyhow::Error = UpstreamExhausted(1).into();
        assert_eq!(exit_code(&e), EXIT_UPSTREAM);
        let e: anyhow::Error = LlmError::Exhausted {
            attempts: 3,
            last: "503".into(),
        }
        .into();
        assert_eq!(exit_code(&e.context("annotating")), EXIT_UPSTREAM);
        assert_eq!(exit_code(&anyhow::anyhow!("missing file")), EXIT_FATAL);
    }
}
