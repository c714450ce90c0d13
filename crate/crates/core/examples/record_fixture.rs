//! Records a replay fixture for an evaluation config.
//!
//! ```text
//! cargo run --example record_fixture -- <config.toml> <train.jsonl> <out.jsonl> [scripted.jsonl]
//! ```
//!
//! The graph is built from `train.jsonl` with the config's lexicon. Without a
//! scripted responses file the config's backend (live or cached-live) answers
//! and every response is captured. With one, each prompt is answered by the
//! line `{"id": ..., "response": ...}` whose test question ends the prompt,
//! which is how the bundled end-to-end fixture was produced.

use std::collections::HashMap;
use std::path::Path;
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use seedpad::cli::{prompt_spec, RunConfig};
use seedpad::corpus::{load_dataset, Dataset, DatasetFormat};
use seedpad::entity::{annotate_dataset, AnnotateOptions, Lexicon};
use seedpad::eval::{run_eval, PipelineConfig};
use seedpad::graph::build_graph;
use seedpad::llm::{Backend, Client, CompletionRequest, CompletionResponse, LlmError, Recorder};

struct Scripted {
    by_question: HashMap<String, String>,
}

impl Backend for Scripted {
    fn complete(&self, req: &CompletionRequest) -> Result<CompletionResponse, LlmError> {
        let target = req
            .prompt
            .rsplit("question: ")
            .next()
            .and_then(|block| block.lines().next())
            .unwrap_or_default();
        self.by_question
            .get(target)
            .map(|r| CompletionResponse::text(r.clone()))
            .ok_or_else(|| LlmError::InvalidResponse(format!("no scripted response for {target:?}")))
    }
}

fn scripted(path: &Path, test: &Dataset) -> Result<Scripted> {
    #[derive(serde::Deserialize)]
    struct Line {
        id: String,
        response: String,
    }
    let text = std::fs::read_to_string(path)?;
    let mut by_question = HashMap::new();
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        let l: Line = serde_json::from_str(line)?;
        let inst = test.get(&l.id).with_context(|| format!("unknown id {}", l.id))?;
        by_question.insert(inst.question.clone(), l.response);
    }
    Ok(Scripted { by_question })
}

fn main() -> Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    if !(3..=4).contains(&args.len()) {
        bail!("usage: record_fixture <config.toml> <train.jsonl> <out.jsonl> [scripted.jsonl]");
    }
    let cfg = RunConfig::load(Path::new(&args[0]))?;
    let lexicon = Lexicon::load(cfg.paths.lexicon.as_deref().context("config needs paths.lexicon")?)?;
    let test = load_dataset(
        cfg.paths.dataset.as_deref().context("config needs paths.dataset")?,
        DatasetFormat::Jsonl,
    )?;
    let train = load_dataset(Path::new(&args[1]), DatasetFormat::Jsonl)?;
    let annotated = annotate_dataset(&train, &lexicon, AnnotateOptions::default())?;
    let graph = build_graph(&annotated.instances);

    let inner: Box<dyn Backend> = match args.get(3) {
        Some(p) => Box::new(scripted(Path::new(p), &test)?),
        None => cfg.client.build_backend()?,
    };
    let recorder = Arc::new(Recorder::new(inner));
    let client = Client::with_backend(&cfg.client, Box::new(Arc::clone(&recorder)));

    let mut pipeline = PipelineConfig::new(prompt_spec(&cfg)?);
    pipeline.graph = Some(&graph);
    pipeline.extractor = Some(&lexicon);
    pipeline.k = cfg.k;
    pipeline.workers = cfg.workers;
    let run = run_eval(&test, &client, &pipeline)?;
    if let Some(failed) = run.records.iter().find(|r| r.error.is_some()) {
        bail!("{}: {}", failed.id, failed.error.as_deref().unwrap_or_default());
    }

    let fixture = recorder.fixture();
    fixture.save(Path::new(&args[2]))?;
    eprintln!(
        "recorded {} response(s); accuracy {:?} -> {}",
        fixture.len(),
        run.report.accuracy,
        args[2]
    );
    Ok(())
}
