//! Full evaluation against the bundled replay fixture: annotate, build the
//! graph, mine seeds, prompt, score and report. No network access.
//!
//! ```text
//! cargo run --example replay_eval
//! ```

use std::path::Path;

use seedpad::corpus::{load_dataset, DatasetFormat};
use seedpad::entity::{annotate_dataset, AnnotateOptions, Lexicon};
use seedpad::eval::{run_eval, PipelineConfig};
use seedpad::graph::build_graph;
use seedpad::llm::{BackendKind, Client, ClientConfig};
use seedpad::prompt::{PromptMode, PromptSpec, Shots};

fn main() -> anyhow::Result<()> {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/e2e");
    let lexicon = Lexicon::load(&dir.join("lexicon.tsv"))?;
    let train = load_dataset(&dir.join("train.jsonl"), DatasetFormat::Jsonl)?;
    let test = load_dataset(&dir.join("test.jsonl"), DatasetFormat::Jsonl)?;
    let graph = build_graph(&annotate_dataset(&train, &lexicon, AnnotateOptions::default())?.instances);

    let client = Client::from_config(&ClientConfig {
        backend: BackendKind::Replay,
        fixture: Some(dir.join("replay.jsonl")),
        ..ClientConfig::default()
    })?;
    let mut cfg = PipelineConfig::new(PromptSpec::new(PromptMode::Icp, Shots::Few));
    cfg.graph = Some(&graph);
    cfg.extractor = Some(&lexicon);
    cfg.workers = 4;
    cfg.group_by = vec!["discipline".into(), "type".into()];

    let run = run_eval(&test, &client, &cfg)?;
    for r in run.records.iter().filter(|r| !r.correct) {
        println!("{}: gold {}, extracted {}", r.id, r.gold, r.extracted);
    }
    println!("\n{}", run.report.to_markdown());
    println!("network calls: {}", client.network_calls());
    Ok(())
}
