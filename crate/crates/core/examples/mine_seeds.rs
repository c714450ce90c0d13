//! Mine knowledge seeds for a new question from a graph built on the bundled
//! synthetic training set.
//!
//! ```text
//! cargo run --example mine_seeds -- "患者发热伴咳嗽3天，胸部X线示肺实变。"
//! ```

use std::path::Path;

use seedpad::corpus::{load_dataset, DatasetFormat};
use seedpad::entity::{annotate_dataset, extract_entities_lexicon, AnnotateOptions, Lexicon};
use seedpad::graph::build_graph;
use seedpad::seeds::{mine_seeds, rank_of, SeedQuery};

fn main() -> anyhow::Result<()> {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/e2e");
    let lexicon = Lexicon::load(&dir.join("lexicon.tsv"))?;
    let train = load_dataset(&dir.join("train.jsonl"), DatasetFormat::Jsonl)?;
    let graph = build_graph(&annotate_dataset(&train, &lexicon, AnnotateOptions::default())?.instances);

    let question = std::env::args()
        .nth(1)
        .unwrap_or_else(|| "患者，女，62岁，多饮、多尿半年，体重下降。".to_string());
    let query: SeedQuery = extract_entities_lexicon(&question, &lexicon).into_iter().collect();
    println!("question: {question}");
    println!("query entities: {:?}", query.x_entities);

    let result = mine_seeds(&graph, &query, 10);
    if result.is_empty() {
        println!("no seeds: none of the query entities has out-edges");
    }
    for (i, seed) in result.seeds.iter().enumerate() {
        let ranks: Vec<String> = query
            .x_entities
            .iter()
            .map(|x| format!("{x}:{}", rank_of(&graph, x, &seed.entity).value()))
            .collect();
        println!("{:>2}. {} score {} ({})", i + 1, seed.entity, seed.score, ranks.join(" "));
    }
    Ok(())
}
