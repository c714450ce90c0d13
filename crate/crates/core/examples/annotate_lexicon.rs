//! Load a corpus, filter and split it, then tag entities with a lexicon.
//!
//! ```text
//! cargo run --example annotate_lexicon
//! ```

use std::path::Path;

use seedpad::corpus::{filter_with, load_dataset, split_stratified, DatasetFormat, FilterConfig};
use seedpad::entity::{annotate_dataset, annotated_to_jsonl, AnnotateOptions, Lexicon};

fn main() -> anyhow::Result<()> {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/e2e");
    let corpus = load_dataset(&dir.join("train.jsonl"), DatasetFormat::Jsonl)?;
    let lexicon = Lexicon::load(&dir.join("lexicon.tsv"))?;
    println!("{} instances, {} lexicon entries", corpus.n(), lexicon.len());

    // the synthetic analyses are short, so relax the word threshold
    let kept = filter_with(
        &corpus,
        &FilterConfig {
            min_analysis_words: 20,
            ..FilterConfig::default()
        },
    );
    println!("{} pass the 5-option / >20-word filter", kept.n());

    let split = split_stratified(&kept, 12, 42, "discipline")?;
    println!("train {} / test {}", split.train.n(), split.test.n());

    let annotation = annotate_dataset(&split.train, &lexicon, AnnotateOptions::default())?;
    let first = &annotation.instances[0];
    println!("\n{}", first.base.question_with_options());
    println!("question/option entities: {:?}", first.qo_entities);
    println!("analysis entities:        {:?}", first.r_entities);
    let bytes = annotated_to_jsonl(&annotation.instances).len();
    println!("\nannotated file would be {bytes} bytes");
    Ok(())
}
