//! Build the co-occurrence graph for a three-instance corpus, inspect edge
//! weights, and round-trip it through the binary graph format.
//!
//! ```text
//! cargo run --example build_graph
//! ```

use std::collections::BTreeSet;

use seedpad::corpus::Instance;
use seedpad::entity::{normalize_entity, AnnotatedInstance, Entity};
use seedpad::graph::{build_graph, load_graph, save_graph};

fn set(items: &[&str]) -> BTreeSet<Entity> {
    items.iter().map(|s| normalize_entity(s).unwrap()).collect()
}

fn annotated(id: &str, qo: &[&str], r: &[&str]) -> AnnotatedInstance {
    let base: Instance = serde_json::from_value(serde_json::json!({
        "id": id, "question": "?", "options": {"A": "x", "B": "y"},
        "answer": "A", "analysis": "..."
    }))
    .unwrap();
    AnnotatedInstance {
        base,
        qo_entities: set(qo),
        r_entities: set(r),
    }
}

fn main() -> anyhow::Result<()> {
    let train = [
        annotated("I1", &["a", "b"], &["c", "d"]),
        annotated("I2", &["a"], &["c"]),
        annotated("I3", &["b", "e"], &["d"]),
    ];
    let g = build_graph(&train);
    println!("m = {}, {} edges", g.m(), g.edge_count());
    for (src, dst, count, weight) in g.edges() {
        println!("  {src} -> {dst}: count {count}, weight {weight:.7}");
    }
    for e in g.nodes() {
        let n = g.neighbors(e);
        let list: Vec<String> = n.targets.iter().map(|(t, w)| format!("{t} ({w:.5})")).collect();
        println!("neighbors({e}) = [{}]", list.join(", "));
    }

    let dir = tempfile::tempdir()?;
    let path = dir.path().join("toy.graph");
    save_graph(&g, &path)?;
    let back = load_graph(&path)?;
    println!("\nsaved {} bytes; reload equal: {}", std::fs::metadata(&path)?.len(), back == g);
    Ok(())
}
