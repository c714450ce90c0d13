//! Render one question in every prompting mode, zero- and few-shot.
//!
//! ```text
//! cargo run --example compose_prompts [-- icp few]
//! ```

use std::path::Path;

use seedpad::corpus::{load_dataset, DatasetFormat};
use seedpad::entity::normalize_entity;
use seedpad::prompt::{compose, PromptMode, PromptSpec, Shots};
use seedpad::seeds::{Seed, SeedResult};

fn main() -> anyhow::Result<()> {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/e2e");
    let test = load_dataset(&dir.join("test.jsonl"), DatasetFormat::Jsonl)?;
    let inst = &test.instances()[0];

    let seed = |s: &str, score| Seed {
        entity: normalize_entity(s).unwrap(),
        score,
    };
    let seeds = SeedResult {
        seeds: vec![seed("左旋多巴", 3), seed("多巴胺", 4)],
        k: 10,
    };

    let args: Vec<String> = std::env::args().skip(1).collect();
    let only: Option<(PromptMode, Shots)> = match args.as_slice() {
        [m, s] => Some((m.parse().map_err(anyhow::Error::msg)?, s.parse().map_err(anyhow::Error::msg)?)),
        _ => None,
    };

    for mode in PromptMode::ALL {
        for shots in [Shots::Zero, Shots::Few] {
            if only.is_some_and(|o| o != (mode, shots)) {
                continue;
            }
            let spec = PromptSpec::new(mode, shots);
            let p = compose(inst, &spec, (mode == PromptMode::Icp).then_some(&seeds))?;
            println!(
                "===== {mode} / {shots}: ~{} tokens, {} exemplar(s) =====",
                p.estimated_tokens, p.exemplars_used
            );
            if shots == Shots::Zero || only.is_some() {
                println!("{}\n", p.text);
            }
        }
    }
    Ok(())
}
