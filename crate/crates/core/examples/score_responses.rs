//! Answer extraction, BLEU/ROUGE and seed-quality scoring on hand-made
//! responses.
//!
//! ```text
//! cargo run --example score_responses
//! ```

use std::collections::BTreeSet;

use seedpad::corpus::Label;
use seedpad::entity::{normalize_entity, Entity};
use seedpad::metrics::{extract_answer, seed_quality, TextMetrics};

fn main() {
    let labels: BTreeSet<Label> = Label::ALL.into_iter().collect();
    for response in [
        "……所以答案是B。",
        "Answer: D",
        "分析如下。\nC",
        "首先排除A。综合考虑应选E。",
        "既可能是A也可能是C",
        "The answer is amantadine.",
    ] {
        println!("{:<28} -> {}", response.replace('\n', "\\n"), extract_answer(response, &labels));
    }

    let reference = "老年患者首选复方左旋多巴补充脑内多巴胺。";
    let response = "老年帕金森病患者首选左旋多巴。";
    let m = TextMetrics::compute(response, reference);
    println!("\nreference: {reference}\nresponse:  {response}");
    println!(
        "BLEU-1..4 {:.4} {:.4} {:.4} {:.4}; ROUGE-1 {:.2}, ROUGE-2 {:.2}, ROUGE-L {:.2}; length {}",
        m.bleu_1, m.bleu_2, m.bleu_3, m.bleu_4, m.rouge_1, m.rouge_2, m.rouge_l, m.length
    );

    let set = |xs: &[&str]| -> BTreeSet<Entity> { xs.iter().map(|s| normalize_entity(s).unwrap()).collect() };
    let q = seed_quality(&set(&["c", "d"]), &set(&["c", "x", "y"]));
    println!(
        "\nseeds {{c, d}} vs gold {{c, x, y}}: P {:.4} R {:.4} F1 {:.4}",
        q.precision, q.recall, q.f1
    );
}
