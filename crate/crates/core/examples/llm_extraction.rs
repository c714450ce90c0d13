//! Prompt-based entity extraction. A canned backend stands in for the model
//! so the example runs offline; swap in `ClientConfig` with a live backend
//! to use a real endpoint.
//!
//! ```text
//! cargo run --example llm_extraction
//! ```

use seedpad::entity::{EntityExtractor, ExtractionExemplar, LlmExtractor};
use seedpad::llm::{Backend, Client, CompletionRequest, CompletionResponse, LlmError};

/// Answers with a fixed entity list depending on the text being annotated.
struct Canned;

impl Backend for Canned {
    fn complete(&self, req: &CompletionRequest) -> Result<CompletionResponse, LlmError> {
        let target = req.prompt.rsplit("Text: ").next().unwrap_or_default();
        let reply = if target.contains("震颤") {
            "Entities: 帕金森病、静止性震颤, 左旋多巴"
        } else if target.contains("胸痛") {
            "实体：急性心肌梗死；胸痛；阿司匹林"
        } else {
            "no entities found"
        };
        Ok(CompletionResponse::text(reply))
    }
}

fn main() -> anyhow::Result<()> {
    let client = Client::new(Box::new(Canned), "stand-in", 2);
    let exemplars = vec![ExtractionExemplar {
        text: "患者多饮、多尿，空腹血糖升高，予二甲双胍。".into(),
        entities: vec!["多饮".into(), "多尿".into(), "空腹血糖".into(), "二甲双胍".into()],
    }];
    let extractor = LlmExtractor::new(&client, exemplars)?;
    println!("--- prompt ---\n{}\n--------------", extractor.prompt("老年患者静止性震颤"));

    for text in ["老年患者静止性震颤，首选左旋多巴。", "突发胸痛3小时。", "今天天气很好。"] {
        println!("{text} -> {:?}", extractor.extract(text)?);
    }
    Ok(())
}
