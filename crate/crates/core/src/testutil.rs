use crate::model::{GearModel, ModelConfig};
use crate::records::Triple;
use crate::text::Vocabulary;

pub const CORPUS: &str = "the cat sat on the mat . a dog ran in the park while birds sang above the river bank";

pub fn vocab() -> Vocabulary {
    Vocabulary::build([CORPUS], 100, 1).unwrap()
}

pub fn tiny_config(v: &Vocabulary) -> ModelConfig {
    ModelConfig {
        hidden: 16,
        layers: 2,
        heads: 2,
        ffn: 32,
        vocab_size: v.len(),
        max_positions: 32,
        decoder_layers: 2,
        local_layer: 1,
        ..ModelConfig::default()
    }
}

pub fn tiny_model(seed: u64) -> GearModel<f64> {
    let v = vocab();
    GearModel::new(tiny_config(&v), v, seed).unwrap()
}

pub fn triples() -> Vec<Triple> {
    let docs = [
        ("d0", "The cat sat on the mat. Birds sang.", "cat mat", 0),
        ("d1", "A dog ran in the park. The river bank.", "dog park", 0),
        ("d2", "Birds sang above the river. A cat sat.", "birds river", 0),
        ("d3", "The dog sat. A cat ran while birds sang.", "cat birds", 1),
    ];
    docs.iter()
        .map(|&(id, text, q, u)| {
            let doc = crate::text::Document::new(id, text);
            Triple {
                query: q.into(),
                doc_id: id.into(),
                doc_text: text.into(),
                unit_index: u,
                target: doc.sentence(u).to_string(),
            }
        })
        .collect()
}
