//! Captions: a fixed word vocabulary and a learned embedding table.

use candle_core::{Device, Module, Tensor};
use candle_nn::{Embedding, Init, VarBuilder};

use crate::error::Result;

const VOCAB: &[&str] = &[
    "[pad]", "[unk]", "a", "an", "the", "of", "in", "on", "with", "and", "style", "[vcp]", "[stv]", "[stp]", "image",
    "photo", "painting", "sketch", "drawing", "picture", "circle", "square", "triangle", "ring", "cross", "diamond",
    "bar", "blob", "stripes", "dots", "checker", "waves", "red", "green", "blue", "yellow", "orange", "purple", "pink",
    "cyan", "black", "white", "gray", "brown", "bright", "dark", "small", "large", "big", "tiny", "dog", "cat",
    "house", "tree", "person", "face", "car", "flower", "bird", "sky", "sea", "city",
];

/// Lower-cases, splits on whitespace, strips surrounding punctuation (but
/// keeps bracketed placeholder tokens), then maps into the fixed vocabulary.
#[derive(Debug, Clone, Default)]
pub struct Tokenizer;

impl Tokenizer {
    pub const PAD: u32 = 0;
    pub const UNK: u32 = 1;

    pub fn vocab_size(&self) -> usize {
        VOCAB.len()
    }

    pub fn encode(&self, text: &str, len: usize) -> Vec<u32> {
        let mut ids: Vec<u32> = text
            .split_whitespace()
            .map(|w| {
                let w = w.to_lowercase();
                let w = w.trim_matches(|c: char| !c.is_alphanumeric() && c != '[' && c != ']');
                VOCAB.iter().position(|v| *v == w).map_or(Self::UNK, |i| i as u32)
            })
            .take(len)
            .collect();
        ids.resize(len, Self::PAD);
        ids
    }

    pub fn encode_batch(&self, texts: &[&str], len: usize, device: &Device) -> Result<Tensor> {
        let ids: Vec<u32> = texts.iter().flat_map(|t| self.encode(t, len)).collect();
        Ok(Tensor::from_vec(ids, (texts.len(), len), device)?)
    }
}

/// Token embeddings plus learned positions, shape (B, len, dim).
#[derive(Debug, Clone)]
pub struct TextEncoder {
    embedding: Embedding,
    positions: Tensor,
}

impl TextEncoder {
    pub fn new(vocab: usize, len: usize, dim: usize, vb: VarBuilder) -> candle_core::Result<Self> {
        let table = vb.get_with_hints((vocab, dim), "embedding.weight", Init::Randn { mean: 0., stdev: 1. })?;
        let positions = vb.get_with_hints((len, dim), "positions", Init::Randn { mean: 0., stdev: 0.02 })?;
        Ok(Self {
            embedding: Embedding::new(table, dim),
            positions,
        })
    }

    pub fn forward(&self, ids: &Tensor) -> candle_core::Result<Tensor> {
        self.embedding.forward(ids)?.broadcast_add(&self.positions)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn encodes_known_and_unknown_words() {
        let t = Tokenizer;
        let ids = t.encode("A [vcp] in zebra style.", 8);
        assert_eq!(ids.len(), 8);
        assert_eq!(ids[0], 2);
        assert_eq!(ids[1], 11);
        assert_eq!(ids[3], Tokenizer::UNK);
        assert_eq!(ids[4], 10);
        assert_eq!(ids[5], Tokenizer::PAD);
    }

    #[test]
    fn truncates() {
        assert_eq!(Tokenizer.encode("a a a a a", 3), vec![2, 2, 2]);
    }
}
