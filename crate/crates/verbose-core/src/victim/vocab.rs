//! Word-level vocabulary for the toy captioner.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use super::VictimError;

/// Color words, in canonical caption order.
pub const COLOR_WORDS: [&str; 6] = ["red", "green", "blue", "yellow", "purple", "orange"];

/// Canonical shape nouns, in canonical caption order.
pub const SHAPE_WORDS: [&str; 5] = ["circle", "square", "triangle", "diamond", "cross"];

/// Shape synonyms present in the vocabulary, mapped to their canonical noun.
pub const SHAPE_SYNONYMS: [(&str, &str); 3] = [("box", "square"), ("dot", "circle"), ("gem", "diamond")];

const FILLER_WORDS: [&str; 45] = [
    "what", "color", "is", "the", "there", "shape", "object", "scene", "image", "picture",
    "background", "small", "large", "bright", "dark", "one", "two", "three", "many", "on", "in",
    "at", "left", "right", "top", "bottom", "near", "far", "moving", "still", "slow", "fast",
    "how", "why", "where", "it", "this", "that", "no", "yes", "not", "very", "quite", "also",
    "with",
];

/// Token inventory: id ↔ word plus the special BOS/EOS/PAD ids.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct VocabSpec {
    tokens: Vec<String>,
    bos_id: u32,
    eos_id: u32,
    pad_id: u32,
}

impl VocabSpec {
    /// The fixed 64-word shape-world vocabulary.
    pub fn shape_world() -> Self {
        let mut tokens: Vec<String> = Vec::with_capacity(64);
        tokens.push("<pad>".to_string());
        tokens.push("<bos>".to_string());
        tokens.push("<eos>".to_string());
        tokens.push("a".to_string());
        tokens.push("and".to_string());
        tokens.extend(COLOR_WORDS.iter().map(|w| w.to_string()));
        tokens.extend(SHAPE_WORDS.iter().map(|w| w.to_string()));
        tokens.extend(SHAPE_SYNONYMS.iter().map(|(w, _)| w.to_string()));
        tokens.extend(FILLER_WORDS.iter().map(|w| w.to_string()));
        debug_assert_eq!(tokens.len(), 64);
        VocabSpec {
            tokens,
            pad_id: 0,
            bos_id: 1,
            eos_id: 2,
        }
    }

    /// Synthetic vocabulary of `size ≥ 4` generic tokens, for reduced test
    /// victims where caption text is irrelevant.
    pub fn synthetic(size: usize) -> Self {
        assert!(size >= 4, "synthetic vocabulary needs at least 4 tokens");
        let mut tokens = Vec::with_capacity(size);
        tokens.push("<pad>".to_string());
        tokens.push("<bos>".to_string());
        tokens.push("<eos>".to_string());
        for i in 3..size {
            tokens.push(format!("t{i}"));
        }
        VocabSpec {
            tokens,
            pad_id: 0,
            bos_id: 1,
            eos_id: 2,
        }
    }

    pub fn size(&self) -> usize {
        self.tokens.len()
    }

    pub fn bos_id(&self) -> u32 {
        self.bos_id
    }

    pub fn eos_id(&self) -> u32 {
        self.eos_id
    }

    pub fn pad_id(&self) -> u32 {
        self.pad_id
    }

    pub fn token(&self, id: u32) -> &str {
        &self.tokens[id as usize]
    }

    pub fn lookup(&self, word: &str) -> Option<u32> {
        self.tokens.iter().position(|t| t == word).map(|i| i as u32)
    }

    /// Join non-special tokens with spaces.
    pub fn render(&self, ids: &[u32]) -> String {
        let words: Vec<&str> = ids
            .iter()
            .filter(|&&id| id != self.bos_id && id != self.eos_id && id != self.pad_id)
            .map(|&id| self.token(id))
            .collect();
        words.join(" ")
    }

    /// Whitespace tokenization against the vocabulary; unknown words error.
    pub fn tokenize(&self, text: &str) -> Result<Vec<u32>, VictimError> {
        text.split_whitespace()
            .map(|w| {
                self.lookup(w).ok_or(VictimError::TokenOutOfRange {
                    id: u32::MAX,
                    vocab: self.size(),
                })
            })
            .collect()
    }
}
