//! Word-level tokenizer for the toy backbone: a fixed word list followed by
//! hashed buckets, so any text tokenizes deterministically.

use super::lora::fnv1a;
use super::{SpecialTokens, TokenId};

const WORDS: &[&str] = &[
    "a", "an", "the", "of", "on", "in", "under", "with", "and", "at", "photo", "picture",
    "image", "render", "object", "bird", "dove", "eagle", "parrot", "wings", "wing", "two",
    "flying", "rainy", "sunny", "day", "night", "chair", "acropolis", "forest", "snow",
    "beach", "times", "square", "department", "store", "dog", "cat", "horse", "car", "truck",
    "white", "gray", "grey", "brown", "black", "red", "blue", "green", "yellow", "colorful",
    "sand", "sky", "room", "office", "comfortable", "disc", "ball", "sphere", "toy", "light",
    "shadow", "left", "right", "top", "bottom", "sks",
];

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ToyTokenizer {
    vocab_size: usize,
}

impl ToyTokenizer {
    pub const PAD: TokenId = 0;
    pub const BOS: TokenId = 1;
    pub const EOS: TokenId = 2;
    pub const PLACEHOLDER: TokenId = 3;
    const FIRST_WORD: usize = 4;

    pub fn new(vocab_size: usize) -> Self {
        assert!(
            vocab_size > Self::FIRST_WORD + WORDS.len() + 16,
            "vocabulary too small for the word list"
        );
        Self { vocab_size }
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub fn special_tokens(&self) -> SpecialTokens {
        SpecialTokens {
            bos: Self::BOS,
            eos: Self::EOS,
            pad: Self::PAD,
            placeholder: Self::PLACEHOLDER,
        }
    }

    /// Lower-cases, splits on anything that is not alphanumeric, and maps
    /// each word to one id.
    pub fn tokenize(&self, text: &str) -> Vec<TokenId> {
        text.split(|c: char| !c.is_alphanumeric())
            .filter(|w| !w.is_empty())
            .map(|w| self.word_id(&w.to_lowercase()))
            .collect()
    }

    fn word_id(&self, word: &str) -> TokenId {
        if let Some(i) = WORDS.iter().position(|w| *w == word) {
            return (Self::FIRST_WORD + i) as TokenId;
        }
        let first_bucket = Self::FIRST_WORD + WORDS.len();
        let buckets = (self.vocab_size - first_bucket) as u64;
        (first_bucket as u64 + fnv1a(word.as_bytes()) % buckets) as TokenId
    }
}
