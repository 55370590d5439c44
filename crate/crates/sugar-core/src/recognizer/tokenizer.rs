use std::collections::{BTreeMap, BTreeSet};

use crate::error::{Result, SugarError};

pub const BOS: &str = "<BOS>";
pub const EOS: &str = "<EOS>";
pub const ACT: &str = "<ACT>";

/// Whitespace tokenizer over a closed vocabulary. Specials come first, the
/// rest is sorted, so ids are stable for a given text corpus.
#[derive(Debug, Clone)]
pub struct Tokenizer {
    vocab: Vec<String>,
    index: BTreeMap<String, usize>,
}

impl Tokenizer {
    pub fn build<'a, I: IntoIterator<Item = &'a str>>(texts: I) -> Self {
        let mut words = BTreeSet::new();
        for text in texts {
            for token in text.split_whitespace() {
                if token != BOS && token != EOS && token != ACT {
                    words.insert(token.to_string());
                }
            }
        }
        let mut vocab = vec![BOS.to_string(), EOS.to_string(), ACT.to_string()];
        vocab.extend(words);
        let index = vocab
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        Self { vocab, index }
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab.len()
    }

    pub fn vocab(&self) -> &[String] {
        &self.vocab
    }

    pub fn id(&self, token: &str) -> Result<usize> {
        self.index
            .get(token)
            .copied()
            .ok_or_else(|| SugarError::Vocab(format!("unknown token {token:?}")))
    }

    pub fn token(&self, id: usize) -> &str {
        &self.vocab[id]
    }

    pub fn bos(&self) -> usize {
        0
    }

    pub fn eos(&self) -> usize {
        1
    }

    pub fn act(&self) -> usize {
        2
    }

    pub fn encode(&self, text: &str) -> Result<Vec<usize>> {
        text.split_whitespace().map(|t| self.id(t)).collect()
    }

    pub fn decode(&self, ids: &[usize]) -> String {
        ids.iter()
            .map(|&i| self.vocab[i].as_str())
            .collect::<Vec<_>>()
            .join(" ")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_reproduces_whitespace_normalized_text() {
        let tok = Tokenizer::build(["the hand rises toward the mouth"]);
        let ids = tok.encode("the hand rises toward the mouth").unwrap();
        assert_eq!(tok.decode(&ids), "the hand rises toward the mouth");
    }

    #[test]
    fn unknown_token_is_vocab_error() {
        let tok = Tokenizer::build(["alpha beta"]);
        assert!(matches!(tok.encode("gamma"), Err(SugarError::Vocab(_))));
    }

    #[test]
    fn specials_have_fixed_ids() {
        let tok = Tokenizer::build(["alpha"]);
        assert_eq!(tok.id(BOS).unwrap(), 0);
        assert_eq!(tok.id(EOS).unwrap(), 1);
        assert_eq!(tok.id(ACT).unwrap(), 2);
    }

    #[test]
    fn vocabulary_is_order_independent() {
        let a = Tokenizer::build(["b a", "c"]);
        let b = Tokenizer::build(["c", "a b"]);
        assert_eq!(a.vocab(), b.vocab());
    }
}
