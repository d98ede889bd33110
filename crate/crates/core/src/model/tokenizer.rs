use alloc::collections::BTreeMap;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

pub const PAD: u32 = 0;
pub const BOS: u32 = 1;
pub const EOS: u32 = 2;
pub const UNK: u32 = 3;

const RESERVED: [&str; 4] = ["<pad>", "<bos>", "<eos>", "<unk>"];

/// Whitespace tokenizer with lowercase folding.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(from = "TokenizerRepr", into = "TokenizerRepr")]
pub struct Tokenizer {
    vocab: Vec<String>,
    index: BTreeMap<String, u32>,
}

#[derive(Serialize, Deserialize)]
struct TokenizerRepr {
    vocabulary: Vec<String>,
}

impl From<TokenizerRepr> for Tokenizer {
    fn from(r: TokenizerRepr) -> Self {
        Self::from_vocabulary(r.vocabulary)
    }
}

impl From<Tokenizer> for TokenizerRepr {
    fn from(t: Tokenizer) -> Self {
        TokenizerRepr { vocabulary: t.vocab }
    }
}

/// A tokenized text: `BOS tokens EOS` padded with `PAD` to a fixed length.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Encoded {
    pub ids: Vec<u32>,
    pub eos: usize,
}

impl Encoded {
    /// `BOS .. EOS`, the part the encoder actually reads.
    pub fn active(&self) -> &[u32] {
        &self.ids[..=self.eos]
    }

    /// Content tokens between `BOS` and `EOS`.
    pub fn content(&self) -> &[u32] {
        &self.ids[1..self.eos]
    }
}

pub fn split_words(text: &str) -> impl Iterator<Item = String> + '_ {
    text.split_whitespace().map(|w| w.to_lowercase())
}

impl Tokenizer {
    /// Vocabulary from a list of id-ordered tokens (reserved tokens first).
    pub fn from_vocabulary(vocab: Vec<String>) -> Self {
        let index = vocab
            .iter()
            .enumerate()
            .map(|(i, w)| (w.clone(), i as u32))
            .collect();
        Self { vocab, index }
    }

    /// Build from a corpus. Ids after the reserved ones follow sorted order.
    pub fn build<'a>(corpus: impl IntoIterator<Item = &'a str>) -> Self {
        let mut words = alloc::collections::BTreeSet::new();
        for text in corpus {
            for w in split_words(text) {
                if !RESERVED.contains(&w.as_str()) {
                    words.insert(w);
                }
            }
        }
        let vocab = RESERVED
            .iter()
            .map(|s| s.to_string())
            .chain(words)
            .collect();
        Self::from_vocabulary(vocab)
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab.len()
    }

    pub fn vocabulary(&self) -> &[String] {
        &self.vocab
    }

    pub fn id(&self, word: &str) -> u32 {
        self.index.get(word).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: u32) -> &str {
        self.vocab
            .get(id as usize)
            .map(String::as_str)
            .unwrap_or(RESERVED[UNK as usize])
    }

    /// Content ids of `text`, without `BOS`/`EOS`.
    pub fn encode_words(&self, text: &str) -> Vec<u32> {
        split_words(text).map(|w| self.id(&w)).collect()
    }

    pub fn decode(&self, ids: &[u32]) -> String {
        let mut out = String::new();
        for (i, &id) in ids.iter().enumerate() {
            if i > 0 {
                out.push(' ');
            }
            out.push_str(self.token(id));
        }
        out
    }

    /// `BOS + tokens + EOS`, truncated and padded to `max_len`.
    pub fn encode(&self, text: &str, max_len: usize) -> Result<Encoded> {
        if max_len < 3 {
            return Err(invalid("max_seq_len must leave room for BOS, a token and EOS"));
        }
        let words = self.encode_words(text);
        if words.is_empty() {
            return Err(invalid("cannot encode an empty text"));
        }
        let keep = words.len().min(max_len - 2);
        let mut ids = vec![PAD; max_len];
        ids[0] = BOS;
        ids[1..=keep].copy_from_slice(&words[..keep]);
        ids[keep + 1] = EOS;
        Ok(Encoded { ids, eos: keep + 1 })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn tok() -> Tokenizer {
        Tokenizer::build(["A red Dog", "blue dog sits", "the red sun"])
    }

    #[test]
    fn reserved_ids() {
        let t = tok();
        assert_eq!(t.id("<pad>"), PAD);
        assert_eq!(t.id("<eos>"), EOS);
        assert_eq!(t.id("zebra"), UNK);
        assert_eq!(t.vocab_size(), 4 + 7);
    }

    #[test]
    fn encode_pads_and_records_eos() {
        let t = tok();
        let e = t.encode("Red DOG", 8).unwrap();
        assert_eq!(e.eos, 3);
        assert_eq!(e.ids[0], BOS);
        assert_eq!(e.ids[3], EOS);
        assert!(e.ids[4..].iter().all(|&i| i == PAD));
        assert_eq!(t.decode(e.content()), "red dog");
    }

    #[test]
    fn encode_truncates_to_fit_eos() {
        let t = tok();
        let e = t.encode("red dog red dog red dog", 5).unwrap();
        assert_eq!(e.ids.len(), 5);
        assert_eq!(e.eos, 4);
        assert_eq!(e.content().len(), 3);
    }

    #[test]
    fn empty_text_rejected() {
        assert!(tok().encode("   ", 8).is_err());
    }

    proptest! {
        #[test]
        fn encode_decode_roundtrip(ids in proptest::collection::vec(4u32..11, 1..20)) {
            let t = tok();
            let text = t.decode(&ids);
            prop_assert_eq!(t.encode_words(&text), ids);
        }
    }
}
