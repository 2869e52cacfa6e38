//! Tokenization: a vocabulary built from a corpus, character-level by
//! default, with a reserved unknown token that doubles as left padding.

use alloc::collections::BTreeMap;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::math::Fnv64;

/// Reserved id 0: unknown token, also used to left-pad short contexts.
pub const UNK: u32 = 0;

pub const UNK_TOKEN: &str = "<unk>";

/// How raw text is segmented into tokens.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Tokenizer {
    /// One token per character (the default).
    Char,
    /// Whitespace-separated words.
    Whitespace,
}

/// A frozen token table. Ids are dense, `UNK` is always id 0, and the rest
/// are sorted so the same text always produces the same table.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: BTreeMap<String, u32>,
    tokenizer: Tokenizer,
}

impl Vocabulary {
    /// Collect the distinct tokens of `text` (sorted) behind the reserved
    /// unknown token.
    pub fn build(text: &str, tokenizer: Tokenizer) -> Vocabulary {
        let mut distinct: Vec<String> = match tokenizer {
            Tokenizer::Char => text
                .lines()
                .flat_map(|l| l.chars())
                .map(|c| c.to_string())
                .collect(),
            Tokenizer::Whitespace => text.split_whitespace().map(|t| t.to_string()).collect(),
        };
        distinct.sort_unstable();
        distinct.dedup();
        distinct.retain(|t| t != UNK_TOKEN);

        let mut tokens = Vec::with_capacity(distinct.len() + 1);
        tokens.push(UNK_TOKEN.to_string());
        tokens.extend(distinct);
        let index = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as u32))
            .collect();
        Vocabulary {
            tokens,
            index,
            tokenizer,
        }
    }

    /// Rebuild a table from a stored token list. The unknown token must sit
    /// at id 0 and entries must be distinct.
    pub fn from_tokens(tokens: Vec<String>, tokenizer: Tokenizer) -> Result<Vocabulary> {
        if tokens.is_empty() {
            return Err(Error::EmptyInput("vocabulary token list"));
        }
        if tokens[0] != UNK_TOKEN {
            return Err(Error::Invalid(alloc::format!(
                "vocabulary must reserve id 0 for {UNK_TOKEN:?}, found {:?}",
                tokens[0]
            )));
        }
        let mut index = BTreeMap::new();
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i as u32).is_some() {
                return Err(Error::Invalid(alloc::format!("duplicate token {t:?}")));
            }
        }
        Ok(Vocabulary {
            tokens,
            index,
            tokenizer,
        })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokenizer(&self) -> Tokenizer {
        self.tokenizer
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    /// Id of `piece`, or `UNK` when out of vocabulary.
    pub fn id(&self, piece: &str) -> u32 {
        self.index.get(piece).copied().unwrap_or(UNK)
    }

    /// Map text to ids; unknown pieces become `UNK`.
    pub fn tokenize(&self, text: &str) -> Vec<u32> {
        match self.tokenizer {
            Tokenizer::Char => {
                let mut buf = [0u8; 4];
                text.chars()
                    .map(|c| self.id(c.encode_utf8(&mut buf)))
                    .collect()
            }
            Tokenizer::Whitespace => text.split_whitespace().map(|t| self.id(t)).collect(),
        }
    }

    /// Map ids back to text. Char vocabularies concatenate, whitespace
    /// vocabularies join with single spaces. Out-of-range ids are an error.
    pub fn detokenize(&self, ids: &[u32]) -> Result<String> {
        let mut out = String::new();
        for (i, &id) in ids.iter().enumerate() {
            let piece = self.token(id).ok_or(Error::TokenOutOfRange {
                id,
                vocab: self.len(),
            })?;
            if i > 0 && self.tokenizer == Tokenizer::Whitespace {
                out.push(' ');
            }
            out.push_str(piece);
        }
        Ok(out)
    }

    /// Content fingerprint over the token list and tokenizer mode.
    pub fn content_hash(&self) -> u64 {
        let mut h = Fnv64::new();
        h.write_u32(match self.tokenizer {
            Tokenizer::Char => 0,
            Tokenizer::Whitespace => 1,
        });
        for t in &self.tokens {
            h.write_str(t);
        }
        h.finish()
    }
}
