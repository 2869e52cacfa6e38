//! A tokenized corpus: one id sequence per text line, with a content hash
//! and a deterministic train/validation split.

use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;

use crate::error::{Error, Result};
use crate::math::{derive_seed, Fnv64};
use crate::vocab::Vocabulary;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Corpus {
    lines: Vec<Vec<u32>>,
    hash: u64,
}

impl Corpus {
    /// Tokenize each non-empty line of `text`.
    pub fn from_text(text: &str, vocab: &Vocabulary) -> Corpus {
        let lines: Vec<Vec<u32>> = text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(|l| vocab.tokenize(l))
            .filter(|ids| !ids.is_empty())
            .collect();
        Self::from_lines_unchecked(lines)
    }

    /// Wrap pre-tokenized lines, validating ids against `vocab_size`.
    pub fn from_lines(lines: Vec<Vec<u32>>, vocab_size: usize) -> Result<Corpus> {
        for line in &lines {
            for &id in line {
                if id as usize >= vocab_size {
                    return Err(Error::TokenOutOfRange {
                        id,
                        vocab: vocab_size,
                    });
                }
            }
        }
        Ok(Self::from_lines_unchecked(lines))
    }

    fn from_lines_unchecked(lines: Vec<Vec<u32>>) -> Corpus {
        let mut h = Fnv64::new();
        h.write_usize(lines.len());
        for line in &lines {
            h.write_usize(line.len());
            for &id in line {
                h.write_u32(id);
            }
        }
        Corpus {
            hash: h.finish(),
            lines,
        }
    }

    pub fn lines(&self) -> &[Vec<u32>] {
        &self.lines
    }

    pub fn is_empty(&self) -> bool {
        self.lines.is_empty()
    }

    /// Number of next-token prediction contexts (= total token count).
    pub fn n_contexts(&self) -> usize {
        self.lines.iter().map(Vec::len).sum()
    }

    pub fn content_hash(&self) -> u64 {
        self.hash
    }

    /// Deterministically split off `val_fraction` of the lines (rounded) for
    /// held-out evaluation. Membership depends only on the corpus content,
    /// the fraction, and the seed; line order is preserved within each side.
    pub fn split(&self, val_fraction: f64, seed: u64) -> Result<(Corpus, Corpus)> {
        if !(0.0..1.0).contains(&val_fraction) {
            return Err(Error::BadParam {
                name: "val_fraction",
                value: val_fraction,
            });
        }
        let n = self.lines.len();
        let n_val = libm::round(n as f64 * val_fraction) as usize;
        let mut order: Vec<usize> = (0..n).collect();
        let mut rng = ChaCha12Rng::seed_from_u64(derive_seed(seed, self.hash));
        order.shuffle(&mut rng);
        let mut val_idx: Vec<usize> = order[..n_val].to_vec();
        let mut train_idx: Vec<usize> = order[n_val..].to_vec();
        val_idx.sort_unstable();
        train_idx.sort_unstable();
        let take = |idx: &[usize]| {
            Self::from_lines_unchecked(idx.iter().map(|&i| self.lines[i].clone()).collect())
        };
        Ok((take(&train_idx), take(&val_idx)))
    }
}
