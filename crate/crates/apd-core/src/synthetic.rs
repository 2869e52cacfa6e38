//! A seeded order-2 Markov character source.
//!
//! Each two-character state owns a fixed next-character distribution:
//! roughly half the states are "easy" (one dominant continuation around
//! 0.85) and half are "hard" (two mid-weight continuations). The mix gives
//! a small model something to learn quickly and a large model something to
//! keep improving on, which is exactly the texture the curve machinery
//! needs.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;

use crate::error::{Error, Result};
use crate::math::derive_seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MarkovSource {
    n_symbols: usize,
    seed: u64,
}

impl MarkovSource {
    pub fn new(n_symbols: usize, seed: u64) -> Result<MarkovSource> {
        if !(3..=26).contains(&n_symbols) {
            return Err(Error::BadParam {
                name: "n_symbols",
                value: n_symbols as f64,
            });
        }
        Ok(MarkovSource { n_symbols, seed })
    }

    pub fn n_symbols(&self) -> usize {
        self.n_symbols
    }

    pub fn symbol_char(&self, i: usize) -> char {
        debug_assert!(i < self.n_symbols);
        (b'a' + i as u8) as char
    }

    /// The fixed next-symbol distribution of state `(a, b)`.
    pub fn state_distribution(&self, a: usize, b: usize) -> Vec<f64> {
        assert!(a < self.n_symbols && b < self.n_symbols);
        let m = self.n_symbols;
        let state = (a * m + b) as u64;
        let mut rng = ChaCha12Rng::seed_from_u64(derive_seed(self.seed, state));
        let easy = rng.gen::<f64>() < 0.5;
        let mut probs = vec![0.0f64; m];
        // Background weights for the non-peak symbols.
        let mut rest = 0.0;
        for p in probs.iter_mut() {
            *p = 0.05 + rng.gen::<f64>();
            rest += *p;
        }
        let first = rng.gen_range(0..m);
        if easy {
            let peak = 0.80 + rng.gen::<f64>() * 0.10;
            let scale = (1.0 - peak) / (rest - probs[first]);
            for p in probs.iter_mut() {
                *p *= scale;
            }
            probs[first] = peak;
        } else {
            let mut second = rng.gen_range(0..m - 1);
            if second >= first {
                second += 1;
            }
            let p1 = 0.42 + rng.gen::<f64>() * 0.08;
            let p2 = 0.22 + rng.gen::<f64>() * 0.08;
            let scale = (1.0 - p1 - p2) / (rest - probs[first] - probs[second]);
            for p in probs.iter_mut() {
                *p *= scale;
            }
            probs[first] = p1;
            probs[second] = p2;
        }
        probs
    }

    /// Whether state `(a, b)` has a single dominant continuation.
    pub fn is_easy_state(&self, a: usize, b: usize) -> bool {
        let m = self.n_symbols;
        let state = (a * m + b) as u64;
        let mut rng = ChaCha12Rng::seed_from_u64(derive_seed(self.seed, state));
        rng.gen::<f64>() < 0.5
    }

    fn draw<R: Rng>(&self, probs: &[f64], rng: &mut R) -> usize {
        let u = rng.gen::<f64>();
        let mut cum = 0.0;
        for (i, &p) in probs.iter().enumerate() {
            cum += p;
            if u < cum {
                return i;
            }
        }
        probs.len() - 1
    }

    /// Sample `n_lines` lines of `line_len` characters each.
    pub fn generate_text(&self, n_lines: usize, line_len: usize, gen_seed: u64) -> String {
        let m = self.n_symbols;
        let mut rng = ChaCha12Rng::seed_from_u64(derive_seed(self.seed, 0x9e_0000 ^ gen_seed));
        let mut text = String::with_capacity(n_lines * (line_len + 1));
        for _ in 0..n_lines {
            let mut a = rng.gen_range(0..m);
            let mut b = rng.gen_range(0..m);
            text.push(self.symbol_char(a));
            text.push(self.symbol_char(b));
            for _ in 2..line_len {
                let probs = self.state_distribution(a, b);
                let next = self.draw(&probs, &mut rng);
                text.push(self.symbol_char(next));
                a = b;
                b = next;
            }
            text.push('\n');
        }
        text
    }

    /// Greedy continuation of `opt_len` characters from state `(a, b)`.
    fn greedy_continuation(&self, mut a: usize, mut b: usize, opt_len: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity(opt_len);
        for _ in 0..opt_len {
            let best = self.state_mode(a, b);
            out.push(best);
            a = b;
            b = best;
        }
        out
    }

    /// The modal next symbol of state `(a, b)`.
    fn state_mode(&self, a: usize, b: usize) -> usize {
        let probs = self.state_distribution(a, b);
        let mut best = 0usize;
        for (i, &p) in probs.iter().enumerate() {
            if p > probs[best] {
                best = i;
            }
        }
        best
    }

    /// The favorite continuation after `b` when the earlier character is
    /// unknown: the mode of the uniform average over states `(·, b)`. This
    /// is what an order-1 approximator converges to.
    fn context_free_mode(&self, b: usize) -> usize {
        let m = self.n_symbols;
        let mut avg = vec![0.0f64; m];
        for a in 0..m {
            for (y, &p) in self.state_distribution(a, b).iter().enumerate() {
                avg[y] += p;
            }
        }
        let mut best = 0usize;
        for (y, &p) in avg.iter().enumerate() {
            if p > avg[best] {
                best = y;
            }
        }
        best
    }

    /// Multiple-choice items as strings: a sampled in-distribution prompt,
    /// one greedy (model-optimal) continuation, and distractors built by
    /// corrupting its first character. Returns `(prompt, options, correct)`.
    pub fn make_qa(
        &self,
        n_items: usize,
        n_options: usize,
        prompt_len: usize,
        opt_len: usize,
        qa_seed: u64,
    ) -> Result<Vec<(String, Vec<String>, usize)>> {
        self.qa_build(n_items, n_options, prompt_len, opt_len, qa_seed, false)
    }

    /// Like [`make_qa`](Self::make_qa), but keeps only prompts whose final
    /// state's modal continuation differs from the context-free favorite
    /// for the same trailing character — items that can't be answered from
    /// order-1 statistics.
    pub fn make_qa_contextual(
        &self,
        n_items: usize,
        n_options: usize,
        prompt_len: usize,
        opt_len: usize,
        qa_seed: u64,
    ) -> Result<Vec<(String, Vec<String>, usize)>> {
        self.qa_build(n_items, n_options, prompt_len, opt_len, qa_seed, true)
    }

    fn qa_build(
        &self,
        n_items: usize,
        n_options: usize,
        prompt_len: usize,
        opt_len: usize,
        qa_seed: u64,
        contextual: bool,
    ) -> Result<Vec<(String, Vec<String>, usize)>> {
        let m = self.n_symbols;
        if n_options < 2 || n_options > m || prompt_len < 2 || opt_len == 0 {
            return Err(Error::BadParam {
                name: "qa shape",
                value: n_options as f64,
            });
        }
        let mut rng = ChaCha12Rng::seed_from_u64(derive_seed(self.seed, 0x9a_0000 ^ qa_seed));
        let mut items = Vec::with_capacity(n_items);
        let mut attempts = 0usize;
        let max_attempts = n_items.saturating_mul(200).max(1000);
        while items.len() < n_items {
            attempts += 1;
            if attempts > max_attempts {
                return Err(Error::EmptyInput("contextual qa prompts"));
            }
            let mut a = rng.gen_range(0..m);
            let mut b = rng.gen_range(0..m);
            let mut prompt = String::with_capacity(prompt_len);
            prompt.push(self.symbol_char(a));
            prompt.push(self.symbol_char(b));
            for _ in 2..prompt_len {
                let probs = self.state_distribution(a, b);
                let next = self.draw(&probs, &mut rng);
                prompt.push(self.symbol_char(next));
                a = b;
                b = next;
            }
            if contextual && self.state_mode(a, b) == self.context_free_mode(b) {
                continue;
            }

            let gold = self.greedy_continuation(a, b, opt_len);
            // Distractors replace the first character with a different
            // symbol and continue greedily from there.
            let probs = self.state_distribution(a, b);
            let mut order: Vec<usize> = (0..m).collect();
            order.sort_by(|&x, &y| {
                probs[y]
                    .partial_cmp(&probs[x])
                    .unwrap()
                    .then(x.cmp(&y))
            });
            let mut options: Vec<Vec<usize>> = Vec::with_capacity(n_options);
            options.push(gold.clone());
            for &alt in order.iter().rev() {
                if options.len() == n_options {
                    break;
                }
                if alt == gold[0] {
                    continue;
                }
                let mut opt = vec![alt];
                if opt_len > 1 {
                    opt.extend(self.greedy_continuation(b, alt, opt_len - 1));
                }
                options.push(opt);
            }

            let correct = rng.gen_range(0..options.len());
            options.swap(0, correct);
            let options: Vec<String> = options
                .iter()
                .map(|opt| opt.iter().map(|&i| self.symbol_char(i)).collect())
                .collect();
            items.push((prompt, options, correct));
        }
        Ok(items)
    }
}
