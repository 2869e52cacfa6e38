//! Truncation filters and seeded sampling over next-token distributions.

use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;

use crate::cd::alpha_mask;
use crate::error::{Error, Result};
use crate::math::{self, derive_seed, rank_descending};
use crate::source::DistributionSource;

/// Which tokens survive before sampling.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum FilterMethod {
    NoFilter,
    /// Smallest prefix of the sorted distribution reaching mass `p`.
    TopP { p: f64 },
    /// The `k` most probable tokens, ties broken toward smaller ids.
    TopK { k: usize },
    /// Top-k first, then top-p within the survivors.
    TopPK { p: f64, k: usize },
    /// Keep tokens with probability at least `alpha` times the maximum.
    AlphaMask { alpha: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SamplerConfig {
    pub method: FilterMethod,
    /// Softmax temperature applied before filtering; 0 means greedy.
    pub temperature: f64,
    pub seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig {
            method: FilterMethod::NoFilter,
            temperature: 1.0,
            seed: 0,
        }
    }
}

fn validate_probs(probs: &[f64]) -> Result<()> {
    if probs.is_empty() {
        return Err(Error::EmptyInput("probabilities"));
    }
    for &p in probs {
        if !p.is_finite() || p < 0.0 {
            return Err(Error::BadProbability(p));
        }
    }
    Ok(())
}

fn renormalize(probs: &mut [f64]) -> Result<()> {
    let sum: f64 = probs.iter().sum();
    if sum <= 0.0 || !sum.is_finite() {
        return Err(Error::BadProbability(sum));
    }
    for p in probs.iter_mut() {
        *p /= sum;
    }
    Ok(())
}

/// Sharpen or flatten in place: p_i^(1/tau), renormalized. `tau` of zero
/// collapses onto the argmax (smallest id on ties).
pub fn apply_temperature(probs: &mut [f64], tau: f64) -> Result<()> {
    validate_probs(probs)?;
    if !(tau.is_finite() && tau >= 0.0) {
        return Err(Error::BadTemperature(tau));
    }
    if tau == 1.0 {
        return renormalize(probs);
    }
    if tau == 0.0 {
        let best = rank_descending(probs)[0];
        for (i, p) in probs.iter_mut().enumerate() {
            *p = if i == best { 1.0 } else { 0.0 };
        }
        return Ok(());
    }
    // Power through logs so tiny probabilities stay stable; exact zeros
    // remain zero.
    let inv = 1.0 / tau;
    let max = probs.iter().cloned().fold(0.0f64, f64::max);
    if max <= 0.0 {
        return Err(Error::BadProbability(0.0));
    }
    for p in probs.iter_mut() {
        *p = if *p > 0.0 {
            math::exp(inv * math::ln(*p / max))
        } else {
            0.0
        };
    }
    renormalize(probs)
}

/// Zero out everything past the smallest prefix whose mass reaches `p`
/// (with a tiny slack so exact boundaries keep the boundary token), then
/// renormalize.
pub fn top_p_filter(probs: &[f64], p: f64) -> Result<Vec<f64>> {
    validate_probs(probs)?;
    if !(p > 0.0 && p <= 1.0) {
        return Err(Error::BadParam {
            name: "top_p",
            value: p,
        });
    }
    let order = rank_descending(probs);
    let mut out = vec![0.0f64; probs.len()];
    let mut cum = 0.0;
    for &i in &order {
        out[i] = probs[i];
        cum += probs[i];
        if cum >= p - 1e-12 {
            break;
        }
    }
    renormalize(&mut out)?;
    Ok(out)
}

/// Keep the `k` most probable tokens and renormalize.
pub fn top_k_filter(probs: &[f64], k: usize) -> Result<Vec<f64>> {
    validate_probs(probs)?;
    if k == 0 {
        return Err(Error::BadParam {
            name: "top_k",
            value: 0.0,
        });
    }
    let order = rank_descending(probs);
    let mut out = vec![0.0f64; probs.len()];
    for &i in order.iter().take(k) {
        out[i] = probs[i];
    }
    renormalize(&mut out)?;
    Ok(out)
}

/// Keep tokens whose probability is at least `alpha` times the maximum.
pub fn alpha_mask_filter(probs: &[f64], alpha: f64) -> Result<Vec<f64>> {
    let keep = alpha_mask(probs, alpha)?;
    let mut out = vec![0.0f64; probs.len()];
    for i in keep {
        out[i] = probs[i];
    }
    renormalize(&mut out)?;
    Ok(out)
}

/// Temperature first, then the filter (k before p when both apply).
pub fn filter_distribution(probs: &[f64], cfg: &SamplerConfig) -> Result<Vec<f64>> {
    let mut work = probs.to_vec();
    apply_temperature(&mut work, cfg.temperature)?;
    match cfg.method {
        FilterMethod::NoFilter => Ok(work),
        FilterMethod::TopP { p } => top_p_filter(&work, p),
        FilterMethod::TopK { k } => top_k_filter(&work, k),
        FilterMethod::TopPK { p, k } => top_p_filter(&top_k_filter(&work, k)?, p),
        FilterMethod::AlphaMask { alpha } => alpha_mask_filter(&work, alpha),
    }
}

/// Draw one token from a normalized distribution.
pub fn sample_token<R: Rng>(probs: &[f64], rng: &mut R) -> Result<u32> {
    validate_probs(probs)?;
    let sum: f64 = probs.iter().sum();
    if sum <= 0.0 {
        return Err(Error::BadProbability(sum));
    }
    let draw = rng.gen::<f64>() * sum;
    let mut cum = 0.0;
    let mut last_positive = None;
    for (i, &p) in probs.iter().enumerate() {
        if p > 0.0 {
            last_positive = Some(i as u32);
            cum += p;
            if draw < cum {
                return Ok(i as u32);
            }
        }
    }
    // Rounding pushed the draw past the final increment.
    last_positive.ok_or(Error::BadProbability(0.0))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GenerateConfig {
    pub max_tokens: usize,
    pub n_continuations: usize,
    /// Stop early when this token is produced (it is kept in the output).
    pub stop_token: Option<u32>,
    pub sampler: SamplerConfig,
}

impl Default for GenerateConfig {
    fn default() -> Self {
        GenerateConfig {
            max_tokens: 64,
            n_continuations: 8,
            stop_token: None,
            sampler: SamplerConfig::default(),
        }
    }
}

/// Sample continuations of `prompt`. Each continuation runs on its own
/// seeded stream, so the set is stable regardless of order or count.
pub fn generate(
    source: &dyn DistributionSource,
    prompt: &[u32],
    cfg: &GenerateConfig,
) -> Result<Vec<Vec<u32>>> {
    if cfg.max_tokens == 0 || cfg.n_continuations == 0 {
        return Err(Error::BadParam {
            name: "generation size",
            value: cfg.max_tokens.min(cfg.n_continuations) as f64,
        });
    }
    let mut outs = Vec::with_capacity(cfg.n_continuations);
    for j in 0..cfg.n_continuations {
        let mut rng = ChaCha12Rng::seed_from_u64(derive_seed(cfg.sampler.seed, j as u64));
        let mut ctx: Vec<u32> = prompt.to_vec();
        let mut gen = Vec::with_capacity(cfg.max_tokens);
        for _ in 0..cfg.max_tokens {
            let dist = source.distribution(&ctx)?;
            let filtered = filter_distribution(&dist, &cfg.sampler)?;
            let tok = sample_token(&filtered, &mut rng)?;
            gen.push(tok);
            ctx.push(tok);
            if cfg.stop_token == Some(tok) {
                break;
            }
        }
        outs.push(gen);
    }
    Ok(outs)
}
