//! Contrastive decoding in logit space, its reading as sampling from an
//! extrapolated hyper-sized model, and the alpha plausibility mask.
//!
//! The contrast is `L_expert(w) - L_amateur(w) / T`. When every token's
//! logit is an affine function of log model size, that combination equals
//! `(1 - 1/T)` times the same line evaluated at an extrapolated log size
//! `(T * log s_expert - log s_amateur) / (T - 1)` - a model beyond the
//! expert. `verify_theorem` checks the identity numerically.

use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::math::softmax_inplace;

/// Settings for turning a pair of logit vectors into a distribution.
#[derive(Debug, Clone, PartialEq)]
pub struct DecodeConfig {
    /// Amateur temperature T (> 0). 1 recovers the plain logit difference.
    pub temperature: f64,
    /// Optional candidate restriction: softmax over this subset only.
    pub restrict_to: Option<Vec<u32>>,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        DecodeConfig {
            temperature: 1.0,
            restrict_to: None,
        }
    }
}

impl DecodeConfig {
    pub fn with_temperature(t: f64) -> DecodeConfig {
        DecodeConfig {
            temperature: t,
            ..DecodeConfig::default()
        }
    }
}

fn check_temperature(t: f64) -> Result<()> {
    if !t.is_finite() || t <= 0.0 {
        return Err(Error::BadTemperature(t));
    }
    Ok(())
}

/// One contrasted logit: `l_expert - l_amateur / T`.
pub fn cd_logit(l_expert: f64, l_amateur: f64, t: f64) -> Result<f64> {
    check_temperature(t)?;
    Ok(l_expert - l_amateur / t)
}

/// Contrasted logits for whole vectors.
pub fn cd_logits(expert: &[f64], amateur: &[f64], t: f64) -> Result<Vec<f64>> {
    check_temperature(t)?;
    if expert.len() != amateur.len() {
        return Err(Error::LengthMismatch {
            what: "logit vectors",
            left: expert.len(),
            right: amateur.len(),
        });
    }
    if expert.is_empty() {
        return Err(Error::EmptyInput("logit vectors"));
    }
    Ok(expert
        .iter()
        .zip(amateur)
        .map(|(&e, &a)| e - a / t)
        .collect())
}

/// Softmax over contrasted logits. The result has the same length as the
/// inputs; with a restriction, mass lives only on the listed tokens.
pub fn cd_distribution(expert: &[f64], amateur: &[f64], cfg: &DecodeConfig) -> Result<Vec<f64>> {
    let logits = cd_logits(expert, amateur, cfg.temperature)?;
    distribution_over(&logits, cfg.restrict_to.as_deref())
}

/// The fine-tuned-amateur variant: identical combination rule, with the
/// trained amateur's logits in the second slot.
pub fn apd_distribution(
    expert: &[f64],
    amateur_prime: &[f64],
    cfg: &DecodeConfig,
) -> Result<Vec<f64>> {
    cd_distribution(expert, amateur_prime, cfg)
}

/// Softmax over `logits`, optionally restricted to a token subset.
pub(crate) fn distribution_over(logits: &[f64], restrict: Option<&[u32]>) -> Result<Vec<f64>> {
    for &l in logits {
        if !l.is_finite() {
            return Err(Error::NonFinite("logits"));
        }
    }
    let mut out = alloc::vec![0.0f64; logits.len()];
    match restrict {
        None => {
            out.copy_from_slice(logits);
            softmax_inplace(&mut out);
        }
        Some(ids) => {
            if ids.is_empty() {
                return Err(Error::EmptyInput("candidate restriction"));
            }
            let mut subset: Vec<u32> = ids.to_vec();
            subset.sort_unstable();
            subset.dedup();
            let mut vals = Vec::with_capacity(subset.len());
            for &id in &subset {
                let l = logits.get(id as usize).ok_or(Error::TokenOutOfRange {
                    id,
                    vocab: logits.len(),
                })?;
                vals.push(*l);
            }
            softmax_inplace(&mut vals);
            for (&id, &p) in subset.iter().zip(&vals) {
                out[id as usize] = p;
            }
        }
    }
    Ok(out)
}

/// The hyper-sized-model reading of one expert/amateur pairing.
#[derive(Debug, Clone, PartialEq)]
pub struct HlmResult {
    /// Log size of the extrapolated model, beyond the expert for T > 1.
    pub hlm_log_size: f64,
    /// Scale `1 - 1/T` applied to the extrapolated model's logits.
    pub logit_scale: f64,
    /// Log-size gap between expert and amateur.
    pub size_gap: f64,
    /// Optional per-token logit gaps `l_amateur - l_expert`; empty unless
    /// filled via [`HlmResult::with_logit_gaps`].
    pub logit_gaps: Vec<f64>,
}

impl HlmResult {
    pub fn with_logit_gaps(mut self, amateur: &[f64], expert: &[f64]) -> Result<HlmResult> {
        if amateur.len() != expert.len() {
            return Err(Error::LengthMismatch {
                what: "logit vectors",
                left: amateur.len(),
                right: expert.len(),
            });
        }
        self.logit_gaps = amateur.iter().zip(expert).map(|(&a, &e)| a - e).collect();
        Ok(self)
    }
}

/// Where the contrast lands on the size axis. Requires T > 1 (the mapping
/// divides by T - 1) and a strictly larger expert.
pub fn hlm_size(log_size_expert: f64, log_size_amateur: f64, t: f64) -> Result<HlmResult> {
    if !t.is_finite() || t <= 1.0 {
        return Err(Error::HlmTemperature(t));
    }
    if log_size_expert <= log_size_amateur {
        return Err(Error::BadParam {
            name: "log size gap",
            value: log_size_expert - log_size_amateur,
        });
    }
    Ok(HlmResult {
        hlm_log_size: (t * log_size_expert - log_size_amateur) / (t - 1.0),
        logit_scale: 1.0 - 1.0 / t,
        size_gap: log_size_expert - log_size_amateur,
        logit_gaps: Vec::new(),
    })
}

/// A per-token affine logit trend in log size.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogitLine {
    pub slope: f64,
    pub intercept: f64,
}

impl LogitLine {
    pub fn at(&self, log_size: f64) -> f64 {
        self.slope * log_size + self.intercept
    }
}

/// Max absolute discrepancy between the contrasted logits and the scaled
/// extrapolated-model logits, over tokens whose logits follow `lines`.
/// Exact linear trends should come back at floating-point noise.
pub fn verify_theorem(
    lines: &[LogitLine],
    log_size_amateur: f64,
    log_size_expert: f64,
    t: f64,
) -> Result<f64> {
    if lines.is_empty() {
        return Err(Error::EmptyInput("logit lines"));
    }
    let hlm = hlm_size(log_size_expert, log_size_amateur, t)?;
    let mut worst = 0.0f64;
    for line in lines {
        let contrasted = cd_logit(line.at(log_size_expert), line.at(log_size_amateur), t)?;
        let extrapolated = hlm.logit_scale * line.at(hlm.hlm_log_size);
        worst = worst.max((contrasted - extrapolated).abs());
    }
    Ok(worst)
}

/// Indices of tokens with probability at least `alpha` times the max
/// probability. `alpha` in (0, 1]; at 1 only the max token(s) survive.
pub fn alpha_mask(probs: &[f64], alpha: f64) -> Result<Vec<usize>> {
    if probs.is_empty() {
        return Err(Error::EmptyInput("probabilities"));
    }
    if !(alpha > 0.0 && alpha <= 1.0) {
        return Err(Error::BadParam {
            name: "alpha",
            value: alpha,
        });
    }
    let mut max = 0.0f64;
    for &p in probs {
        if !(0.0..=1.0).contains(&p) {
            return Err(Error::BadProbability(p));
        }
        if p > max {
            max = p;
        }
    }
    if max <= 0.0 {
        return Err(Error::BadProbability(0.0));
    }
    let cut = alpha * max;
    Ok((0..probs.len()).filter(|&i| probs[i] >= cut).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cd_logit_hand_values() {
        // T = 1 is the plain difference; T = 2 halves the amateur's pull.
        assert_eq!(cd_logit(3.0, 1.0, 1.0).unwrap(), 2.0);
        assert_eq!(cd_logit(3.0, 1.0, 2.0).unwrap(), 2.5);
        assert!(cd_logit(1.0, 1.0, 0.0).is_err());
        assert!(cd_logit(1.0, 1.0, -2.0).is_err());
        // T < 1 overweights the amateur; allowed, just unusual.
        assert_eq!(cd_logit(3.0, 1.0, 0.5).unwrap(), 1.0);
    }

    #[test]
    fn distribution_matches_hand_softmax() {
        // Contrasted logits (ln 3, 0) give (0.75, 0.25).
        let e = [3.0f64.ln() + 1.0, 2.0];
        let a = [1.0, 2.0];
        let p = cd_distribution(&e, &a, &DecodeConfig::default()).unwrap();
        assert!((p[0] - 0.75).abs() < 1e-12);
        assert!((p[1] - 0.25).abs() < 1e-12);
    }

    #[test]
    fn restriction_renormalizes_over_subset() {
        let e = [0.0, 1.0, 2.0, 3.0];
        let a = [0.0; 4];
        let cfg = DecodeConfig {
            temperature: 1.0,
            restrict_to: Some(alloc::vec![1, 3, 3]),
        };
        let p = cd_distribution(&e, &a, &cfg).unwrap();
        assert_eq!(p[0], 0.0);
        assert_eq!(p[2], 0.0);
        assert!((p[1] + p[3] - 1.0).abs() < 1e-12);
        assert!(p[3] > p[1]);
        let bad = DecodeConfig {
            temperature: 1.0,
            restrict_to: Some(alloc::vec![9]),
        };
        assert!(cd_distribution(&e, &a, &bad).is_err());
    }

    #[test]
    fn hlm_size_hand_value() {
        // Expert 6.9e9, amateur 7.0e7, T = 2: the extrapolated size is
        // (6.9e9)^2 / 7.0e7 = 6.8014e11.
        let r = hlm_size(crate::math::ln(6.9e9), crate::math::ln(7.0e7), 2.0).unwrap();
        let implied = crate::math::exp(r.hlm_log_size);
        assert!((implied / 6.8014e11 - 1.0).abs() < 1e-4, "{implied}");
        assert!((r.logit_scale - 0.5).abs() < 1e-15);
        assert!(r.hlm_log_size > crate::math::ln(6.9e9));
    }

    #[test]
    fn hlm_size_monotone_in_t_and_guards() {
        let (lse, lsa) = (20.0, 15.0);
        let mut prev = f64::INFINITY;
        for t in [1.5, 2.0, 4.0, 10.0] {
            let r = hlm_size(lse, lsa, t).unwrap();
            assert!(r.hlm_log_size > lse);
            assert!(r.hlm_log_size < prev, "extrapolation shrinks toward the expert as T grows");
            prev = r.hlm_log_size;
        }
        assert!(hlm_size(lse, lsa, 1.0).is_err());
        assert!(hlm_size(lsa, lse, 2.0).is_err());
    }

    #[test]
    fn theorem_identity_on_a_hand_line() {
        // slope 1, intercept 0, sizes e^1 and e^3, T = 2: contrast is 2.5
        // and the extrapolated line gives 0.5 * 5 = 2.5.
        let lines = [LogitLine {
            slope: 1.0,
            intercept: 0.0,
        }];
        let worst = verify_theorem(&lines, 1.0, 3.0, 2.0).unwrap();
        assert!(worst < 1e-12, "{worst}");
    }

    #[test]
    fn logit_gaps_fill() {
        let r = hlm_size(3.0, 1.0, 2.0)
            .unwrap()
            .with_logit_gaps(&[1.0, 0.0], &[4.0, 2.0])
            .unwrap();
        assert_eq!(r.logit_gaps, alloc::vec![-3.0, -2.0]);
        assert_eq!(r.size_gap, 2.0);
    }

    #[test]
    fn alpha_mask_hand_case() {
        // (0.5, 0.3, 0.04), alpha 0.1: threshold 0.05 keeps the first two.
        let kept = alpha_mask(&[0.5, 0.3, 0.04], 0.1).unwrap();
        assert_eq!(kept, alloc::vec![0, 1]);
        // alpha = 1 keeps only max tokens (ties included).
        let kept = alpha_mask(&[0.4, 0.4, 0.2], 1.0).unwrap();
        assert_eq!(kept, alloc::vec![0, 1]);
        assert!(alpha_mask(&[0.5, 0.5], 0.0).is_err());
        assert!(alpha_mask(&[0.5, 0.5], 1.5).is_err());
        assert!(alpha_mask(&[], 0.5).is_err());
    }
}
