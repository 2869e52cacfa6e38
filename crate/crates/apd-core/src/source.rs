//! Next-token distribution sources used by generation and decoding.

use alloc::vec::Vec;

use crate::cd;
use crate::curve::{self, FitConfig};
use crate::error::{Error, Result};
use crate::family::ModelFamily;
use crate::math;
use crate::model::TinyLm;
use crate::trace::{self, CandidateLayout, Provenance};

/// Anything that can score the next token over the full vocabulary.
pub trait DistributionSource {
    fn vocab_size(&self) -> usize;
    fn label(&self) -> &'static str;
    /// Combined scores before the softmax.
    fn scores(&self, ctx: &[u32]) -> Result<Vec<f64>>;
    /// Normalized next-token distribution.
    fn distribution(&self, ctx: &[u32]) -> Result<Vec<f64>> {
        let mut s = self.scores(ctx)?;
        for v in &s {
            if !v.is_finite() {
                return Err(Error::NonFinite("source scores"));
            }
        }
        math::softmax_inplace(&mut s);
        Ok(s)
    }
}

/// The largest model on its own.
pub struct ExpertSource<'a> {
    model: &'a TinyLm,
}

impl<'a> ExpertSource<'a> {
    pub fn new(model: &'a TinyLm) -> ExpertSource<'a> {
        ExpertSource { model }
    }
}

impl DistributionSource for ExpertSource<'_> {
    fn vocab_size(&self) -> usize {
        self.model.vocab_size()
    }

    fn label(&self) -> &'static str {
        "elm"
    }

    fn scores(&self, ctx: &[u32]) -> Result<Vec<f64>> {
        self.model.logits(ctx)
    }
}

/// Expert-minus-amateur contrast; the same rule serves both the plain and
/// the fine-tuned amateur, distinguished only by the label.
pub struct ContrastSource<'a> {
    expert: &'a TinyLm,
    amateur: &'a TinyLm,
    t: f64,
    label: &'static str,
}

impl<'a> ContrastSource<'a> {
    pub fn contrastive(expert: &'a TinyLm, amateur: &'a TinyLm, t: f64) -> Result<Self> {
        Self::build(expert, amateur, t, "cd")
    }

    /// Contrast against the jointly fine-tuned amateur copy.
    pub fn asymptotic(expert: &'a TinyLm, amateur_prime: &'a TinyLm, t: f64) -> Result<Self> {
        Self::build(expert, amateur_prime, t, "apd")
    }

    fn build(expert: &'a TinyLm, amateur: &'a TinyLm, t: f64, label: &'static str) -> Result<Self> {
        if expert.vocab_size() != amateur.vocab_size() {
            return Err(Error::LengthMismatch {
                what: "expert vs amateur vocabulary",
                left: expert.vocab_size(),
                right: amateur.vocab_size(),
            });
        }
        if !(t.is_finite() && t > 0.0) {
            return Err(Error::BadTemperature(t));
        }
        Ok(ContrastSource {
            expert,
            amateur,
            t,
            label,
        })
    }

    pub fn temperature(&self) -> f64 {
        self.t
    }
}

impl DistributionSource for ContrastSource<'_> {
    fn vocab_size(&self) -> usize {
        self.expert.vocab_size()
    }

    fn label(&self) -> &'static str {
        self.label
    }

    fn scores(&self, ctx: &[u32]) -> Result<Vec<f64>> {
        let e = self.expert.logits(ctx)?;
        let a = self.amateur.logits(ctx)?;
        cd::cd_logits(&e, &a, self.t)
    }
}

/// Per-step curve fitting over a fresh candidate set: the whole family is
/// run on the context, each candidate's probability sequence is fitted, and
/// the normalized top-band asymptotes are blended with the expert. Mass
/// outside the candidate set is zero.
pub struct OnTheFlySource<'a> {
    family: &'a ModelFamily,
    layout: CandidateLayout,
    fit: FitConfig,
    /// Share given to the asymptotes, in [0, 1].
    mix_weight: f64,
    seed: u64,
}

impl<'a> OnTheFlySource<'a> {
    pub fn new(
        family: &'a ModelFamily,
        layout: CandidateLayout,
        fit: FitConfig,
        mix_weight: f64,
        seed: u64,
    ) -> Result<Self> {
        if !(0.0..=1.0).contains(&mix_weight) {
            return Err(Error::BadParam {
                name: "mix_weight",
                value: mix_weight,
            });
        }
        Ok(OnTheFlySource {
            family,
            layout,
            fit,
            mix_weight,
            seed,
        })
    }
}

impl DistributionSource for OnTheFlySource<'_> {
    fn vocab_size(&self) -> usize {
        self.family.vocab().len()
    }

    fn label(&self) -> &'static str {
        "otf"
    }

    fn scores(&self, _ctx: &[u32]) -> Result<Vec<f64>> {
        Err(Error::Invalid(
            "on-the-fly source has no score vector; use distribution".into(),
        ))
    }

    fn distribution(&self, ctx: &[u32]) -> Result<Vec<f64>> {
        let record = trace::trace_one(self.family, ctx, 0, &self.layout, self.seed)?;
        let sizes = self.family.log_sizes();
        let otf = curve::fit_on_the_fly(&record, &sizes, self.mix_weight, &self.fit)?;
        let mut out = alloc::vec![0.0f64; self.vocab_size()];
        let mut sum = 0.0;
        for (i, &tok) in record.cands.iter().enumerate() {
            out[tok as usize] = otf.mixed[i];
            sum += otf.mixed[i];
        }
        if sum <= 0.0 || !sum.is_finite() {
            return Err(Error::NonFinite("on-the-fly mixture"));
        }
        for v in out.iter_mut() {
            *v /= sum;
        }
        Ok(out)
    }
}

/// Used by diagnostics: the top-band share of a candidate set's mass under
/// the expert, a cheap signal of how much the tail bands matter.
pub fn top_band_mass(probs: &[f32], prov: &[Provenance]) -> f64 {
    probs
        .iter()
        .zip(prov)
        .filter(|(_, p)| **p == Provenance::Top)
        .map(|(q, _)| *q as f64)
        .sum()
}
