//! Per-context probability traces: for every corpus position, a candidate
//! set chosen from the expert's ranking plus each family member's
//! probabilities on it, normalized within the set. Traces are the training
//! and fitting substrate, so collection is strictly deterministic.

use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;

use crate::corpus::Corpus;
use crate::error::{Error, Result};
use crate::family::ModelFamily;
use crate::math::{derive_seed, rank_descending, softmax_inplace};
use crate::model::{context_window, BatchBuf};

pub const TRACE_VERSION: u32 = 1;

/// Candidate-set shape: all of the expert's top `n_top`, then `n_mid`
/// sampled from ranks (`n_top`, `mid_band_end`] and `n_tail` from beyond,
/// probability-weighted without replacement.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CandidateLayout {
    pub n_top: usize,
    pub n_mid: usize,
    pub n_tail: usize,
    pub mid_band_end: usize,
}

impl Default for CandidateLayout {
    fn default() -> Self {
        CandidateLayout {
            n_top: 20,
            n_mid: 5,
            n_tail: 5,
            mid_band_end: 100,
        }
    }
}

/// Which band a candidate came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Provenance {
    Top,
    Mid,
    Tail,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CandidateSet {
    pub ctx_id: u64,
    pub tokens: Vec<u32>,
    pub provenance: Vec<Provenance>,
}

/// Weighted sampling without replacement from `pool` (parallel `weights`).
/// Zero-weight entries are unreachable; if the pool runs dry the sample is
/// simply shorter.
fn sample_weighted<R: Rng>(
    pool: &mut Vec<usize>,
    weights: &mut Vec<f64>,
    count: usize,
    rng: &mut R,
) -> Vec<usize> {
    let mut out = Vec::with_capacity(count.min(pool.len()));
    for _ in 0..count {
        let total: f64 = weights.iter().sum();
        if pool.is_empty() || total <= 0.0 {
            break;
        }
        let mut u = rng.gen::<f64>() * total;
        let mut pick = pool.len() - 1;
        for (i, &w) in weights.iter().enumerate() {
            u -= w;
            if u < 0.0 {
                pick = i;
                break;
            }
        }
        out.push(pool.swap_remove(pick));
        weights.swap_remove(pick);
    }
    out
}

/// Build one candidate set from the expert's next-token distribution.
/// Deterministic given (`seed`, `ctx_id`).
pub fn build_candidate_set(
    expert_probs: &[f64],
    layout: &CandidateLayout,
    seed: u64,
    ctx_id: u64,
) -> Result<CandidateSet> {
    if expert_probs.is_empty() {
        return Err(Error::EmptyInput("expert probabilities"));
    }
    if layout.n_top == 0 {
        return Err(Error::BadParam {
            name: "n_top",
            value: 0.0,
        });
    }
    for &p in expert_probs {
        if !p.is_finite() || p < 0.0 {
            return Err(Error::BadProbability(p));
        }
    }
    let v = expert_probs.len();
    let ranked = rank_descending(expert_probs);
    let top_end = layout.n_top.min(v);
    let mid_end = layout.mid_band_end.max(top_end).min(v);

    let mut tokens: Vec<u32> = Vec::new();
    let mut provenance = Vec::new();
    for &i in &ranked[..top_end] {
        tokens.push(i as u32);
        provenance.push(Provenance::Top);
    }

    let mut rng = ChaCha12Rng::seed_from_u64(derive_seed(seed, ctx_id));
    for (range, count, tag) in [
        (top_end..mid_end, layout.n_mid, Provenance::Mid),
        (mid_end..v, layout.n_tail, Provenance::Tail),
    ] {
        let mut pool: Vec<usize> = ranked[range].to_vec();
        let mut weights: Vec<f64> = pool.iter().map(|&i| expert_probs[i]).collect();
        for i in sample_weighted(&mut pool, &mut weights, count, &mut rng) {
            tokens.push(i as u32);
            provenance.push(tag);
        }
    }
    Ok(CandidateSet {
        ctx_id,
        tokens,
        provenance,
    })
}

/// One context's worth of trace data. `probs[i]` holds member i's
/// probabilities on the candidates, normalized to sum to 1 within the set;
/// `l_alm`/`l_elm` are the raw amateur/expert logits on the candidates.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceRecord {
    pub ctx_id: u64,
    pub ctx: Vec<u32>,
    pub cands: Vec<u32>,
    pub prov: Vec<Provenance>,
    pub probs: Vec<Vec<f32>>,
    pub l_alm: Vec<f32>,
    pub l_elm: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TraceHeader {
    pub version: u32,
    pub family_hash: u64,
    pub n_models: usize,
    pub log_sizes: Vec<f64>,
    pub layout: CandidateLayout,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TraceData {
    pub header: TraceHeader,
    pub records: Vec<TraceRecord>,
}

impl TraceData {
    /// Structural consistency: every record's widths against the header.
    pub fn validate(&self) -> Result<()> {
        if self.header.n_models != self.header.log_sizes.len() {
            return Err(Error::LengthMismatch {
                what: "header log_sizes",
                left: self.header.log_sizes.len(),
                right: self.header.n_models,
            });
        }
        for r in &self.records {
            let n_c = r.cands.len();
            if n_c == 0 {
                return Err(Error::BadTrace {
                    ctx_id: r.ctx_id,
                    msg: "empty candidate set",
                });
            }
            if r.prov.len() != n_c || r.l_alm.len() != n_c || r.l_elm.len() != n_c {
                return Err(Error::BadTrace {
                    ctx_id: r.ctx_id,
                    msg: "candidate-aligned vectors disagree in length",
                });
            }
            if r.probs.len() != self.header.n_models {
                return Err(Error::BadTrace {
                    ctx_id: r.ctx_id,
                    msg: "probability rows do not match the model count",
                });
            }
            for row in &r.probs {
                if row.len() != n_c {
                    return Err(Error::BadTrace {
                        ctx_id: r.ctx_id,
                        msg: "probability row width disagrees with candidates",
                    });
                }
                let mut sum = 0.0f64;
                for &p in row {
                    if !p.is_finite() || p < 0.0 {
                        return Err(Error::BadTrace {
                            ctx_id: r.ctx_id,
                            msg: "non-finite or negative probability",
                        });
                    }
                    sum += p as f64;
                }
                if (sum - 1.0).abs() > 1e-4 {
                    return Err(Error::BadTrace {
                        ctx_id: r.ctx_id,
                        msg: "probability row does not sum to 1",
                    });
                }
            }
            for &l in r.l_alm.iter().chain(&r.l_elm) {
                if !l.is_finite() {
                    return Err(Error::BadTrace {
                        ctx_id: r.ctx_id,
                        msg: "non-finite stored logit",
                    });
                }
            }
        }
        Ok(())
    }
}

/// One context's record: the family is run on `ctx` (any length; it is
/// padded or truncated to the window), a candidate set is drawn from the
/// expert, and each member's probabilities are normalized within the set.
pub fn trace_one(
    family: &ModelFamily,
    ctx: &[u32],
    ctx_id: u64,
    layout: &CandidateLayout,
    seed: u64,
) -> Result<TraceRecord> {
    let n_models = family.n_members();
    let window = family.manifest().window;
    let padded = context_window(ctx, window);

    let mut member_probs: Vec<Vec<f64>> = Vec::with_capacity(n_models);
    let mut member_logits: Vec<Vec<f64>> = Vec::with_capacity(n_models);
    for member in family.members() {
        let logits = member.logits(&padded)?;
        let mut probs = logits.clone();
        softmax_inplace(&mut probs);
        member_probs.push(probs);
        member_logits.push(logits);
    }
    let cand = build_candidate_set(&member_probs[n_models - 1], layout, seed, ctx_id)?;

    let mut probs = Vec::with_capacity(n_models);
    for full in &member_probs {
        let mut sel: Vec<f64> = cand.tokens.iter().map(|&t| full[t as usize]).collect();
        let sum: f64 = sel.iter().sum();
        if sum <= 0.0 {
            return Err(Error::BadTrace {
                ctx_id,
                msg: "candidate probabilities vanished",
            });
        }
        for p in sel.iter_mut() {
            *p /= sum;
        }
        probs.push(sel.iter().map(|&p| p as f32).collect());
    }
    let gather = |row: &[f64]| -> Vec<f32> {
        cand.tokens.iter().map(|&t| row[t as usize] as f32).collect()
    };
    Ok(TraceRecord {
        ctx_id,
        ctx: padded,
        cands: cand.tokens.clone(),
        prov: cand.provenance,
        probs,
        l_alm: gather(&member_logits[0]),
        l_elm: gather(&member_logits[n_models - 1]),
    })
}

/// Run the whole family over every position of `corpus` and record
/// candidate-set probabilities. Contexts are numbered sequentially in
/// corpus order; an empty corpus yields zero records.
pub fn collect_traces(
    family: &ModelFamily,
    corpus: &Corpus,
    layout: &CandidateLayout,
    seed: u64,
) -> Result<TraceData> {
    let n_models = family.n_members();
    let window = family.manifest().window;
    let v = family.vocab().len();
    let header = TraceHeader {
        version: TRACE_VERSION,
        family_hash: family.fingerprint(),
        n_models,
        log_sizes: family.log_sizes(),
        layout: *layout,
        seed,
    };

    // Gather every (ctx_id, window) pair first so we can batch the forwards.
    let mut windows: Vec<u32> = Vec::with_capacity(corpus.n_contexts() * window);
    for line in corpus.lines() {
        for t in 0..line.len() {
            windows.extend_from_slice(&context_window(&line[..t], window));
        }
    }
    let n_ctx = windows.len() / window.max(1);

    let mut records: Vec<TraceRecord> = Vec::with_capacity(n_ctx);
    let chunk = 128usize;
    let mut buf = BatchBuf::default();
    let mut member_logits: Vec<Vec<f32>> = vec![Vec::new(); n_models];

    let mut base = 0usize;
    while base < n_ctx {
        let bsz = chunk.min(n_ctx - base);
        let ctxs = &windows[base * window..(base + bsz) * window];
        for (mi, member) in family.members().iter().enumerate() {
            member.forward_batch(ctxs, bsz, &mut buf)?;
            member_logits[mi].clear();
            member_logits[mi].extend_from_slice(&buf.logits[..bsz * v]);
        }
        for r in 0..bsz {
            let ctx_id = (base + r) as u64;
            let elm_row = &member_logits[n_models - 1][r * v..(r + 1) * v];
            let mut expert_probs: Vec<f64> = elm_row.iter().map(|&x| x as f64).collect();
            softmax_inplace(&mut expert_probs);
            let cand = build_candidate_set(&expert_probs, layout, seed, ctx_id)?;

            let mut probs = Vec::with_capacity(n_models);
            for row in &member_logits {
                let logits = &row[r * v..(r + 1) * v];
                let mut full: Vec<f64> = logits.iter().map(|&x| x as f64).collect();
                softmax_inplace(&mut full);
                let mut sel: Vec<f64> = cand.tokens.iter().map(|&t| full[t as usize]).collect();
                let sum: f64 = sel.iter().sum();
                if sum <= 0.0 {
                    return Err(Error::BadTrace {
                        ctx_id,
                        msg: "candidate probabilities vanished",
                    });
                }
                for p in sel.iter_mut() {
                    *p /= sum;
                }
                probs.push(sel.iter().map(|&p| p as f32).collect());
            }

            let gather = |row: &[f32]| -> Vec<f32> {
                cand.tokens.iter().map(|&t| row[t as usize]).collect()
            };
            let l_alm = gather(&member_logits[0][r * v..(r + 1) * v]);
            let l_elm = gather(elm_row);
            records.push(TraceRecord {
                ctx_id,
                ctx: ctxs[r * window..(r + 1) * window].to_vec(),
                cands: cand.tokens,
                prov: cand.provenance,
                probs,
                l_alm,
                l_elm,
            });
        }
        base += bsz;
    }

    let data = TraceData { header, records };
    data.validate()?;
    Ok(data)
}
