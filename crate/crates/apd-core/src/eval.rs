//! Multiple-choice evaluation, the decode-strength grid, and generation
//! diagnostics.
//!
//! Scoring protocol: at each answer step the expert's twenty most probable
//! tokens form the allowed set. A method's scores are softmaxed over that
//! set, smoothed additively by 0.01, and renormalized; answer perplexity is
//! the exponential of the mean token NLL. Items whose correct answer ever
//! leaves the allowed set are excluded from perplexity; accuracy items
//! additionally need a fully-covered incorrect option.

use alloc::collections::BTreeMap;
use alloc::vec;
use alloc::vec::Vec;

use crate::curve::{self, fit_token_curve, FitConfig};
use crate::error::{Error, Result};
use crate::family::ModelFamily;
use crate::math::{self, rank_descending};
use crate::model::TinyLm;
use crate::trace::{self, CandidateLayout};

/// Allowed-set size per answer step.
pub const TOP_K_EVAL: usize = 20;
/// Additive smoothing applied inside the allowed set.
pub const SMOOTHING: f64 = 0.01;

/// Contrast strengths (1/T) swept during evaluation.
pub const INV_T_GRID: [f64; 19] = [
    0.05, 0.10, 0.15, 0.20, 0.25, 0.30, 0.35, 0.40, 0.45, 0.50, 0.55, 0.60, 0.80, 1.00, 1.20,
    1.40, 1.60, 1.80, 2.00,
];

/// The on-the-fly mixture weight cannot exceed 1, so its sweep stops there.
pub const INV_T_GRID_OTF: [f64; 14] = [
    0.05, 0.10, 0.15, 0.20, 0.25, 0.30, 0.35, 0.40, 0.45, 0.50, 0.55, 0.60, 0.80, 1.00,
];

/// One multiple-choice item, already tokenized.
#[derive(Debug, Clone, PartialEq)]
pub struct QaItem {
    pub prompt: Vec<u32>,
    pub options: Vec<Vec<u32>>,
    pub correct: usize,
}

impl QaItem {
    pub fn new(prompt: Vec<u32>, options: Vec<Vec<u32>>, correct: usize) -> Result<QaItem> {
        if options.len() < 2 {
            return Err(Error::EmptyInput("need at least two options"));
        }
        if correct >= options.len() {
            return Err(Error::BadParam {
                name: "correct option index",
                value: correct as f64,
            });
        }
        if options.iter().any(|o| o.is_empty()) {
            return Err(Error::EmptyInput("option tokens"));
        }
        Ok(QaItem {
            prompt,
            options,
            correct,
        })
    }
}

/// Smooth a restricted, renormalized distribution in place:
/// `(p + 0.01) / (1 + 0.01 * len)`.
pub fn smooth_restricted(probs: &mut [f64]) {
    let z = 1.0 + SMOOTHING * probs.len() as f64;
    for p in probs.iter_mut() {
        *p = (*p + SMOOTHING) / z;
    }
}

/// Reciprocal rank of entry `gold_pos`, where ties are broken against the
/// gold token: equal probabilities with smaller token ids rank ahead.
pub fn reciprocal_rank_with_ids(probs: &[f64], ids: &[u32], gold_pos: usize) -> f64 {
    let g = probs[gold_pos];
    let gid = ids[gold_pos];
    let mut rank = 1usize;
    for (j, &p) in probs.iter().enumerate() {
        if j == gold_pos {
            continue;
        }
        if p > g || (p == g && ids[j] < gid) {
            rank += 1;
        }
    }
    1.0 / rank as f64
}

/// Reciprocal rank with positional ids 0..n.
pub fn reciprocal_rank(probs: &[f64], gold_pos: usize) -> f64 {
    let ids: Vec<u32> = (0..probs.len() as u32).collect();
    reciprocal_rank_with_ids(probs, &ids, gold_pos)
}

struct StepCache {
    ctx: Vec<u32>,
    /// Allowed tokens in rank order (descending expert probability,
    /// ascending id on ties).
    ids: Vec<u32>,
    l_e: Vec<f64>,
    gold_pos: Option<usize>,
}

struct OptionCache {
    steps: Vec<StepCache>,
    fully_in: bool,
}

struct ItemCache {
    options: Vec<OptionCache>,
    in_ppl: bool,
    in_acc: bool,
}

/// Metrics at one grid point. `mrr_token` ranks the gold token inside each
/// step's allowed set; `mrr_option` ranks the correct option by perplexity.
/// Undefined metrics (empty accuracy set) come back as NaN.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridPoint {
    pub inv_t: f64,
    pub perplexity: f64,
    pub accuracy: f64,
    pub mrr_token: f64,
    pub mrr_option: f64,
}

/// Expert-side caches for a QA set, reusable across grid sweeps.
pub struct QaEval {
    items: Vec<QaItem>,
    cache: Vec<ItemCache>,
    n_ppl: usize,
    n_acc: usize,
}

impl QaEval {
    /// Run the expert over every option prefix once and freeze the allowed
    /// sets and filter flags.
    pub fn prepare(expert: &TinyLm, items: Vec<QaItem>) -> Result<QaEval> {
        if items.is_empty() {
            return Err(Error::EmptyInput("qa items"));
        }
        let v = expert.vocab_size();
        let k = TOP_K_EVAL.min(v);
        let mut cache = Vec::with_capacity(items.len());
        let (mut n_ppl, mut n_acc) = (0usize, 0usize);
        for item in &items {
            let mut options = Vec::with_capacity(item.options.len());
            for option in &item.options {
                let mut steps = Vec::with_capacity(option.len());
                let mut fully_in = true;
                for t in 0..option.len() {
                    let mut ctx = item.prompt.clone();
                    ctx.extend_from_slice(&option[..t]);
                    let logits = expert.logits(&ctx)?;
                    let order = rank_descending(&logits);
                    let ids: Vec<u32> = order.iter().take(k).map(|&i| i as u32).collect();
                    let l_e: Vec<f64> = ids.iter().map(|&i| logits[i as usize]).collect();
                    let gold = option[t];
                    if gold as usize >= v {
                        return Err(Error::TokenOutOfRange { id: gold, vocab: v });
                    }
                    let gold_pos = ids.iter().position(|&i| i == gold);
                    fully_in &= gold_pos.is_some();
                    steps.push(StepCache {
                        ctx,
                        ids,
                        l_e,
                        gold_pos,
                    });
                }
                options.push(OptionCache { steps, fully_in });
            }
            let in_ppl = options[item.correct].fully_in;
            let in_acc = in_ppl
                && options
                    .iter()
                    .enumerate()
                    .any(|(i, o)| i != item.correct && o.fully_in);
            n_ppl += in_ppl as usize;
            n_acc += in_acc as usize;
            cache.push(ItemCache {
                options,
                in_ppl,
                in_acc,
            });
        }
        if n_ppl == 0 {
            return Err(Error::EmptyInput("no item survives the coverage filter"));
        }
        Ok(QaEval {
            items,
            cache,
            n_ppl,
            n_acc,
        })
    }

    pub fn n_items(&self) -> usize {
        self.items.len()
    }

    pub fn n_ppl_items(&self) -> usize {
        self.n_ppl
    }

    pub fn n_acc_items(&self) -> usize {
        self.n_acc
    }

    /// Sweep contrast strengths against `amateur`. A strength of zero
    /// scores the expert alone.
    pub fn grid(&self, amateur: &TinyLm, inv_ts: &[f64]) -> Result<Vec<GridPoint>> {
        // One amateur forward per cached step, shared by every grid point.
        let mut l_a: Vec<Vec<Vec<Vec<f64>>>> = Vec::with_capacity(self.cache.len());
        for item in &self.cache {
            let mut per_opt = Vec::with_capacity(item.options.len());
            for opt in &item.options {
                let mut per_step = Vec::with_capacity(opt.steps.len());
                for step in &opt.steps {
                    let logits = amateur.logits(&step.ctx)?;
                    per_step.push(step.ids.iter().map(|&i| logits[i as usize]).collect());
                }
                per_opt.push(per_step);
            }
            l_a.push(per_opt);
        }
        let mut out = Vec::with_capacity(inv_ts.len());
        for &inv_t in inv_ts {
            if !inv_t.is_finite() || inv_t < 0.0 {
                return Err(Error::BadTemperature(inv_t));
            }
            out.push(self.sweep_point(inv_t, |ic, oc, sc| {
                let la = &l_a[ic][oc][sc];
                let step = &self.cache[ic].options[oc].steps[sc];
                let mut dist: Vec<f64> = step
                    .l_e
                    .iter()
                    .zip(la)
                    .map(|(&e, &a)| e - inv_t * a)
                    .collect();
                math::softmax_inplace(&mut dist);
                smooth_restricted(&mut dist);
                dist
            }));
        }
        Ok(out)
    }

    /// Sweep on-the-fly mixture weights: per step the family is traced, each
    /// candidate's curve is fitted once, and the normalized top-band
    /// asymptotes are blended with the expert at every weight.
    pub fn otf_grid(
        &self,
        family: &ModelFamily,
        layout: &CandidateLayout,
        fit: &FitConfig,
        inv_ts: &[f64],
        seed: u64,
    ) -> Result<Vec<GridPoint>> {
        for &w in inv_ts {
            if !(0.0..=1.0).contains(&w) {
                return Err(Error::BadParam {
                    name: "mix weight",
                    value: w,
                });
            }
        }
        let sizes = family.log_sizes();
        // Per step: expert and asymptote mass on the allowed set.
        let mut blended: Vec<Vec<Vec<Option<(Vec<f64>, Vec<f64>)>>>> =
            Vec::with_capacity(self.cache.len());
        let mut ctx_id = 0u64;
        for item in &self.cache {
            let mut per_opt = Vec::with_capacity(item.options.len());
            for opt in &item.options {
                let mut per_step = Vec::with_capacity(opt.steps.len());
                for step in &opt.steps {
                    if !(item.in_ppl || item.in_acc) {
                        per_step.push(None);
                        continue;
                    }
                    let rec = trace::trace_one(family, &step.ctx, ctx_id, layout, seed)?;
                    ctx_id += 1;
                    let k = step.ids.len();
                    if rec.cands.len() < k || rec.cands[..k] != step.ids[..] {
                        return Err(Error::BadTrace {
                            ctx_id: rec.ctx_id,
                            msg: "candidate top band disagrees with the allowed set",
                        });
                    }
                    let otf = curve::fit_on_the_fly(&rec, &sizes, 0.0, fit)?;
                    let expert_row = rec.probs.last().expect("validated trace");
                    let p_e: Vec<f64> = expert_row[..k].iter().map(|&p| p as f64).collect();
                    let p_ac: Vec<f64> = otf.p_ac[..k].to_vec();
                    per_step.push(Some((p_e, p_ac)));
                }
                per_opt.push(per_step);
            }
            blended.push(per_opt);
        }
        let mut out = Vec::with_capacity(inv_ts.len());
        for &w in inv_ts {
            out.push(self.sweep_point(w, |ic, oc, sc| {
                let (p_e, p_ac) = blended[ic][oc][sc].as_ref().expect("scored item");
                let mut dist: Vec<f64> = p_e
                    .iter()
                    .zip(p_ac)
                    .map(|(&e, &a)| (1.0 - w) * e + w * a)
                    .collect();
                let sum: f64 = dist.iter().sum();
                if sum > 0.0 {
                    for p in dist.iter_mut() {
                        *p /= sum;
                    }
                }
                smooth_restricted(&mut dist);
                dist
            }));
        }
        Ok(out)
    }

    /// The expert alone (contrast strength zero).
    pub fn expert_point(&self, expert: &TinyLm) -> Result<GridPoint> {
        Ok(self.grid(expert, &[0.0])?[0])
    }

    /// Evaluate every metric at one strength given a per-step smoothed
    /// distribution provider.
    fn sweep_point<F>(&self, inv_t: f64, dist_at: F) -> GridPoint
    where
        F: Fn(usize, usize, usize) -> Vec<f64>,
    {
        let option_ppl = |ic: usize, oc: usize| -> f64 {
            let opt = &self.cache[ic].options[oc];
            if !opt.fully_in {
                return f64::INFINITY;
            }
            let mut nll = 0.0;
            for (sc, step) in opt.steps.iter().enumerate() {
                let dist = dist_at(ic, oc, sc);
                let g = step.gold_pos.expect("fully covered option");
                nll -= math::ln(dist[g]);
            }
            math::exp(nll / opt.steps.len() as f64)
        };

        let mut ppl_sum = 0.0;
        let mut mrr_token_sum = 0.0;
        let mut mrr_token_n = 0usize;
        let mut correct = 0usize;
        let mut mrr_option_sum = 0.0;
        for (ic, item) in self.cache.iter().enumerate() {
            let gold_opt = self.items[ic].correct;
            if item.in_ppl {
                ppl_sum += option_ppl(ic, gold_opt);
                for (sc, step) in item.options[gold_opt].steps.iter().enumerate() {
                    let dist = dist_at(ic, gold_opt, sc);
                    let g = step.gold_pos.expect("fully covered option");
                    mrr_token_sum += reciprocal_rank_with_ids(&dist, &step.ids, g);
                    mrr_token_n += 1;
                }
            }
            if item.in_acc {
                let ppls: Vec<f64> = (0..item.options.len())
                    .map(|oc| option_ppl(ic, oc))
                    .collect();
                let gold_ppl = ppls[gold_opt];
                let beaten = ppls
                    .iter()
                    .enumerate()
                    .all(|(oc, &p)| oc == gold_opt || gold_ppl < p);
                correct += beaten as usize;
                let mut rank = 1usize;
                for (oc, &p) in ppls.iter().enumerate() {
                    if oc != gold_opt && (p < gold_ppl || (p == gold_ppl && oc < gold_opt)) {
                        rank += 1;
                    }
                }
                mrr_option_sum += 1.0 / rank as f64;
            }
        }
        GridPoint {
            inv_t,
            perplexity: ppl_sum / self.n_ppl as f64,
            accuracy: if self.n_acc > 0 {
                correct as f64 / self.n_acc as f64
            } else {
                f64::NAN
            },
            mrr_token: mrr_token_sum / mrr_token_n as f64,
            mrr_option: if self.n_acc > 0 {
                mrr_option_sum / self.n_acc as f64
            } else {
                f64::NAN
            },
        }
    }
}

/// Distinct-over-total n-grams of one sequence; vacuously 1 when the
/// sequence is shorter than `n`.
pub fn dist_n(tokens: &[u32], n: usize) -> f64 {
    assert!(n > 0);
    if tokens.len() < n {
        return 1.0;
    }
    let total = tokens.len() - n + 1;
    let mut seen: BTreeMap<&[u32], ()> = BTreeMap::new();
    for win in tokens.windows(n) {
        seen.insert(win, ());
    }
    seen.len() as f64 / total as f64
}

/// Pooled distinct-over-total n-grams across several continuations.
pub fn dist_n_many(seqs: &[Vec<u32>], n: usize) -> f64 {
    assert!(n > 0);
    let mut seen: BTreeMap<&[u32], ()> = BTreeMap::new();
    let mut total = 0usize;
    for seq in seqs {
        if seq.len() < n {
            continue;
        }
        total += seq.len() - n + 1;
        for win in seq.windows(n) {
            seen.insert(win, ());
        }
    }
    if total == 0 {
        return 1.0;
    }
    seen.len() as f64 / total as f64
}

/// Whether any n-gram occurs at least `min_count` times.
pub fn has_repetition(tokens: &[u32], n: usize, min_count: usize) -> bool {
    if tokens.len() < n {
        return false;
    }
    let mut counts: BTreeMap<&[u32], usize> = BTreeMap::new();
    for win in tokens.windows(n) {
        let c = counts.entry(win).or_insert(0);
        *c += 1;
        if *c >= min_count {
            return true;
        }
    }
    false
}

/// Share of continuations with a 4-gram (by default) repeating three times.
pub fn rep_ratio(seqs: &[Vec<u32>], n: usize, min_count: usize) -> f64 {
    if seqs.is_empty() {
        return 0.0;
    }
    let hits = seqs
        .iter()
        .filter(|s| has_repetition(s, n, min_count))
        .count();
    hits as f64 / seqs.len() as f64
}

/// A fixed single-step contrast scenario: an "obvious" continuation that
/// every model in the family rates highly, and a "rare" one only the larger
/// models pick up.
#[derive(Debug, Clone, PartialEq)]
pub struct BlindnessScenario {
    pub elm_probs: Vec<f64>,
    pub alm_probs: Vec<f64>,
    /// `n_models` rows of full-vocabulary probabilities; the last row is
    /// the expert's.
    pub family_rows: Vec<Vec<f64>>,
    pub log_sizes: Vec<f64>,
    pub t: f64,
    pub obvious: usize,
    pub rare: usize,
}

impl BlindnessScenario {
    /// The reference scenario used by the probe command and its test.
    pub fn canonical() -> BlindnessScenario {
        let family_rows = vec![
            vec![0.70, 0.01, 0.10, 0.10, 0.09],
            vec![0.66, 0.06, 0.10, 0.09, 0.09],
            vec![0.63, 0.12, 0.09, 0.08, 0.08],
            vec![0.60, 0.16, 0.08, 0.08, 0.08],
        ];
        BlindnessScenario {
            elm_probs: family_rows[3].clone(),
            alm_probs: family_rows[0].clone(),
            family_rows,
            log_sizes: vec![9.2, 11.5, 13.8, 16.1],
            t: 2.0,
            obvious: 0,
            rare: 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ProbeOutcome {
    pub cd_pick: usize,
    pub apd_pick: usize,
}

/// Compare the plain contrast's argmax against the asymptote-backed one.
/// The contrast scores `ln p_e - ln p_a / t`; the asymptote route fits each
/// token's family curve and blends the normalized asymptotes with the
/// expert at weight `1/t`.
pub fn obvious_blindness_probe(sc: &BlindnessScenario) -> Result<ProbeOutcome> {
    let v = sc.elm_probs.len();
    if sc.alm_probs.len() != v || sc.family_rows.iter().any(|r| r.len() != v) {
        return Err(Error::LengthMismatch {
            what: "scenario rows",
            left: sc.alm_probs.len(),
            right: v,
        });
    }
    if sc.family_rows.len() != sc.log_sizes.len() {
        return Err(Error::LengthMismatch {
            what: "scenario sizes",
            left: sc.family_rows.len(),
            right: sc.log_sizes.len(),
        });
    }
    if !(sc.t.is_finite() && sc.t > 0.0) {
        return Err(Error::BadTemperature(sc.t));
    }
    for &p in sc.elm_probs.iter().chain(&sc.alm_probs) {
        if !(p > 0.0 && p <= 1.0) {
            return Err(Error::BadProbability(p));
        }
    }

    let cd_scores: Vec<f64> = sc
        .elm_probs
        .iter()
        .zip(&sc.alm_probs)
        .map(|(&e, &a)| math::ln(e) - math::ln(a) / sc.t)
        .collect();
    let cd_pick = rank_descending(&cd_scores)[0];

    let cfg = FitConfig::default();
    let mut aps = Vec::with_capacity(v);
    let mut col = vec![0.0f64; sc.family_rows.len()];
    for w in 0..v {
        for (i, row) in sc.family_rows.iter().enumerate() {
            col[i] = row[w];
        }
        aps.push(fit_token_curve(&col, &sc.log_sizes, &cfg)?.ap);
    }
    let mass: f64 = aps.iter().sum();
    if mass <= 0.0 {
        return Err(Error::FitFailed("all asymptotes vanished"));
    }
    let w = 1.0 / sc.t;
    let apd_scores: Vec<f64> = sc
        .elm_probs
        .iter()
        .zip(&aps)
        .map(|(&e, &ap)| (1.0 - w) * e + w * ap / mass)
        .collect();
    let apd_pick = rank_descending(&apd_scores)[0];
    Ok(ProbeOutcome { cd_pick, apd_pick })
}
