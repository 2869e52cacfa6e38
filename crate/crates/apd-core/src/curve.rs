//! Decay curves over log model size and the per-token asymptote estimator.
//!
//! A token's probability across a size ladder is modeled as a clamped decay
//! toward an asymptote AP:
//!
//! * exponential:  AP + a * exp(-max(0, b(s - d)))
//! * logistic:     AP + a / (1 + exp(max(0, b(s - d))))
//! * fractional:   AP + a * (d_half / sqrt(x) + sum_k d_k / x^k),
//!   x = max(1, b(s - d))
//!
//! Rising sequences are complemented ("flipped") into decaying ones first;
//! the estimated asymptote is complemented back afterwards.

use alloc::vec;
use alloc::vec::Vec;

use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;

use crate::error::{Error, Result};
use crate::math;
use crate::trace::{Provenance, TraceRecord};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CurveFamily {
    Exponential,
    Logistic,
    /// Fractional polynomial with inverse powers 1..=k plus the 1/sqrt term.
    FracPoly {
        k: usize,
    },
}

/// Parameters of one decay curve. `frac` is empty except for `FracPoly`,
/// where it holds `[d_half, d_1, ..., d_k]`.
#[derive(Debug, Clone, PartialEq)]
pub struct CurveParams {
    pub family: CurveFamily,
    pub ap: f64,
    pub a: f64,
    pub b: f64,
    pub d: f64,
    pub frac: Vec<f64>,
}

impl CurveParams {
    pub fn new(family: CurveFamily, ap: f64, a: f64, b: f64, d: f64, frac: Vec<f64>) -> Result<CurveParams> {
        if !(0.0..=1.0).contains(&ap) {
            return Err(Error::BadProbability(ap));
        }
        for (name, v) in [("a", a), ("b", b), ("d", d)] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::BadParam { name, value: v });
            }
        }
        match family {
            CurveFamily::FracPoly { k } => {
                if frac.len() != k + 1 {
                    return Err(Error::LengthMismatch {
                        what: "fractional coefficients",
                        left: frac.len(),
                        right: k + 1,
                    });
                }
                for &c in &frac {
                    if !c.is_finite() || c < 0.0 {
                        return Err(Error::BadParam {
                            name: "frac coefficient",
                            value: c,
                        });
                    }
                }
            }
            _ => {
                if !frac.is_empty() {
                    return Err(Error::LengthMismatch {
                        what: "fractional coefficients",
                        left: frac.len(),
                        right: 0,
                    });
                }
            }
        }
        Ok(CurveParams {
            family,
            ap,
            a,
            b,
            d,
            frac,
        })
    }

    pub fn exponential(ap: f64, a: f64, b: f64, d: f64) -> Result<CurveParams> {
        Self::new(CurveFamily::Exponential, ap, a, b, d, Vec::new())
    }

    /// Curve value at log size `s`. Non-increasing in `s`; approaches `ap`
    /// from above as `s` grows.
    pub fn eval(&self, s: f64) -> f64 {
        let arg = self.b * (s - self.d);
        match self.family {
            CurveFamily::Exponential => self.ap + self.a * math::exp(-arg.max(0.0)),
            CurveFamily::Logistic => self.ap + self.a / (1.0 + math::exp(arg.max(0.0))),
            CurveFamily::FracPoly { k } => {
                let x = arg.max(1.0);
                let mut acc = self.frac[0] / math::sqrt(x);
                let mut pow = 1.0;
                for i in 1..=k {
                    pow *= x;
                    acc += self.frac[i] / pow;
                }
                self.ap + self.a * acc
            }
        }
    }
}

/// A possibly-complemented observation sequence. `flipped` records whether
/// the complement was applied, so the transform can be undone exactly.
#[derive(Debug, Clone, PartialEq)]
pub struct FlipResult {
    pub flipped: bool,
    pub ap: f64,
    pub probs: Vec<f64>,
}

impl FlipResult {
    /// Undo the transform: complements again iff it was applied.
    pub fn unflip(&self) -> (f64, Vec<f64>) {
        if self.flipped {
            (1.0 - self.ap, self.probs.iter().map(|p| 1.0 - p).collect())
        } else {
            (self.ap, self.probs.clone())
        }
    }
}

/// Complement rising sequences so every curve decays: identity when the
/// smallest model's probability is already >= the largest's, otherwise
/// v -> 1 - v on every value including the candidate asymptote. Applying
/// the rule to its own output is the identity (the branch condition is
/// inverted by complementing), and `unflip` undoes the complement, exactly
/// for values of at least one half and to within one floating-point
/// rounding below that.
pub fn flip(ap: f64, probs: &[f64]) -> Result<FlipResult> {
    if probs.len() < 2 {
        return Err(Error::LengthMismatch {
            what: "flip needs at least two models",
            left: probs.len(),
            right: 2,
        });
    }
    for &p in probs.iter().chain(core::iter::once(&ap)) {
        if !p.is_finite() || !(0.0..=1.0).contains(&p) {
            return Err(Error::BadProbability(p));
        }
    }
    let rising = probs[0] < probs[probs.len() - 1];
    if rising {
        Ok(FlipResult {
            flipped: true,
            ap: 1.0 - ap,
            probs: probs.iter().map(|p| 1.0 - p).collect(),
        })
    } else {
        Ok(FlipResult {
            flipped: false,
            ap,
            probs: probs.to_vec(),
        })
    }
}

/// Evaluate `params` on a size ladder and add relative Gaussian noise:
/// obs_i = curve(s_i) * (1 + noise * z_i), clamped into [0, 1].
pub fn synthesize_trace(
    params: &CurveParams,
    log_sizes: &[f64],
    noise: f64,
    seed: u64,
) -> Vec<f64> {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    log_sizes
        .iter()
        .map(|&s| {
            let clean = params.eval(s);
            let z = if noise > 0.0 {
                math::std_normal(&mut rng)
            } else {
                0.0
            };
            (clean * (1.0 + noise * z)).clamp(0.0, 1.0)
        })
        .collect()
}

/// Settings for the per-token Adam fit.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FitConfig {
    pub iters: usize,
    pub lr: f64,
    /// Weight on the expert-overshoot hinge term.
    pub l2_weight: f64,
    /// How many learning-rate halvings to try when the fit goes non-finite.
    pub max_retries: usize,
}

impl Default for FitConfig {
    fn default() -> Self {
        FitConfig {
            iters: 400,
            lr: 1e-2,
            l2_weight: 10.0,
            max_retries: 32,
        }
    }
}

/// Result of fitting one token's decay curve.
#[derive(Debug, Clone, PartialEq)]
pub struct FitOutcome {
    /// Asymptotic probability in the *original* orientation, clamped [0, 1].
    pub ap: f64,
    /// Exponential shape fitted in the (possibly flipped) decaying space;
    /// its own `ap` field is the pre-unflip value.
    pub shape: CurveParams,
    pub flipped: bool,
    pub final_loss: f64,
    /// Learning rate that produced a clean fit (halved on retries).
    pub lr_used: f64,
}

// Objective on flipped observations: sqrt mean-square residual over the
// first N-1 sizes plus a weighted linear hinge on expert overshoot. The
// hinge is kept linear here (unlike the batched training term) because a
// rooted single hinge has an unbounded slope at zero, which wrecks the
// optimizer's moment estimates right where the fit should settle.
struct FitScratch {
    e: Vec<f64>,
    p: Vec<f64>,
}

fn fit_loss_grad(
    theta: &[f64; 4],
    obs: &[f64],
    sizes: &[f64],
    w2: f64,
    scratch: &mut FitScratch,
    grad: &mut [f64; 4],
) -> f64 {
    let n = obs.len();
    let (ap, a, b, d) = (theta[0], theta[1], theta[2], theta[3]);
    scratch.e.clear();
    scratch.p.clear();
    for &s in sizes {
        let m = (b * (s - d)).max(0.0);
        let e = math::exp(-m);
        scratch.e.push(e);
        scratch.p.push(ap + a * e);
    }
    let mut s1 = 0.0;
    for i in 0..n - 1 {
        let r = obs[i] - scratch.p[i];
        s1 += r * r;
    }
    let m1 = s1 / (n - 1) as f64;
    let l1 = math::sqrt(m1);
    let hinge = (scratch.p[n - 1] - obs[n - 1]).max(0.0);
    let loss = l1 + w2 * hinge;

    // d loss / d p_i, with the sqrt gradient guarded at zero.
    *grad = [0.0; 4];
    let g1 = 1.0 / (2.0 * math::sqrt(m1 + 1e-12) * (n - 1) as f64);
    for i in 0..n {
        let dp = if i < n - 1 {
            let r = obs[i] - scratch.p[i];
            g1 * (-2.0 * r)
        } else if hinge > 0.0 {
            w2
        } else {
            0.0
        };
        if dp == 0.0 {
            continue;
        }
        let s = sizes[i];
        let e = scratch.e[i];
        grad[0] += dp;
        grad[1] += dp * e;
        if b * (s - d) > 0.0 {
            grad[2] += dp * a * e * -(s - d);
            grad[3] += dp * a * e * b;
        }
    }
    loss
}

/// Estimate the asymptote of one observation sequence: flip if rising, run
/// Adam on (AP, a, b, d) with negatives clamped to zero after every step,
/// halve the learning rate and restart if anything goes non-finite, then
/// un-flip and clamp the asymptote into [0, 1].
pub fn fit_token_curve(observed: &[f64], log_sizes: &[f64], cfg: &FitConfig) -> Result<FitOutcome> {
    if observed.len() != log_sizes.len() {
        return Err(Error::LengthMismatch {
            what: "observations vs sizes",
            left: observed.len(),
            right: log_sizes.len(),
        });
    }
    if observed.len() < 3 {
        return Err(Error::LengthMismatch {
            what: "fit needs at least three sizes",
            left: observed.len(),
            right: 3,
        });
    }
    if cfg.iters == 0 || cfg.lr <= 0.0 || !cfg.lr.is_finite() {
        return Err(Error::BadParam {
            name: "fit config",
            value: cfg.lr,
        });
    }
    let flipped = flip(0.0, observed)?;
    let obs = &flipped.probs;
    let n = obs.len();

    // Data-driven start: the asymptote from the last point, the delay from
    // where the observations leave the initial plateau, and the rate from
    // the log-slope across the clearly-decaying points. Slow decays that
    // begin well inside the size range sit too far from a fixed (1, s_0)
    // start for the iteration budget.
    let ap0 = obs[n - 1];
    let drop = (obs[0] - ap0).max(1e-9);
    let mut j0 = 0usize;
    for j in 1..n - 1 {
        if obs[j] >= obs[0] - 0.05 * drop {
            j0 = j;
        } else {
            break;
        }
    }
    let y = |i: usize| (obs[i] - ap0).max(drop * 1e-6);
    let mut q = j0;
    for i in j0 + 1..n - 1 {
        if y(i) > 0.02 * drop {
            q = i;
        }
    }
    let mut b0 = 1.0;
    if q > j0 {
        let est = math::ln(y(j0) / y(q)) / (log_sizes[q] - log_sizes[j0]);
        if est.is_finite() && est > 0.0 {
            b0 = est.clamp(0.05, 5.0);
        }
    }
    let init = [ap0, drop, b0, log_sizes[j0]];
    let mut scratch = FitScratch {
        e: Vec::with_capacity(n),
        p: Vec::with_capacity(n),
    };

    let mut lr = cfg.lr;
    for _retry in 0..=cfg.max_retries {
        let mut theta = init;
        let mut m = [0.0f64; 4];
        let mut v = [0.0f64; 4];
        let (b1, b2, eps) = (0.9, 0.999, 1e-8);
        let mut grad = [0.0f64; 4];
        let mut loss = 0.0;
        for t in 1..=cfg.iters {
            loss = fit_loss_grad(&theta, obs, log_sizes, cfg.l2_weight, &mut scratch, &mut grad);
            let bc1 = 1.0 - math::powf(b1, t as f64);
            let bc2 = 1.0 - math::powf(b2, t as f64);
            // The rate anneals to zero: the optimum sits on the hinge
            // boundary, where a constant rate leaves an O(lr) oscillation.
            let lr_t = lr * (1.0 - (t - 1) as f64 / cfg.iters as f64);
            for j in 0..4 {
                m[j] = b1 * m[j] + (1.0 - b1) * grad[j];
                v[j] = b2 * v[j] + (1.0 - b2) * grad[j] * grad[j];
                theta[j] -= lr_t * (m[j] / bc1) / (math::sqrt(v[j] / bc2) + eps);
                // Negative parameters are clamped to zero after each step.
                if theta[j] < 0.0 {
                    theta[j] = 0.0;
                }
            }
        }
        let clean = theta.iter().all(|x| x.is_finite()) && loss.is_finite();
        if !clean {
            lr *= 0.5;
            continue;
        }
        let final_loss =
            fit_loss_grad(&theta, obs, log_sizes, cfg.l2_weight, &mut scratch, &mut grad);
        let ap = if flipped.flipped {
            1.0 - theta[0]
        } else {
            theta[0]
        }
        .clamp(0.0, 1.0);
        let shape = CurveParams {
            family: CurveFamily::Exponential,
            ap: theta[0],
            a: theta[1],
            b: theta[2],
            d: theta[3],
            frac: Vec::new(),
        };
        return Ok(FitOutcome {
            ap,
            shape,
            flipped: flipped.flipped,
            final_loss,
            lr_used: lr,
        });
    }
    Err(Error::FitFailed("learning rate underflow without a clean fit"))
}

/// On-the-fly output for one context.
#[derive(Debug, Clone, PartialEq)]
pub struct OnTheFlyResult {
    /// Asymptote-backed distribution: top-band asymptotes normalized to sum
    /// to 1, zero elsewhere. Aligned with the record's candidates.
    pub p_ac: Vec<f64>,
    /// `(1 - mix) * p_expert + mix * p_ac` over the candidate set.
    pub mixed: Vec<f64>,
    pub fits: Vec<FitOutcome>,
}

/// Fit every candidate of a trace record and blend the normalized top-band
/// asymptotes with the expert's distribution. `mix_weight` is the share
/// given to the asymptotes and must lie in [0, 1].
pub fn fit_on_the_fly(
    record: &TraceRecord,
    log_sizes: &[f64],
    mix_weight: f64,
    cfg: &FitConfig,
) -> Result<OnTheFlyResult> {
    if !(0.0..=1.0).contains(&mix_weight) {
        return Err(Error::BadParam {
            name: "mix_weight",
            value: mix_weight,
        });
    }
    if record.probs.len() != log_sizes.len() {
        return Err(Error::LengthMismatch {
            what: "record rows vs sizes",
            left: record.probs.len(),
            right: log_sizes.len(),
        });
    }
    let n_c = record.cands.len();
    let n_m = log_sizes.len();
    let mut fits = Vec::with_capacity(n_c);
    let mut obs = vec![0.0f64; n_m];
    for w in 0..n_c {
        for (i, row) in record.probs.iter().enumerate() {
            obs[i] = row[w] as f64;
        }
        fits.push(fit_token_curve(&obs, log_sizes, cfg)?);
    }

    let mut p_ac = vec![0.0f64; n_c];
    let mut top_mass = 0.0;
    let mut n_top = 0usize;
    for (w, fit) in fits.iter().enumerate() {
        if record.prov[w] == Provenance::Top {
            p_ac[w] = fit.ap;
            top_mass += fit.ap;
            n_top += 1;
        }
    }
    if n_top == 0 {
        return Err(Error::BadTrace {
            ctx_id: record.ctx_id,
            msg: "record has no top-band candidates",
        });
    }
    if top_mass > 1e-12 {
        for p in p_ac.iter_mut() {
            *p /= top_mass;
        }
    } else {
        // Degenerate fits: fall back to uniform over the top band.
        for (w, p) in p_ac.iter_mut().enumerate() {
            *p = if record.prov[w] == Provenance::Top {
                1.0 / n_top as f64
            } else {
                0.0
            };
        }
    }

    let expert = &record.probs[n_m - 1];
    let mixed: Vec<f64> = (0..n_c)
        .map(|w| (1.0 - mix_weight) * expert[w] as f64 + mix_weight * p_ac[w])
        .collect();
    Ok(OnTheFlyResult { p_ac, mixed, fits })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn curve_hand_values() {
        // Exponential: 0.2 + 0.3 * exp(-1) at b(s-d) = 1.
        let c = CurveParams::exponential(0.2, 0.3, 1.0, 0.0).unwrap();
        assert!((c.eval(1.0) - (0.2 + 0.3 * math::exp(-1.0))).abs() < 1e-15);
        assert!((c.eval(1.0) - 0.310_363_832_351_432_7).abs() < 1e-12);
        // Clamp region: below d the curve is flat at ap + a.
        assert!((c.eval(-3.0) - 0.5).abs() < 1e-15);

        // Logistic at the clamp boundary: 0.2 + 0.1 / (1 + e^0) = 0.25.
        let c = CurveParams::new(CurveFamily::Logistic, 0.2, 0.1, 1.0, 5.0, vec![]).unwrap();
        assert!((c.eval(5.0) - 0.25).abs() < 1e-15);
        assert!((c.eval(0.0) - 0.25).abs() < 1e-15, "clamped below d");

        // Fractional polynomial, K = 1: x = 2, 0.1 + 0.2*(0.1/sqrt(2) + 0.3/2).
        let c = CurveParams::new(
            CurveFamily::FracPoly { k: 1 },
            0.1,
            0.2,
            1.0,
            0.0,
            vec![0.1, 0.3],
        )
        .unwrap();
        let want = 0.1 + 0.2 * (0.1 / math::sqrt(2.0) + 0.3 / 2.0);
        assert!((c.eval(2.0) - want).abs() < 1e-15);
        assert!((want - 0.144_142_135_623_730_9).abs() < 1e-12);
    }

    #[test]
    fn curves_decay_toward_ap() {
        for family in [
            CurveFamily::Exponential,
            CurveFamily::Logistic,
            CurveFamily::FracPoly { k: 2 },
        ] {
            let frac = match family {
                CurveFamily::FracPoly { .. } => vec![0.2, 0.4, 0.1],
                _ => vec![],
            };
            let c = CurveParams::new(family, 0.15, 0.4, 0.8, 2.0, frac).unwrap();
            let mut prev = f64::INFINITY;
            for i in 0..60 {
                let s = i as f64 * 0.5;
                let v = c.eval(s);
                assert!(v <= prev + 1e-12, "{family:?} must not increase");
                assert!(v >= c.ap - 1e-12);
                prev = v;
            }
            // The fractional family decays like 1/sqrt, so the tail needs
            // a very large argument before it hugs the asymptote.
            assert!((c.eval(1e12) - c.ap).abs() < 1e-6, "{family:?} tail");
        }
    }

    #[test]
    fn params_are_validated() {
        assert!(CurveParams::exponential(1.2, 0.1, 1.0, 0.0).is_err());
        assert!(CurveParams::exponential(0.5, -0.1, 1.0, 0.0).is_err());
        assert!(CurveParams::new(CurveFamily::FracPoly { k: 1 }, 0.5, 0.1, 1.0, 0.0, vec![0.1]).is_err());
        assert!(CurveParams::new(CurveFamily::Logistic, 0.5, 0.1, 1.0, 0.0, vec![0.1]).is_err());
    }

    #[test]
    fn flip_branches_and_round_trips() {
        // Decaying: identity.
        let f = flip(0.3, &[0.8, 0.5, 0.4]).unwrap();
        assert!(!f.flipped);
        assert_eq!(f.probs, vec![0.8, 0.5, 0.4]);
        // Rising: complemented, including the asymptote candidate.
        let f = flip(0.9, &[0.1, 0.5, 0.7]).unwrap();
        assert!(f.flipped);
        assert!((f.ap - 0.1).abs() < 1e-15);
        assert_eq!(f.probs, vec![1.0 - 0.1, 1.0 - 0.5, 1.0 - 0.7]);
        // The round trip undoes the complement to within one rounding
        // (exact for values of at least one half).
        let (ap, probs) = f.unflip();
        assert_eq!(ap, 0.9);
        for (got, want) in probs.iter().zip([0.1, 0.5, 0.7]) {
            assert!((got - want).abs() < 1e-15);
        }
        // Re-applying the rule to its own output is the identity branch.
        let again = flip(f.ap, &f.probs).unwrap();
        assert!(!again.flipped);
        assert_eq!(again.probs, f.probs);
        // Equal endpoints count as decaying.
        assert!(!flip(0.0, &[0.4, 0.2, 0.4]).unwrap().flipped);
        // Domain is validated.
        assert!(flip(0.5, &[0.2]).is_err());
        assert!(flip(1.5, &[0.2, 0.3]).is_err());
        assert!(flip(0.5, &[0.2, 1.3]).is_err());
    }

    #[test]
    fn synthesized_traces_are_deterministic_and_bounded() {
        let c = CurveParams::exponential(0.3, 0.5, 0.7, 9.0).unwrap();
        let sizes = [9.0, 10.5, 12.0, 13.5, 15.0];
        let a = synthesize_trace(&c, &sizes, 0.05, 4);
        let b = synthesize_trace(&c, &sizes, 0.05, 4);
        assert_eq!(a, b);
        assert!(a.iter().all(|p| (0.0..=1.0).contains(p)));
        let clean = synthesize_trace(&c, &sizes, 0.0, 4);
        for (x, &s) in clean.iter().zip(&sizes) {
            assert!((x - c.eval(s)).abs() < 1e-15);
        }
    }

    #[test]
    fn fit_recovers_noiseless_decay() {
        let truth = CurveParams::exponential(0.25, 0.4, 0.8, 9.0).unwrap();
        let sizes: Vec<f64> = (0..7).map(|i| 9.0 + i as f64 * 1.8).collect();
        let obs = synthesize_trace(&truth, &sizes, 0.0, 1);
        let fit = fit_token_curve(&obs, &sizes, &FitConfig::default()).unwrap();
        assert!(!fit.flipped);
        assert!((fit.ap - 0.25).abs() < 0.02, "ap {}", fit.ap);
        assert!(fit.final_loss < 0.05, "loss {}", fit.final_loss);
    }

    #[test]
    fn fit_flips_rising_sequences() {
        // Rising toward 0.7: the complement decays toward 0.3.
        let sizes: Vec<f64> = (0..7).map(|i| 9.0 + i as f64 * 1.8).collect();
        let comp = CurveParams::exponential(0.3, 0.45, 0.9, 9.0).unwrap();
        let obs: Vec<f64> = sizes.iter().map(|&s| 1.0 - comp.eval(s)).collect();
        assert!(obs[0] < obs[6]);
        let fit = fit_token_curve(&obs, &sizes, &FitConfig::default()).unwrap();
        assert!(fit.flipped);
        assert!((fit.ap - 0.7).abs() < 0.02, "ap {}", fit.ap);
    }

    #[test]
    fn fit_rejects_bad_shapes() {
        let sizes = [1.0, 2.0, 3.0];
        assert!(fit_token_curve(&[0.5, 0.4], &sizes, &FitConfig::default()).is_err());
        assert!(fit_token_curve(&[0.5, 0.4, 0.3, 0.2], &sizes, &FitConfig::default()).is_err());
    }
}
