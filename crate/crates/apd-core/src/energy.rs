//! Joint fine-tuning of the amateur against family probability traces.
//!
//! A small shape network maps one candidate's observation vector
//! `[ap, p_1, ..., p_N]` to decay parameters `(a, b, d)`. The amateur copy
//! supplies `ap` through a softmax over its candidate logits, so the curve
//! `ap + a * exp(-max(0, b(s - d)))` ties the amateur's probability to the
//! asymptote of the family trend. Three terms are balanced:
//!
//! * fit: sqrt mean squared residual against the first N-1 family rows,
//! * cap: sqrt mean hinge on overshooting the largest model's row,
//! * anchor: sqrt mean squared drift of amateur candidate logits.

use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;

use crate::error::{Error, Result};
use crate::family::ModelFamily;
use crate::math::{self, derive_seed};
use crate::model::{BatchBuf, Optimizer, OptState, TinyLm};
use crate::trace::TraceData;

/// Width of the three hidden layers.
pub const HIDDEN: usize = 100;
const OUT: usize = 3;
/// Keep probability for the droppable observation inputs.
const DROP_KEEP: f64 = 0.5;
/// Guard inside gradient square roots; loss values stay exact.
const SQRT_GUARD: f64 = 1e-12;

#[derive(Debug, Clone, Copy)]
struct Sections {
    w1: usize,
    b1: usize,
    w2: usize,
    b2: usize,
    w3: usize,
    b3: usize,
    w4: usize,
    b4: usize,
    total: usize,
}

fn sections(in_dim: usize) -> Sections {
    let w1 = 0;
    let b1 = w1 + in_dim * HIDDEN;
    let w2 = b1 + HIDDEN;
    let b2 = w2 + HIDDEN * HIDDEN;
    let w3 = b2 + HIDDEN;
    let b3 = w3 + HIDDEN * HIDDEN;
    let w4 = b3 + HIDDEN;
    let b4 = w4 + HIDDEN * OUT;
    Sections {
        w1,
        b1,
        w2,
        b2,
        w3,
        b3,
        w4,
        b4,
        total: b4 + OUT,
    }
}

/// Flat parameter count for a family of `n_models` models.
pub fn energy_param_count(n_models: usize) -> usize {
    sections(n_models + 1).total
}

/// Four affine layers with GELU between them; the three outputs pass through
/// `exp` so the decay parameters are positive. The last layer starts at zero,
/// which makes every curve begin as `(a, b, d) = (1, 1, 1)`.
#[derive(Debug, Clone, PartialEq)]
pub struct EnergyMlp {
    n_models: usize,
    params: Vec<f64>,
}

impl EnergyMlp {
    pub fn new(n_models: usize, seed: u64) -> Result<EnergyMlp> {
        if n_models < 2 {
            return Err(Error::FamilyTooSmall {
                need: 2,
                got: n_models,
            });
        }
        let in_dim = n_models + 1;
        let sec = sections(in_dim);
        let mut params = vec![0.0f64; sec.total];
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let mut xavier = |params: &mut [f64], fan_in: usize, fan_out: usize| {
            let limit = math::sqrt(6.0 / (fan_in + fan_out) as f64);
            for p in params.iter_mut() {
                *p = (rng.gen::<f64>() * 2.0 - 1.0) * limit;
            }
        };
        xavier(&mut params[sec.w1..sec.b1], in_dim, HIDDEN);
        xavier(&mut params[sec.w2..sec.b2], HIDDEN, HIDDEN);
        xavier(&mut params[sec.w3..sec.b3], HIDDEN, HIDDEN);
        // Final layer stays zero: exp(0) = 1 for each shape parameter.
        Ok(EnergyMlp { n_models, params })
    }

    pub fn from_params(n_models: usize, params: Vec<f64>) -> Result<EnergyMlp> {
        if n_models < 2 {
            return Err(Error::FamilyTooSmall {
                need: 2,
                got: n_models,
            });
        }
        let want = sections(n_models + 1).total;
        if params.len() != want {
            return Err(Error::LengthMismatch {
                what: "shape network parameters",
                left: params.len(),
                right: want,
            });
        }
        if params.iter().any(|p| !p.is_finite()) {
            return Err(Error::NonFinite("shape network parameters"));
        }
        Ok(EnergyMlp { n_models, params })
    }

    pub fn n_models(&self) -> usize {
        self.n_models
    }

    pub fn in_dim(&self) -> usize {
        self.n_models + 1
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    /// Decay parameters for one candidate, without dropout.
    pub fn shape(&self, ap: f64, probs: &[f64]) -> Result<(f64, f64, f64)> {
        if probs.len() != self.n_models {
            return Err(Error::LengthMismatch {
                what: "observation row",
                left: probs.len(),
                right: self.n_models,
            });
        }
        let in_dim = self.in_dim();
        let mut x = Vec::with_capacity(in_dim);
        x.push(ap);
        x.extend_from_slice(probs);
        let mut fwd = RowForward::new(in_dim);
        fwd.run(self, &x);
        Ok((
            math::exp(fwd.y[0]),
            math::exp(fwd.y[1]),
            math::exp(fwd.y[2]),
        ))
    }
}

/// Per-row activations kept for the backward pass.
struct RowForward {
    in_dim: usize,
    u1: Vec<f64>,
    h1: Vec<f64>,
    u2: Vec<f64>,
    h2: Vec<f64>,
    u3: Vec<f64>,
    h3: Vec<f64>,
    y: [f64; OUT],
}

impl RowForward {
    fn new(in_dim: usize) -> RowForward {
        RowForward {
            in_dim,
            u1: vec![0.0; HIDDEN],
            h1: vec![0.0; HIDDEN],
            u2: vec![0.0; HIDDEN],
            h2: vec![0.0; HIDDEN],
            u3: vec![0.0; HIDDEN],
            h3: vec![0.0; HIDDEN],
            y: [0.0; OUT],
        }
    }

    fn run(&mut self, mlp: &EnergyMlp, x: &[f64]) {
        let sec = sections(self.in_dim);
        let p = &mlp.params;
        affine_row(x, &p[sec.w1..sec.b1], &p[sec.b1..sec.w2], &mut self.u1);
        for (h, &u) in self.h1.iter_mut().zip(&self.u1) {
            *h = math::gelu(u);
        }
        affine_row(&self.h1, &p[sec.w2..sec.b2], &p[sec.b2..sec.w3], &mut self.u2);
        for (h, &u) in self.h2.iter_mut().zip(&self.u2) {
            *h = math::gelu(u);
        }
        affine_row(&self.h2, &p[sec.w3..sec.b3], &p[sec.b3..sec.w4], &mut self.u3);
        for (h, &u) in self.h3.iter_mut().zip(&self.u3) {
            *h = math::gelu(u);
        }
        let mut y = [0.0; OUT];
        y.copy_from_slice(&p[sec.b4..sec.b4 + OUT]);
        for (j, &h) in self.h3.iter().enumerate() {
            if h == 0.0 {
                continue;
            }
            for (o, yo) in y.iter_mut().enumerate() {
                *yo += h * p[sec.w4 + j * OUT + o];
            }
        }
        self.y = y;
    }

    /// Backward through the four layers. `dy` is the gradient at the linear
    /// outputs; parameter gradients accumulate into `grads`; returns the
    /// gradient at the input row in `dx`.
    fn backprop(&self, mlp: &EnergyMlp, x: &[f64], dy: &[f64; OUT], grads: &mut [f64], dx: &mut [f64]) {
        let sec = sections(self.in_dim);
        let p = &mlp.params;
        let mut dh3 = vec![0.0f64; HIDDEN];
        for (o, &g) in dy.iter().enumerate() {
            grads[sec.b4 + o] += g;
        }
        for j in 0..HIDDEN {
            let mut acc = 0.0;
            for (o, &g) in dy.iter().enumerate() {
                grads[sec.w4 + j * OUT + o] += self.h3[j] * g;
                acc += p[sec.w4 + j * OUT + o] * g;
            }
            dh3[j] = acc * math::gelu_grad(self.u3[j]);
        }
        let mut dh2 = vec![0.0f64; HIDDEN];
        affine_row_backward(
            &self.h2,
            &p[sec.w3..sec.b3],
            &dh3,
            &mut grads[sec.w3..sec.w4],
            &mut dh2,
        );
        for (g, &u) in dh2.iter_mut().zip(&self.u2) {
            *g *= math::gelu_grad(u);
        }
        let mut dh1 = vec![0.0f64; HIDDEN];
        affine_row_backward(
            &self.h1,
            &p[sec.w2..sec.b2],
            &dh2,
            &mut grads[sec.w2..sec.w3],
            &mut dh1,
        );
        for (g, &u) in dh1.iter_mut().zip(&self.u1) {
            *g *= math::gelu_grad(u);
        }
        affine_row_backward(x, &p[sec.w1..sec.b1], &dh1, &mut grads[sec.w1..sec.w2], dx);
    }
}

fn affine_row(x: &[f64], w: &[f64], b: &[f64], out: &mut [f64]) {
    let n_out = out.len();
    out.copy_from_slice(b);
    for (i, &xi) in x.iter().enumerate() {
        if xi == 0.0 {
            continue;
        }
        let row = &w[i * n_out..(i + 1) * n_out];
        for (o, &wv) in out.iter_mut().zip(row) {
            *o += xi * wv;
        }
    }
}

/// `dwdb` is the contiguous weight-then-bias gradient region of one layer.
fn affine_row_backward(
    x: &[f64],
    w: &[f64],
    dout: &[f64],
    dwdb: &mut [f64],
    dx: &mut [f64],
) {
    let n_out = dout.len();
    let (dw, db) = dwdb.split_at_mut(x.len() * n_out);
    for (g, &d) in db.iter_mut().zip(dout) {
        *g += d;
    }
    for (i, &xi) in x.iter().enumerate() {
        let row = i * n_out;
        let mut acc = 0.0;
        for (o, &d) in dout.iter().enumerate() {
            if xi != 0.0 {
                dw[row + o] += xi * d;
            }
            acc += w[row + o] * d;
        }
        dx[i] = acc;
    }
}

/// One context's worth of training data: family rows, frozen amateur logits
/// and current amateur-copy logits, all over the same candidate list.
#[derive(Debug, Clone)]
struct CandBlock {
    /// `n_models * width`, model-major.
    probs: Vec<f64>,
    l_alm: Vec<f64>,
    l_prime: Vec<f64>,
}

impl CandBlock {
    fn width(&self) -> usize {
        self.l_prime.len()
    }
}

/// Loss values over a batch. `z` is the total candidate count.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown {
    pub l1: f64,
    pub l2: f64,
    pub l3: f64,
    pub total: f64,
    pub z: usize,
}

/// sqrt of the mean squared residual: the raw square sum is divided by
/// `z * (n_models - 1)` residual slots.
pub fn loss_l1(sum_sq_residual: f64, z: usize, n_models: usize) -> f64 {
    math::sqrt(sum_sq_residual / (z * (n_models - 1)) as f64)
}

/// sqrt of the mean overshoot hinge (the hinge itself is not squared).
pub fn loss_l2(sum_hinge: f64, z: usize) -> f64 {
    math::sqrt(sum_hinge / z as f64)
}

/// sqrt of the mean squared logit drift.
pub fn loss_l3(sum_sq_delta: f64, z: usize) -> f64 {
    math::sqrt(sum_sq_delta / z as f64)
}

pub fn total_loss(l1: f64, l2: f64, l3: f64, lambda2: f64, lambda3: f64) -> f64 {
    l1 + lambda2 * l2 + lambda3 * l3
}

/// Dropout plan for one batch: each row keeps observation inputs 3..N-1
/// independently with probability 1/2, scaling survivors by 2. The first
/// three inputs and the largest model's row are never dropped.
fn dropout_mask<R: Rng>(rng: &mut R, in_dim: usize, x: &mut [f64]) {
    for i in 3..in_dim - 1 {
        if rng.gen::<f64>() < DROP_KEEP {
            x[i] /= DROP_KEEP;
        } else {
            x[i] = 0.0;
        }
    }
}

struct BatchEval {
    breakdown: LossBreakdown,
    /// Gradient of the total loss wrt each block's `l_prime`.
    dl_prime: Vec<Vec<f64>>,
}

/// Forward-only total loss over blocks; used by finite differencing.
fn batch_loss_only(
    mlp: &EnergyMlp,
    blocks: &[CandBlock],
    sizes: &[f64],
    lambda2: f64,
    lambda3: f64,
) -> LossBreakdown {
    let n = mlp.n_models;
    let in_dim = mlp.in_dim();
    let mut fwd = RowForward::new(in_dim);
    let mut x = vec![0.0f64; in_dim];
    let mut ap = Vec::new();
    let (mut s1, mut s2, mut s3) = (0.0, 0.0, 0.0);
    let mut z = 0usize;
    for block in blocks {
        let w = block.width();
        z += w;
        ap.clear();
        ap.extend_from_slice(&block.l_prime);
        math::softmax_inplace(&mut ap);
        for c in 0..w {
            x[0] = ap[c];
            for i in 0..n {
                x[1 + i] = block.probs[i * w + c];
            }
            fwd.run(mlp, &x);
            let (a, b, d) = (
                math::exp(fwd.y[0]),
                math::exp(fwd.y[1]),
                math::exp(fwd.y[2]),
            );
            for (i, &s) in sizes.iter().enumerate() {
                let phat = ap[c] + a * math::exp(-(b * (s - d)).max(0.0));
                let obs = block.probs[i * w + c];
                if i + 1 < n {
                    let r = phat - obs;
                    s1 += r * r;
                } else {
                    s2 += (phat - obs).max(0.0);
                }
            }
            let delta = block.l_prime[c] - block.l_alm[c];
            s3 += delta * delta;
        }
    }
    let l1 = loss_l1(s1, z, n);
    let l2 = loss_l2(s2, z);
    let l3 = loss_l3(s3, z);
    LossBreakdown {
        l1,
        l2,
        l3,
        total: total_loss(l1, l2, l3, lambda2, lambda3),
        z,
    }
}

/// Loss plus gradients for the shape network and each block's candidate
/// logits. Two sweeps: the first accumulates the square sums that set the
/// sqrt scale factors, the second pushes gradients back through the curve,
/// the network, and the candidate softmax.
fn batch_loss_and_grads<R: Rng>(
    mlp: &EnergyMlp,
    blocks: &[CandBlock],
    sizes: &[f64],
    lambda2: f64,
    lambda3: f64,
    mut dropout: Option<&mut R>,
    mlp_grads: &mut [f64],
) -> BatchEval {
    let n = mlp.n_models;
    let in_dim = mlp.in_dim();
    debug_assert_eq!(sizes.len(), n);
    debug_assert_eq!(mlp_grads.len(), mlp.params.len());

    let total_rows: usize = blocks.iter().map(|b| b.width()).sum();
    let mut xs = vec![0.0f64; total_rows * in_dim];
    let mut fwds: Vec<RowForward> = Vec::with_capacity(total_rows);
    let mut abd = vec![0.0f64; total_rows * OUT];
    let mut resid = vec![0.0f64; total_rows * n];
    let mut aps: Vec<Vec<f64>> = Vec::with_capacity(blocks.len());

    let (mut s1, mut s2, mut s3) = (0.0, 0.0, 0.0);
    let mut z = 0usize;
    let mut row = 0usize;
    for block in blocks {
        let w = block.width();
        z += w;
        let mut ap = block.l_prime.clone();
        math::softmax_inplace(&mut ap);
        for c in 0..w {
            let x = &mut xs[row * in_dim..(row + 1) * in_dim];
            x[0] = ap[c];
            for i in 0..n {
                x[1 + i] = block.probs[i * w + c];
            }
            if let Some(rng) = dropout.as_mut() {
                dropout_mask(rng, in_dim, x);
            }
            let mut fwd = RowForward::new(in_dim);
            fwd.run(mlp, x);
            let (a, b, d) = (
                math::exp(fwd.y[0]),
                math::exp(fwd.y[1]),
                math::exp(fwd.y[2]),
            );
            abd[row * OUT] = a;
            abd[row * OUT + 1] = b;
            abd[row * OUT + 2] = d;
            for (i, &s) in sizes.iter().enumerate() {
                let phat = ap[c] + a * math::exp(-(b * (s - d)).max(0.0));
                let r = phat - block.probs[i * w + c];
                resid[row * n + i] = r;
                if i + 1 < n {
                    s1 += r * r;
                } else {
                    s2 += r.max(0.0);
                }
            }
            let delta = block.l_prime[c] - block.l_alm[c];
            s3 += delta * delta;
            fwds.push(fwd);
            row += 1;
        }
        aps.push(ap);
    }

    let zf = z as f64;
    let m1 = s1 / (zf * (n - 1) as f64);
    let m2 = s2 / zf;
    let m3 = s3 / zf;
    let l1 = math::sqrt(m1);
    let l2 = math::sqrt(m2);
    let l3 = math::sqrt(m3);
    let total = total_loss(l1, l2, l3, lambda2, lambda3);
    // Scale factors d total / d sum, with guarded roots.
    let f1 = 1.0 / (2.0 * math::sqrt(m1 + SQRT_GUARD) * zf * (n - 1) as f64);
    let f2 = lambda2 / (2.0 * math::sqrt(m2 + SQRT_GUARD) * zf);
    let f3 = lambda3 / (2.0 * math::sqrt(m3 + SQRT_GUARD) * zf);

    let mut dl_prime: Vec<Vec<f64>> = Vec::with_capacity(blocks.len());
    let mut dx = vec![0.0f64; in_dim];
    let mut row = 0usize;
    for (bi, block) in blocks.iter().enumerate() {
        let w = block.width();
        let ap = &aps[bi];
        let mut dap = vec![0.0f64; w];
        for c in 0..w {
            let (a, b, d) = (abd[row * OUT], abd[row * OUT + 1], abd[row * OUT + 2]);
            let mut dy = [0.0f64; OUT];
            let mut dap_c = 0.0;
            for (i, &s) in sizes.iter().enumerate() {
                let r = resid[row * n + i];
                let g = if i + 1 < n {
                    f1 * 2.0 * r
                } else if r > 0.0 {
                    f2
                } else {
                    0.0
                };
                if g == 0.0 {
                    continue;
                }
                dap_c += g;
                let arg = b * (s - d);
                let e = math::exp(-arg.max(0.0));
                dy[0] += g * e * a;
                if arg > 0.0 {
                    dy[1] += g * a * e * (-(s - d)) * b;
                    dy[2] += g * a * e * b * d;
                }
            }
            let x = &xs[row * in_dim..(row + 1) * in_dim];
            fwds[row].backprop(mlp, x, &dy, mlp_grads, &mut dx);
            dap[c] = dap_c + dx[0];
            row += 1;
        }
        // Softmax backward over the candidate set, then the anchor term.
        let dot: f64 = dap.iter().zip(ap).map(|(g, p)| g * p).sum();
        let mut dl = vec![0.0f64; w];
        for c in 0..w {
            let delta = block.l_prime[c] - block.l_alm[c];
            dl[c] = ap[c] * (dap[c] - dot) + f3 * 2.0 * delta;
        }
        dl_prime.push(dl);
    }

    BatchEval {
        breakdown: LossBreakdown {
            l1,
            l2,
            l3,
            total,
            z,
        },
        dl_prime,
    }
}

/// AdamW in f64 for the shape network.
struct Adam64 {
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl Adam64 {
    fn new(n: usize) -> Adam64 {
        Adam64 {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    fn step(&mut self, lr: f64, weight_decay: f64, params: &mut [f64], grads: &[f64]) {
        self.t += 1;
        let (b1, b2, eps) = (0.9, 0.999, 1e-8);
        let bc1 = 1.0 - math::powf(b1, self.t as f64);
        let bc2 = 1.0 - math::powf(b2, self.t as f64);
        for ((p, &g), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            *m = b1 * *m + (1.0 - b1) * g;
            *v = b2 * *v + (1.0 - b2) * g * g;
            *p -= lr * ((*m / bc1) / (math::sqrt(*v / bc2) + eps) + weight_decay * *p);
        }
    }
}

/// Training settings for the joint fine-tune.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    /// Amateur-copy learning rate.
    pub lr: f64,
    /// Shape-network learning rate.
    pub mlp_lr: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub warmup_steps: usize,
    pub lambda2: f64,
    pub lambda3: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 3e-4,
            mlp_lr: 1e-3,
            weight_decay: 0.01,
            epochs: 5,
            batch_size: 64,
            warmup_steps: 100,
            lambda2: 10.0,
            lambda3: 0.8,
            seed: 7,
        }
    }
}

/// One optimizer step's losses.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainStep {
    pub step: usize,
    pub epoch: usize,
    pub l1: f64,
    pub l2: f64,
    pub l3: f64,
    pub total: f64,
    pub lr: f64,
}

/// Fine-tune a copy of the family's smallest model jointly with a fresh
/// shape network. Log sizes are shifted so the smallest model sits at 1,
/// which leaves the asymptote untouched but keeps the decay argument in a
/// range the zero-initialized network can work with from the first step.
pub fn train_alm_prime(
    traces: &TraceData,
    family: &ModelFamily,
    cfg: &TrainConfig,
) -> Result<(TinyLm, EnergyMlp, Vec<TrainStep>)> {
    traces.validate()?;
    let fp = family.fingerprint();
    if traces.header.family_hash != fp {
        return Err(Error::HashMismatch {
            traces: traces.header.family_hash,
            family: fp,
        });
    }
    let n = family.n_members();
    if traces.header.n_models != n {
        return Err(Error::LengthMismatch {
            what: "trace models vs family",
            left: traces.header.n_models,
            right: n,
        });
    }
    if traces.records.is_empty() {
        return Err(Error::EmptyInput("trace records"));
    }
    if cfg.epochs == 0 || cfg.batch_size == 0 {
        return Err(Error::BadParam {
            name: "train schedule",
            value: cfg.epochs.min(cfg.batch_size) as f64,
        });
    }

    let raw = &traces.header.log_sizes;
    let sizes: Vec<f64> = raw.iter().map(|s| s - raw[0] + 1.0).collect();

    let mut alm_prime = family.alm().clone();
    let mut mlp = EnergyMlp::new(n, derive_seed(cfg.seed, 0xe9))?;
    let window = alm_prime.window();
    let vocab = alm_prime.vocab_size();

    let opt = Optimizer::AdamW {
        lr: cfg.lr,
        beta1: 0.9,
        beta2: 0.999,
        eps: 1e-8,
        weight_decay: cfg.weight_decay,
    };
    let mut lm_state = OptState::new(alm_prime.param_count());
    let mut lm_grads = vec![0.0f32; alm_prime.param_count()];
    let mut mlp_state = Adam64::new(mlp.param_count());
    let mut mlp_grads = vec![0.0f64; mlp.param_count()];
    let mut buf = BatchBuf::default();

    let n_rec = traces.records.len();
    let mut order: Vec<usize> = (0..n_rec).collect();
    let mut history = Vec::new();
    let mut step = 0usize;

    for epoch in 0..cfg.epochs {
        let mut shuffle = ChaCha12Rng::seed_from_u64(derive_seed(cfg.seed, 0x0e90 + epoch as u64));
        for i in (1..n_rec).rev() {
            let j = shuffle.gen_range(0..=i);
            order.swap(i, j);
        }
        for chunk in order.chunks(cfg.batch_size) {
            step += 1;
            let bsz = chunk.len();
            let mut ctxs = Vec::with_capacity(bsz * window);
            for &r in chunk {
                ctxs.extend_from_slice(&traces.records[r].ctx);
            }
            alm_prime.forward_batch(&ctxs, bsz, &mut buf)?;

            let mut blocks = Vec::with_capacity(bsz);
            for (bi, &r) in chunk.iter().enumerate() {
                let rec = &traces.records[r];
                let w = rec.cands.len();
                let mut probs = Vec::with_capacity(n * w);
                for r_row in &rec.probs {
                    probs.extend(r_row.iter().map(|&p| p as f64));
                }
                let l_alm: Vec<f64> = rec.l_alm.iter().map(|&l| l as f64).collect();
                let row = &buf.logits[bi * vocab..(bi + 1) * vocab];
                let l_prime: Vec<f64> = rec.cands.iter().map(|&c| row[c as usize] as f64).collect();
                blocks.push(CandBlock {
                    probs,
                    l_alm,
                    l_prime,
                });
            }

            for g in mlp_grads.iter_mut() {
                *g = 0.0;
            }
            let mut drop_rng = ChaCha12Rng::seed_from_u64(derive_seed(cfg.seed, 0xd0_0000 + step as u64));
            let eval = batch_loss_and_grads(
                &mlp,
                &blocks,
                &sizes,
                cfg.lambda2,
                cfg.lambda3,
                Some(&mut drop_rng),
                &mut mlp_grads,
            );
            if !eval.breakdown.total.is_finite() {
                return Err(Error::TrainingNan {
                    batch: step,
                    step: epoch,
                });
            }

            let mut dlogits = vec![0.0f32; bsz * vocab];
            for (bi, &r) in chunk.iter().enumerate() {
                let rec = &traces.records[r];
                for (ci, &c) in rec.cands.iter().enumerate() {
                    dlogits[bi * vocab + c as usize] += eval.dl_prime[bi][ci] as f32;
                }
            }
            for g in lm_grads.iter_mut() {
                *g = 0.0;
            }
            alm_prime.backward_batch(&ctxs, bsz, &mut buf, &dlogits, &mut lm_grads);

            let lr_scale = (step as f64 / cfg.warmup_steps.max(1) as f64).min(1.0);
            lm_state.step(&opt, lr_scale, alm_prime.params_mut(), &lm_grads);
            mlp_state.step(
                cfg.mlp_lr * lr_scale,
                cfg.weight_decay,
                &mut mlp.params,
                &mlp_grads,
            );

            history.push(TrainStep {
                step,
                epoch,
                l1: eval.breakdown.l1,
                l2: eval.breakdown.l2,
                l3: eval.breakdown.l3,
                total: eval.breakdown.total,
                lr: cfg.lr * lr_scale,
            });
        }
    }
    Ok((alm_prime, mlp, history))
}

/// A self-contained objective instance for gradient verification: one
/// candidate set with free logits, fixed observation rows, and a smooth
/// operating point (no hinge kinks, no decay-clamp boundaries).
#[derive(Debug, Clone)]
pub struct CheckInstance {
    pub mlp: EnergyMlp,
    pub l_prime: Vec<f64>,
    pub l_alm: Vec<f64>,
    /// `n_models * n_cands`, model-major.
    pub probs: Vec<f64>,
    pub log_sizes: Vec<f64>,
    pub lambda2: f64,
    pub lambda3: f64,
}

impl CheckInstance {
    /// Build a random instance that stays away from the objective's kinks:
    /// every decay argument is positive and every overshoot hinge is either
    /// clearly active or clearly inactive.
    pub fn random(seed: u64, n_models: usize, n_cands: usize) -> Result<CheckInstance> {
        assert!(n_models >= 3 && n_cands >= 2);
        'attempt: for bump in 0..64 {
            let mut rng = ChaCha12Rng::seed_from_u64(derive_seed(seed, bump));
            let mut mlp = EnergyMlp::new(n_models, derive_seed(seed, 0x100 + bump))?;
            let sec = sections(mlp.in_dim());
            // Small random head so shapes vary smoothly around
            // (a, b, d) = (0.3, 1.0, 0.5).
            for p in mlp.params[sec.w4..sec.b4].iter_mut() {
                *p = (rng.gen::<f64>() * 2.0 - 1.0) * 0.15;
            }
            mlp.params[sec.b4] = math::ln(0.3) + (rng.gen::<f64>() * 0.2 - 0.1);
            mlp.params[sec.b4 + 1] = rng.gen::<f64>() * 0.2 - 0.1;
            mlp.params[sec.b4 + 2] = math::ln(0.5) + (rng.gen::<f64>() * 0.2 - 0.1);

            let log_sizes: Vec<f64> = (0..n_models)
                .map(|i| 1.0 + 7.0 * i as f64 / (n_models - 1) as f64)
                .collect();

            let mut probs = vec![0.0f64; n_models * n_cands];
            for i in 0..n_models {
                let row = &mut probs[i * n_cands..(i + 1) * n_cands];
                let mut sum = 0.0;
                for p in row.iter_mut() {
                    *p = math::exp(1.5 * rng.gen::<f64>());
                    sum += *p;
                }
                for p in row.iter_mut() {
                    *p /= sum;
                }
            }
            let l_prime: Vec<f64> = (0..n_cands).map(|_| rng.gen::<f64>() * 2.0 - 1.0).collect();
            let l_alm: Vec<f64> = l_prime
                .iter()
                .map(|&l| {
                    let mag = 0.05 + rng.gen::<f64>() * 0.55;
                    if rng.gen::<bool>() {
                        l + mag
                    } else {
                        l - mag
                    }
                })
                .collect();

            let mut inst = CheckInstance {
                mlp,
                l_prime,
                l_alm,
                probs,
                log_sizes,
                lambda2: 10.0,
                lambda3: 0.8,
            };
            // Pin the largest model's row a fixed margin away from the
            // current prediction so each hinge is decisively on or off.
            let phat = inst.predictions();
            for c in 0..n_cands {
                let active = c == 0 || rng.gen::<bool>();
                let margin = 0.05 + rng.gen::<f64>() * 0.10;
                let target = if active {
                    phat[(n_models - 1) * n_cands + c] - margin
                } else {
                    phat[(n_models - 1) * n_cands + c] + margin
                };
                inst.probs[(n_models - 1) * n_cands + c] = target.clamp(0.0, 1.0);
            }
            // The row reset feeds back through the network input; verify
            // the margins survived, otherwise draw again.
            let phat = inst.predictions();
            for c in 0..n_cands {
                let gap = phat[(n_models - 1) * n_cands + c]
                    - inst.probs[(n_models - 1) * n_cands + c];
                if gap.abs() < 0.02 {
                    continue 'attempt;
                }
            }
            let (args_ok, sums) = inst.smoothness();
            if !args_ok || sums.0 < 1e-4 || sums.1 < 1e-5 || sums.2 < 1e-4 {
                continue 'attempt;
            }
            return Ok(inst);
        }
        Err(Error::FitFailed("no smooth check instance found"))
    }

    fn block(&self) -> CandBlock {
        CandBlock {
            probs: self.probs.clone(),
            l_alm: self.l_alm.clone(),
            l_prime: self.l_prime.clone(),
        }
    }

    pub fn loss(&self) -> LossBreakdown {
        batch_loss_only(
            &self.mlp,
            core::slice::from_ref(&self.block()),
            &self.log_sizes,
            self.lambda2,
            self.lambda3,
        )
    }

    /// Curve predictions per (model, candidate), model-major.
    fn predictions(&self) -> Vec<f64> {
        let n = self.mlp.n_models;
        let w = self.l_prime.len();
        let mut ap = self.l_prime.clone();
        math::softmax_inplace(&mut ap);
        let mut out = vec![0.0f64; n * w];
        let mut obs = vec![0.0f64; n];
        for c in 0..w {
            for i in 0..n {
                obs[i] = self.probs[i * w + c];
            }
            let (a, b, d) = self.mlp.shape(ap[c], &obs).unwrap();
            for (i, &s) in self.log_sizes.iter().enumerate() {
                out[i * w + c] = ap[c] + a * math::exp(-(b * (s - d)).max(0.0));
            }
        }
        out
    }

    /// Returns whether all decay arguments clear the clamp, plus the mean
    /// square-sums (m1, m2, m3) that set the sqrt scales.
    fn smoothness(&self) -> (bool, (f64, f64, f64)) {
        let n = self.mlp.n_models;
        let w = self.l_prime.len();
        let mut ap = self.l_prime.clone();
        math::softmax_inplace(&mut ap);
        let mut ok = true;
        let (mut s1, mut s2, mut s3) = (0.0, 0.0, 0.0);
        let mut obs = vec![0.0f64; n];
        for c in 0..w {
            for i in 0..n {
                obs[i] = self.probs[i * w + c];
            }
            let (a, b, d) = self.mlp.shape(ap[c], &obs).unwrap();
            for (i, &s) in self.log_sizes.iter().enumerate() {
                if b * (s - d) < 0.05 {
                    ok = false;
                }
                let phat = ap[c] + a * math::exp(-(b * (s - d)).max(0.0));
                let r = phat - obs[i];
                if i + 1 < n {
                    s1 += r * r;
                } else {
                    s2 += r.max(0.0);
                }
            }
            let delta = self.l_prime[c] - self.l_alm[c];
            s3 += delta * delta;
        }
        let zf = w as f64;
        (ok, (s1 / (zf * (n - 1) as f64), s2 / zf, s3 / zf))
    }
}

/// Compare analytic gradients against central differences. Probes every
/// parameter block (four weight matrices, four biases, and the candidate
/// logits); `limit` caps probed entries per block, chosen by a seeded
/// shuffle so repeated calls with different instances cover different
/// coordinates. Returns the largest relative error, where near-zero pairs
/// are measured against a floor tied to the gradient's overall scale.
pub fn gradient_check(inst: &CheckInstance, eps: f64, limit: Option<usize>) -> f64 {
    let mut mlp = inst.mlp.clone();
    let mut l_prime = inst.l_prime.clone();
    let mut mlp_grads = vec![0.0f64; mlp.param_count()];
    let blocks = [CandBlock {
        probs: inst.probs.clone(),
        l_alm: inst.l_alm.clone(),
        l_prime: l_prime.clone(),
    }];
    let eval = batch_loss_and_grads::<ChaCha12Rng>(
        &mlp,
        &blocks,
        &inst.log_sizes,
        inst.lambda2,
        inst.lambda3,
        None,
        &mut mlp_grads,
    );
    let dl_prime = &eval.dl_prime[0];

    let linf = mlp_grads
        .iter()
        .chain(dl_prime.iter())
        .fold(0.0f64, |m, g| m.max(g.abs()));
    let floor = 1e-3 * (1.0 + linf);

    let sec = sections(mlp.in_dim());
    let spans = [
        (sec.w1, sec.b1),
        (sec.b1, sec.w2),
        (sec.w2, sec.b2),
        (sec.b2, sec.w3),
        (sec.w3, sec.b3),
        (sec.b3, sec.w4),
        (sec.w4, sec.b4),
        (sec.b4, sec.b4 + OUT),
    ];
    let mut worst = 0.0f64;
    let mut pick_rng = ChaCha12Rng::seed_from_u64(derive_seed(0x9c, inst.l_prime.len() as u64));

    let probe = |idx: usize,
                     is_logit: bool,
                     mlp: &mut EnergyMlp,
                     l_prime: &mut Vec<f64>,
                     worst: &mut f64| {
        let analytic = if is_logit {
            dl_prime[idx]
        } else {
            mlp_grads[idx]
        };
        let orig = if is_logit {
            l_prime[idx]
        } else {
            mlp.params[idx]
        };
        let eval_at = |v: f64, mlp: &mut EnergyMlp, l_prime: &mut Vec<f64>| {
            if is_logit {
                l_prime[idx] = v;
            } else {
                mlp.params[idx] = v;
            }
            let blocks = [CandBlock {
                probs: inst.probs.clone(),
                l_alm: inst.l_alm.clone(),
                l_prime: l_prime.clone(),
            }];
            batch_loss_only(mlp, &blocks, &inst.log_sizes, inst.lambda2, inst.lambda3).total
        };
        let hi = eval_at(orig + eps, mlp, l_prime);
        let lo = eval_at(orig - eps, mlp, l_prime);
        if is_logit {
            l_prime[idx] = orig;
        } else {
            mlp.params[idx] = orig;
        }
        let fd = (hi - lo) / (2.0 * eps);
        let rel = (analytic - fd).abs() / analytic.abs().max(fd.abs()).max(floor);
        if rel > *worst {
            *worst = rel;
        }
    };

    for (lo, hi) in spans {
        let len = hi - lo;
        let take = limit.unwrap_or(len).min(len);
        if take == len {
            for idx in lo..hi {
                probe(idx, false, &mut mlp, &mut l_prime, &mut worst);
            }
        } else {
            let mut picks: Vec<usize> = (0..len).collect();
            for i in (1..len).rev() {
                let j = pick_rng.gen_range(0..=i);
                picks.swap(i, j);
            }
            for &off in picks.iter().take(take) {
                probe(lo + off, false, &mut mlp, &mut l_prime, &mut worst);
            }
        }
    }
    for idx in 0..l_prime.len() {
        probe(idx, true, &mut mlp, &mut l_prime, &mut worst);
    }
    worst
}
