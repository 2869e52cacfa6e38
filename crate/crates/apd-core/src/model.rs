//! The tiny fixed-window feedforward language model: embed the last k
//! tokens, concatenate, two tanh hidden layers, linear output over the
//! vocabulary. Sizes are meant to span several orders of magnitude, so the
//! parameters live in one flat f32 buffer and the hot paths are batched
//! matrix kernels.

use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;

use crate::error::{Error, Result};
use crate::math::{self, Fnv64};
use crate::vocab::UNK;

/// Width configuration for one family member.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LmSpec {
    pub embed_dim: usize,
    pub hidden: [usize; 2],
}

impl LmSpec {
    pub fn new(embed_dim: usize, h1: usize, h2: usize) -> LmSpec {
        LmSpec {
            embed_dim,
            hidden: [h1, h2],
        }
    }
}

/// Trainable parameter count, embeddings included.
pub fn param_count_for(vocab_size: usize, window: usize, spec: &LmSpec) -> usize {
    let (v, e, h1, h2) = (vocab_size, spec.embed_dim, spec.hidden[0], spec.hidden[1]);
    v * e + (window * e) * h1 + h1 + h1 * h2 + h2 + h2 * v + v
}

#[derive(Debug, Clone, Copy)]
struct Sections {
    emb: usize,
    w1: usize,
    b1: usize,
    w2: usize,
    b2: usize,
    w3: usize,
    b3: usize,
    total: usize,
}

fn sections(v: usize, k: usize, spec: &LmSpec) -> Sections {
    let (e, h1, h2) = (spec.embed_dim, spec.hidden[0], spec.hidden[1]);
    let emb = 0;
    let w1 = emb + v * e;
    let b1 = w1 + (k * e) * h1;
    let w2 = b1 + h1;
    let b2 = w2 + h1 * h2;
    let w3 = b2 + h2;
    let b3 = w3 + h2 * v;
    let total = b3 + v;
    Sections {
        emb,
        w1,
        b1,
        w2,
        b2,
        w3,
        b3,
        total,
    }
}

/// A single family member.
#[derive(Debug, Clone, PartialEq)]
pub struct TinyLm {
    vocab_size: usize,
    window: usize,
    spec: LmSpec,
    params: Vec<f32>,
}

impl TinyLm {
    /// Fresh model with deterministic initialization from `seed`:
    /// uniform(-0.1, 0.1) embeddings, Xavier-uniform weight matrices, zero
    /// biases.
    pub fn new(vocab_size: usize, window: usize, spec: LmSpec, seed: u64) -> Result<TinyLm> {
        if vocab_size < 2 {
            return Err(Error::BadParam {
                name: "vocab_size",
                value: vocab_size as f64,
            });
        }
        if window == 0 || spec.embed_dim == 0 || spec.hidden[0] == 0 || spec.hidden[1] == 0 {
            return Err(Error::BadParam {
                name: "model dimensions",
                value: 0.0,
            });
        }
        let sec = sections(vocab_size, window, &spec);
        let mut params = vec![0.0f32; sec.total];
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let mut uniform = |buf: &mut [f32], limit: f64| {
            for p in buf {
                *p = ((rng.gen::<f64>() * 2.0 - 1.0) * limit) as f32;
            }
        };
        let (e, h1, h2) = (spec.embed_dim, spec.hidden[0], spec.hidden[1]);
        uniform(&mut params[sec.emb..sec.w1], 0.1);
        let xavier = |fan_in: usize, fan_out: usize| math::sqrt(6.0 / (fan_in + fan_out) as f64);
        uniform(&mut params[sec.w1..sec.b1], xavier(window * e, h1));
        uniform(&mut params[sec.w2..sec.b2], xavier(h1, h2));
        uniform(&mut params[sec.w3..sec.b3], xavier(h2, vocab_size));
        Ok(TinyLm {
            vocab_size,
            window,
            spec,
            params,
        })
    }

    /// Rebuild a model from stored parameters (the load path).
    pub fn from_params(
        vocab_size: usize,
        window: usize,
        spec: LmSpec,
        params: Vec<f32>,
    ) -> Result<TinyLm> {
        let expect = param_count_for(vocab_size, window, &spec);
        if params.len() != expect {
            return Err(Error::LengthMismatch {
                what: "parameter buffer",
                left: params.len(),
                right: expect,
            });
        }
        Ok(TinyLm {
            vocab_size,
            window,
            spec,
            params,
        })
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub fn window(&self) -> usize {
        self.window
    }

    pub fn spec(&self) -> &LmSpec {
        &self.spec
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    /// Natural log of the parameter count.
    pub fn log_size(&self) -> f64 {
        math::ln(self.params.len() as f64)
    }

    pub fn params(&self) -> &[f32] {
        &self.params
    }

    pub(crate) fn params_mut(&mut self) -> &mut [f32] {
        &mut self.params
    }

    pub fn content_hash(&self) -> u64 {
        let mut h = Fnv64::new();
        h.write_usize(self.vocab_size);
        h.write_usize(self.window);
        h.write_usize(self.spec.embed_dim);
        h.write_usize(self.spec.hidden[0]);
        h.write_usize(self.spec.hidden[1]);
        for &p in &self.params {
            h.write_f32(p);
        }
        h.finish()
    }

    /// Next-token logits for an arbitrary-length context (left-truncated to
    /// the window, left-padded with `UNK`).
    pub fn logits(&self, context: &[u32]) -> Result<Vec<f64>> {
        let ctx = context_window(context, self.window);
        let mut buf = BatchBuf::default();
        self.forward_batch(&ctx, 1, &mut buf)?;
        Ok(buf.logits.iter().map(|&x| x as f64).collect())
    }

    /// Forward `bsz` contexts (flat `bsz * window` ids) into `buf`.
    pub(crate) fn forward_batch(&self, ctxs: &[u32], bsz: usize, buf: &mut BatchBuf) -> Result<()> {
        let k = self.window;
        let (v, e) = (self.vocab_size, self.spec.embed_dim);
        let (h1, h2) = (self.spec.hidden[0], self.spec.hidden[1]);
        if ctxs.len() != bsz * k {
            return Err(Error::LengthMismatch {
                what: "context batch",
                left: ctxs.len(),
                right: bsz * k,
            });
        }
        let sec = sections(v, k, &self.spec);
        buf.ensure(bsz, k * e, h1, h2, v);
        let p = &self.params;

        // Embedding gather.
        for (r, win) in ctxs.chunks_exact(k).enumerate() {
            for (j, &id) in win.iter().enumerate() {
                if id as usize >= v {
                    return Err(Error::TokenOutOfRange { id, vocab: v });
                }
                let src = sec.emb + id as usize * e;
                let dst = r * k * e + j * e;
                buf.x[dst..dst + e].copy_from_slice(&p[src..src + e]);
            }
        }

        affine(&buf.x, &p[sec.w1..sec.b1], &p[sec.b1..sec.w2], &mut buf.h1, bsz, k * e, h1);
        tanh_inplace(&mut buf.h1[..bsz * h1]);
        affine(&buf.h1, &p[sec.w2..sec.b2], &p[sec.b2..sec.w3], &mut buf.h2, bsz, h1, h2);
        tanh_inplace(&mut buf.h2[..bsz * h2]);
        affine(&buf.h2, &p[sec.w3..sec.b3], &p[sec.b3..sec.total], &mut buf.logits, bsz, h2, v);
        Ok(())
    }

    /// Accumulate parameter gradients for the batch most recently run
    /// through `forward_batch` with the same `ctxs`/`buf`. `dlogits` is the
    /// loss gradient at the output layer; `grads` is flat like `params`.
    pub(crate) fn backward_batch(
        &self,
        ctxs: &[u32],
        bsz: usize,
        buf: &mut BatchBuf,
        dlogits: &[f32],
        grads: &mut [f32],
    ) {
        let k = self.window;
        let (v, e) = (self.vocab_size, self.spec.embed_dim);
        let (h1, h2) = (self.spec.hidden[0], self.spec.hidden[1]);
        debug_assert_eq!(dlogits.len(), bsz * v);
        debug_assert_eq!(grads.len(), self.params.len());
        let sec = sections(v, k, &self.spec);
        let p = &self.params;

        // Output layer.
        matmul_xt_dy(&buf.h2, dlogits, &mut grads[sec.w3..sec.b3], bsz, h2, v);
        bias_grad(dlogits, &mut grads[sec.b3..sec.total], bsz, v);
        matmul_dy_wt(dlogits, &p[sec.w3..sec.b3], &mut buf.dh2, bsz, h2, v);
        tanh_backward(&buf.h2, &mut buf.dh2, bsz * h2);

        matmul_xt_dy(&buf.h1, &buf.dh2, &mut grads[sec.w2..sec.b2], bsz, h1, h2);
        bias_grad(&buf.dh2, &mut grads[sec.b2..sec.w3], bsz, h2);
        matmul_dy_wt(&buf.dh2, &p[sec.w2..sec.b2], &mut buf.dh1, bsz, h1, h2);
        tanh_backward(&buf.h1, &mut buf.dh1, bsz * h1);

        matmul_xt_dy(&buf.x, &buf.dh1, &mut grads[sec.w1..sec.b1], bsz, k * e, h1);
        bias_grad(&buf.dh1, &mut grads[sec.b1..sec.w2], bsz, h1);
        matmul_dy_wt(&buf.dh1, &p[sec.w1..sec.b1], &mut buf.dx, bsz, k * e, h1);

        // Embedding scatter.
        for (r, win) in ctxs.chunks_exact(k).enumerate() {
            for (j, &id) in win.iter().enumerate() {
                let dst = sec.emb + id as usize * e;
                let src = r * k * e + j * e;
                for t in 0..e {
                    grads[dst + t] += buf.dx[src + t];
                }
            }
        }
    }
}

/// Left-truncate/left-pad a context to exactly `window` ids.
pub fn context_window(context: &[u32], window: usize) -> Vec<u32> {
    let mut out = vec![UNK; window];
    let take = context.len().min(window);
    out[window - take..].copy_from_slice(&context[context.len() - take..]);
    out
}

/// Scratch buffers reused across batches.
#[derive(Debug, Default)]
pub(crate) struct BatchBuf {
    pub x: Vec<f32>,
    pub h1: Vec<f32>,
    pub h2: Vec<f32>,
    pub logits: Vec<f32>,
    pub dh1: Vec<f32>,
    pub dh2: Vec<f32>,
    pub dx: Vec<f32>,
}

impl BatchBuf {
    fn ensure(&mut self, bsz: usize, din: usize, h1: usize, h2: usize, v: usize) {
        self.x.resize(bsz * din, 0.0);
        self.h1.resize(bsz * h1, 0.0);
        self.h2.resize(bsz * h2, 0.0);
        self.logits.resize(bsz * v, 0.0);
        self.dh1.resize(bsz * h1, 0.0);
        self.dh2.resize(bsz * h2, 0.0);
        self.dx.resize(bsz * din, 0.0);
    }
}

// y = x . w + b, row-major w[in][out].
fn affine(x: &[f32], w: &[f32], b: &[f32], y: &mut [f32], bsz: usize, din: usize, dout: usize) {
    for r in 0..bsz {
        let yr = &mut y[r * dout..(r + 1) * dout];
        yr.copy_from_slice(b);
        let xr = &x[r * din..(r + 1) * din];
        for (i, &xv) in xr.iter().enumerate() {
            let wrow = &w[i * dout..(i + 1) * dout];
            for (yv, &wv) in yr.iter_mut().zip(wrow) {
                *yv += xv * wv;
            }
        }
    }
}

// dw += x^T . dy
fn matmul_xt_dy(x: &[f32], dy: &[f32], dw: &mut [f32], bsz: usize, din: usize, dout: usize) {
    for r in 0..bsz {
        let xr = &x[r * din..(r + 1) * din];
        let dyr = &dy[r * dout..(r + 1) * dout];
        for (i, &xv) in xr.iter().enumerate() {
            if xv != 0.0 {
                let dwr = &mut dw[i * dout..(i + 1) * dout];
                for (dwv, &dyv) in dwr.iter_mut().zip(dyr) {
                    *dwv += xv * dyv;
                }
            }
        }
    }
}

// dx = dy . w^T
fn matmul_dy_wt(dy: &[f32], w: &[f32], dx: &mut [f32], bsz: usize, din: usize, dout: usize) {
    for r in 0..bsz {
        let dyr = &dy[r * dout..(r + 1) * dout];
        let dxr = &mut dx[r * din..(r + 1) * din];
        for (i, dxv) in dxr.iter_mut().enumerate() {
            let wrow = &w[i * dout..(i + 1) * dout];
            let mut acc = 0.0f32;
            for (&a, &b) in dyr.iter().zip(wrow) {
                acc += a * b;
            }
            *dxv = acc;
        }
    }
}

fn bias_grad(dy: &[f32], db: &mut [f32], bsz: usize, dout: usize) {
    for r in 0..bsz {
        let dyr = &dy[r * dout..(r + 1) * dout];
        for (dbv, &dyv) in db.iter_mut().zip(dyr) {
            *dbv += dyv;
        }
    }
}

fn tanh_inplace(xs: &mut [f32]) {
    for x in xs {
        *x = math::tanhf(*x);
    }
}

// dh *= 1 - h^2 where h already holds tanh(pre-activation).
fn tanh_backward(h: &[f32], dh: &mut [f32], n: usize) {
    for (dv, &hv) in dh[..n].iter_mut().zip(&h[..n]) {
        *dv *= 1.0 - hv * hv;
    }
}

/// Batch-mean cross-entropy; writes `dlogits = (softmax - onehot) / bsz`.
pub(crate) fn ce_loss_and_grad(
    logits: &[f32],
    targets: &[u32],
    vocab: usize,
    dlogits: &mut [f32],
) -> f64 {
    let bsz = targets.len();
    let scale = 1.0 / bsz as f64;
    let mut loss = 0.0;
    for (r, &t) in targets.iter().enumerate() {
        let row = &logits[r * vocab..(r + 1) * vocab];
        let mut max = f32::NEG_INFINITY;
        for &x in row {
            if x > max {
                max = x;
            }
        }
        let mut sum = 0.0f64;
        for &x in row {
            sum += math::exp((x - max) as f64);
        }
        let lse = (max as f64) + math::ln(sum);
        loss += lse - row[t as usize] as f64;
        let drow = &mut dlogits[r * vocab..(r + 1) * vocab];
        for (d, &x) in drow.iter_mut().zip(row) {
            *d = (math::exp(x as f64 - lse) * scale) as f32;
        }
        drow[t as usize] -= scale as f32;
    }
    loss * scale
}

/// Gradient-descent flavors used for both family pretraining and the
/// amateur fine-tune.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Optimizer {
    SgdMomentum {
        lr: f64,
        momentum: f64,
    },
    AdamW {
        lr: f64,
        beta1: f64,
        beta2: f64,
        eps: f64,
        weight_decay: f64,
    },
}

impl Optimizer {
    pub fn adamw(lr: f64) -> Optimizer {
        Optimizer::AdamW {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }

    pub fn sgd(lr: f64, momentum: f64) -> Optimizer {
        Optimizer::SgdMomentum { lr, momentum }
    }

    pub fn base_lr(&self) -> f64 {
        match *self {
            Optimizer::SgdMomentum { lr, .. } | Optimizer::AdamW { lr, .. } => lr,
        }
    }
}

#[derive(Debug, Clone)]
pub(crate) struct OptState {
    m: Vec<f32>,
    v: Vec<f32>,
    t: u64,
}

impl OptState {
    pub(crate) fn new(n: usize) -> OptState {
        OptState {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    /// One update with the effective rate `lr * lr_scale`.
    pub(crate) fn step(
        &mut self,
        opt: &Optimizer,
        lr_scale: f64,
        params: &mut [f32],
        grads: &[f32],
    ) {
        self.t += 1;
        match *opt {
            Optimizer::SgdMomentum { lr, momentum } => {
                let lr = (lr * lr_scale) as f32;
                let mu = momentum as f32;
                for ((p, g), m) in params.iter_mut().zip(grads).zip(self.m.iter_mut()) {
                    *m = mu * *m + *g;
                    *p -= lr * *m;
                }
            }
            Optimizer::AdamW {
                lr,
                beta1,
                beta2,
                eps,
                weight_decay,
            } => {
                let lr = lr * lr_scale;
                let bc1 = 1.0 - math::powf(beta1, self.t as f64);
                let bc2 = 1.0 - math::powf(beta2, self.t as f64);
                let (b1, b2) = (beta1 as f32, beta2 as f32);
                for ((p, &g), (m, v)) in params
                    .iter_mut()
                    .zip(grads)
                    .zip(self.m.iter_mut().zip(self.v.iter_mut()))
                {
                    *m = b1 * *m + (1.0 - b1) * g;
                    *v = b2 * *v + (1.0 - b2) * g * g;
                    let mhat = *m as f64 / bc1;
                    let vhat = *v as f64 / bc2;
                    let upd = mhat / (math::sqrt(vhat) + eps) + weight_decay * *p as f64;
                    *p -= (lr * upd) as f32;
                }
            }
        }
    }
}
