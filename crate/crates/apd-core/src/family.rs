//! Size-ordered model families: train the same architecture at several
//! widths on one corpus, with shared data order, and keep a manifest of
//! sizes and held-out scores.

use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;

use crate::corpus::Corpus;
use crate::error::{Error, Result};
use crate::math::{self, Fnv64};
use crate::model::{
    ce_loss_and_grad, context_window, param_count_for, BatchBuf, LmSpec, Optimizer, OptState,
    TinyLm,
};
use crate::vocab::Vocabulary;

/// Per-member optimization settings (fixed epochs, no early stopping).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MemberTrainConfig {
    pub optimizer: Optimizer,
    pub epochs: usize,
    pub batch_size: usize,
}

impl Default for MemberTrainConfig {
    fn default() -> Self {
        MemberTrainConfig {
            optimizer: Optimizer::adamw(1e-3),
            epochs: 3,
            batch_size: 64,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FamilyConfig {
    pub window: usize,
    pub size_specs: Vec<LmSpec>,
    pub train: MemberTrainConfig,
    pub val_fraction: f64,
    pub seed: u64,
}

/// Manifest entry for one trained member.
#[derive(Debug, Clone, PartialEq)]
pub struct MemberRecord {
    pub spec: LmSpec,
    pub param_count: usize,
    pub log_size: f64,
    pub held_out_ce: f64,
    pub init_seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FamilyManifest {
    pub corpus_hash: u64,
    pub vocab_hash: u64,
    pub window: usize,
    pub seed: u64,
    pub members: Vec<MemberRecord>,
}

/// Trained members in strictly ascending parameter count. The smallest is
/// the amateur, the largest the expert.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelFamily {
    vocab: Vocabulary,
    members: Vec<TinyLm>,
    manifest: FamilyManifest,
}

impl ModelFamily {
    /// Assemble from trained parts (the load path). Validates ordering and
    /// that the manifest matches the members it describes.
    pub fn from_parts(
        vocab: Vocabulary,
        members: Vec<TinyLm>,
        manifest: FamilyManifest,
    ) -> Result<ModelFamily> {
        if members.len() < 2 {
            return Err(Error::FamilyTooSmall {
                need: 2,
                got: members.len(),
            });
        }
        if manifest.members.len() != members.len() {
            return Err(Error::LengthMismatch {
                what: "manifest members",
                left: manifest.members.len(),
                right: members.len(),
            });
        }
        if manifest.vocab_hash != vocab.content_hash() {
            return Err(Error::HashMismatch {
                traces: manifest.vocab_hash,
                family: vocab.content_hash(),
            });
        }
        let mut prev = 0usize;
        for (i, (m, rec)) in members.iter().zip(&manifest.members).enumerate() {
            if m.vocab_size() != vocab.len() || m.window() != manifest.window {
                return Err(Error::Invalid(alloc::format!(
                    "member {i} shape disagrees with the manifest"
                )));
            }
            if rec.param_count != m.param_count() {
                return Err(Error::LengthMismatch {
                    what: "manifest param_count",
                    left: rec.param_count,
                    right: m.param_count(),
                });
            }
            if i > 0 && m.param_count() <= prev {
                return Err(Error::SizesNotIncreasing {
                    index: i,
                    params: m.param_count(),
                    prev,
                });
            }
            prev = m.param_count();
        }
        Ok(ModelFamily {
            vocab,
            members,
            manifest,
        })
    }

    pub fn vocab(&self) -> &Vocabulary {
        &self.vocab
    }

    pub fn members(&self) -> &[TinyLm] {
        &self.members
    }

    pub fn manifest(&self) -> &FamilyManifest {
        &self.manifest
    }

    pub fn n_members(&self) -> usize {
        self.members.len()
    }

    /// The amateur: smallest member.
    pub fn alm(&self) -> &TinyLm {
        &self.members[0]
    }

    /// The expert: largest member.
    pub fn elm(&self) -> &TinyLm {
        self.members.last().expect("non-empty family")
    }

    pub fn log_sizes(&self) -> Vec<f64> {
        self.members.iter().map(TinyLm::log_size).collect()
    }

    /// Content fingerprint over vocabulary, window, and every member's
    /// weights; traces embed it so stale pairings are detectable.
    pub fn fingerprint(&self) -> u64 {
        let mut h = Fnv64::new();
        h.write_u64(self.vocab.content_hash());
        h.write_usize(self.manifest.window);
        h.write_usize(self.members.len());
        for m in &self.members {
            h.write_u64(m.content_hash());
        }
        h.finish()
    }
}

/// All (window, target) pairs of a corpus, window-padded, flattened.
pub(crate) fn build_examples(corpus: &Corpus, window: usize) -> (Vec<u32>, Vec<u32>) {
    let mut ctxs = Vec::with_capacity(corpus.n_contexts() * window);
    let mut targets = Vec::with_capacity(corpus.n_contexts());
    for line in corpus.lines() {
        for t in 0..line.len() {
            ctxs.extend_from_slice(&context_window(&line[..t], window));
            targets.push(line[t]);
        }
    }
    (ctxs, targets)
}

/// Mean next-token cross-entropy of `model` over a corpus.
pub fn corpus_cross_entropy(model: &TinyLm, corpus: &Corpus) -> Result<f64> {
    let (ctxs, targets) = build_examples(corpus, model.window());
    if targets.is_empty() {
        return Err(Error::EmptyInput("evaluation corpus"));
    }
    let mut buf = BatchBuf::default();
    let k = model.window();
    let v = model.vocab_size();
    let mut nll = 0.0;
    let chunk = 256;
    let mut dl = vec![0.0f32; chunk * v];
    for (cs, ts) in ctxs.chunks(chunk * k).zip(targets.chunks(chunk)) {
        let bsz = ts.len();
        model.forward_batch(cs, bsz, &mut buf)?;
        nll += ce_loss_and_grad(&buf.logits, ts, v, &mut dl[..bsz * v]) * bsz as f64;
    }
    Ok(nll / targets.len() as f64)
}

/// Train one member to convergence-by-schedule. Returns the model and its
/// held-out cross-entropy. `member_index` only labels divergence errors.
#[allow(clippy::too_many_arguments)]
fn train_one(
    spec: LmSpec,
    vocab_size: usize,
    window: usize,
    init_seed: u64,
    data_seed: u64,
    train_examples: (&[u32], &[u32]),
    val: &Corpus,
    cfg: &MemberTrainConfig,
    member_index: usize,
) -> Result<(TinyLm, f64)> {
    let mut model = TinyLm::new(vocab_size, window, spec, init_seed)?;
    let (ctxs, targets) = train_examples;
    let n = targets.len();
    if n == 0 {
        return Err(Error::EmptyInput("training corpus"));
    }
    let k = window;
    let v = vocab_size;
    let bsz_max = cfg.batch_size.max(1);
    let mut buf = BatchBuf::default();
    let mut dl = vec![0.0f32; bsz_max * v];
    let mut grads = vec![0.0f32; model.param_count()];
    let mut state = OptState::new(model.param_count());
    let mut order: Vec<usize> = (0..n).collect();
    let mut batch_ctxs = vec![0u32; bsz_max * k];
    let mut batch_targets = vec![0u32; bsz_max];
    let mut step = 0usize;

    for epoch in 0..cfg.epochs {
        // The permutation stream depends only on the data seed and epoch, so
        // every member sees examples in the same order.
        let mut rng = ChaCha12Rng::seed_from_u64(math::derive_seed(data_seed, epoch as u64));
        order.shuffle(&mut rng);
        for batch in order.chunks(bsz_max) {
            let bsz = batch.len();
            for (r, &ex) in batch.iter().enumerate() {
                batch_ctxs[r * k..(r + 1) * k].copy_from_slice(&ctxs[ex * k..(ex + 1) * k]);
                batch_targets[r] = targets[ex];
            }
            model.forward_batch(&batch_ctxs[..bsz * k], bsz, &mut buf)?;
            let loss = ce_loss_and_grad(
                &buf.logits,
                &batch_targets[..bsz],
                v,
                &mut dl[..bsz * v],
            );
            if !loss.is_finite() {
                return Err(Error::Diverged {
                    member: member_index,
                    step,
                });
            }
            grads.iter_mut().for_each(|g| *g = 0.0);
            model.backward_batch(&batch_ctxs[..bsz * k], bsz, &mut buf, &dl[..bsz * v], &mut grads);
            state.step(&cfg.optimizer, 1.0, model.params_mut(), &grads);
            step += 1;
        }
    }

    let held_out = corpus_cross_entropy(&model, val)?;
    Ok((model, held_out))
}

/// Train the whole ladder. Sizes must be given smallest-first and strictly
/// increase in parameter count; every member sees the identical example
/// order derived from one data seed.
pub fn train_family(corpus: &Corpus, vocab: Vocabulary, cfg: &FamilyConfig) -> Result<ModelFamily> {
    if cfg.size_specs.len() < 3 {
        return Err(Error::FamilyTooSmall {
            need: 3,
            got: cfg.size_specs.len(),
        });
    }
    let v = vocab.len();
    let mut prev = 0usize;
    for (i, spec) in cfg.size_specs.iter().enumerate() {
        let params = param_count_for(v, cfg.window, spec);
        if i > 0 && params <= prev {
            return Err(Error::SizesNotIncreasing {
                index: i,
                params,
                prev,
            });
        }
        prev = params;
    }

    let (train, val) = corpus.split(cfg.val_fraction, cfg.seed)?;
    if train.n_contexts() == 0 || val.n_contexts() == 0 {
        return Err(Error::EmptyInput("train/validation split"));
    }
    let (ctxs, targets) = build_examples(&train, cfg.window);
    let data_seed = math::derive_seed(cfg.seed, 0xda7a);

    let mut members = Vec::with_capacity(cfg.size_specs.len());
    let mut records = Vec::with_capacity(cfg.size_specs.len());
    for (i, &spec) in cfg.size_specs.iter().enumerate() {
        let init_seed = math::derive_seed(cfg.seed, 0x1717 + i as u64);
        let (model, held_out_ce) = train_one(
            spec,
            v,
            cfg.window,
            init_seed,
            data_seed,
            (&ctxs, &targets),
            &val,
            &cfg.train,
            i,
        )?;
        records.push(MemberRecord {
            spec,
            param_count: model.param_count(),
            log_size: model.log_size(),
            held_out_ce,
            init_seed,
        });
        members.push(model);
    }

    let manifest = FamilyManifest {
        corpus_hash: corpus.content_hash(),
        vocab_hash: vocab.content_hash(),
        window: cfg.window,
        seed: cfg.seed,
        members: records,
    };
    ModelFamily::from_parts(vocab, members, manifest)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::vocab::Tokenizer;

    fn abab_family() -> ModelFamily {
        let text = "abababababababab\n".repeat(24);
        let vocab = Vocabulary::build(&text, Tokenizer::Char);
        let corpus = Corpus::from_text(&text, &vocab);
        let cfg = FamilyConfig {
            window: 2,
            size_specs: vec![
                LmSpec::new(2, 3, 3),
                LmSpec::new(4, 8, 8),
                LmSpec::new(8, 24, 24),
            ],
            train: MemberTrainConfig {
                optimizer: Optimizer::adamw(2e-2),
                epochs: 6,
                batch_size: 16,
            },
            val_fraction: 0.25,
            seed: 5,
        };
        train_family(&corpus, vocab, &cfg).unwrap()
    }

    #[test]
    fn alternating_corpus_is_learned() {
        let fam = abab_family();
        let a = fam.vocab().id("a");
        let b = fam.vocab().id("b");
        let logits = fam.elm().logits(&[b, a]).unwrap();
        let best = crate::math::rank_descending(&logits)[0] as u32;
        assert_eq!(best, b, "after 'a' the expert should predict 'b'");
    }

    #[test]
    fn members_are_strictly_ordered_and_manifest_matches() {
        let fam = abab_family();
        let sizes: Vec<usize> = fam.members().iter().map(TinyLm::param_count).collect();
        assert!(sizes.windows(2).all(|w| w[0] < w[1]));
        for (m, r) in fam.members().iter().zip(&fam.manifest().members) {
            assert_eq!(m.param_count(), r.param_count);
            assert!(r.held_out_ce.is_finite());
        }
        assert_eq!(fam.alm().param_count(), sizes[0]);
        assert_eq!(fam.elm().param_count(), *sizes.last().unwrap());
    }

    #[test]
    fn training_is_bit_deterministic() {
        let a = abab_family();
        let b = abab_family();
        for (x, y) in a.members().iter().zip(b.members()) {
            assert_eq!(x.params(), y.params());
        }
        assert_eq!(a.fingerprint(), b.fingerprint());
    }

    #[test]
    fn too_few_or_unordered_sizes_are_rejected() {
        let text = "ababab\nbababa";
        let vocab = Vocabulary::build(text, Tokenizer::Char);
        let corpus = Corpus::from_text(text, &vocab);
        let mut cfg = FamilyConfig {
            window: 2,
            size_specs: vec![LmSpec::new(2, 3, 3), LmSpec::new(4, 8, 8)],
            train: MemberTrainConfig::default(),
            val_fraction: 0.5,
            seed: 1,
        };
        assert!(matches!(
            train_family(&corpus, vocab.clone(), &cfg),
            Err(Error::FamilyTooSmall { .. })
        ));
        cfg.size_specs = vec![
            LmSpec::new(4, 8, 8),
            LmSpec::new(2, 3, 3),
            LmSpec::new(8, 16, 16),
        ];
        assert!(matches!(
            train_family(&corpus, vocab, &cfg),
            Err(Error::SizesNotIncreasing { .. })
        ));
    }

    #[test]
    fn from_parts_rejects_mismatched_manifest() {
        let fam = abab_family();
        let mut manifest = fam.manifest().clone();
        manifest.members[0].param_count += 1;
        let err = ModelFamily::from_parts(
            fam.vocab().clone(),
            fam.members().to_vec(),
            manifest,
        );
        assert!(err.is_err());
    }
}
