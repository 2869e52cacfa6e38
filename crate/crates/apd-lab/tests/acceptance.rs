//! Acceptance gate for the whole workspace: ten checks covering the
//! arithmetic identities, the curve fitter, the joint training objective,
//! an end-to-end quality ranking, and artifact determinism. Runs without
//! the libtest harness so every criterion prints exactly one line.

use std::fs;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::Command;
use std::time::Instant;

use apd_core::cd::{hlm_size, verify_theorem, LogitLine};
use apd_core::corpus::Corpus;
use apd_core::curve::{
    fit_on_the_fly, flip, synthesize_trace, CurveFamily, CurveParams, FitConfig,
};
use apd_core::energy::{
    gradient_check, loss_l1, loss_l2, loss_l3, total_loss, train_alm_prime, CheckInstance,
    TrainConfig,
};
use apd_core::eval::{
    dist_n, obvious_blindness_probe, reciprocal_rank, smooth_restricted, BlindnessScenario,
    QaEval, QaItem, INV_T_GRID,
};
use apd_core::family::{train_family, FamilyConfig, MemberTrainConfig};
use apd_core::model::{LmSpec, Optimizer};
use apd_core::sampling::top_p_filter;
use apd_core::synthetic::MarkovSource;
use apd_core::trace::{collect_traces, CandidateLayout, Provenance, TraceRecord};
use apd_core::vocab::{Tokenizer, Vocabulary};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;

type Check = fn() -> Result<String, String>;

fn main() {
    let checks: [(&str, Check); 10] = [
        ("C1 contrast-matches-scaled-extrapolation", c1),
        ("C2 extrapolated-size-value", c2),
        ("C3 decay-fit-recovery", c3),
        ("C4 training-gradients", c4),
        ("C5 loss-fixtures", c5),
        ("C6 end-to-end-ranking", c6),
        ("C7 obvious-vs-rare-probe", c7),
        ("C8 metric-fixtures", c8),
        ("C9 bit-exact-reruns", c9),
        ("C10 flip-and-asymptote-invariants", c10),
    ];
    let mut failures = 0;
    for (name, check) in checks {
        let start = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| p.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panicked".to_string());
            Err(format!("panic: {msg}"))
        });
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("[acceptance] {name}: PASS ({detail}; {secs:.1}s)"),
            Err(why) => {
                failures += 1;
                println!("[acceptance] {name}: FAIL ({why}; {secs:.1}s)");
            }
        }
    }
    if failures > 0 {
        println!("[acceptance] {failures} of 10 criteria failed");
        std::process::exit(1);
    }
    println!("[acceptance] all 10 criteria passed");
}

/// Contrasting two members of an exact log-linear trend must equal the
/// scaled logits of the extrapolated model, to 1e-9, in under a second.
fn c1() -> Result<String, String> {
    let start = Instant::now();
    let mut rng = ChaCha12Rng::seed_from_u64(0xAC01);
    let lines: Vec<LogitLine> = (0..200)
        .map(|_| LogitLine {
            slope: rng.gen_range(-4.0..4.0),
            intercept: rng.gen_range(-6.0..6.0),
        })
        .collect();
    let mut worst = 0.0f64;
    for &t in &[1.5, 2.0, 4.0, 10.0] {
        let lsa = rng.gen_range(9.0..16.0);
        let lse = lsa + rng.gen_range(0.5..6.0);
        let d = verify_theorem(&lines, lsa, lse, t).map_err(|e| e.to_string())?;
        worst = worst.max(d);
    }
    if worst >= 1e-9 {
        return Err(format!("worst discrepancy {worst:.3e} >= 1e-9"));
    }
    let secs = start.elapsed().as_secs_f64();
    if secs >= 1.0 {
        return Err(format!("took {secs:.2}s, budget 1s"));
    }
    Ok(format!("200 lines x 4 temperatures, worst {worst:.1e}"))
}

/// A 6.9e9-parameter expert contrasted with a 7.0e7 amateur at T=2 stands
/// in for a 6.8014e11-parameter model, within 0.01%.
fn c2() -> Result<String, String> {
    let h = hlm_size((6.9e9f64).ln(), (7.0e7f64).ln(), 2.0).map_err(|e| e.to_string())?;
    let n = h.hlm_log_size.exp();
    let rel = (n - 6.8014e11).abs() / 6.8014e11;
    if rel > 1e-4 {
        return Err(format!("{n:.5e} params is {rel:.2e} away from 6.8014e11"));
    }
    if (h.logit_scale - 0.5).abs() > 1e-12 {
        return Err(format!("logit scale {} should be 0.5 at T=2", h.logit_scale));
    }
    Ok(format!("{n:.5e} params, rel err {rel:.1e}"))
}

/// Fitting 1000 synthetic decay traces over 7 log-spaced sizes recovers the
/// asymptote: mean abs error <= 5e-3 noiseless and <= 2e-2 at 0.5% relative
/// noise, within 5 minutes. Half the traces are complemented (rising), and
/// the fits run through the same per-record path the decoder uses.
fn c3() -> Result<String, String> {
    let start = Instant::now();
    let sizes: Vec<f64> = (0..7).map(|i| 9.2 + i as f64 * (18.4 - 9.2) / 6.0).collect();
    let cfg = FitConfig::default();
    let mut rng = ChaCha12Rng::seed_from_u64(0xAC03);
    let (n_records, width) = (100u64, 10usize);
    let (mut err_clean, mut err_noisy) = (0.0f64, 0.0f64);
    for r in 0..n_records {
        let mut truths = vec![0.0f64; width];
        let mut clean_rows = vec![vec![0.0f32; width]; sizes.len()];
        let mut noisy_rows = clean_rows.clone();
        for w in 0..width {
            let ap: f64 = rng.gen_range(0.02..0.85);
            let a = rng.gen_range(0.05..(1.0 - ap).min(0.9));
            let b = rng.gen_range(0.4..2.0);
            let d = rng.gen_range(sizes[0] - 1.0..sizes[0] + 2.5);
            let params = CurveParams::exponential(ap, a, b, d).map_err(|e| e.to_string())?;
            let complemented = (r as usize * width + w) % 2 == 1;
            truths[w] = if complemented { 1.0 - ap } else { ap };
            let seed = 7_000 + r * width as u64 + w as u64;
            for (noise, rows) in [(0.0, &mut clean_rows), (0.005, &mut noisy_rows)] {
                let obs = synthesize_trace(&params, &sizes, noise, seed);
                for (i, &o) in obs.iter().enumerate() {
                    rows[i][w] = if complemented { 1.0 - o } else { o } as f32;
                }
            }
        }
        let record = |probs: Vec<Vec<f32>>| TraceRecord {
            ctx_id: r,
            ctx: vec![0],
            cands: (0..width as u32).collect(),
            prov: vec![Provenance::Top; width],
            probs,
            l_alm: vec![0.0; width],
            l_elm: vec![0.0; width],
        };
        for (probs, bucket) in [(clean_rows, &mut err_clean), (noisy_rows, &mut err_noisy)] {
            let out = fit_on_the_fly(&record(probs), &sizes, 0.5, &cfg).map_err(|e| e.to_string())?;
            for (fit, truth) in out.fits.iter().zip(&truths) {
                *bucket += (fit.ap - truth).abs();
            }
        }
    }
    let n_fits = (n_records * width as u64) as f64;
    let (mean_clean, mean_noisy) = (err_clean / n_fits, err_noisy / n_fits);
    if mean_clean > 5e-3 {
        return Err(format!("noiseless mean abs error {mean_clean:.2e} > 5e-3"));
    }
    if mean_noisy > 2e-2 {
        return Err(format!("noisy mean abs error {mean_noisy:.2e} > 2e-2"));
    }
    let secs = start.elapsed().as_secs_f64();
    if secs > 300.0 {
        return Err(format!("took {secs:.0}s, budget 300s"));
    }
    Ok(format!(
        "mean |dAP| {mean_clean:.1e} clean, {mean_noisy:.1e} at 0.5% noise"
    ))
}

/// Analytic gradients of the joint objective agree with central differences
/// (eps 1e-5) on 50 random smooth instances to 1e-4, in under a minute.
fn c4() -> Result<String, String> {
    let start = Instant::now();
    let mut worst = 0.0f64;
    for k in 0..50 {
        let inst = CheckInstance::random(0xAC04 + k, 4, 3).map_err(|e| e.to_string())?;
        worst = worst.max(gradient_check(&inst, 1e-5, Some(200)));
    }
    if worst > 1e-4 {
        return Err(format!("max relative error {worst:.2e} > 1e-4"));
    }
    let secs = start.elapsed().as_secs_f64();
    if secs >= 60.0 {
        return Err(format!("took {secs:.0}s, budget 60s"));
    }
    Ok(format!("50 instances, max rel err {worst:.1e}"))
}

/// The loss pieces hit their frozen fixtures, and the drift term vanishes
/// when the fine-tuned copy still equals the original.
fn c5() -> Result<String, String> {
    let checks = [
        (loss_l1(0.05, 1, 3), 0.158_113_883_008_418_97, "l1"),
        (loss_l2(0.1, 1), 0.316_227_766_016_837_93, "l2"),
        (loss_l3(0.0025, 1), 0.05, "l3"),
        (total_loss(0.1, 0.02, 0.05, 10.0, 0.8), 0.34, "total"),
    ];
    for (got, want, name) in checks {
        if (got - want).abs() > 1e-12 {
            return Err(format!("{name}: {got:.17} != {want:.17}"));
        }
    }
    let mut inst = CheckInstance::random(0xAC05, 4, 3).map_err(|e| e.to_string())?;
    inst.l_prime = inst.l_alm.clone();
    let l3 = inst.loss().l3;
    if l3 != 0.0 {
        return Err(format!("l3 at zero drift: {l3:.3e} != 0"));
    }
    Ok("l1/l2/l3/total fixtures exact, zero-drift l3 = 0".to_string())
}

/// Full pipeline on a synthetic second-order corpus: a five-member family
/// spanning ~400x in parameters, joint fine-tuning, then the QA sweep over
/// items that require order-2 knowledge. Best-grid asymptotic beats
/// best-grid contrast, which beats the expert.
fn c6() -> Result<String, String> {
    let start = Instant::now();
    let src = MarkovSource::new(13, 0xAC06).map_err(|e| e.to_string())?;
    let text = src.generate_text(80, 160, 1);
    let vocab = Vocabulary::build(&text, Tokenizer::Char);
    let corpus = Corpus::from_text(&text, &vocab);

    // A steep capacity ladder: the smallest member can barely hold the
    // order-1 statistics, the largest is still improving on held-out text,
    // and the rungs in between give the curve fitter a real trend.
    let fam_cfg = FamilyConfig {
        window: 4,
        size_specs: vec![
            LmSpec::new(2, 8, 8),
            LmSpec::new(4, 16, 16),
            LmSpec::new(12, 48, 48),
            LmSpec::new(24, 96, 96),
            LmSpec::new(48, 256, 256),
        ],
        train: MemberTrainConfig {
            optimizer: Optimizer::adamw(1e-3),
            epochs: 4,
            batch_size: 64,
        },
        val_fraction: 0.1,
        seed: 0xAC06,
    };
    let family = train_family(&corpus, vocab, &fam_cfg).map_err(|e| e.to_string())?;
    let spread = family.manifest().members.last().unwrap().param_count as f64
        / family.manifest().members[0].param_count as f64;

    let layout = CandidateLayout {
        n_top: 8,
        n_mid: 4,
        n_tail: 2,
        mid_band_end: 12,
    };
    let traces = collect_traces(&family, &corpus, &layout, 0xAC06).map_err(|e| e.to_string())?;

    let train_cfg = TrainConfig {
        epochs: 5,
        seed: 0xAC06,
        ..TrainConfig::default()
    };
    let (alm_prime, _, _) =
        train_alm_prime(&traces, &family, &train_cfg).map_err(|e| e.to_string())?;

    // Items whose gold continuation can't be read off order-1 statistics:
    // exactly the region where subtracting the amateur should pay.
    let qa = src.make_qa_contextual(200, 4, 6, 1, 0xAC06).map_err(|e| e.to_string())?;
    let items: Vec<QaItem> = qa
        .into_iter()
        .map(|(prompt, options, correct)| {
            let prompt = family.vocab().tokenize(&prompt);
            let options = options.iter().map(|o| family.vocab().tokenize(o)).collect();
            QaItem::new(prompt, options, correct)
        })
        .collect::<Result<_, _>>()
        .map_err(|e| e.to_string())?;
    let eval = QaEval::prepare(family.elm(), items).map_err(|e| e.to_string())?;

    let elm_ppl = eval
        .expert_point(family.elm())
        .map_err(|e| e.to_string())?
        .perplexity;
    let best = |points: Vec<apd_core::eval::GridPoint>| -> (f64, f64) {
        points
            .iter()
            .filter(|p| p.perplexity.is_finite())
            .map(|p| (p.perplexity, p.inv_t))
            .fold((f64::INFINITY, 0.0), |acc, x| if x.0 < acc.0 { x } else { acc })
    };
    let (cd_ppl, cd_w) = best(eval.grid(family.alm(), &INV_T_GRID).map_err(|e| e.to_string())?);
    let (apd_ppl, apd_w) = best(eval.grid(&alm_prime, &INV_T_GRID).map_err(|e| e.to_string())?);

    if !(apd_ppl <= cd_ppl && cd_ppl < elm_ppl) {
        return Err(format!(
            "ranking broken: apd {apd_ppl:.4} (1/T {apd_w:.2}), cd {cd_ppl:.4} (1/T {cd_w:.2}), elm {elm_ppl:.4}"
        ));
    }
    let secs = start.elapsed().as_secs_f64();
    if secs > 1800.0 {
        return Err(format!("took {secs:.0}s, budget 1800s"));
    }
    Ok(format!(
        "{spread:.0}x family, ppl: apd {apd_ppl:.4} <= cd {cd_ppl:.4} < elm {elm_ppl:.4}"
    ))
}

/// On the fixed scenario the plain contrast chases the rare token while the
/// asymptote-backed route keeps the obvious one.
fn c7() -> Result<String, String> {
    let start = Instant::now();
    let sc = BlindnessScenario::canonical();
    let out = obvious_blindness_probe(&sc).map_err(|e| e.to_string())?;
    if out.cd_pick != sc.rare {
        return Err(format!("contrast picked token {}, wanted the rare one", out.cd_pick));
    }
    if out.apd_pick != sc.obvious {
        return Err(format!(
            "asymptotic picked token {}, wanted the obvious one",
            out.apd_pick
        ));
    }
    let secs = start.elapsed().as_secs_f64();
    if secs >= 1.0 {
        return Err(format!("took {secs:.2}s, budget 1s"));
    }
    Ok("cd -> rare, apd -> obvious".to_string())
}

/// Metric fixtures: top-p minimality and monotonicity over 10k random
/// distributions, dist-2 of (a b a b) = 2/3, mean reciprocal rank of ranks
/// (1, 2, 4) = 0.58333, and a uniform 20-way answer perplexity of 20.
fn c8() -> Result<String, String> {
    let mut rng = ChaCha12Rng::seed_from_u64(0xAC08);
    for _ in 0..10_000 {
        let n = rng.gen_range(2..30usize);
        let mut probs: Vec<f64> = (0..n).map(|_| rng.gen_range(1e-6..1.0)).collect();
        let sum: f64 = probs.iter().sum();
        for p in &mut probs {
            *p /= sum;
        }
        let p1: f64 = rng.gen_range(0.05..1.0);
        let p2 = (p1 + rng.gen_range(0.0..0.5)).min(1.0);
        let lo = top_p_filter(&probs, p1).map_err(|e| e.to_string())?;
        let hi = top_p_filter(&probs, p2).map_err(|e| e.to_string())?;
        let survivors: Vec<usize> = (0..n).filter(|&i| lo[i] > 0.0).collect();
        let kept: f64 = survivors.iter().map(|&i| probs[i]).sum();
        if kept < p1 - 1e-9 {
            return Err(format!("top-p kept {kept:.6} < p {p1:.6}"));
        }
        let smallest = survivors.iter().map(|&i| probs[i]).fold(f64::MAX, f64::min);
        if survivors.len() > 1 && kept - smallest >= p1 - 1e-12 + 1e-15 {
            return Err("top-p prefix not minimal".to_string());
        }
        for i in 0..n {
            if lo[i] > 0.0 && hi[i] == 0.0 {
                return Err(format!("top-p not monotone: token {i} lost {p1:.3} -> {p2:.3}"));
            }
        }
    }

    let d2 = dist_n(&[0, 1, 0, 1], 2);
    if (d2 - 2.0 / 3.0).abs() > 1e-12 {
        return Err(format!("dist-2 of (a b a b): {d2} != 2/3"));
    }

    let rr = [
        reciprocal_rank(&[0.5, 0.3, 0.2], 0),
        reciprocal_rank(&[0.5, 0.3, 0.2], 1),
        reciprocal_rank(&[0.4, 0.3, 0.2, 0.1], 3),
    ];
    let mrr = rr.iter().sum::<f64>() / 3.0;
    if (mrr - 7.0 / 12.0).abs() > 1e-9 {
        return Err(format!("mrr of ranks (1,2,4): {mrr:.6} != 0.583333"));
    }

    let mut uniform = vec![0.05f64; 20];
    smooth_restricted(&mut uniform);
    let ppl = (-uniform[7].ln()).exp();
    if (ppl - 20.0).abs() > 1e-9 {
        return Err(format!("uniform-20 answer perplexity {ppl:.9} != 20"));
    }
    Ok("10k top-p draws, dist-2, mrr, and perplexity fixtures hold".to_string())
}

const BIN: &str = env!("CARGO_BIN_EXE_apd-lab");

fn lab_args(dir: &Path, cmd: &str, extra: &[String]) -> Vec<String> {
    let p = |name: &str| dir.join(name).display().to_string();
    let sets = [
        format!("paths.corpus={}", p("corpus.txt")),
        format!("paths.family_dir={}", p("family")),
        format!("paths.traces={}", p("traces.jsonl")),
        format!("paths.checkpoint_dir={}", p("ckpt")),
        format!("paths.report_dir={}", p("reports")),
        format!("paths.prompts={}", p("prompts.txt")),
        "seed=41".to_string(),
        "family.window=3".to_string(),
        "family.epochs=1".to_string(),
        "family.batch_size=16".to_string(),
        r#"family.sizes=[{"embed_dim":2,"hidden":[4,4]},{"embed_dim":3,"hidden":[8,8]},{"embed_dim":4,"hidden":[16,16]}]"#
            .to_string(),
        "trace.n_top=3".to_string(),
        "trace.n_mid=2".to_string(),
        "trace.n_tail=1".to_string(),
        "trace.mid_band_end=5".to_string(),
        "apd_train.epochs=2".to_string(),
        "apd_train.batch_size=8".to_string(),
        "decode.max_tokens=8".to_string(),
        "decode.n_continuations=2".to_string(),
    ];
    let mut args = vec![cmd.to_string()];
    for s in sets {
        args.push("--set".to_string());
        args.push(s);
    }
    args.extend(extra.iter().cloned());
    args
}

fn run_lab(dir: &Path, cmd: &str) -> Result<(), String> {
    let out = Command::new(BIN)
        .args(lab_args(dir, cmd, &[]))
        .output()
        .map_err(|e| format!("spawn {cmd}: {e}"))?;
    if !out.status.success() {
        return Err(format!(
            "{cmd} failed: {}",
            String::from_utf8_lossy(&out.stderr).trim()
        ));
    }
    Ok(())
}

/// Two runs with the same seeds leave byte-identical family weights,
/// traces, fine-tuned checkpoints, and generations.
fn c9() -> Result<String, String> {
    let run_once = |dir: &Path| -> Result<Vec<(String, Vec<u8>)>, String> {
        let src = MarkovSource::new(6, 5).map_err(|e| e.to_string())?;
        fs::write(dir.join("corpus.txt"), src.generate_text(14, 24, 1))
            .map_err(|e| e.to_string())?;
        fs::write(dir.join("prompts.txt"), "abcab\nbbac\n").map_err(|e| e.to_string())?;
        for cmd in ["train-family", "collect-traces", "train-apd", "decode"] {
            run_lab(dir, cmd)?;
        }
        let artifacts = [
            "family/m0.bin",
            "family/m1.bin",
            "family/m2.bin",
            "traces.jsonl",
            "ckpt/alm_prime.bin",
            "ckpt/energy.bin",
            "reports/generations.jsonl",
        ];
        artifacts
            .iter()
            .map(|rel| {
                fs::read(dir.join(rel))
                    .map(|bytes| (rel.to_string(), bytes))
                    .map_err(|e| format!("{rel}: {e}"))
            })
            .collect()
    };

    let tmp_a = tempfile::tempdir().map_err(|e| e.to_string())?;
    let tmp_b = tempfile::tempdir().map_err(|e| e.to_string())?;
    let a = run_once(tmp_a.path())?;
    let b = run_once(tmp_b.path())?;
    for ((name, bytes_a), (_, bytes_b)) in a.iter().zip(&b) {
        if bytes_a != bytes_b {
            return Err(format!("{name} differs between identical runs"));
        }
    }
    Ok(format!("{} artifacts byte-identical across reruns", a.len()))
}

/// The flip rule is idempotent and undoable on 10k random inputs, and both
/// bounded curve shapes sit on their asymptote at log-size 1e6.
fn c10() -> Result<String, String> {
    let mut rng = ChaCha12Rng::seed_from_u64(0xAC10);
    for _ in 0..10_000 {
        let n = rng.gen_range(3..8usize);
        let probs: Vec<f64> = (0..n).map(|_| rng.gen::<f64>()).collect();
        let ap: f64 = rng.gen();
        let once = flip(ap, &probs).map_err(|e| e.to_string())?;
        let twice = flip(once.ap, &once.probs).map_err(|e| e.to_string())?;
        if twice.flipped || twice.ap != once.ap || twice.probs != once.probs {
            return Err("flip not idempotent".to_string());
        }
        if once.probs[0] < once.probs[n - 1] {
            return Err("flip output still rising".to_string());
        }
        let (ap_back, probs_back) = once.unflip();
        if (ap_back - ap).abs() > 1e-15 {
            return Err(format!("asymptote round trip off by {:.2e}", (ap_back - ap).abs()));
        }
        for (orig, back) in probs.iter().zip(&probs_back) {
            if (orig - back).abs() > 1e-15 {
                return Err(format!("round trip off by {:.2e}", (orig - back).abs()));
            }
        }
    }

    for i in 0..10_000u64 {
        let ap = rng.gen_range(0.0..0.9);
        let a = rng.gen_range(1e-3..1.0 - ap);
        let b = rng.gen_range(0.1..3.0);
        let d = rng.gen_range(8.0..20.0);
        let family = if i % 2 == 0 {
            CurveFamily::Exponential
        } else {
            CurveFamily::Logistic
        };
        let params = CurveParams::new(family, ap, a, b, d, vec![]).map_err(|e| e.to_string())?;
        let tail = params.eval(1e6);
        if (tail - ap).abs() > 1e-12 {
            return Err(format!(
                "{family:?} at 1e6 is {:.2e} from its asymptote",
                (tail - ap).abs()
            ));
        }
    }
    Ok("10k flips exact, 10k tails within 1e-12".to_string())
}
