//! One function per subcommand. Each reads what it needs from disk, runs
//! the core routine, writes its outputs plus a resolved-config snapshot,
//! and prints a short stdout summary.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use apd_core::cd::{verify_theorem, LogitLine};
use apd_core::corpus::Corpus;
use apd_core::curve::{fit_token_curve, CurveFamily};
use apd_core::energy::train_alm_prime;
use apd_core::eval::{
    dist_n_many, obvious_blindness_probe, rep_ratio, BlindnessScenario, GridPoint, QaEval,
    INV_T_GRID, INV_T_GRID_OTF,
};
use apd_core::family::{self, ModelFamily};
use apd_core::model::TinyLm;
use apd_core::sampling::generate;
use apd_core::source::{ContrastSource, DistributionSource, ExpertSource, OnTheFlySource};
use apd_core::vocab::Vocabulary;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;

use crate::config::RunConfig;
use crate::error::{LabError, Result};
use crate::model_store;
use crate::qa;
use crate::report::{self, CurveRow, GenStats, GenerationRow, MethodReport, Summary, SummaryRow};
use crate::trace_store;

/// Refuse to clobber an existing output unless `--force` was given.
fn guard_output(path: &Path, force: bool) -> Result<()> {
    if path.exists() && !force {
        return Err(LabError::Config(format!(
            "{} already exists (pass --force to overwrite)",
            path.display()
        )));
    }
    Ok(())
}

/// Directory that holds `path`, usable with `create_dir_all`.
fn dir_of(path: &Path) -> &Path {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    }
}

fn load_corpus(cfg: &RunConfig, vocab: &Vocabulary) -> Result<Corpus> {
    let path = &cfg.paths.corpus;
    let text = fs::read_to_string(path).map_err(LabError::io(path))?;
    let corpus = Corpus::from_text(&text, vocab);
    if corpus.is_empty() {
        return Err(LabError::Config(format!(
            "{} has no usable lines",
            path.display()
        )));
    }
    Ok(corpus)
}

fn load_alm_prime(cfg: &RunConfig, family: &ModelFamily) -> Result<TinyLm> {
    let path = cfg.paths.checkpoint_dir.join("alm_prime.bin");
    if !path.exists() {
        return Err(LabError::Config(format!(
            "{} not found; run train-apd first",
            path.display()
        )));
    }
    model_store::read_model(&path, Some(family.manifest().vocab_hash))
}

pub fn train_family(cfg: &RunConfig, force: bool) -> Result<()> {
    let dir = &cfg.paths.family_dir;
    guard_output(&dir.join("manifest.json"), force)?;
    let tokenizer = model_store::parse_tokenizer(&cfg.family.tokenizer)?;
    let text = fs::read_to_string(&cfg.paths.corpus).map_err(LabError::io(&cfg.paths.corpus))?;
    let vocab = Vocabulary::build(&text, tokenizer);
    let corpus = Corpus::from_text(&text, &vocab);
    if corpus.is_empty() {
        return Err(LabError::Config(format!(
            "{} has no usable lines",
            cfg.paths.corpus.display()
        )));
    }

    let family = family::train_family(&corpus, vocab, &cfg.family_config()?)?;

    model_store::write_family(dir, &family)?;
    cfg.snapshot(dir)?;

    println!("member      params  log_size  held_out_ce");
    for (i, m) in family.manifest().members.iter().enumerate() {
        println!(
            "{i:>6}  {:>10}  {:>8.4}  {:>11.4}",
            m.param_count, m.log_size, m.held_out_ce
        );
    }
    println!(
        "trained {} members on {} lines ({} token vocab)",
        family.n_members(),
        corpus.lines().len(),
        family.vocab().len()
    );
    println!("family fingerprint {:016x}", family.fingerprint());
    println!("wrote {}", dir.display());
    Ok(())
}

pub fn collect_traces(cfg: &RunConfig, force: bool) -> Result<()> {
    let path = &cfg.paths.traces;
    guard_output(path, force)?;
    let family = model_store::read_family(&cfg.paths.family_dir)?;
    let corpus = load_corpus(cfg, family.vocab())?;
    if corpus.content_hash() != family.manifest().corpus_hash {
        eprintln!(
            "warning: {} differs from the corpus the family was trained on",
            cfg.paths.corpus.display()
        );
    }

    let data = apd_core::trace::collect_traces(&family, &corpus, &cfg.layout(), cfg.seed)?;
    fs::create_dir_all(dir_of(path)).map_err(LabError::io(path))?;
    trace_store::write_traces(path, &data)?;
    cfg.snapshot(dir_of(path))?;

    let n = data.records.len();
    let mean = if n == 0 {
        0.0
    } else {
        data.records.iter().map(|r| r.cands.len()).sum::<usize>() as f64 / n as f64
    };
    println!("collected {n} records, mean candidate set {mean:.1}");
    println!("wrote {}", path.display());
    Ok(())
}

pub fn train_apd(cfg: &RunConfig, force: bool) -> Result<()> {
    let dir = &cfg.paths.checkpoint_dir;
    guard_output(&dir.join("alm_prime.bin"), force)?;
    let family = model_store::read_family(&cfg.paths.family_dir)?;
    let traces = trace_store::read_traces(&cfg.paths.traces)?;

    // A hash mismatch is fatal here (the core refuses to pair them); traces
    // alone stay usable by fit-curves, which never loads the family.
    let (alm_prime, mlp, steps) = train_alm_prime(&traces, &family, &cfg.train_config())?;

    fs::create_dir_all(dir).map_err(LabError::io(dir))?;
    let vocab_hash = family.manifest().vocab_hash;
    model_store::write_model(&dir.join("alm_prime.bin"), &alm_prime, vocab_hash)?;
    model_store::write_mlp(&dir.join("energy.bin"), &mlp)?;
    report::write_loss_csv(&dir.join("loss.csv"), &steps)?;
    cfg.snapshot(dir)?;

    println!(
        "fine-tuned alm' for {} epochs over {} records ({} steps)",
        cfg.apd_train.epochs,
        traces.records.len(),
        steps.len()
    );
    if let Some(s) = steps.last() {
        println!(
            "final losses  l1 {:.4}  l2 {:.4}  l3 {:.4}  total {:.4}",
            s.l1, s.l2, s.l3, s.total
        );
    }
    println!("wrote {}", dir.display());
    Ok(())
}

fn family_name(f: CurveFamily) -> &'static str {
    match f {
        CurveFamily::Exponential => "exponential",
        CurveFamily::Logistic => "logistic",
        CurveFamily::FracPoly { .. } => "fracpoly",
    }
}

pub fn fit_curves(cfg: &RunConfig, force: bool) -> Result<()> {
    let dir = &cfg.paths.report_dir;
    let path = dir.join("curves.jsonl");
    guard_output(&path, force)?;
    let traces = trace_store::read_traces(&cfg.paths.traces)?;
    let fit_cfg = cfg.fit_config();
    let log_sizes = &traces.header.log_sizes;

    let mut rows = Vec::new();
    let mut flipped = 0usize;
    let mut loss_sum = 0.0f64;
    let mut obs = vec![0.0f64; traces.header.n_models];
    for rec in &traces.records {
        for (j, &token) in rec.cands.iter().enumerate() {
            for (i, row) in rec.probs.iter().enumerate() {
                obs[i] = row[j] as f64;
            }
            let fit = fit_token_curve(&obs, log_sizes, &fit_cfg)?;
            flipped += fit.flipped as usize;
            loss_sum += fit.final_loss;
            rows.push(CurveRow {
                ctx_id: rec.ctx_id,
                token,
                family: family_name(fit.shape.family),
                ap: fit.ap,
                a: fit.shape.a,
                b: fit.shape.b,
                d: fit.shape.d,
                flipped: fit.flipped,
                final_loss: fit.final_loss,
            });
        }
    }

    fs::create_dir_all(dir).map_err(LabError::io(dir))?;
    report::write_jsonl(&path, &rows)?;
    cfg.snapshot(dir)?;

    if rows.is_empty() {
        println!("fitted 0 curves");
    } else {
        println!(
            "fitted {} curves ({:.1}% flipped, mean loss {:.4})",
            rows.len(),
            100.0 * flipped as f64 / rows.len() as f64,
            loss_sum / rows.len() as f64
        );
    }
    println!("wrote {}", path.display());
    Ok(())
}

pub fn decode(cfg: &RunConfig, prompts: Option<&Path>, force: bool) -> Result<()> {
    let dir = &cfg.paths.report_dir;
    let out_path = dir.join("generations.jsonl");
    guard_output(&out_path, force)?;
    let family = model_store::read_family(&cfg.paths.family_dir)?;
    let vocab = family.vocab();

    let prompts_path = prompts.unwrap_or(&cfg.paths.prompts);
    let text = fs::read_to_string(prompts_path).map_err(LabError::io(prompts_path))?;
    let prompt_lines: Vec<(String, Vec<u32>)> = text
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| (l.to_string(), vocab.tokenize(l)))
        .collect();
    if prompt_lines.is_empty() {
        return Err(LabError::Config(format!(
            "{} has no usable prompts",
            prompts_path.display()
        )));
    }

    let stop_token = match &cfg.decode.stop_token {
        None => None,
        Some(piece) => Some(
            vocab
                .tokens()
                .iter()
                .position(|t| t == piece)
                .map(|i| i as u32)
                .ok_or_else(|| {
                    LabError::Config(format!("decode.stop_token {piece:?} is not in the vocabulary"))
                })?,
        ),
    };
    let gen_cfg = cfg.generate_config(stop_token)?;

    let mut rows: Vec<GenerationRow> = Vec::new();
    for name in &cfg.decode.sources {
        let holder: TinyLm;
        let source: Box<dyn DistributionSource + '_> = match name.as_str() {
            "elm" => Box::new(ExpertSource::new(family.elm())),
            "cd" => Box::new(ContrastSource::contrastive(
                family.elm(),
                family.alm(),
                cfg.decode.t,
            )?),
            "apd" => {
                holder = load_alm_prime(cfg, &family)?;
                Box::new(ContrastSource::asymptotic(
                    family.elm(),
                    &holder,
                    cfg.decode.t,
                )?)
            }
            "otf" => Box::new(OnTheFlySource::new(
                &family,
                cfg.layout(),
                cfg.fit_config(),
                cfg.fit.mix_weight,
                cfg.seed,
            )?),
            other => {
                return Err(LabError::Config(format!(
                    "unknown decode source {other:?} (expected elm, cd, apd, or otf)"
                )))
            }
        };
        for (prompt, ids) in &prompt_lines {
            let outs = generate(source.as_ref(), ids, &gen_cfg)?;
            let texts = outs
                .iter()
                .map(|t| vocab.detokenize(t))
                .collect::<std::result::Result<Vec<_>, apd_core::Error>>()?;
            rows.push(GenerationRow {
                prompt: prompt.clone(),
                source: name.clone(),
                method: cfg.decode.method.clone(),
                temperature: cfg.decode.temperature,
                texts,
                tokens: outs,
            });
        }
    }

    fs::create_dir_all(dir).map_err(LabError::io(dir))?;
    report::write_jsonl(&out_path, &rows)?;
    cfg.snapshot(dir)?;

    println!(
        "generated {} continuations ({} prompts x {} sources x {})",
        rows.iter().map(|r| r.tokens.len()).sum::<usize>(),
        prompt_lines.len(),
        cfg.decode.sources.len(),
        cfg.decode.n_continuations
    );
    println!("wrote {}", out_path.display());
    Ok(())
}

fn read_generations(path: &Path) -> Result<Vec<GenerationRow>> {
    let text = fs::read_to_string(path).map_err(LabError::io(path))?;
    let mut rows = Vec::new();
    let mut offset = 0u64;
    for (i, line) in text.split_inclusive('\n').enumerate() {
        let trimmed = line.trim_end();
        if !trimmed.is_empty() {
            let row: GenerationRow =
                serde_json::from_str(trimmed).map_err(|e| LabError::Malformed {
                    path: path.to_path_buf(),
                    line: i + 1,
                    offset,
                    msg: format!("bad generation row: {e}"),
                })?;
            rows.push(row);
        }
        offset += line.len() as u64;
    }
    Ok(rows)
}

pub fn evaluate(
    cfg: &RunConfig,
    qa_path: Option<&Path>,
    generations: Option<&Path>,
    plot_data: bool,
    force: bool,
) -> Result<()> {
    let dir = &cfg.paths.report_dir;
    guard_output(&dir.join("summary.json"), force)?;
    let family = model_store::read_family(&cfg.paths.family_dir)?;
    let items = qa::read_qa(qa_path.unwrap_or(&cfg.paths.qa), family.vocab())?;
    let eval = QaEval::prepare(family.elm(), items)?;
    let counts = (eval.n_items(), eval.n_ppl_items(), eval.n_acc_items());
    fs::create_dir_all(dir).map_err(LabError::io(dir))?;

    println!(
        "{} QA items ({} scoreable for perplexity, {} for accuracy)",
        counts.0, counts.1, counts.2
    );
    println!("source    best 1/T  perplexity  accuracy     mrr");
    let mut best_rows = Vec::new();
    for name in &cfg.evaluate.sources {
        let points: Vec<GridPoint> = match name.as_str() {
            "elm" => vec![eval.expert_point(family.elm())?],
            "cd" => eval.grid(family.alm(), &INV_T_GRID)?,
            "apd" => {
                let alm_prime = load_alm_prime(cfg, &family)?;
                eval.grid(&alm_prime, &INV_T_GRID)?
            }
            "otf" => eval.otf_grid(
                &family,
                &cfg.layout(),
                &cfg.fit_config(),
                &INV_T_GRID_OTF,
                cfg.seed,
            )?,
            other => {
                return Err(LabError::Config(format!(
                    "unknown evaluate source {other:?} (expected elm, cd, apd, or otf)"
                )))
            }
        };
        let rep = MethodReport::new(name, &cfg.evaluate.metrics, &cfg.evaluate.mrr, counts, &points)?;
        report::write_json(&dir.join(format!("eval-{name}.json")), &rep)?;
        if plot_data {
            let series: Vec<(f64, f64)> =
                rep.grid.iter().map(|r| (r.inv_t, r.perplexity)).collect();
            report::write_series_csv(
                &dir.join(format!("ppl-{name}.csv")),
                "inv_t",
                "perplexity",
                &series,
            )?;
        }
        println!(
            "{name:<8}  {:>8.3}  {:>10.4}  {:>8.4}  {:>6.4}",
            rep.best.inv_t, rep.best.perplexity, rep.best.accuracy, rep.best.mrr
        );
        best_rows.push(SummaryRow {
            source: name.clone(),
            inv_t: rep.best.inv_t,
            perplexity: rep.best.perplexity,
            accuracy: rep.best.accuracy,
            mrr: rep.best.mrr,
        });
    }

    let mut gen_stats = Vec::new();
    if let Some(gen_path) = generations {
        let mut by_source: BTreeMap<String, Vec<Vec<u32>>> = BTreeMap::new();
        for row in read_generations(gen_path)? {
            by_source.entry(row.source).or_default().extend(row.tokens);
        }
        for (source, seqs) in by_source {
            let stats = GenStats {
                n_seqs: seqs.len(),
                dist1: dist_n_many(&seqs, 1),
                dist2: dist_n_many(&seqs, 2),
                rep: rep_ratio(&seqs, 4, 3),
                source,
            };
            println!(
                "{:<8}  dist-1 {:.4}  dist-2 {:.4}  rep {:.4}  ({} seqs)",
                stats.source, stats.dist1, stats.dist2, stats.rep, stats.n_seqs
            );
            gen_stats.push(stats);
        }
    }

    let summary = Summary {
        best: best_rows,
        generations: gen_stats,
    };
    report::write_json(&dir.join("summary.json"), &summary)?;
    cfg.snapshot(dir)?;
    println!("wrote {}", dir.join("summary.json").display());
    Ok(())
}

pub fn theorem_check(n_lines: usize, tolerance: f64, seed: u64) -> Result<()> {
    if n_lines == 0 {
        return Err(LabError::Config("--lines must be at least 1".into()));
    }
    if !(tolerance.is_finite() && tolerance > 0.0) {
        return Err(LabError::Config(format!(
            "--tolerance must be positive, got {tolerance}"
        )));
    }
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let mut worst_overall = 0.0f64;
    for &t in &[1.5, 2.0, 4.0, 10.0] {
        let lines: Vec<LogitLine> = (0..n_lines)
            .map(|_| LogitLine {
                slope: rng.gen_range(-3.0..3.0),
                intercept: rng.gen_range(-5.0..5.0),
            })
            .collect();
        let lsa = rng.gen_range(9.0..16.0);
        let lse = lsa + rng.gen_range(0.5..6.0);
        let worst = verify_theorem(&lines, lsa, lse, t)?;
        println!("T={t:<4}  ln N_a={lsa:.3}  ln N_e={lse:.3}  max |delta|={worst:.3e}");
        worst_overall = worst_overall.max(worst);
    }
    if worst_overall > tolerance {
        return Err(LabError::Numeric(format!(
            "worst discrepancy {worst_overall:.3e} exceeds {tolerance:.1e}"
        )));
    }
    println!(
        "theorem check passed: {n_lines} lines per temperature, worst {worst_overall:.3e} <= {tolerance:.1e}"
    );
    Ok(())
}

pub fn probe_blindness() -> Result<()> {
    let sc = BlindnessScenario::canonical();
    let out = obvious_blindness_probe(&sc)?;
    let label = |i: usize| {
        if i == sc.obvious {
            "obvious"
        } else if i == sc.rare {
            "rare"
        } else {
            "other"
        }
    };
    println!(
        "scenario: {} models x {} tokens, T={}",
        sc.family_rows.len(),
        sc.elm_probs.len(),
        sc.t
    );
    println!("cd  argmax: token {} ({})", out.cd_pick, label(out.cd_pick));
    println!(
        "apd argmax: token {} ({})",
        out.apd_pick,
        label(out.apd_pick)
    );
    Ok(())
}
