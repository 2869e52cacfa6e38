//! The JSON run configuration: one document drives every subcommand.
//! Values are overridable from the command line with repeatable
//! `--set dotted.path=value` flags, and `APD_SEED` overrides the seed; the
//! fully resolved document is snapshotted next to each command's outputs.

use std::env;
use std::fs;
use std::path::{Path, PathBuf};

use apd_core::curve::FitConfig;
use apd_core::energy::TrainConfig;
use apd_core::family::{FamilyConfig, MemberTrainConfig};
use apd_core::model::{LmSpec, Optimizer};
use apd_core::sampling::{FilterMethod, GenerateConfig, SamplerConfig};
use apd_core::trace::CandidateLayout;
use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};

pub const SEED_ENV: &str = "APD_SEED";

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub corpus: PathBuf,
    pub family_dir: PathBuf,
    pub traces: PathBuf,
    pub checkpoint_dir: PathBuf,
    pub report_dir: PathBuf,
    pub qa: PathBuf,
    pub prompts: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Paths {
            corpus: "corpus.txt".into(),
            family_dir: "family".into(),
            traces: "traces.jsonl".into(),
            checkpoint_dir: "checkpoints".into(),
            report_dir: "reports".into(),
            qa: "qa.jsonl".into(),
            prompts: "prompts.txt".into(),
        }
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SizeSpec {
    pub embed_dim: usize,
    pub hidden: [usize; 2],
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FamilySection {
    pub window: usize,
    pub tokenizer: String,
    pub val_fraction: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Smallest first; parameter counts must strictly increase.
    pub sizes: Vec<SizeSpec>,
}

impl Default for FamilySection {
    fn default() -> Self {
        FamilySection {
            window: 4,
            tokenizer: "char".into(),
            val_fraction: 0.1,
            epochs: 3,
            batch_size: 64,
            lr: 1e-3,
            // A steep capacity ladder: the contrast needs an amateur that
            // is genuinely starved, not a smaller twin of the expert.
            sizes: vec![
                SizeSpec {
                    embed_dim: 4,
                    hidden: [12, 12],
                },
                SizeSpec {
                    embed_dim: 8,
                    hidden: [48, 48],
                },
                SizeSpec {
                    embed_dim: 16,
                    hidden: [128, 128],
                },
                SizeSpec {
                    embed_dim: 32,
                    hidden: [512, 512],
                },
            ],
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TraceSection {
    pub n_top: usize,
    pub n_mid: usize,
    pub n_tail: usize,
    pub mid_band_end: usize,
}

impl Default for TraceSection {
    fn default() -> Self {
        let d = CandidateLayout::default();
        TraceSection {
            n_top: d.n_top,
            n_mid: d.n_mid,
            n_tail: d.n_tail,
            mid_band_end: d.mid_band_end,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ApdTrainSection {
    pub lr: f64,
    pub mlp_lr: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub warmup_steps: usize,
    pub lambda2: f64,
    pub lambda3: f64,
}

impl Default for ApdTrainSection {
    fn default() -> Self {
        let d = TrainConfig::default();
        ApdTrainSection {
            lr: d.lr,
            mlp_lr: d.mlp_lr,
            weight_decay: d.weight_decay,
            epochs: d.epochs,
            batch_size: d.batch_size,
            warmup_steps: d.warmup_steps,
            lambda2: d.lambda2,
            lambda3: d.lambda3,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FitSection {
    pub iters: usize,
    pub lr: f64,
    pub l2_weight: f64,
    pub max_retries: usize,
    /// Share of the on-the-fly mixture given to the asymptotes (1/T).
    pub mix_weight: f64,
}

impl Default for FitSection {
    fn default() -> Self {
        let d = FitConfig::default();
        FitSection {
            iters: d.iters,
            lr: d.lr,
            l2_weight: d.l2_weight,
            max_retries: d.max_retries,
            mix_weight: 0.5,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecodeSection {
    /// Contrast temperature T for cd/apd sources.
    pub t: f64,
    pub sources: Vec<String>,
    /// Truncation: "none", "top-p", "top-k", "top-p-k", or "alpha-mask".
    pub method: String,
    pub p: f64,
    pub k: usize,
    pub alpha: f64,
    pub temperature: f64,
    pub max_tokens: usize,
    pub n_continuations: usize,
    /// Stop generation at this token (given as vocabulary text), if set.
    pub stop_token: Option<String>,
}

impl Default for DecodeSection {
    fn default() -> Self {
        DecodeSection {
            t: 2.0,
            sources: vec!["elm".into(), "cd".into(), "apd".into()],
            method: "top-p".into(),
            p: 0.9,
            k: 20,
            alpha: 0.1,
            temperature: 1.0,
            max_tokens: 64,
            n_continuations: 8,
            stop_token: None,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvaluateSection {
    pub sources: Vec<String>,
    /// Which metric families land in the reports.
    pub metrics: Vec<String>,
    /// "token" or "option" granularity for MRR.
    pub mrr: String,
}

impl Default for EvaluateSection {
    fn default() -> Self {
        EvaluateSection {
            sources: vec!["elm".into(), "cd".into(), "apd".into()],
            metrics: vec!["perplexity".into(), "accuracy".into(), "mrr".into()],
            mrr: "token".into(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub paths: Paths,
    pub family: FamilySection,
    pub trace: TraceSection,
    pub apd_train: ApdTrainSection,
    pub fit: FitSection,
    pub decode: DecodeSection,
    pub evaluate: EvaluateSection,
}

impl RunConfig {
    /// Parse the file, apply `--set` overrides in order, then the
    /// `APD_SEED` environment override.
    pub fn load(path: &Path, sets: &[String]) -> Result<RunConfig> {
        RunConfig::resolve(Some(path), sets)
    }

    /// Like `load`, but a missing file path starts from the defaults, so
    /// `--set` alone can drive a run.
    pub fn resolve(path: Option<&Path>, sets: &[String]) -> Result<RunConfig> {
        let (mut value, label) = match path {
            Some(path) => {
                let text = fs::read_to_string(path).map_err(LabError::io(path))?;
                let value: serde_json::Value = serde_json::from_str(&text)
                    .map_err(|e| LabError::Config(format!("{}: {e}", path.display())))?;
                (value, path.display().to_string())
            }
            None => (
                serde_json::to_value(RunConfig::default())
                    .expect("default config serializes"),
                "defaults".to_string(),
            ),
        };
        for spec in sets {
            apply_set(&mut value, spec)?;
        }
        let mut cfg: RunConfig = serde_json::from_value(value)
            .map_err(|e| LabError::Config(format!("{label}: {e}")))?;
        if let Ok(seed) = env::var(SEED_ENV) {
            cfg.seed = seed
                .parse()
                .map_err(|_| LabError::Config(format!("{SEED_ENV}={seed:?} is not a u64")))?;
        }
        Ok(cfg)
    }

    /// Write the resolved document into `dir` so the run is reproducible
    /// from its outputs alone.
    pub fn snapshot(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(LabError::io(dir))?;
        let path = dir.join("resolved-config.json");
        let text = serde_json::to_string_pretty(self)
            .map_err(|e| LabError::Config(format!("config serialization: {e}")))?;
        fs::write(&path, text).map_err(LabError::io(&path))
    }

    pub fn family_config(&self) -> Result<FamilyConfig> {
        if self.family.sizes.len() < 3 {
            return Err(LabError::Config(format!(
                "family.sizes needs at least 3 entries, got {}",
                self.family.sizes.len()
            )));
        }
        Ok(FamilyConfig {
            window: self.family.window,
            size_specs: self
                .family
                .sizes
                .iter()
                .map(|s| LmSpec::new(s.embed_dim, s.hidden[0], s.hidden[1]))
                .collect(),
            train: MemberTrainConfig {
                optimizer: Optimizer::adamw(self.family.lr),
                epochs: self.family.epochs,
                batch_size: self.family.batch_size,
            },
            val_fraction: self.family.val_fraction,
            seed: self.seed,
        })
    }

    pub fn layout(&self) -> CandidateLayout {
        CandidateLayout {
            n_top: self.trace.n_top,
            n_mid: self.trace.n_mid,
            n_tail: self.trace.n_tail,
            mid_band_end: self.trace.mid_band_end,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            lr: self.apd_train.lr,
            mlp_lr: self.apd_train.mlp_lr,
            weight_decay: self.apd_train.weight_decay,
            epochs: self.apd_train.epochs,
            batch_size: self.apd_train.batch_size,
            warmup_steps: self.apd_train.warmup_steps,
            lambda2: self.apd_train.lambda2,
            lambda3: self.apd_train.lambda3,
            seed: self.seed,
        }
    }

    pub fn fit_config(&self) -> FitConfig {
        FitConfig {
            iters: self.fit.iters,
            lr: self.fit.lr,
            l2_weight: self.fit.l2_weight,
            max_retries: self.fit.max_retries,
        }
    }

    pub fn filter_method(&self) -> Result<FilterMethod> {
        let d = &self.decode;
        Ok(match d.method.as_str() {
            "none" => FilterMethod::NoFilter,
            "top-p" => FilterMethod::TopP { p: d.p },
            "top-k" => FilterMethod::TopK { k: d.k },
            "top-p-k" => FilterMethod::TopPK { p: d.p, k: d.k },
            "alpha-mask" => FilterMethod::AlphaMask { alpha: d.alpha },
            other => {
                return Err(LabError::Config(format!(
                    "unknown decode.method {other:?} (expected none, top-p, top-k, top-p-k, or alpha-mask)"
                )))
            }
        })
    }

    pub fn generate_config(&self, stop_token: Option<u32>) -> Result<GenerateConfig> {
        Ok(GenerateConfig {
            max_tokens: self.decode.max_tokens,
            n_continuations: self.decode.n_continuations,
            stop_token,
            sampler: SamplerConfig {
                method: self.filter_method()?,
                temperature: self.decode.temperature,
                seed: self.seed,
            },
        })
    }
}

/// Apply one `dotted.path=value` override to the raw document. The value is
/// parsed as JSON when possible and taken as a bare string otherwise, so
/// `--set family.epochs=5` and `--set family.tokenizer=char` both work.
pub fn apply_set(root: &mut serde_json::Value, spec: &str) -> Result<()> {
    let (path, raw) = spec
        .split_once('=')
        .ok_or_else(|| LabError::Config(format!("--set {spec:?} is not PATH=VALUE")))?;
    if path.is_empty() {
        return Err(LabError::Config(format!("--set {spec:?} has an empty path")));
    }
    let value: serde_json::Value = serde_json::from_str(raw)
        .unwrap_or_else(|_| serde_json::Value::String(raw.to_string()));
    let mut node = root;
    let mut walked = Vec::new();
    let mut parts = path.split('.').peekable();
    while let Some(key) = parts.next() {
        walked.push(key);
        if !node.is_object() {
            return Err(LabError::Config(format!(
                "--set {spec:?}: {} is not an object",
                walked[..walked.len() - 1].join(".")
            )));
        }
        let map = node.as_object_mut().unwrap();
        if parts.peek().is_none() {
            map.insert(key.to_string(), value);
            return Ok(());
        }
        node = map
            .entry(key.to_string())
            .or_insert_with(|| serde_json::Value::Object(Default::default()));
    }
    unreachable!("split always yields at least one part")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write_cfg(dir: &Path, body: &str) -> PathBuf {
        let path = dir.join("run.json");
        fs::write(&path, body).unwrap();
        path
    }

    #[test]
    fn defaults_fill_missing_sections() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_cfg(dir.path(), r#"{ "seed": 5 }"#);
        let cfg = RunConfig::load(&path, &[]).unwrap();
        assert_eq!(cfg.seed, 5);
        assert_eq!(cfg.family.window, 4);
        assert_eq!(cfg.apd_train.lambda2, 10.0);
        assert_eq!(cfg.fit.iters, 400);
    }

    #[test]
    fn unknown_keys_are_refused() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_cfg(dir.path(), r#"{ "sed": 5 }"#);
        let err = RunConfig::load(&path, &[]).unwrap_err();
        assert!(err.to_string().contains("sed"), "{err}");
        assert_eq!(err.exit_code(), 2);
    }

    #[test]
    fn set_overrides_nested_and_typed() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_cfg(dir.path(), r#"{ "seed": 5 }"#);
        let sets = vec![
            "apd_train.lr=0.01".to_string(),
            "family.tokenizer=whitespace".to_string(),
            "decode.sources=[\"elm\"]".to_string(),
        ];
        let cfg = RunConfig::load(&path, &sets).unwrap();
        assert_eq!(cfg.apd_train.lr, 0.01);
        assert_eq!(cfg.family.tokenizer, "whitespace");
        assert_eq!(cfg.decode.sources, vec!["elm"]);
        // A typo'd path is caught by the strict deserialize.
        let bad = vec!["apd_train.lrr=0.01".to_string()];
        assert!(RunConfig::load(&path, &bad).is_err());
    }

    #[test]
    fn env_seed_wins() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_cfg(dir.path(), r#"{ "seed": 5 }"#);
        env::set_var(SEED_ENV, "99");
        let cfg = RunConfig::load(&path, &["seed=7".to_string()]);
        env::remove_var(SEED_ENV);
        assert_eq!(cfg.unwrap().seed, 99);
    }

    #[test]
    fn snapshot_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = RunConfig::default();
        cfg.snapshot(dir.path()).unwrap();
        let text = fs::read_to_string(dir.path().join("resolved-config.json")).unwrap();
        let back: RunConfig = serde_json::from_str(&text).unwrap();
        assert_eq!(back.fit.mix_weight, cfg.fit.mix_weight);
    }

    #[test]
    fn method_strings_map_to_filters() {
        let mut cfg = RunConfig::default();
        cfg.decode.method = "alpha-mask".into();
        assert!(matches!(
            cfg.filter_method().unwrap(),
            FilterMethod::AlphaMask { .. }
        ));
        cfg.decode.method = "banana".into();
        assert!(cfg.filter_method().is_err());
    }
}
