//! On-disk model artifacts: a binary container per network (little-endian
//! header + row-major f32 tensors + FNV-1a checksum), a JSON manifest and
//! vocabulary sidecar per family directory, and the ALM′/shape-network
//! checkpoint pair written by training.

use std::fs;
use std::hash::Hasher;
use std::path::Path;

use apd_core::energy::EnergyMlp;
use apd_core::family::{FamilyManifest, MemberRecord, ModelFamily};
use apd_core::model::{LmSpec, TinyLm};
use apd_core::vocab::{Tokenizer, Vocabulary};
use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};

const MODEL_MAGIC: [u8; 4] = *b"APDM";
const MLP_MAGIC: [u8; 4] = *b"APDE";
pub const FORMAT_VERSION: u32 = 1;

fn checksum(bytes: &[u8]) -> u64 {
    let mut h = fnv::FnvHasher::default();
    h.write(bytes);
    h.finish()
}

/// Little-endian cursor over a byte buffer; all reads are bounds-checked so
/// truncated files surface as format errors, not panics.
struct Reader<'a> {
    path: &'a Path,
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.at + n > self.bytes.len() {
            return Err(LabError::Malformed {
                path: self.path.to_path_buf(),
                line: 0,
                offset: self.at as u64,
                msg: format!("truncated while reading {what}"),
            });
        }
        let s = &self.bytes[self.at..self.at + n];
        self.at += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
}

fn format_err(path: &Path, offset: usize, msg: impl Into<String>) -> LabError {
    LabError::Malformed {
        path: path.to_path_buf(),
        line: 0,
        offset: offset as u64,
        msg: msg.into(),
    }
}

/// Serialize one model. The vocabulary hash travels in the header so a file
/// can be checked against the table it was trained with.
pub fn write_model(path: &Path, model: &TinyLm, vocab_hash: u64) -> Result<()> {
    let mut out = Vec::with_capacity(48 + model.param_count() * 4);
    out.extend_from_slice(&MODEL_MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&vocab_hash.to_le_bytes());
    out.extend_from_slice(&(model.vocab_size() as u32).to_le_bytes());
    out.extend_from_slice(&(model.window() as u32).to_le_bytes());
    out.extend_from_slice(&(model.spec().embed_dim as u32).to_le_bytes());
    out.extend_from_slice(&(model.spec().hidden[0] as u32).to_le_bytes());
    out.extend_from_slice(&(model.spec().hidden[1] as u32).to_le_bytes());
    out.extend_from_slice(&(model.param_count() as u64).to_le_bytes());
    for &p in model.params() {
        out.extend_from_slice(&p.to_le_bytes());
    }
    let sum = checksum(&out);
    out.extend_from_slice(&sum.to_le_bytes());
    fs::write(path, out).map_err(LabError::io(path))
}

/// Read a model back; `expect_vocab_hash` (when given) must match the
/// header. The trailing checksum guards against bit rot and truncation.
pub fn read_model(path: &Path, expect_vocab_hash: Option<u64>) -> Result<TinyLm> {
    let bytes = fs::read(path).map_err(LabError::io(path))?;
    let mut r = Reader {
        path,
        bytes: &bytes,
        at: 0,
    };
    if r.take(4, "magic")? != MODEL_MAGIC {
        return Err(format_err(path, 0, "not a model file (bad magic)"));
    }
    let version = r.u32("version")?;
    if version != FORMAT_VERSION {
        return Err(format_err(
            path,
            4,
            format!("unsupported model format version {version}"),
        ));
    }
    let vocab_hash = r.u64("vocab hash")?;
    let vocab_size = r.u32("vocab size")? as usize;
    let window = r.u32("window")? as usize;
    let embed = r.u32("embed dim")? as usize;
    let h1 = r.u32("hidden 1")? as usize;
    let h2 = r.u32("hidden 2")? as usize;
    let n = r.u64("param count")? as usize;
    let mut params = Vec::with_capacity(n);
    let raw = r.take(n * 4, "parameters")?;
    for c in raw.chunks_exact(4) {
        params.push(f32::from_le_bytes(c.try_into().unwrap()));
    }
    let body_end = r.at;
    let stored = r.u64("checksum")?;
    if stored != checksum(&bytes[..body_end]) {
        return Err(format_err(path, body_end, "checksum mismatch"));
    }
    if let Some(expect) = expect_vocab_hash {
        if expect != vocab_hash {
            return Err(format_err(
                path,
                8,
                format!("vocabulary hash {vocab_hash:#018x} does not match {expect:#018x}"),
            ));
        }
    }
    TinyLm::from_params(vocab_size, window, LmSpec::new(embed, h1, h2), params)
        .map_err(LabError::from)
}

/// Serialize the shape network (f64 parameters, same container discipline).
pub fn write_mlp(path: &Path, mlp: &EnergyMlp) -> Result<()> {
    let mut out = Vec::with_capacity(24 + mlp.param_count() * 8);
    out.extend_from_slice(&MLP_MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(mlp.n_models() as u32).to_le_bytes());
    out.extend_from_slice(&(mlp.param_count() as u64).to_le_bytes());
    for &p in mlp.params() {
        out.extend_from_slice(&p.to_le_bytes());
    }
    let sum = checksum(&out);
    out.extend_from_slice(&sum.to_le_bytes());
    fs::write(path, out).map_err(LabError::io(path))
}

pub fn read_mlp(path: &Path) -> Result<EnergyMlp> {
    let bytes = fs::read(path).map_err(LabError::io(path))?;
    let mut r = Reader {
        path,
        bytes: &bytes,
        at: 0,
    };
    if r.take(4, "magic")? != MLP_MAGIC {
        return Err(format_err(path, 0, "not a shape-network file (bad magic)"));
    }
    let version = r.u32("version")?;
    if version != FORMAT_VERSION {
        return Err(format_err(
            path,
            4,
            format!("unsupported format version {version}"),
        ));
    }
    let n_models = r.u32("model count")? as usize;
    let n = r.u64("param count")? as usize;
    let raw = r.take(n * 8, "parameters")?;
    let mut params = Vec::with_capacity(n);
    for c in raw.chunks_exact(8) {
        params.push(f64::from_le_bytes(c.try_into().unwrap()));
    }
    let body_end = r.at;
    let stored = r.u64("checksum")?;
    if stored != checksum(&bytes[..body_end]) {
        return Err(format_err(path, body_end, "checksum mismatch"));
    }
    EnergyMlp::from_params(n_models, params).map_err(LabError::from)
}

#[derive(Serialize, Deserialize)]
struct VocabJson {
    tokenizer: String,
    tokens: Vec<String>,
}

pub fn write_vocab(path: &Path, vocab: &Vocabulary) -> Result<()> {
    let doc = VocabJson {
        tokenizer: match vocab.tokenizer() {
            Tokenizer::Char => "char".into(),
            Tokenizer::Whitespace => "whitespace".into(),
        },
        tokens: vocab.tokens().to_vec(),
    };
    let text = serde_json::to_string_pretty(&doc)
        .map_err(|e| LabError::Config(format!("vocabulary serialization: {e}")))?;
    fs::write(path, text).map_err(LabError::io(path))
}

pub fn read_vocab(path: &Path) -> Result<Vocabulary> {
    let text = fs::read_to_string(path).map_err(LabError::io(path))?;
    let doc: VocabJson =
        serde_json::from_str(&text).map_err(|e| format_err(path, 0, e.to_string()))?;
    let tokenizer = parse_tokenizer(&doc.tokenizer)?;
    Vocabulary::from_tokens(doc.tokens, tokenizer).map_err(LabError::from)
}

pub fn parse_tokenizer(name: &str) -> Result<Tokenizer> {
    match name {
        "char" => Ok(Tokenizer::Char),
        "whitespace" => Ok(Tokenizer::Whitespace),
        other => Err(LabError::Config(format!(
            "unknown tokenizer {other:?} (expected \"char\" or \"whitespace\")"
        ))),
    }
}

#[derive(Serialize, Deserialize)]
struct MemberJson {
    file: String,
    embed_dim: usize,
    hidden: [usize; 2],
    param_count: usize,
    log_size: f64,
    held_out_ce: f64,
    init_seed: u64,
}

#[derive(Serialize, Deserialize)]
struct ManifestJson {
    format_version: u32,
    corpus_hash: u64,
    vocab_hash: u64,
    window: usize,
    seed: u64,
    members: Vec<MemberJson>,
}

/// Lay a trained family down as a directory: `manifest.json`,
/// `vocab.json`, and one `m<i>.bin` per member, smallest first.
pub fn write_family(dir: &Path, family: &ModelFamily) -> Result<()> {
    fs::create_dir_all(dir).map_err(LabError::io(dir))?;
    write_vocab(&dir.join("vocab.json"), family.vocab())?;
    let manifest = family.manifest();
    let mut members = Vec::with_capacity(manifest.members.len());
    for (i, (model, rec)) in family.members().iter().zip(&manifest.members).enumerate() {
        let file = format!("m{i}.bin");
        write_model(&dir.join(&file), model, manifest.vocab_hash)?;
        members.push(MemberJson {
            file,
            embed_dim: rec.spec.embed_dim,
            hidden: rec.spec.hidden,
            param_count: rec.param_count,
            log_size: rec.log_size,
            held_out_ce: rec.held_out_ce,
            init_seed: rec.init_seed,
        });
    }
    let doc = ManifestJson {
        format_version: FORMAT_VERSION,
        corpus_hash: manifest.corpus_hash,
        vocab_hash: manifest.vocab_hash,
        window: manifest.window,
        seed: manifest.seed,
        members,
    };
    let path = dir.join("manifest.json");
    let text = serde_json::to_string_pretty(&doc)
        .map_err(|e| LabError::Config(format!("manifest serialization: {e}")))?;
    fs::write(&path, text).map_err(LabError::io(&path))
}

/// Load a family directory back. Ordering, shape, and hash consistency are
/// re-validated on assembly, so a tampered manifest fails here.
pub fn read_family(dir: &Path) -> Result<ModelFamily> {
    let manifest_path = dir.join("manifest.json");
    let text = fs::read_to_string(&manifest_path).map_err(LabError::io(&manifest_path))?;
    let doc: ManifestJson = serde_json::from_str(&text)
        .map_err(|e| format_err(&manifest_path, 0, e.to_string()))?;
    if doc.format_version != FORMAT_VERSION {
        return Err(format_err(
            &manifest_path,
            0,
            format!("unsupported manifest version {}", doc.format_version),
        ));
    }
    let vocab = read_vocab(&dir.join("vocab.json"))?;
    let mut members = Vec::with_capacity(doc.members.len());
    let mut records = Vec::with_capacity(doc.members.len());
    for m in &doc.members {
        let model = read_model(&dir.join(&m.file), Some(doc.vocab_hash))?;
        records.push(MemberRecord {
            spec: LmSpec::new(m.embed_dim, m.hidden[0], m.hidden[1]),
            param_count: m.param_count,
            log_size: m.log_size,
            held_out_ce: m.held_out_ce,
            init_seed: m.init_seed,
        });
        members.push(model);
    }
    let manifest = FamilyManifest {
        corpus_hash: doc.corpus_hash,
        vocab_hash: doc.vocab_hash,
        window: doc.window,
        seed: doc.seed,
        members: records,
    };
    ModelFamily::from_parts(vocab, members, manifest).map_err(LabError::from)
}
