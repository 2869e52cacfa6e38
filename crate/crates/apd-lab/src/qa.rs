//! Multiple-choice QA files: JSON Lines, one item per line, with string
//! prompts/options tokenized against the family vocabulary on read.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use apd_core::eval::QaItem;
use apd_core::vocab::Vocabulary;
use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};

#[derive(Serialize, Deserialize)]
struct QaRow {
    prompt: String,
    options: Vec<String>,
    correct: usize,
}

/// Write items in `(prompt, options, correct)` form.
pub fn write_qa(path: &Path, items: &[(String, Vec<String>, usize)]) -> Result<()> {
    let file = fs::File::create(path).map_err(LabError::io(path))?;
    let mut out = BufWriter::new(file);
    for (prompt, options, correct) in items {
        let row = QaRow {
            prompt: prompt.clone(),
            options: options.clone(),
            correct: *correct,
        };
        serde_json::to_writer(&mut out, &row)
            .map_err(|e| LabError::Config(format!("qa serialization: {e}")))?;
        out.write_all(b"\n").map_err(LabError::io(path))?;
    }
    out.flush().map_err(LabError::io(path))
}

pub fn read_qa(path: &Path, vocab: &Vocabulary) -> Result<Vec<QaItem>> {
    let text = fs::read_to_string(path).map_err(LabError::io(path))?;
    let mut items = Vec::new();
    let mut offset = 0u64;
    for (i, line) in text.split_inclusive('\n').enumerate() {
        let start = offset;
        offset += line.len() as u64;
        let trimmed = line.trim();
        if trimmed.is_empty() {
            continue;
        }
        let row: QaRow = serde_json::from_str(trimmed).map_err(|e| LabError::Malformed {
            path: path.to_path_buf(),
            line: i + 1,
            offset: start,
            msg: e.to_string(),
        })?;
        let options = row.options.iter().map(|o| vocab.tokenize(o)).collect();
        items.push(QaItem::new(vocab.tokenize(&row.prompt), options, row.correct)?);
    }
    Ok(items)
}

#[cfg(test)]
mod tests {
    use super::*;
    use apd_core::vocab::Tokenizer;

    #[test]
    fn qa_round_trip_tokenizes() {
        let vocab = Vocabulary::build("abcde", Tokenizer::Char);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("qa.jsonl");
        let items = vec![
            ("abc".to_string(), vec!["d".to_string(), "e".to_string()], 1),
            ("de".to_string(), vec!["ab".to_string(), "ba".to_string()], 0),
        ];
        write_qa(&path, &items).unwrap();
        let back = read_qa(&path, &vocab).unwrap();
        assert_eq!(back.len(), 2);
        assert_eq!(back[0].correct, 1);
        assert_eq!(back[0].options.len(), 2);
        assert_eq!(back[1].prompt, vocab.tokenize("de"));
    }

    #[test]
    fn bad_correct_index_is_an_error() {
        let vocab = Vocabulary::build("ab", Tokenizer::Char);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("qa.jsonl");
        write_qa(&path, &[("a".to_string(), vec!["b".to_string()], 3)]).unwrap();
        assert!(read_qa(&path, &vocab).is_err());
    }
}
