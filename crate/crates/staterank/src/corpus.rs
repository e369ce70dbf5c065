//! JSONL inputs and outputs.

use std::collections::HashSet;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use staterank_core::embedder::Embedding;
use staterank_core::tensor::Vector;

use crate::error::{Error, Result};
use crate::fsio;

/// One document (or query) of a corpus file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusRecord {
    pub id: String,
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub domain: Option<String>,
}

/// A labelled query/document pair for reranker training.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingPair {
    pub query: String,
    pub doc: String,
    pub label: f64,
}

/// One row of an embeddings file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingRow {
    pub id: String,
    pub dim: usize,
    pub values: Vec<f64>,
}

/// Parse JSONL text; blank lines are skipped, anything else must decode.
pub fn parse_jsonl<T: DeserializeOwned>(text: &str, path: &Path) -> Result<Vec<T>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let rec = serde_json::from_str(line).map_err(|e| Error::Line {
            path: path.to_path_buf(),
            line: i + 1,
            msg: e.to_string(),
        })?;
        out.push(rec);
    }
    Ok(out)
}

pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let bytes = fsio::read(path)?;
    let text = std::str::from_utf8(&bytes).map_err(|e| Error::format(path, format!("not UTF-8: {e}")))?;
    parse_jsonl(text, path)
}

pub fn write_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut buf = Vec::new();
    for r in rows {
        serde_json::to_writer(&mut buf, r).map_err(|e| Error::Data(e.to_string()))?;
        buf.push(b'\n');
    }
    fsio::write_atomic(path, &buf)
}

fn check_unique(records: &[CorpusRecord]) -> Result<()> {
    let mut seen = HashSet::new();
    for r in records {
        if r.id.is_empty() {
            return Err(Error::Data("record with empty id".into()));
        }
        if !seen.insert(r.id.as_str()) {
            return Err(Error::Data(format!("duplicate id '{}'", r.id)));
        }
    }
    Ok(())
}

/// Parse a corpus, keeping file order and rejecting duplicate ids.
pub fn parse_corpus(text: &str, path: &Path) -> Result<Vec<CorpusRecord>> {
    let records = parse_jsonl(text, path)?;
    check_unique(&records)?;
    Ok(records)
}

pub fn ingest(path: &Path) -> Result<Vec<CorpusRecord>> {
    let records = read_jsonl(path)?;
    check_unique(&records)?;
    Ok(records)
}

pub fn write_embeddings(path: &Path, rows: &[(String, Embedding)]) -> Result<()> {
    let rows: Vec<EmbeddingRow> = rows
        .iter()
        .map(|(id, e)| EmbeddingRow {
            id: id.clone(),
            dim: e.values.dim(),
            values: e.values.to_vec(),
        })
        .collect();
    write_jsonl(path, &rows)
}

pub fn read_embeddings(path: &Path) -> Result<Vec<(String, Embedding)>> {
    let rows: Vec<EmbeddingRow> = read_jsonl(path)?;
    let mut seen = HashSet::new();
    rows.into_iter()
        .map(|r| {
            if r.values.len() != r.dim {
                return Err(Error::format(
                    path,
                    format!("row '{}' declares dim {} but has {}", r.id, r.dim, r.values.len()),
                ));
            }
            if !seen.insert(r.id.clone()) {
                return Err(Error::Data(format!("duplicate id '{}'", r.id)));
            }
            Ok((
                r.id,
                Embedding {
                    values: Vector::from(r.values),
                    normalized: true,
                },
            ))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn p() -> &'static Path {
        Path::new("corpus.jsonl")
    }

    #[test]
    fn three_lines_three_records() {
        let text = "{\"id\":\"a\",\"text\":\"x\"}\n{\"id\":\"b\",\"text\":\"\",\"domain\":\"d\"}\n\n{\"id\":\"c\",\"text\":\"z\"}\n";
        let r = parse_corpus(text, p()).unwrap();
        assert_eq!(r.len(), 3);
        assert_eq!(r[1].domain.as_deref(), Some("d"));
        assert_eq!(r.iter().map(|x| x.id.as_str()).collect::<Vec<_>>(), ["a", "b", "c"]);
    }

    #[test]
    fn errors_name_line_and_id() {
        let err = parse_corpus("{\"id\":\"a\",\"text\":\"x\"}\n{\"id\":\"b\"\n", p()).unwrap_err();
        assert!(matches!(err, Error::Line { line: 2, .. }), "{err}");
        let err = parse_corpus("{\"id\":\"a\",\"text\":\"x\"}\n{\"id\":\"a\",\"text\":\"y\"}\n", p()).unwrap_err();
        assert!(err.to_string().contains("'a'"));
        assert!(parse_corpus("", p()).unwrap().is_empty());
    }

    #[test]
    fn embeddings_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("e.jsonl");
        let rows = vec![(
            "d1".to_string(),
            Embedding {
                values: Vector::from(vec![0.6, -0.8, 1e-300]),
                normalized: true,
            },
        )];
        write_embeddings(&path, &rows).unwrap();
        assert_eq!(read_embeddings(&path).unwrap(), rows);
    }
}
