//! JSONL and key=value file helpers.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::Serialize;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum IoError {
    #[error("{path}: {source}")]
    Read { path: PathBuf, source: std::io::Error },
    #[error("line {line}: {source}")]
    Json { line: usize, source: serde_json::Error },
    #[error("{path}: {source}")]
    JsonFile { path: PathBuf, source: serde_json::Error },
    #[error("line {line}: expected key=value, got {text:?}")]
    KeyValue { line: usize, text: String },
    #[error("line {line}: duplicate key {key:?}")]
    DuplicateKey { line: usize, key: String },
}

/// Parses one JSON value per non-blank line. Line numbers in errors are 1-based.
pub fn parse_jsonl<T: DeserializeOwned>(text: &str) -> Result<Vec<T>, IoError> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| serde_json::from_str(l).map_err(|source| IoError::Json { line: i + 1, source }))
        .collect()
}

pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>, IoError> {
    let text = read_to_string(path)?;
    parse_jsonl(&text)
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T, IoError> {
    let text = read_to_string(path)?;
    serde_json::from_str(&text).map_err(|source| IoError::JsonFile {
        path: path.to_path_buf(),
        source,
    })
}

pub fn to_jsonl<T: Serialize>(items: &[T]) -> String {
    let mut out = String::new();
    for item in items {
        out.push_str(&serde_json::to_string(item).expect("serializable"));
        out.push('\n');
    }
    out
}

pub fn read_to_string(path: &Path) -> Result<String, IoError> {
    fs::read_to_string(path).map_err(|source| IoError::Read {
        path: path.to_path_buf(),
        source,
    })
}

/// Parses `key = value` lines. Blank lines and lines starting with `#` are skipped.
pub fn parse_key_values(text: &str) -> Result<BTreeMap<String, String>, IoError> {
    let mut map = BTreeMap::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            return Err(IoError::KeyValue {
                line: i + 1,
                text: raw.to_string(),
            });
        };
        let key = k.trim().to_string();
        if key.is_empty() {
            return Err(IoError::KeyValue {
                line: i + 1,
                text: raw.to_string(),
            });
        }
        if map.insert(key.clone(), v.trim().to_string()).is_some() {
            return Err(IoError::DuplicateKey { line: i + 1, key });
        }
    }
    Ok(map)
}
