//! Line-delimited JSON files.
//!
//! Writers may emit a leading `{"meta": {...}}` line carrying provenance
//! (seed, config hash). Readers skip such lines.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::Value;

use crate::error::{Error, Result};

fn is_meta(v: &Value) -> bool {
    v.as_object().is_some_and(|o| o.len() == 1 && o.contains_key("meta"))
}

pub fn parse_lines<T: DeserializeOwned>(text: &str, source: &str) -> Result<Vec<T>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let value: Value = serde_json::from_str(line).map_err(|e| Error::Parse(format!("{source}:{}: {e}", i + 1)))?;
        if is_meta(&value) {
            continue;
        }
        let record = serde_json::from_value(value).map_err(|e| Error::Parse(format!("{source}:{}: {e}", i + 1)))?;
        out.push(record);
    }
    Ok(out)
}

pub fn read<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut text = String::new();
    for line in BufReader::new(file).lines() {
        text.push_str(&line.map_err(|e| Error::io(path, e))?);
        text.push('\n');
    }
    parse_lines(&text, &path.display().to_string())
}

/// The `meta` object of the first line, if present.
pub fn read_meta(path: &Path) -> Result<Option<Value>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let first = BufReader::new(file).lines().next();
    match first {
        Some(line) => {
            let line = line.map_err(|e| Error::io(path, e))?;
            let v: Value = match serde_json::from_str(&line) {
                Ok(v) => v,
                Err(_) => return Ok(None),
            };
            Ok(if is_meta(&v) { v.get("meta").cloned() } else { None })
        }
        None => Ok(None),
    }
}

pub fn write<T: Serialize>(path: &Path, meta: Option<&Value>, records: &[T]) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io = |e| Error::io(path, e);
    if let Some(meta) = meta {
        writeln!(w, "{}", serde_json::json!({ "meta": meta })).map_err(io)?;
    }
    for r in records {
        writeln!(w, "{}", serde_json::to_string(r)?).map_err(io)?;
    }
    w.flush().map_err(io)
}

#[cfg(test)]
mod tests {
    use serde::Deserialize;

    use super::*;

    #[derive(Debug, PartialEq, Serialize, Deserialize)]
    struct Row {
        id: u32,
    }

    #[test]
    fn meta_lines_are_skipped() {
        let rows: Vec<Row> = parse_lines("{\"meta\": {\"seed\": 1}}\n{\"id\": 3}\n\n{\"id\": 4}\n", "t").unwrap();
        assert_eq!(rows, vec![Row { id: 3 }, Row { id: 4 }]);
    }

    #[test]
    fn parse_error_names_line() {
        let err = parse_lines::<Row>("{\"id\": 1}\n{\"id\": \"x\"}\n", "f.jsonl").unwrap_err();
        assert!(err.to_string().contains("f.jsonl:2"), "{err}");
    }
}
