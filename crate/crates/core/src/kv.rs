//! Line-oriented `key=value` text used for configs and manifests.
//!
//! Blank lines and lines starting with `#` are ignored. A line whose
//! comma-separated segments are all `key=value` pairs is a *record*
//! (`id=s0001, hq=..., lq=...`); any other line is a single entry whose value
//! runs to the end of the line.

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};

pub type Record = Vec<(String, String)>;

#[derive(Debug, Clone, Default, PartialEq)]
pub struct KvDoc {
    pub entries: Vec<(String, String)>,
    pub records: Vec<Record>,
}

impl KvDoc {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut doc = KvDoc::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let segments: Vec<&str> = line.split(',').map(str::trim).collect();
            if segments.len() > 1 && segments.iter().all(|s| s.contains('=')) {
                doc.records.push(parse_record(line)?);
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key=value", lineno + 1)))?;
            let k = k.trim();
            if k.is_empty() {
                return Err(Error::Config(format!("line {}: empty key", lineno + 1)));
            }
            doc.entries.push((k.to_string(), v.trim().to_string()));
        }
        Ok(doc)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn set(&mut self, key: &str, value: impl ToString) {
        let value = value.to_string();
        match self.entries.iter_mut().find(|(k, _)| k == key) {
            Some(e) => e.1 = value,
            None => self.entries.push((key.to_string(), value)),
        }
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries
            .iter()
            .rev()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
    }

    pub fn require(&self, key: &str) -> Result<&str> {
        self.get(key)
            .ok_or_else(|| Error::Config(format!("missing key `{key}`")))
    }

    /// Parsed value of `key`, `None` when absent.
    pub fn parsed<T: FromStr>(&self, key: &str) -> Result<Option<T>> {
        match self.get(key) {
            None => Ok(None),
            Some(v) => v
                .parse()
                .map(Some)
                .map_err(|_| Error::Config(format!("cannot parse `{key}={v}`"))),
        }
    }

    pub fn parsed_or<T: FromStr>(&self, key: &str, default: T) -> Result<T> {
        Ok(self.parsed(key)?.unwrap_or(default))
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (k, v) in &self.entries {
            let _ = writeln!(out, "{k}={v}");
        }
        for r in &self.records {
            let _ = writeln!(out, "{}", format_record(r));
        }
        out
    }
}

pub fn parse_record(line: &str) -> Result<Record> {
    line.split(',')
        .map(|seg| {
            let (k, v) = seg
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("record segment `{seg}` lacks '='")))?;
            Ok((k.trim().to_string(), v.trim().to_string()))
        })
        .collect()
}

pub fn format_record(record: &[(String, String)]) -> String {
    record
        .iter()
        .map(|(k, v)| format!("{k}={v}"))
        .collect::<Vec<_>>()
        .join(", ")
}

pub fn record_get<'a>(record: &'a [(String, String)], key: &str) -> Option<&'a str> {
    record.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn entries_and_records() {
        let text = "# header\nn=4\nangles=-0.1,0,0.1\n\nid=s0, hq=hq/s0.irsd, lq=lq/s0.irsd, probe=L11-5v, seed=9\n";
        let doc = KvDoc::parse(text).unwrap();
        assert_eq!(doc.get("n"), Some("4"));
        assert_eq!(doc.get("angles"), Some("-0.1,0,0.1"));
        assert_eq!(doc.records.len(), 1);
        assert_eq!(record_get(&doc.records[0], "probe"), Some("L11-5v"));
        assert_eq!(KvDoc::parse(&doc.to_text()).unwrap(), doc);
    }

    #[test]
    fn malformed_lines() {
        assert!(KvDoc::parse("no equals sign").is_err());
        assert!(KvDoc::parse("=3").is_err());
        let doc = KvDoc::parse("x=abc").unwrap();
        assert!(doc.parsed::<f64>("x").is_err());
        assert_eq!(doc.parsed_or("y", 2.5).unwrap(), 2.5);
    }
}
