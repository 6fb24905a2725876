//! Line-delimited report records: one record per line, tab-separated
//! `key=value` fields, order-preserving. Every report the CLI writes is
//! parseable by [`read_records`].

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Record {
    fields: Vec<(String, String)>,
}

impl Record {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, key: impl Into<String>, value: impl ToString) -> &mut Self {
        let key = key.into();
        let value = value.to_string();
        debug_assert!(!key.contains(['\t', '\n', '=']), "bad record key {key}");
        debug_assert!(!value.contains(['\t', '\n']), "bad record value {value}");
        self.fields.push((key, value));
        self
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.fields
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
    }

    pub fn get_f64(&self, key: &str) -> Result<f64> {
        let raw = self
            .get(key)
            .ok_or_else(|| Error::Format(format!("record missing field '{key}'")))?;
        raw.parse()
            .map_err(|_| Error::Format(format!("record field '{key}' is not a number: {raw}")))
    }

    pub fn fields(&self) -> &[(String, String)] {
        &self.fields
    }

    pub fn to_line(&self) -> String {
        self.fields
            .iter()
            .map(|(k, v)| format!("{k}={v}"))
            .collect::<Vec<_>>()
            .join("\t")
    }

    pub fn parse_line(line: &str) -> Result<Self> {
        let mut fields = Vec::new();
        for part in line.split('\t') {
            let (k, v) = part
                .split_once('=')
                .ok_or_else(|| Error::Format(format!("record field without '=': '{part}'")))?;
            fields.push((k.to_string(), v.to_string()));
        }
        Ok(Self { fields })
    }
}

pub fn write_records(path: &Path, records: &[Record]) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
    }
    let mut text = String::new();
    for r in records {
        text.push_str(&r.to_line());
        text.push('\n');
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_records(path: &Path) -> Result<Vec<Record>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(Record::parse_line)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    #[test]
    fn roundtrip_preserves_fields_and_order() {
        let mut r = Record::new();
        r.push("epoch", 3).push("lr", 0.002).push("note", "warm up");
        let line = r.to_line();
        assert_eq!(line, "epoch=3\tlr=0.002\tnote=warm up");
        assert_eq!(Record::parse_line(&line).unwrap(), r);
    }

    #[test]
    fn file_roundtrip() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("log.txt");
        let mut a = Record::new();
        a.push("k", "v");
        let mut b = Record::new();
        b.push("x", 1).push("y", 2);
        write_records(&path, &[a.clone(), b.clone()]).unwrap();
        assert_eq!(read_records(&path).unwrap(), vec![a, b]);
    }

    #[test]
    fn malformed_lines_are_format_errors() {
        assert!(Record::parse_line("novaluehere").is_err());
    }
}
