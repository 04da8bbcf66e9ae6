//! `pals-report v1`: flat `key = value` text with `#` comments.
//!
//! Tables are flattened to `table.<name>.columns = a,b,c` followed by
//! `table.<name>.row.<i> = v0,v1,v2`.

use std::fmt::Display;
use std::path::Path;

use crate::error::{Error, Result};

pub const REPORT_MAGIC: &str = "pals-report v1";

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Report {
    pub comments: Vec<String>,
    pub entries: Vec<(String, String)>,
}

fn check_key(key: &str) -> Result<()> {
    if key.is_empty() || key.contains('=') || key.contains('\n') || key.starts_with('#') || key.trim() != key {
        return Err(Error::Format(format!("invalid report key {key:?}")));
    }
    Ok(())
}

impl Report {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn comment(&mut self, text: impl Into<String>) -> &mut Self {
        for line in text.into().lines() {
            self.comments.push(line.to_string());
        }
        self
    }

    /// Appends an entry; later entries with the same key replace nothing, so keys should be unique.
    pub fn push(&mut self, key: impl Into<String>, value: impl Display) -> &mut Self {
        let value = value.to_string().replace('\n', " ");
        self.entries.push((key.into(), value));
        self
    }

    pub fn table<R, V>(&mut self, name: &str, columns: &[&str], rows: R) -> &mut Self
    where
        R: IntoIterator<Item = Vec<V>>,
        V: Display,
    {
        self.push(format!("table.{name}.columns"), columns.join(","));
        for (i, row) in rows.into_iter().enumerate() {
            let cells: Vec<String> = row.iter().map(|v| v.to_string()).collect();
            self.push(format!("table.{name}.row.{i}"), cells.join(","));
        }
        self
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    pub fn get_f64(&self, key: &str) -> Option<f64> {
        self.get(key)?.parse().ok()
    }

    /// Rows of a table as strings, with its column names.
    pub fn get_table(&self, name: &str) -> Option<(Vec<String>, Vec<Vec<String>>)> {
        let columns = self.get(&format!("table.{name}.columns"))?;
        let columns = columns.split(',').map(str::to_string).collect();
        let mut rows = Vec::new();
        while let Some(r) = self.get(&format!("table.{name}.row.{}", rows.len())) {
            rows.push(r.split(',').map(str::to_string).collect());
        }
        Some((columns, rows))
    }

    pub fn to_text(&self) -> Result<String> {
        let mut s = String::new();
        s.push_str(REPORT_MAGIC);
        s.push('\n');
        for c in &self.comments {
            s.push_str("# ");
            s.push_str(c);
            s.push('\n');
        }
        for (k, v) in &self.entries {
            check_key(k)?;
            s.push_str(k);
            s.push_str(" = ");
            s.push_str(v);
            s.push('\n');
        }
        Ok(s)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        if lines.next().map(str::trim) != Some(REPORT_MAGIC) {
            return Err(Error::Format(format!("missing '{REPORT_MAGIC}' header")));
        }
        let mut r = Report::new();
        for (i, line) in lines.enumerate() {
            if let Some(c) = line.strip_prefix('#') {
                r.comments.push(c.strip_prefix(' ').unwrap_or(c).to_string());
                continue;
            }
            if line.trim().is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once(" = ")
                .ok_or_else(|| Error::Format(format!("report line {}: expected 'key = value'", i + 2)))?;
            r.entries.push((k.to_string(), v.to_string()));
        }
        Ok(r)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_text()?)?;
        Ok(())
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip() {
        let mut r = Report::new();
        r.comment("command = fit").push("deviance", 12.5).push("converged", true);
        r.table("power", &["n", "power"], vec![vec![1.0, 0.5], vec![2.0, 0.75]]);
        let text = r.to_text().unwrap();
        assert!(text.starts_with("pals-report v1\n# command = fit\n"));
        let back = Report::parse(&text).unwrap();
        assert_eq!(back, r);
        assert_eq!(back.get_f64("deviance"), Some(12.5));
        let (cols, rows) = back.get_table("power").unwrap();
        assert_eq!(cols, ["n", "power"]);
        assert_eq!(rows[1], ["2", "0.75"]);
    }

    #[test]
    fn rejects_bad_input() {
        assert!(Report::parse("nope\n").is_err());
        assert!(Report::parse("pals-report v1\nkey value\n").is_err());
        let mut r = Report::new();
        r.push("a = b", 1);
        assert!(r.to_text().is_err());
    }
}
