//! Line-oriented `key = value` configuration text with `[section]` headers.
//! `#` starts a comment.

use crate::error::{Error, Result};

/// One `key = value` line.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Entry {
    pub section: String,
    pub key: String,
    pub value: String,
    pub line: usize,
}

pub fn parse(text: &str) -> Result<Vec<Entry>> {
    let mut section = String::new();
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let content = raw.split('#').next().unwrap_or("").trim();
        if content.is_empty() {
            continue;
        }
        if let Some(rest) = content.strip_prefix('[') {
            let Some(name) = rest.strip_suffix(']') else {
                return Err(Error::Config {
                    line,
                    msg: format!("unterminated section header '{content}'"),
                });
            };
            let name = name.trim();
            if name.is_empty() || !name.chars().all(|c| c.is_ascii_alphanumeric() || c == '_') {
                return Err(Error::Config {
                    line,
                    msg: format!("bad section name '{name}'"),
                });
            }
            section = name.to_string();
            continue;
        }
        let Some((key, value)) = content.split_once('=') else {
            return Err(Error::Config {
                line,
                msg: format!("expected 'key = value', got '{content}'"),
            });
        };
        let key = key.trim();
        if key.is_empty() {
            return Err(Error::Config {
                line,
                msg: "empty key".into(),
            });
        }
        out.push(Entry {
            section: section.clone(),
            key: key.to_string(),
            value: value.trim().to_string(),
            line,
        });
    }
    Ok(out)
}

/// A group of settings addressable by key.
pub trait Section {
    /// Applies one value; the error message is reported with the line number.
    fn set(&mut self, key: &str, value: &str) -> std::result::Result<(), String>;
    /// Every key with its current value, in documentation order.
    fn entries(&self) -> Vec<(&'static str, String)>;
}

/// Renders a section as config text.
pub fn render(name: &str, section: &dyn Section) -> String {
    let mut s = format!("[{name}]\n");
    for (k, v) in section.entries() {
        s.push_str(&format!("{k} = {v}\n"));
    }
    s
}

pub fn parse_usize(v: &str) -> std::result::Result<usize, String> {
    v.parse().map_err(|_| format!("expected a non-negative integer, got '{v}'"))
}

pub fn parse_u64(v: &str) -> std::result::Result<u64, String> {
    v.parse().map_err(|_| format!("expected a non-negative integer, got '{v}'"))
}

pub fn parse_f64(v: &str) -> std::result::Result<f64, String> {
    match v.parse::<f64>() {
        Ok(x) if x.is_finite() => Ok(x),
        _ => Err(format!("expected a finite number, got '{v}'")),
    }
}

pub fn parse_bool(v: &str) -> std::result::Result<bool, String> {
    match v {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(format!("expected true or false, got '{v}'")),
    }
}

/// Comma-separated numbers.
pub fn parse_list(v: &str) -> std::result::Result<Vec<f64>, String> {
    v.split(',').map(|x| parse_f64(x.trim())).collect()
}

/// Rows separated by `;`, entries by `,`.
pub fn parse_matrix(v: &str) -> std::result::Result<Vec<Vec<f64>>, String> {
    v.split(';').map(|row| parse_list(row.trim())).collect()
}

pub fn format_list(v: &[f64]) -> String {
    v.iter().map(f64::to_string).collect::<Vec<_>>().join(", ")
}

pub fn format_matrix(m: &[Vec<f64>]) -> String {
    m.iter().map(|r| format_list(r)).collect::<Vec<_>>().join("; ")
}

/// Applies every entry of `section_name` to `target`; entries from other
/// sections are ignored.
pub fn apply(entries: &[Entry], section_name: &str, target: &mut dyn Section) -> Result<()> {
    for e in entries.iter().filter(|e| e.section == section_name) {
        target
            .set(&e.key, &e.value)
            .map_err(|msg| Error::Config { line: e.line, msg })?;
    }
    Ok(())
}
