//! Line-oriented `[section]` / `key = value` files.
//!
//! Shared by mission plans and the stack configuration. Lines starting with
//! `#` (after optional whitespace) are comments. Values run to the end of the
//! line and are trimmed; an empty value is legal.

use std::fmt::Write as _;
use std::str::FromStr;

use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum KeyFileError {
    #[error("line {line}: {message}")]
    Syntax { line: usize, message: String },
    #[error("line {line}: duplicate section [{section}]")]
    DuplicateSection { line: usize, section: String },
    #[error("line {line}: duplicate key `{key}` in [{section}]")]
    DuplicateKey {
        line: usize,
        section: String,
        key: String,
    },
    #[error("[{section}]: missing key `{key}`")]
    MissingKey { section: String, key: String },
    #[error("line {line}: invalid value `{value}` for `{key}`: {reason}")]
    InvalidValue {
        line: usize,
        key: String,
        value: String,
        reason: String,
    },
    #[error("[{section}]: unknown key `{key}` (line {line})")]
    UnknownKey {
        line: usize,
        section: String,
        key: String,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Entry {
    pub key: String,
    pub value: String,
    pub line: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Section {
    pub name: String,
    pub line: usize,
    pub entries: Vec<Entry>,
}

impl Section {
    pub fn get(&self, key: &str) -> Option<&Entry> {
        self.entries.iter().find(|e| e.key == key)
    }

    pub fn require(&self, key: &str) -> Result<&Entry, KeyFileError> {
        self.get(key).ok_or_else(|| KeyFileError::MissingKey {
            section: self.name.clone(),
            key: key.to_string(),
        })
    }

    pub fn parse<T>(&self, key: &str) -> Result<T, KeyFileError>
    where
        T: FromStr,
        T::Err: std::fmt::Display,
    {
        parse_entry(self.require(key)?)
    }

    pub fn parse_or<T>(&self, key: &str, default: T) -> Result<T, KeyFileError>
    where
        T: FromStr,
        T::Err: std::fmt::Display,
    {
        match self.get(key) {
            Some(e) => parse_entry(e),
            None => Ok(default),
        }
    }

    /// Like [`Section::parse`] for floats, rejecting NaN and infinities.
    pub fn finite(&self, key: &str) -> Result<f64, KeyFileError> {
        finite_entry(self.require(key)?)
    }

    pub fn finite_or(&self, key: &str, default: f64) -> Result<f64, KeyFileError> {
        match self.get(key) {
            Some(e) => finite_entry(e),
            None => Ok(default),
        }
    }

    /// Fails on the first key not in `allowed`.
    pub fn deny_unknown(&self, allowed: &[&str]) -> Result<(), KeyFileError> {
        match self
            .entries
            .iter()
            .find(|e| !allowed.contains(&e.key.as_str()))
        {
            Some(e) => Err(KeyFileError::UnknownKey {
                line: e.line,
                section: self.name.clone(),
                key: e.key.clone(),
            }),
            None => Ok(()),
        }
    }
}

fn parse_entry<T>(e: &Entry) -> Result<T, KeyFileError>
where
    T: FromStr,
    T::Err: std::fmt::Display,
{
    e.value
        .parse()
        .map_err(|err: T::Err| KeyFileError::InvalidValue {
            line: e.line,
            key: e.key.clone(),
            value: e.value.clone(),
            reason: err.to_string(),
        })
}

fn finite_entry(e: &Entry) -> Result<f64, KeyFileError> {
    let v: f64 = parse_entry(e)?;
    if v.is_finite() {
        Ok(v)
    } else {
        Err(KeyFileError::InvalidValue {
            line: e.line,
            key: e.key.clone(),
            value: e.value.clone(),
            reason: "not a finite number".into(),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct KeyFile {
    pub sections: Vec<Section>,
}

impl KeyFile {
    pub fn parse(text: &str) -> Result<Self, KeyFileError> {
        let mut sections: Vec<Section> = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let trimmed = raw.trim();
            if trimmed.is_empty() || trimmed.starts_with('#') {
                continue;
            }
            if let Some(rest) = trimmed.strip_prefix('[') {
                let name = rest.strip_suffix(']').ok_or_else(|| KeyFileError::Syntax {
                    line,
                    message: "unterminated section header".into(),
                })?;
                let name = name.trim();
                if name.is_empty()
                    || !name
                        .chars()
                        .all(|c| c.is_ascii_alphanumeric() || c == '.' || c == '_')
                {
                    return Err(KeyFileError::Syntax {
                        line,
                        message: format!("invalid section name `{name}`"),
                    });
                }
                if sections.iter().any(|s| s.name == name) {
                    return Err(KeyFileError::DuplicateSection {
                        line,
                        section: name.to_string(),
                    });
                }
                sections.push(Section {
                    name: name.to_string(),
                    line,
                    entries: Vec::new(),
                });
                continue;
            }
            let (key, value) = trimmed
                .split_once('=')
                .ok_or_else(|| KeyFileError::Syntax {
                    line,
                    message: "expected `key = value`".into(),
                })?;
            let key = key.trim();
            if key.is_empty() || !key.chars().all(|c| c.is_ascii_alphanumeric() || c == '_') {
                return Err(KeyFileError::Syntax {
                    line,
                    message: format!("invalid key `{key}`"),
                });
            }
            let section = sections.last_mut().ok_or_else(|| KeyFileError::Syntax {
                line,
                message: "key outside of any section".into(),
            })?;
            if section.get(key).is_some() {
                return Err(KeyFileError::DuplicateKey {
                    line,
                    section: section.name.clone(),
                    key: key.to_string(),
                });
            }
            section.entries.push(Entry {
                key: key.to_string(),
                value: value.trim().to_string(),
                line,
            });
        }
        Ok(Self { sections })
    }

    pub fn section(&self, name: &str) -> Option<&Section> {
        self.sections.iter().find(|s| s.name == name)
    }
}

/// Incremental writer producing text that [`KeyFile::parse`] reads back.
#[derive(Debug, Default)]
pub struct KeyFileWriter {
    out: String,
}

impl KeyFileWriter {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn comment(&mut self, text: &str) -> &mut Self {
        let _ = writeln!(self.out, "# {text}");
        self
    }

    pub fn section(&mut self, name: &str) -> &mut Self {
        if !self.out.is_empty() {
            self.out.push('\n');
        }
        let _ = writeln!(self.out, "[{name}]");
        self
    }

    pub fn kv(&mut self, key: &str, value: impl std::fmt::Display) -> &mut Self {
        let value = value.to_string();
        if value.is_empty() {
            let _ = writeln!(self.out, "{key} =");
        } else {
            let _ = writeln!(self.out, "{key} = {value}");
        }
        self
    }

    pub fn finish(&mut self) -> String {
        std::mem::take(&mut self.out)
    }
}
