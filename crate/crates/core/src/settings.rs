//! Flat `key = value` files with `[section]` headers.
//!
//! `#` starts a comment. Keys outside any section belong to the empty
//! section. A repeated key is an error.

use std::fmt::Display;
use std::str::FromStr;

use crate::error::{MoproError, Result};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Entry {
    pub section: String,
    pub key: String,
    pub value: String,
    pub line: usize,
}

impl Entry {
    /// `section.key`, or just `key` at top level.
    pub fn path(&self) -> String {
        if self.section.is_empty() {
            self.key.clone()
        } else {
            format!("{}.{}", self.section, self.key)
        }
    }

    pub fn parse<T: FromStr>(&self) -> Result<T>
    where
        T::Err: Display,
    {
        self.value.parse().map_err(|e: T::Err| MoproError::Syntax {
            line: self.line,
            msg: format!("`{}` = `{}`: {e}", self.path(), self.value),
        })
    }

    /// Comma-separated list.
    pub fn parse_list<T: FromStr>(&self) -> Result<Vec<T>>
    where
        T::Err: Display,
    {
        self.value
            .split(',')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(|s| {
                s.parse().map_err(|e: T::Err| MoproError::Syntax {
                    line: self.line,
                    msg: format!("`{}` item `{s}`: {e}", self.path()),
                })
            })
            .collect()
    }

    pub fn unknown(&self) -> MoproError {
        MoproError::Syntax {
            line: self.line,
            msg: format!("unknown key `{}`", self.path()),
        }
    }

    /// Wrap a validation error with this entry's line number.
    pub fn invalid(&self, msg: impl Display) -> MoproError {
        MoproError::Syntax {
            line: self.line,
            msg: format!("`{}`: {msg}", self.path()),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Settings {
    pub entries: Vec<Entry>,
}

impl Settings {
    pub fn parse(text: &str) -> Result<Self> {
        let mut section = String::new();
        let mut entries: Vec<Entry> = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            if let Some(rest) = content.strip_prefix('[') {
                let name = rest.strip_suffix(']').ok_or_else(|| MoproError::Syntax {
                    line,
                    msg: format!("unterminated section header `{content}`"),
                })?;
                section = name.trim().to_string();
                continue;
            }
            let (key, value) = content.split_once('=').ok_or_else(|| MoproError::Syntax {
                line,
                msg: format!("expected `key = value`, got `{content}`"),
            })?;
            let key = key.trim();
            if key.is_empty() {
                return Err(MoproError::Syntax {
                    line,
                    msg: "empty key".into(),
                });
            }
            if let Some(prev) = entries
                .iter()
                .find(|e| e.section == section && e.key == key)
            {
                return Err(MoproError::Syntax {
                    line,
                    msg: format!("`{}` already set on line {}", prev.path(), prev.line),
                });
            }
            entries.push(Entry {
                section: section.clone(),
                key: key.to_string(),
                value: value.trim().to_string(),
                line,
            });
        }
        Ok(Settings { entries })
    }

    pub fn section<'a>(&'a self, name: &'a str) -> impl Iterator<Item = &'a Entry> + 'a {
        self.entries.iter().filter(move |e| e.section == name)
    }
}

/// Builds `key = value` text with section headers.
#[derive(Debug, Default)]
pub struct SettingsWriter {
    out: String,
}

impl SettingsWriter {
    pub fn section(&mut self, name: &str) -> &mut Self {
        if !self.out.is_empty() {
            self.out.push('\n');
        }
        self.out.push_str(&format!("[{name}]\n"));
        self
    }

    pub fn kv(&mut self, key: &str, value: impl Display) -> &mut Self {
        self.out.push_str(&format!("{key} = {value}\n"));
        self
    }

    pub fn finish(self) -> String {
        self.out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sections_comments_and_lists() {
        let s = Settings::parse("seed = 3\n# note\n[train]\ntau = 0.1 # inline note\nhidden = 8, 16\n").unwrap();
        assert_eq!(s.entries.len(), 3);
        assert_eq!(s.entries[0].path(), "seed");
        let tau = &s.entries[1];
        assert_eq!(tau.path(), "train.tau");
        assert_eq!(tau.parse::<f64>().unwrap(), 0.1);
        assert_eq!(s.entries[2].parse_list::<usize>().unwrap(), vec![8, 16]);
        assert_eq!(s.section("train").count(), 2);
    }

    #[test]
    fn errors_carry_line_numbers() {
        for (text, want) in [
            ("[train\n", 1),
            ("a = 1\nnot a pair\n", 2),
            ("a = 1\n\na = 2\n", 3),
            (" = 4\n", 1),
        ] {
            match Settings::parse(text) {
                Err(MoproError::Syntax { line, .. }) => assert_eq!(line, want, "{text:?}"),
                other => panic!("{text:?}: {other:?}"),
            }
        }
        let s = Settings::parse("\n\nx = abc\n").unwrap();
        match s.entries[0].parse::<f64>() {
            Err(MoproError::Syntax { line: 3, .. }) => {}
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn writer_output_parses_back() {
        let mut w = SettingsWriter::default();
        w.section("a").kv("x", 0.1 + 0.2).kv("y", "z");
        w.section("b").kv("x", 7);
        let s = Settings::parse(&w.finish()).unwrap();
        assert_eq!(s.entries[0].parse::<f64>().unwrap(), 0.1 + 0.2);
        assert_eq!(s.entries[2].path(), "b.x");
    }
}
