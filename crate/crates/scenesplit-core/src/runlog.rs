//! Line-oriented structured-text reports: a `# kind` header line, then
//! `[section]` headers and `key = value` rows in insertion order. Rows are
//! formatted deterministically, so two reports built from identical values
//! are byte-identical; anything nondeterministic (wall-clock timing) must be
//! added explicitly by the caller and kept out of reports meant for
//! comparison.

use crate::error::{Error, Result};
use std::fmt::Display;
use std::path::Path;

#[derive(Clone, Debug)]
pub struct Report {
    lines: Vec<String>,
}

impl Report {
    pub fn new(kind: &str) -> Report {
        Report {
            lines: vec![format!("# {kind}")],
        }
    }

    pub fn section(&mut self, name: impl Display) {
        self.lines.push(String::new());
        self.lines.push(format!("[{name}]"));
    }

    pub fn kv(&mut self, key: impl Display, value: impl Display) {
        self.lines.push(format!("{key} = {value}"));
    }

    /// Adds a float rounded to six decimals; use for values where the last
    /// bits are meaningless noise (timings, loss curves).
    pub fn kv_rounded(&mut self, key: impl Display, value: f64) {
        self.lines.push(format!("{key} = {value:.6}"));
    }

    pub fn to_text(&self) -> String {
        let mut s = self.lines.join("\n");
        s.push('\n');
        s
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }
}

/// Looks up the value of `key` inside `[section]` in report text; used by
/// consumers that read reports back (tests, resume checks).
pub fn lookup<'a>(text: &'a str, section: &str, key: &str) -> Option<&'a str> {
    let header = format!("[{section}]");
    let mut inside = false;
    for line in text.lines() {
        let line = line.trim();
        if line.starts_with('[') {
            inside = line == header;
        } else if inside {
            if let Some((k, v)) = line.split_once(" = ") {
                if k == key {
                    return Some(v);
                }
            }
        }
    }
    None
}
