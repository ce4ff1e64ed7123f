//! Machine-readable run report: `[kind name]` section headers followed by
//! `key=value` lines, one blank line between sections.

use std::fmt::{self, Display, Write as _};

use qkdsim_core::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Section {
    pub kind: String,
    pub name: Option<String>,
    pub entries: Vec<(String, String)>,
}

impl Section {
    pub fn new(kind: &str, name: Option<String>) -> Self {
        Self {
            kind: kind.to_string(),
            name,
            entries: Vec::new(),
        }
    }

    pub fn set(&mut self, key: &str, value: impl Display) -> &mut Self {
        let value = value.to_string();
        debug_assert!(!value.contains('\n'), "multi-line value for {key}");
        match self.entries.iter_mut().find(|(k, _)| k == key) {
            Some(e) => e.1 = value,
            None => self.entries.push((key.to_string(), value)),
        }
        self
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    pub fn header(&self) -> String {
        match &self.name {
            Some(n) => format!("[{} {n}]", self.kind),
            None => format!("[{}]", self.kind),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Report {
    pub sections: Vec<Section>,
}

impl Report {
    pub fn push(&mut self, section: Section) {
        self.sections.push(section);
    }

    pub fn section(&self, kind: &str, name: Option<&str>) -> Option<&Section> {
        self.sections
            .iter()
            .find(|s| s.kind == kind && s.name.as_deref() == name)
    }

    pub fn of_kind<'a>(&'a self, kind: &'a str) -> impl Iterator<Item = &'a Section> + 'a {
        self.sections.iter().filter(move |s| s.kind == kind)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut report = Report::default();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let l = raw.trim_end();
            if l.is_empty() {
                continue;
            }
            if let Some(h) = l.strip_prefix('[').and_then(|h| h.strip_suffix(']')) {
                let (kind, name) = match h.split_once(' ') {
                    Some((k, n)) => (k, Some(n.to_string())),
                    None => (h, None),
                };
                report.push(Section::new(kind, name));
                continue;
            }
            let Some((k, v)) = l.split_once('=') else {
                return Err(Error::Parse { line, msg: format!("expected key=value, got {l:?}") });
            };
            let Some(sec) = report.sections.last_mut() else {
                return Err(Error::Parse { line, msg: "entry before first section header".into() });
            };
            sec.entries.push((k.to_string(), v.to_string()));
        }
        Ok(report)
    }
}

impl Display for Report {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut out = String::new();
        for (i, s) in self.sections.iter().enumerate() {
            if i > 0 {
                out.push('\n');
            }
            writeln!(out, "{}", s.header())?;
            for (k, v) in &s.entries {
                writeln!(out, "{k}={v}")?;
            }
        }
        f.write_str(&out)
    }
}
