//! Human-readable summary of a run report.

use std::path::Path;

use qkdsim_core::{Error, Result};

use crate::report::{Report, Section};

struct Table {
    title: &'static str,
    header: Vec<&'static str>,
    rows: Vec<Vec<String>>,
}

impl Table {
    fn new(title: &'static str, header: &[&'static str]) -> Self {
        Self {
            title,
            header: header.to_vec(),
            rows: Vec::new(),
        }
    }

    fn render(&self, out: &mut String) {
        let mut width: Vec<usize> = self.header.iter().map(|h| h.len()).collect();
        for r in &self.rows {
            for (w, c) in width.iter_mut().zip(r) {
                *w = (*w).max(c.len());
            }
        }
        let line = |cells: Vec<&str>| {
            let padded: Vec<String> = cells.iter().zip(&width).map(|(c, w)| format!("{c:<w$}")).collect();
            padded.join("  ").trim_end().to_string()
        };
        out.push('\n');
        out.push_str(self.title);
        out.push('\n');
        out.push_str(&line(self.header.clone()));
        out.push('\n');
        for r in &self.rows {
            out.push_str(&line(r.iter().map(String::as_str).collect()));
            out.push('\n');
        }
    }
}

fn cells(s: &Section, keys: &[&str]) -> Vec<String> {
    keys.iter()
        .map(|k| match *k {
            "#" => s.name.clone().unwrap_or_default(),
            k => s.get(k).unwrap_or("-").to_string(),
        })
        .collect()
}

/// One run line, then one table per kind of activity present.
pub fn summarize(report: &Report) -> Result<String> {
    let run = report
        .section("run", None)
        .ok_or_else(|| Error::Parse { line: 1, msg: "report has no [run] section".into() })?;
    let mut out = format!(
        "run {} seed={} steps={} failed={} status={}\n",
        run.get("scenario").unwrap_or("-"),
        run.get("seed").unwrap_or("-"),
        run.get("steps").unwrap_or("-"),
        run.get("failed_steps").unwrap_or("-"),
        run.get("status").unwrap_or("-"),
    );
    let specs: [(&str, &'static str, &[&'static str], &[&str]); 4] = [
        (
            "qkd-session",
            "QKD sessions",
            &["id", "link", "mac", "outcome", "sifted", "qber", "leaked", "final", "abort reason"],
            &["#", "link", "mac_source", "outcome", "sifted_bits", "qber", "leaked_bits", "final_bits", "abort_reason"],
        ),
        (
            "relay",
            "Relays",
            &["id", "src", "dst", "kind", "via", "bits", "outcome", "match", "link bits"],
            &["#", "src", "dst", "kind", "intermediates", "bits", "outcome", "key_match", "link_bits_consumed"],
        ),
        (
            "handshake",
            "Handshakes",
            &["name", "suite", "outcome", "records", "bytes", "pad bits", "rekeys", "downgraded"],
            &["#", "suite", "outcome", "records_delivered", "plaintext_bytes", "pad_bits_initiator", "rekeys", "downgraded"],
        ),
        (
            "fault",
            "Injected faults",
            &["id", "fault", "applied", "outcome", "detected"],
            &["#", "spec", "applied", "outcome", "detected"],
        ),
    ];
    for (kind, title, header, keys) in specs {
        let mut t = Table::new(title, header);
        t.rows = report.of_kind(kind).map(|s| cells(s, keys)).collect();
        if !t.rows.is_empty() {
            t.render(&mut out);
        }
    }
    Ok(out)
}

pub fn summarize_file(path: &Path) -> Result<String> {
    let text = std::fs::read_to_string(path)?;
    summarize(&Report::parse(&text)?)
}
