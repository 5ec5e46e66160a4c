use std::fmt::Write as _;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};

const HEADER: &str = "label,dev_wer,test_wer";

#[derive(Debug, Clone, PartialEq)]
pub struct ResultRow {
    pub label: String,
    pub dev_wer: f64,
    pub test_wer: f64,
}

/// WER rows in insertion order, with reductions relative to a named row.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ResultsTable {
    pub rows: Vec<ResultRow>,
}

/// `(base − new) / base`.
pub fn werr(base: f64, new: f64) -> f64 {
    if base == 0.0 {
        if new == 0.0 {
            0.0
        } else {
            f64::NEG_INFINITY
        }
    } else {
        (base - new) / base
    }
}

impl ResultsTable {
    pub fn push(&mut self, label: impl Into<String>, dev_wer: f64, test_wer: f64) {
        self.rows.push(ResultRow {
            label: label.into(),
            dev_wer,
            test_wer,
        });
    }

    pub fn get(&self, label: &str) -> Option<&ResultRow> {
        self.rows.iter().find(|r| r.label == label)
    }

    /// Relative (dev, test) WER reduction of `label` against `baseline`.
    pub fn werr(&self, label: &str, baseline: &str) -> Result<(f64, f64)> {
        let base = self
            .get(baseline)
            .ok_or_else(|| Error::invalid(format!("no row named {baseline:?}")))?;
        let row = self
            .get(label)
            .ok_or_else(|| Error::invalid(format!("no row named {label:?}")))?;
        Ok((werr(base.dev_wer, row.dev_wer), werr(base.test_wer, row.test_wer)))
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from(HEADER);
        s.push('\n');
        for r in &self.rows {
            writeln!(s, "{},{},{}", csv_field(&r.label), r.dev_wer, r.test_wer).unwrap();
        }
        s
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        match lines.next() {
            Some(h) if h == HEADER => {}
            _ => return Err(Error::format("results table", "missing header")),
        }
        let mut table = ResultsTable::default();
        for (i, line) in lines.enumerate().filter(|(_, l)| !l.is_empty()) {
            let bad = || Error::format("results table", format!("line {}: {line:?}", i + 2));
            let (label, rest) = split_label(line).ok_or_else(bad)?;
            let (dev, test) = rest.split_once(',').ok_or_else(bad)?;
            table.push(label, dev.parse().map_err(|_| bad())?, test.parse().map_err(|_| bad())?);
        }
        Ok(table)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_csv(&std::fs::read_to_string(path)?)
    }

    /// Appends one row to a CSV file, writing the header if the file is new.
    pub fn append_row(path: &Path, row: &ResultRow) -> Result<()> {
        let fresh = !path.exists() || std::fs::metadata(path)?.len() == 0;
        let mut f = std::fs::OpenOptions::new().create(true).append(true).open(path)?;
        if fresh {
            writeln!(f, "{HEADER}")?;
        }
        writeln!(f, "{},{},{}", csv_field(&row.label), row.dev_wer, row.test_wer)?;
        Ok(())
    }

    /// Fixed-width text rendering; WERR columns appear when `baseline` names a row.
    pub fn render(&self, baseline: Option<&str>) -> String {
        let width = self.rows.iter().map(|r| r.label.len()).max().unwrap_or(5).max(5);
        let base = baseline.and_then(|b| self.get(b));
        let mut s = String::new();
        write!(s, "{:<width$}  {:>7}  {:>7}", "model", "dev", "test").unwrap();
        if let Some(b) = base {
            write!(s, "  {:>8}  {:>8}   (vs {})", "WERR dev", "WERR tst", b.label).unwrap();
        }
        s.push('\n');
        for r in &self.rows {
            write!(s, "{:<width$}  {:>7.2}  {:>7.2}", r.label, 100.0 * r.dev_wer, 100.0 * r.test_wer).unwrap();
            if let Some(b) = base {
                write!(
                    s,
                    "  {:>7.1}%  {:>7.1}%",
                    100.0 * werr(b.dev_wer, r.dev_wer),
                    100.0 * werr(b.test_wer, r.test_wer)
                )
                .unwrap();
            }
            s.push('\n');
        }
        s
    }
}

fn csv_field(label: &str) -> String {
    if label.contains([',', '"']) {
        format!("\"{}\"", label.replace('"', "\"\""))
    } else {
        label.to_string()
    }
}

fn split_label(line: &str) -> Option<(String, &str)> {
    if let Some(rest) = line.strip_prefix('"') {
        let mut label = String::new();
        let mut chars = rest.char_indices().peekable();
        while let Some((i, c)) = chars.next() {
            if c == '"' {
                if let Some(&(_, '"')) = chars.peek() {
                    label.push('"');
                    chars.next();
                } else {
                    return rest[i + 1..].strip_prefix(',').map(|r| (label, r));
                }
            } else {
                label.push(c);
            }
        }
        None
    } else {
        line.split_once(',').map(|(l, r)| (l.to_string(), r))
    }
}
