//! Command reports, rendered as aligned text tables or JSON.

use std::fmt::Write as _;

use serde_json::{json, Map, Value};

#[derive(Debug, Clone, PartialEq)]
pub enum Cell {
    Text(String),
    Int(i64),
    Float(f64),
}

impl Cell {
    fn to_json(&self) -> Value {
        match self {
            Cell::Text(s) => Value::String(s.clone()),
            Cell::Int(i) => json!(i),
            Cell::Float(f) => json!(f),
        }
    }

    fn to_text(&self) -> String {
        match self {
            Cell::Text(s) => s.clone(),
            Cell::Int(i) => i.to_string(),
            Cell::Float(f) if *f == 0.0 => "0".into(),
            Cell::Float(f) if (1e-3..1e4).contains(&f.abs()) => format!("{f:.6}"),
            Cell::Float(f) => format!("{f:.4e}"),
        }
    }
}

impl From<&str> for Cell {
    fn from(s: &str) -> Self {
        Cell::Text(s.into())
    }
}

impl From<String> for Cell {
    fn from(s: String) -> Self {
        Cell::Text(s)
    }
}

impl From<usize> for Cell {
    fn from(v: usize) -> Self {
        Cell::Int(v as i64)
    }
}

impl From<f64> for Cell {
    fn from(v: f64) -> Self {
        Cell::Float(v)
    }
}

impl From<f32> for Cell {
    fn from(v: f32) -> Self {
        Cell::Float(v as f64)
    }
}

#[derive(Debug, Clone)]
pub struct Table {
    pub name: String,
    pub columns: Vec<&'static str>,
    pub rows: Vec<Vec<Cell>>,
}

impl Table {
    pub fn new(name: impl Into<String>, columns: Vec<&'static str>) -> Self {
        Self { name: name.into(), columns, rows: Vec::new() }
    }

    pub fn push(&mut self, row: Vec<Cell>) {
        debug_assert_eq!(row.len(), self.columns.len());
        self.rows.push(row);
    }
}

#[derive(Debug, Clone)]
pub struct Report {
    pub command: &'static str,
    pub summary: Vec<(&'static str, Cell)>,
    pub tables: Vec<Table>,
}

impl Report {
    pub fn new(command: &'static str) -> Self {
        Self { command, summary: Vec::new(), tables: Vec::new() }
    }

    pub fn with(mut self, key: &'static str, value: impl Into<Cell>) -> Self {
        self.summary.push((key, value.into()));
        self
    }

    pub fn to_json(&self) -> String {
        let summary: Map<String, Value> = self.summary.iter().map(|(k, v)| (k.to_string(), v.to_json())).collect();
        let tables: Map<String, Value> = self
            .tables
            .iter()
            .map(|t| {
                let rows = t
                    .rows
                    .iter()
                    .map(|r| Value::Object(t.columns.iter().zip(r).map(|(c, v)| (c.to_string(), v.to_json())).collect()))
                    .collect();
                (t.name.clone(), Value::Array(rows))
            })
            .collect();
        let doc = json!({ "command": self.command, "summary": summary, "tables": tables });
        let mut s = serde_json::to_string_pretty(&doc).expect("report values serialize");
        s.push('\n');
        s
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "{}", self.command);
        let key_width = self.summary.iter().map(|(k, _)| k.len()).max().unwrap_or(0);
        for (k, v) in &self.summary {
            let _ = writeln!(out, "  {k:<key_width$}  {}", v.to_text());
        }
        for t in &self.tables {
            let cells: Vec<Vec<String>> = t.rows.iter().map(|r| r.iter().map(Cell::to_text).collect()).collect();
            let widths: Vec<usize> = (0..t.columns.len())
                .map(|i| cells.iter().map(|r| r[i].len()).chain([t.columns[i].len()]).max().unwrap_or(0))
                .collect();
            let _ = writeln!(out, "\n{}", t.name);
            let line = |row: &[String]| {
                let mut s = String::new();
                for (i, (v, w)) in row.iter().zip(&widths).enumerate() {
                    // First column left-aligned, the rest right-aligned.
                    if i == 0 {
                        let _ = write!(s, "  {v:<w$}");
                    } else {
                        let _ = write!(s, "  {v:>w$}");
                    }
                }
                s.trim_end().to_string()
            };
            let header: Vec<String> = t.columns.iter().map(|c| c.to_string()).collect();
            let rule: Vec<String> = widths.iter().map(|w| "-".repeat(*w)).collect();
            for row in [header, rule].iter().chain(&cells) {
                let _ = writeln!(out, "{}", line(row));
            }
        }
        out
    }
}
