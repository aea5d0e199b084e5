//! Experiment runners and their tabular output.

mod experiments;

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde_json::{json, Map, Value};
use thiserror::Error;

pub use experiments::*;

use crate::adversary::AdversaryError;
use crate::modulation::ModulationError;
use crate::protocol::ProtocolError;
use crate::quantum::QuantumError;

pub const TOOL_VERSION: &str = concat!("ces ", env!("CARGO_PKG_VERSION"));

#[derive(Debug, Error)]
pub enum AnalysisError {
    #[error("domain error: {0}")]
    Domain(String),
    #[error(transparent)]
    Protocol(#[from] ProtocolError),
    #[error(transparent)]
    Adversary(#[from] AdversaryError),
    #[error(transparent)]
    Modulation(#[from] ModulationError),
    #[error(transparent)]
    Quantum(#[from] QuantumError),
}

pub type Result<T> = std::result::Result<T, AnalysisError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Experiment {
    SmodSurface,
    BiasedModulation,
    BlindBound,
    Fringes,
    FullSession,
    Attack,
    Ternary,
}

impl Experiment {
    pub fn id(self) -> &'static str {
        match self {
            Experiment::SmodSurface => "surface",
            Experiment::BiasedModulation => "bias",
            Experiment::BlindBound => "bound",
            Experiment::Fringes => "fringe",
            Experiment::FullSession => "session",
            Experiment::Attack => "attack",
            Experiment::Ternary => "ternary",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OutputFormat {
    Csv,
    Json,
}

/// Rows of one experiment plus the header needed to reproduce them.
#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    pub experiment: Experiment,
    pub master_seed: u64,
    pub params: BTreeMap<String, Value>,
    pub columns: Vec<&'static str>,
    pub rows: Vec<Vec<Value>>,
}

fn csv_cell(v: &Value) -> String {
    match v {
        Value::Null => String::new(),
        Value::String(s) => s.clone(),
        other => other.to_string(),
    }
}

impl Table {
    pub fn new(experiment: Experiment, master_seed: u64, columns: Vec<&'static str>) -> Self {
        Table {
            experiment,
            master_seed,
            params: BTreeMap::new(),
            columns,
            rows: Vec::new(),
        }
    }

    pub fn param(&mut self, name: &str, value: impl serde::Serialize) -> &mut Self {
        let v = serde_json::to_value(value).expect("parameters serialize");
        self.params.insert(name.to_string(), v);
        self
    }

    pub fn push(&mut self, row: Vec<Value>) {
        assert_eq!(row.len(), self.columns.len(), "row width");
        self.rows.push(row);
    }

    /// Value of `column` in row `row`.
    pub fn get(&self, row: usize, column: &str) -> Option<&Value> {
        let c = self.columns.iter().position(|&c| c == column)?;
        self.rows.get(row)?.get(c)
    }

    pub fn column_f64(&self, column: &str) -> Vec<Option<f64>> {
        (0..self.rows.len())
            .map(|r| self.get(r, column).and_then(Value::as_f64))
            .collect()
    }

    /// `#`-prefixed header lines, then a column line and one line per row.
    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        writeln!(out, "# tool: {TOOL_VERSION}").unwrap();
        writeln!(out, "# experiment: {}", self.experiment.id()).unwrap();
        writeln!(out, "# master_seed: {}", self.master_seed).unwrap();
        for (k, v) in &self.params {
            writeln!(out, "# {k}: {v}").unwrap();
        }
        writeln!(out, "{}", self.columns.join(",")).unwrap();
        for row in &self.rows {
            let cells: Vec<String> = row.iter().map(csv_cell).collect();
            writeln!(out, "{}", cells.join(",")).unwrap();
        }
        out
    }

    pub fn to_json(&self) -> String {
        let rows: Vec<Value> = self
            .rows
            .iter()
            .map(|row| {
                let record: Map<String, Value> = self
                    .columns
                    .iter()
                    .zip(row)
                    .map(|(c, v)| (c.to_string(), v.clone()))
                    .collect();
                Value::Object(record)
            })
            .collect();
        let doc = json!({
            "meta": {
                "tool": TOOL_VERSION,
                "experiment": self.experiment.id(),
                "master_seed": self.master_seed,
                "params": self.params,
                "columns": self.columns,
            },
            "rows": rows,
        });
        let mut s = serde_json::to_string_pretty(&doc).expect("table serializes");
        s.push('\n');
        s
    }

    pub fn render(&self, format: OutputFormat) -> String {
        match format {
            OutputFormat::Csv => self.to_csv(),
            OutputFormat::Json => self.to_json(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Table {
        let mut t = Table::new(Experiment::Fringes, 9, vec!["phase", "label", "missing"]);
        t.param("points", 8).param("visibility", 0.961);
        t.push(vec![json!(0.5), json!("X+Y"), Value::Null]);
        t.push(vec![json!(1.0), json!("X"), json!(true)]);
        t
    }

    #[test]
    fn csv_layout() {
        let csv = sample().to_csv();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], format!("# tool: {TOOL_VERSION}"));
        assert_eq!(lines[1], "# experiment: fringe");
        assert_eq!(lines[2], "# master_seed: 9");
        assert_eq!(lines[3], "# points: 8");
        assert_eq!(lines[4], "# visibility: 0.961");
        assert_eq!(lines[5], "phase,label,missing");
        assert_eq!(lines[6], "0.5,X+Y,");
        assert_eq!(lines[7], "1.0,X,true");
    }

    #[test]
    fn json_rows_mirror_csv() {
        let t = sample();
        let v: Value = serde_json::from_str(&t.to_json()).unwrap();
        assert_eq!(v["meta"]["master_seed"], 9);
        assert_eq!(v["meta"]["params"]["points"], 8);
        assert_eq!(v["rows"].as_array().unwrap().len(), 2);
        assert_eq!(v["rows"][0]["label"], "X+Y");
        assert_eq!(v["rows"][1]["missing"], true);
        assert_eq!(t.column_f64("phase"), vec![Some(0.5), Some(1.0)]);
    }

    #[test]
    #[should_panic(expected = "row width")]
    fn row_width_is_checked() {
        let mut t = sample();
        t.push(vec![json!(1)]);
    }
}
