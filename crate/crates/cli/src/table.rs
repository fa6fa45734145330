use std::io::Write;

use serde_json::{json, Map, Value};

use crate::config::{OutputFormat, RunConfig};
use crate::error::CliResult;

#[derive(Debug, Clone, PartialEq)]
pub enum Cell {
    Int(i64),
    Float(f64),
    Text(String),
    Empty,
}

impl From<usize> for Cell {
    fn from(v: usize) -> Self {
        Cell::Int(v as i64)
    }
}

impl From<u64> for Cell {
    fn from(v: u64) -> Self {
        Cell::Int(v as i64)
    }
}

impl From<f64> for Cell {
    fn from(v: f64) -> Self {
        Cell::Float(v)
    }
}

impl From<&str> for Cell {
    fn from(v: &str) -> Self {
        Cell::Text(v.to_string())
    }
}

impl From<String> for Cell {
    fn from(v: String) -> Self {
        Cell::Text(v)
    }
}

impl<T: Into<Cell>> From<Option<T>> for Cell {
    fn from(v: Option<T>) -> Self {
        v.map_or(Cell::Empty, Into::into)
    }
}

impl Cell {
    fn csv(&self) -> String {
        match self {
            Cell::Int(i) => i.to_string(),
            // shortest representation that round-trips
            Cell::Float(f) => format!("{f:?}"),
            Cell::Text(s) => s.clone(),
            Cell::Empty => String::new(),
        }
    }

    fn json(&self) -> Value {
        match self {
            Cell::Int(i) => json!(i),
            Cell::Float(f) if f.is_finite() => json!(f),
            Cell::Float(_) | Cell::Empty => Value::Null,
            Cell::Text(s) => json!(s),
        }
    }

    pub fn as_f64(&self) -> Option<f64> {
        match self {
            Cell::Int(i) => Some(*i as f64),
            Cell::Float(f) => Some(*f),
            _ => None,
        }
    }

    pub fn as_str(&self) -> Option<&str> {
        match self {
            Cell::Text(s) => Some(s),
            _ => None,
        }
    }
}

/// Rows with a fixed column order.
#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    pub columns: Vec<&'static str>,
    pub rows: Vec<Vec<Cell>>,
}

impl Table {
    pub fn new(columns: &[&'static str]) -> Self {
        Self {
            columns: columns.to_vec(),
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, row: Vec<Cell>) {
        assert_eq!(
            row.len(),
            self.columns.len(),
            "row width must match the header"
        );
        self.rows.push(row);
    }

    pub fn column(&self, name: &str) -> Option<usize> {
        self.columns.iter().position(|c| *c == name)
    }

    /// Values of one column, in row order.
    pub fn values(&self, name: &str) -> Vec<&Cell> {
        let j = self
            .column(name)
            .unwrap_or_else(|| panic!("no column {name}"));
        self.rows.iter().map(|r| &r[j]).collect()
    }

    pub fn write_csv<W: Write>(&self, w: W) -> CliResult<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(&self.columns)?;
        for r in &self.rows {
            out.write_record(r.iter().map(Cell::csv))?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn to_json(&self, cfg: &RunConfig) -> CliResult<Value> {
        let rows: Vec<Value> = self
            .rows
            .iter()
            .map(|r| {
                let obj: Map<String, Value> = self
                    .columns
                    .iter()
                    .zip(r)
                    .map(|(c, v)| (c.to_string(), v.json()))
                    .collect();
                Value::Object(obj)
            })
            .collect();
        Ok(json!({
            "config_echo": serde_json::to_value(cfg)?,
            "columns": self.columns,
            "rows": rows,
            "env": {
                "build_id": build_id(),
                "thread_count": lograd::exec::thread_count(),
            },
        }))
    }

    pub fn write<W: Write>(
        &self,
        cfg: &RunConfig,
        format: OutputFormat,
        mut w: W,
    ) -> CliResult<()> {
        match format {
            OutputFormat::Csv => self.write_csv(w),
            OutputFormat::Json => {
                serde_json::to_writer_pretty(&mut w, &self.to_json(cfg)?)?;
                writeln!(w)?;
                Ok(())
            }
        }
    }
}

pub fn build_id() -> String {
    let features = if cfg!(feature = "parallel") {
        "parallel"
    } else {
        "sequential"
    };
    let profile = if cfg!(debug_assertions) {
        "debug"
    } else {
        "release"
    };
    format!(
        "lograd {} ({features}, {profile})",
        env!("CARGO_PKG_VERSION")
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::Command;

    #[test]
    fn csv_has_header_and_round_trip_floats() {
        let mut t = Table::new(&["m", "x", "note"]);
        t.push(vec![3usize.into(), 0.1f64.into(), "a,b".into()]);
        t.push(vec![4usize.into(), 1e-300f64.into(), Cell::Empty]);
        let mut buf = Vec::new();
        t.write_csv(&mut buf).unwrap();
        let s = String::from_utf8(buf).unwrap();
        assert_eq!(s, "m,x,note\n3,0.1,\"a,b\"\n4,1e-300,\n");
    }

    #[test]
    fn json_layout() {
        let mut t = Table::new(&["a", "b"]);
        t.push(vec![1usize.into(), f64::NAN.into()]);
        let v = t
            .to_json(&RunConfig::defaults(Command::MemoryReport))
            .unwrap();
        assert_eq!(v["rows"][0]["a"], 1);
        assert!(v["rows"][0]["b"].is_null());
        assert_eq!(v["config_echo"]["command"], "memory-report");
        assert!(v["env"]["thread_count"].as_u64().unwrap() >= 1);
        assert!(v["env"]["build_id"].as_str().unwrap().starts_with("lograd"));
    }
}
