//! CSV tables and run manifests.

use std::fs;
use std::path::Path;

use serde::Serialize;

use crate::HarnessError;

/// Column-oriented table; cells are pre-formatted strings.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Table {
    pub headers: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

/// Shortest representation that parses back to the same `f64`.
pub fn fmt_f64(v: f64) -> String {
    format!("{v}")
}

impl Table {
    pub fn new(headers: &[&str]) -> Self {
        Self { headers: headers.iter().map(|h| h.to_string()).collect(), rows: Vec::new() }
    }

    pub fn push_numbers(&mut self, row: &[f64]) {
        self.push(row.iter().map(|v| fmt_f64(*v)).collect());
    }

    pub fn push(&mut self, row: Vec<String>) {
        debug_assert_eq!(row.len(), self.headers.len());
        self.rows.push(row);
    }

    pub fn column(&self, name: &str) -> Option<Vec<f64>> {
        let i = self.headers.iter().position(|h| h == name)?;
        self.rows.iter().map(|r| r[i].parse().ok()).collect()
    }

    pub fn to_csv(&self) -> Result<String, HarnessError> {
        let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(Vec::new());
        w.write_record(&self.headers)?;
        for r in &self.rows {
            w.write_record(r)?;
        }
        let bytes = w.into_inner().map_err(|e| HarnessError::Io(e.into_error()))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl Check {
    pub fn new(name: &str, passed: bool, detail: impl Into<String>) -> Self {
        Self { name: name.into(), passed, detail: detail.into() }
    }
}

/// Everything an experiment produces.
#[derive(Debug, Clone, PartialEq)]
pub struct Report {
    pub experiment: String,
    pub seed: u64,
    pub tables: Vec<(String, Table)>,
    pub summary: serde_json::Value,
    pub checks: Vec<Check>,
}

impl Report {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn table(&self, file: &str) -> Option<&Table> {
        self.tables.iter().find(|(f, _)| f == file).map(|(_, t)| t)
    }

    /// Writes every table plus `manifest.json` into `dir`.
    pub fn write(&self, dir: &Path, config: &impl Serialize) -> Result<(), HarnessError> {
        fs::create_dir_all(dir)?;
        for (name, table) in &self.tables {
            fs::write(dir.join(name), table.to_csv()?)?;
        }
        let manifest = serde_json::json!({
            "experiment": self.experiment,
            "seed": self.seed,
            "version": env!("CARGO_PKG_VERSION"),
            "config": config,
            "outputs": self.tables.iter().map(|(n, _)| n).collect::<Vec<_>>(),
            "summary": self.summary,
            "checks": self.checks,
        });
        fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)? + "\n")?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_layout() {
        let mut t = Table::new(&["t_s", "err_nm"]);
        t.push_numbers(&[0.0, 0.1]);
        t.push_numbers(&[0.001, 1.0 / 3.0]);
        let s = t.to_csv().unwrap();
        assert_eq!(s, "t_s,err_nm\n0,0.1\n0.001,0.3333333333333333\n");
        assert_eq!(t.column("err_nm").unwrap()[1], 1.0 / 3.0);
    }

    #[test]
    fn writes_manifest() {
        let dir = tempfile::tempdir().unwrap();
        let mut t = Table::new(&["t_s"]);
        t.push_numbers(&[1.5]);
        let r = Report {
            experiment: "demo".into(),
            seed: 4,
            tables: vec![("demo.csv".into(), t)],
            summary: serde_json::json!({"x": 1}),
            checks: vec![Check::new("ok", true, "")],
        };
        r.write(dir.path(), &serde_json::json!({"a": 2})).unwrap();
        let m: serde_json::Value = serde_json::from_str(&fs::read_to_string(dir.path().join("manifest.json")).unwrap()).unwrap();
        assert_eq!(m["seed"], 4);
        assert_eq!(m["outputs"][0], "demo.csv");
        assert_eq!(fs::read_to_string(dir.path().join("demo.csv")).unwrap(), "t_s\n1.5\n");
    }
}
