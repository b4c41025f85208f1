//! Report rows and the grid matrix.

use std::fs::OpenOptions;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use swd_core::train::HistoryRow;

use crate::error::Result;

/// One finished run. Field order is the CSV column order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub config: String,
    pub params_before: usize,
    pub params_after: usize,
    pub params_pct: f64,
    pub macs_before: u64,
    pub macs_after: u64,
    pub acc_before_removal: f64,
    pub acc_after_removal: f64,
    /// Seconds.
    pub wall_time: f64,
    /// Empty on success.
    pub error: String,
}

impl RunReport {
    pub fn pct(after: usize, before: usize) -> f64 {
        if before == 0 {
            0.0
        } else {
            100.0 * after as f64 / before as f64
        }
    }

    pub fn failed(&self) -> bool {
        !self.error.is_empty()
    }

    /// Everything except the timing.
    pub fn same_outcome(&self, other: &RunReport) -> bool {
        RunReport {
            wall_time: 0.0,
            config: String::new(),
            ..self.clone()
        } == RunReport {
            wall_time: 0.0,
            config: String::new(),
            ..other.clone()
        }
    }
}

/// Appends one row, writing the header when the file is new or empty.
pub fn append_report(path: &Path, row: &RunReport) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    let fresh = std::fs::metadata(path).map(|m| m.len() == 0).unwrap_or(true);
    let mut w = csv::WriterBuilder::new().has_headers(fresh).from_writer(Vec::new());
    w.serialize(row)?;
    let bytes = w.into_inner().map_err(|e| crate::HarnessError::Io(e.to_string()))?;
    // one write per row
    let mut f = OpenOptions::new().create(true).append(true).open(path)?;
    f.write_all(&bytes)?;
    Ok(())
}

pub fn read_reports(path: &Path) -> Result<Vec<RunReport>> {
    let mut r = csv::Reader::from_path(path)?;
    Ok(r.deserialize().collect::<std::result::Result<_, _>>()?)
}

pub fn write_history(path: &Path, rows: &[HistoryRow]) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    let mut w = csv::Writer::from_path(path)?;
    for row in rows {
        w.serialize(row)?;
    }
    w.flush()?;
    Ok(())
}

/// Grid results: `cells[i][j]` is the run at `a_max[i]`, `a_min[j]`.
#[derive(Debug, Clone, PartialEq)]
pub struct GridMatrix {
    pub a_min: Vec<f64>,
    pub a_max: Vec<f64>,
    pub cells: Vec<Vec<RunReport>>,
}

impl GridMatrix {
    pub fn cell(&self, a_min: f64, a_max: f64) -> Option<&RunReport> {
        let j = self.a_min.iter().position(|&v| v == a_min)?;
        let i = self.a_max.iter().position(|&v| v == a_max)?;
        Some(&self.cells[i][j])
    }

    /// Mean of `after - before` along the row of `a_max`.
    pub fn mean_gain(&self, a_max: f64) -> Option<f64> {
        let i = self.a_max.iter().position(|&v| v == a_max)?;
        let row = &self.cells[i];
        let sum: f64 = row.iter().map(|r| r.acc_after_removal - r.acc_before_removal).sum();
        Some(sum / row.len() as f64)
    }

    /// Rows are `a_max`, columns `a_min`, cells `(before / after)`.
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header = vec!["a_max \\ a_min".to_string()];
        header.extend(self.a_min.iter().map(|v| format!("{v:e}")));
        w.write_record(&header)?;
        for (i, row) in self.cells.iter().enumerate() {
            let mut rec = vec![format!("{:e}", self.a_max[i])];
            rec.extend(row.iter().map(|r| {
                if r.failed() {
                    format!("({:.2} / {:.2}) {}", r.acc_before_removal, r.acc_after_removal, r.error)
                } else {
                    format!("({:.2} / {:.2})", r.acc_before_removal, r.acc_after_removal)
                }
            }));
            w.write_record(&rec)?;
        }
        let bytes = w.into_inner().map_err(|e| crate::HarnessError::Io(e.to_string()))?;
        Ok(String::from_utf8_lossy(&bytes).into_owned())
    }
}

/// Fixed-width table for the terminal.
pub fn format_table(rows: &[RunReport]) -> String {
    let mut out = format!(
        "{:<40} {:>10} {:>10} {:>8} {:>12} {:>12} {:>8} {:>8} {:>8}  error\n",
        "config", "params", "kept", "pct", "macs", "macs_kept", "before", "after", "secs"
    );
    for r in rows {
        let name = r
            .config
            .split(';')
            .find_map(|kv| kv.strip_prefix("name="))
            .unwrap_or(&r.config);
        out.push_str(&format!(
            "{:<40} {:>10} {:>10} {:>8.3} {:>12} {:>12} {:>8.2} {:>8.2} {:>8.1}  {}\n",
            name,
            r.params_before,
            r.params_after,
            r.params_pct,
            r.macs_before,
            r.macs_after,
            r.acc_before_removal,
            r.acc_after_removal,
            r.wall_time,
            r.error
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(before: f64, after: f64) -> RunReport {
        RunReport {
            config: "name=x".into(),
            params_before: 10,
            params_after: 1,
            params_pct: 10.0,
            macs_before: 5,
            macs_after: 5,
            acc_before_removal: before,
            acc_after_removal: after,
            wall_time: 1.0,
            error: String::new(),
        }
    }

    #[test]
    fn appended_rows_read_back() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("r.csv");
        append_report(&p, &row(1.0, 2.0)).unwrap();
        append_report(&p, &row(3.0, 4.0)).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        assert!(text.starts_with(
            "config,params_before,params_after,params_pct,macs_before,macs_after,acc_before_removal,acc_after_removal,wall_time,error\n"
        ));
        assert_eq!(read_reports(&p).unwrap(), vec![row(1.0, 2.0), row(3.0, 4.0)]);
    }

    #[test]
    fn grid_layout() {
        let m = GridMatrix {
            a_min: vec![0.1, 0.01],
            a_max: vec![10.0],
            cells: vec![vec![row(98.96, 97.29), row(98.89, 96.59)]],
        };
        let csv = m.to_csv().unwrap();
        assert_eq!(csv.lines().nth(1).unwrap(), "1e1,(98.96 / 97.29),(98.89 / 96.59)");
        assert!((m.mean_gain(10.0).unwrap() - (-1.985)).abs() < 1e-9);
        assert_eq!(m.cell(0.01, 10.0).unwrap().acc_after_removal, 96.59);
    }
}
