//! `results.csv`: one row per `(value, seed)` cell plus a mean row per value.

use std::io::{Read, Write};
use std::path::Path;

use cmtr::eval::TrialMetrics;
use cmtr::{CmtrError, Result};
use serde::{Deserialize, Serialize};

pub const RESULTS_FILE: &str = "results.csv";
pub const HEADER: &str = "axis,value,seed,seq_len,rank1,rank10,rank20,map,minp,status";
pub const MEAN_SEED: &str = "mean";

/// Retrieval scores of one cell, as fractions in `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Scores {
    pub rank1: f64,
    pub rank10: f64,
    pub rank20: f64,
    pub map: f64,
    pub minp: f64,
}

impl From<&TrialMetrics> for Scores {
    fn from(m: &TrialMetrics) -> Self {
        Scores { rank1: m.rank1, rank10: m.rank10, rank20: m.rank20, map: m.map, minp: m.minp }
    }
}

impl Scores {
    fn values(&self) -> [f64; 5] {
        [self.rank1, self.rank10, self.rank20, self.map, self.minp]
    }

    fn mean(rows: &[Scores]) -> Option<Scores> {
        if rows.is_empty() {
            return None;
        }
        let n = rows.len() as f64;
        let avg = |f: fn(&Scores) -> f64| rows.iter().map(f).sum::<f64>() / n;
        Some(Scores {
            rank1: avg(|s| s.rank1),
            rank10: avg(|s| s.rank10),
            rank20: avg(|s| s.rank20),
            map: avg(|s| s.map),
            minp: avg(|s| s.minp),
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Outcome {
    Ok(Scores),
    Failed(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct CellResult {
    pub value: String,
    pub seed: u64,
    pub seq_len: usize,
    pub outcome: Outcome,
}

/// Serialized row; metrics are empty for failed cells.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CsvRow {
    pub axis: String,
    pub value: String,
    pub seed: String,
    pub seq_len: usize,
    pub rank1: Option<f64>,
    pub rank10: Option<f64>,
    pub rank20: Option<f64>,
    pub map: Option<f64>,
    pub minp: Option<f64>,
    pub status: String,
}

impl CsvRow {
    pub fn is_mean(&self) -> bool {
        self.seed == MEAN_SEED
    }

    pub fn scores(&self) -> Option<Scores> {
        Some(Scores { rank1: self.rank1?, rank10: self.rank10?, rank20: self.rank20?, map: self.map?, minp: self.minp? })
    }
}

/// Cell results of one sweep, in `(value, seed)` order.
#[derive(Debug, Clone, PartialEq)]
pub struct ResultTable {
    pub axis: String,
    pub cells: Vec<CellResult>,
}

impl ResultTable {
    /// Distinct values in first-appearance order.
    pub fn values(&self) -> Vec<&str> {
        let mut out: Vec<&str> = Vec::new();
        for c in &self.cells {
            if !out.contains(&c.value.as_str()) {
                out.push(&c.value);
            }
        }
        out
    }

    pub fn scores(&self, value: &str) -> Vec<Scores> {
        self.cells
            .iter()
            .filter(|c| c.value == value)
            .filter_map(|c| match &c.outcome {
                Outcome::Ok(s) => Some(*s),
                Outcome::Failed(_) => None,
            })
            .collect()
    }

    pub fn failures(&self) -> usize {
        self.cells.iter().filter(|c| matches!(c.outcome, Outcome::Failed(_))).count()
    }

    /// Median Rank-1 over the successful seeds of `value`.
    pub fn median_rank1(&self, value: &str) -> Option<f64> {
        let mut r: Vec<f64> = self.scores(value).iter().map(|s| s.rank1).collect();
        if r.is_empty() {
            return None;
        }
        r.sort_by(f64::total_cmp);
        let n = r.len();
        Some(if n % 2 == 1 { r[n / 2] } else { (r[n / 2 - 1] + r[n / 2]) / 2.0 })
    }

    /// Rows as written: each value's seed rows followed by its mean row.
    pub fn rows(&self) -> Vec<CsvRow> {
        let mut rows = Vec::new();
        for value in self.values() {
            let cells: Vec<&CellResult> = self.cells.iter().filter(|c| c.value == value).collect();
            for c in &cells {
                let (scores, status) = match &c.outcome {
                    Outcome::Ok(s) => (Some(*s), "ok".to_string()),
                    Outcome::Failed(msg) => (None, format!("failed: {}", msg)),
                };
                rows.push(self.row(value, c.seed.to_string(), c.seq_len, scores, status));
            }
            let ok = self.scores(value);
            let status = if ok.len() == cells.len() {
                "ok".to_string()
            } else {
                format!("partial: {} of {} seeds", ok.len(), cells.len())
            };
            rows.push(self.row(value, MEAN_SEED.into(), cells[0].seq_len, Scores::mean(&ok), status));
        }
        rows
    }

    fn row(&self, value: &str, seed: String, seq_len: usize, s: Option<Scores>, status: String) -> CsvRow {
        CsvRow {
            axis: self.axis.clone(),
            value: value.to_string(),
            seed,
            seq_len,
            rank1: s.map(|s| s.rank1),
            rank10: s.map(|s| s.rank10),
            rank20: s.map(|s| s.rank20),
            map: s.map(|s| s.map),
            minp: s.map(|s| s.minp),
            status,
        }
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        for row in self.rows() {
            wr.serialize(row).map_err(|e| CmtrError::Format(e.to_string()))?;
        }
        wr.flush()?;
        Ok(())
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        self.write_csv(std::fs::File::create(dir.join(RESULTS_FILE))?)
    }

    /// Post-run checks: scores are fractions and CMC is monotone.
    pub fn check_invariants(&self) -> Vec<String> {
        let mut problems = Vec::new();
        for c in &self.cells {
            if let Outcome::Ok(s) = &c.outcome {
                let tag = format!("{}={} seed {}", self.axis, c.value, c.seed);
                if !s.values().iter().all(|v| (0.0..=1.0).contains(v)) {
                    problems.push(format!("{}: score outside [0, 1]: {:?}", tag, s));
                }
                if !(s.rank1 <= s.rank10 && s.rank10 <= s.rank20) {
                    problems.push(format!("{}: CMC not monotone: {:?}", tag, s));
                }
            }
        }
        problems
    }
}

/// Reads `results.csv`, checking the header.
pub fn read_results<R: Read>(r: R) -> Result<Vec<CsvRow>> {
    let mut rd = csv::Reader::from_reader(r);
    let header: Vec<String> = rd.headers().map_err(|e| CmtrError::Format(e.to_string()))?.iter().map(String::from).collect();
    if header.join(",") != HEADER {
        return Err(CmtrError::Format(format!("unexpected results header {:?}", header.join(","))));
    }
    rd.deserialize().map(|r| r.map_err(|e| CmtrError::Format(e.to_string()))).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scores(r1: f64) -> Scores {
        Scores { rank1: r1, rank10: 0.9, rank20: 1.0, map: 0.5, minp: 0.25 }
    }

    fn table() -> ResultTable {
        let cell = |value: &str, seed, outcome| CellResult { value: value.into(), seed, seq_len: 8, outcome };
        ResultTable {
            axis: "lambda".into(),
            cells: vec![
                cell("0", 1, Outcome::Ok(scores(0.5))),
                cell("0", 2, Outcome::Ok(scores(0.25))),
                cell("0", 3, Outcome::Ok(scores(0.75))),
                cell("1", 1, Outcome::Ok(scores(0.5))),
                cell("1", 2, Outcome::Failed("diverged".into())),
            ],
        }
    }

    #[test]
    fn mean_rows_follow_each_value() {
        let rows = table().rows();
        assert_eq!(rows.len(), 7);
        assert_eq!(rows[3].seed, "mean");
        assert_eq!(rows[3].rank1, Some(0.5));
        assert_eq!(rows[6].status, "partial: 1 of 2 seeds");
        assert_eq!(rows[6].rank1, Some(0.5));
        assert_eq!(rows[5].rank1, None);
        assert_eq!(rows[5].status, "failed: diverged");
    }

    #[test]
    fn medians_and_failures() {
        let t = table();
        assert_eq!(t.median_rank1("0"), Some(0.5));
        assert_eq!(t.median_rank1("1"), Some(0.5));
        assert_eq!(t.median_rank1("2"), None);
        assert_eq!(t.failures(), 1);
    }

    #[test]
    fn csv_round_trip() {
        let mut buf = Vec::new();
        table().write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert_eq!(text.lines().next().unwrap(), HEADER);
        assert_eq!(read_results(&buf[..]).unwrap(), table().rows());
        assert!(read_results("a,b\n1,2\n".as_bytes()).is_err());
    }

    #[test]
    fn invariant_violations_reported() {
        let mut t = table();
        assert!(t.check_invariants().is_empty());
        t.cells[0].outcome = Outcome::Ok(Scores { rank1: 0.95, ..scores(0.0) });
        t.cells[1].outcome = Outcome::Ok(Scores { map: 1.5, ..scores(0.0) });
        assert_eq!(t.check_invariants().len(), 2);
    }
}
