//! Grader evaluation: bucketed accuracy, MAE and conditional error rates.
//!
//! Scores are bucketed into the labels 0, 1 (for 1-3), 6 (for 4-6) and 7.
//! Fractional predictions are rounded half-up first. MAE compares the
//! bucketed prediction with the raw human grade and is divided by 7.

use std::fmt::{self, Write as _};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::GradingRecord;

pub const LABELS: [u8; 4] = [0, 1, 6, 7];

pub fn bucketize(score: u8) -> Result<u8> {
    match score {
        0 => Ok(0),
        1..=3 => Ok(1),
        4..=6 => Ok(6),
        7 => Ok(7),
        _ => Err(Error::Invalid(format!("score {score} is outside 0..=7"))),
    }
}

/// Half-up rounding onto 0..=7.
pub fn round_prediction(predicted: f64) -> Result<u8> {
    if !(0.0..=7.0).contains(&predicted) {
        return Err(Error::Invalid(format!("predicted grade {predicted} is outside 0..=7")));
    }
    Ok((predicted + 0.5).floor() as u8)
}

fn label_index(label: u8) -> usize {
    LABELS.iter().position(|&l| l == label).expect("bucketed label")
}

/// An exact fraction. A zero denominator means the rate is undefined.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rate {
    pub num: u64,
    pub den: u64,
}

impl Rate {
    pub fn value(self) -> Option<f64> {
        (self.den > 0).then(|| self.num as f64 / self.den as f64)
    }

    /// `42.5%`, or `n/a` when undefined.
    pub fn percent(self) -> String {
        match self.value() {
            Some(v) => format!("{:.1}%", v * 100.0),
            None => "n/a".to_string(),
        }
    }
}

impl fmt::Display for Rate {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.den == 0 {
            f.write_str("n/a")
        } else {
            write!(f, "{}/{}", self.num, self.den)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub n: u64,
    pub acc: Rate,
    /// Sum of |bucket(pred) - human| over 7n.
    pub mae: Rate,
    /// P(pred >= 6 | human <= 5).
    pub fpr: Rate,
    /// P(pred <= 5 | human >= 6).
    pub fnr: Rate,
    /// Accuracy with labels 0 and 1 merged.
    pub merged_acc: Rate,
    /// Rows are human labels, columns predicted labels, both in [`LABELS`] order.
    pub confusion: [[u64; 4]; 4],
}

pub fn compute_metrics(records: &[GradingRecord]) -> Result<MetricsReport> {
    if records.is_empty() {
        return Err(Error::Invalid("no grading records".into()));
    }
    let n = records.len() as u64;
    let mut confusion = [[0u64; 4]; 4];
    let (mut hits, mut merged, mut abs_err) = (0, 0, 0u64);
    let (mut neg, mut false_pos, mut pos, mut false_neg) = (0, 0, 0, 0);
    for r in records {
        r.validate()?;
        let pred = bucketize(round_prediction(r.predicted)?)?;
        let human = bucketize(r.human)?;
        confusion[label_index(human)][label_index(pred)] += 1;
        hits += (pred == human) as u64;
        merged += (pred.max(1) == human.max(1)) as u64;
        abs_err += pred.abs_diff(r.human) as u64;
        if r.human <= 5 {
            neg += 1;
            false_pos += (pred >= 6) as u64;
        } else {
            pos += 1;
            false_neg += (pred <= 5) as u64;
        }
    }
    Ok(MetricsReport {
        n,
        acc: Rate { num: hits, den: n },
        mae: Rate { num: abs_err, den: 7 * n },
        fpr: Rate { num: false_pos, den: neg },
        fnr: Rate { num: false_neg, den: pos },
        merged_acc: Rate { num: merged, den: n },
        confusion,
    })
}

/// The confusion grid with row and column totals.
pub fn render_confusion(report: &MetricsReport) -> String {
    let mut out = String::from("human\\pred      0      1      6      7  total\n");
    let mut col_totals = [0u64; 4];
    for (i, row) in report.confusion.iter().enumerate() {
        let _ = write!(out, "{:>10}", LABELS[i]);
        for (j, v) in row.iter().enumerate() {
            col_totals[j] += v;
            let _ = write!(out, "{v:>7}");
        }
        let _ = writeln!(out, "{:>7}", row.iter().sum::<u64>());
    }
    let _ = write!(out, "{:>10}", "total");
    for v in col_totals {
        let _ = write!(out, "{v:>7}");
    }
    let _ = writeln!(out, "{:>7}", report.n);
    out
}

pub fn confusion_csv(report: &MetricsReport) -> String {
    let mut out = String::from("human,pred_0,pred_1,pred_6,pred_7,total\n");
    for (i, row) in report.confusion.iter().enumerate() {
        let cells: Vec<String> = row.iter().map(u64::to_string).collect();
        let _ = writeln!(out, "{},{},{}", LABELS[i], cells.join(","), row.iter().sum::<u64>());
    }
    out
}

impl MetricsReport {
    pub fn to_text(&self) -> String {
        let mut out = format!("records: {}\n", self.n);
        out.push_str("(MAE is mean |bucket(pred) - human| divided by 7)\n");
        for (name, rate) in self.rates() {
            let _ = writeln!(out, "{name:<11}{:>8}  ({rate})", rate.percent());
        }
        out.push('\n');
        out.push_str(&render_confusion(self));
        out
    }

    /// One row per metric: name, numerator, denominator, value.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("metric,num,den,value\n");
        for (name, rate) in self.rates() {
            let value = rate.value().map(|v| format!("{v:.6}")).unwrap_or_else(|| "n/a".into());
            let _ = writeln!(out, "{name},{},{},{value}", rate.num, rate.den);
        }
        out
    }

    fn rates(&self) -> [(&'static str, Rate); 5] {
        [
            ("acc", self.acc),
            ("mae", self.mae),
            ("fpr", self.fpr),
            ("fnr", self.fnr),
            ("merged_acc", self.merged_acc),
        ]
    }
}

#[derive(Deserialize)]
struct CsvRow {
    human: String,
    predicted: String,
    #[serde(default)]
    problem_id: Option<String>,
}

fn record_at(line: usize, human: &str, predicted: &str, problem_id: Option<String>) -> Result<GradingRecord> {
    let bad = |msg: String| Error::Invalid(format!("line {line}: {msg}"));
    let human: u8 = human
        .trim()
        .parse()
        .map_err(|_| bad(format!("human grade {human:?} is not an integer")))?;
    let predicted: f64 = predicted
        .trim()
        .parse()
        .map_err(|_| bad(format!("predicted grade {predicted:?} is not a number")))?;
    let record = GradingRecord {
        human,
        predicted,
        problem_id: problem_id.filter(|p| !p.is_empty()),
    };
    record.validate().map_err(|e| bad(e.to_string()))?;
    Ok(record)
}

/// Parses CSV with a `human,predicted[,problem_id]` header.
pub fn parse_csv(text: &str) -> Result<Vec<GradingRecord>> {
    if text.trim().is_empty() {
        return Err(Error::Invalid("records file is empty".into()));
    }
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(text.as_bytes());
    let headers = reader
        .headers()
        .map_err(|e| Error::Invalid(format!("line 1: {e}")))?
        .clone();
    for required in ["human", "predicted"] {
        if !headers.iter().any(|h| h == required) {
            return Err(Error::Invalid(format!("line 1: missing column {required:?}")));
        }
    }
    let mut out = Vec::new();
    for row in reader.records() {
        let row = row.map_err(|e| {
            let line = e.position().map(|p| p.line()).unwrap_or(0);
            Error::Invalid(format!("line {line}: {e}"))
        })?;
        let line = row.position().map(|p| p.line()).unwrap_or(0) as usize;
        let parsed: CsvRow = row
            .deserialize(Some(&headers))
            .map_err(|e| Error::Invalid(format!("line {line}: {e}")))?;
        out.push(record_at(line, &parsed.human, &parsed.predicted, parsed.problem_id)?);
    }
    if out.is_empty() {
        return Err(Error::Invalid("0 records: the file has a header but no rows".into()));
    }
    Ok(out)
}

/// Parses one JSON object per line; blank lines are skipped.
pub fn parse_jsonl(text: &str) -> Result<Vec<GradingRecord>> {
    if text.trim().is_empty() {
        return Err(Error::Invalid("records file is empty".into()));
    }
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let record: GradingRecord =
            serde_json::from_str(line).map_err(|e| Error::Invalid(format!("line {}: {e}", i + 1)))?;
        record.validate().map_err(|e| Error::Invalid(format!("line {}: {e}", i + 1)))?;
        out.push(record);
    }
    Ok(out)
}

/// Reads `.jsonl`/`.json` as JSON lines and anything else as CSV.
pub fn read_records(path: &Path) -> Result<Vec<GradingRecord>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let result = match path.extension().and_then(|e| e.to_str()) {
        Some("jsonl" | "json") => parse_jsonl(&text),
        _ => parse_csv(&text),
    };
    result.map_err(|e| match e {
        Error::Invalid(msg) => Error::Invalid(format!("{}: {msg}", path.display())),
        other => other,
    })
}
