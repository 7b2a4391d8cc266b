//! Aggregate continual-learning metrics over a lower-triangular accuracy
//! matrix.
//!
//! `A[j][i]` is the accuracy (percent, 0–100) on task `i` after training
//! through task `j`, for `i ≤ j`. Four aggregates summarize a run:
//!
//! * MFT — mean accuracy of each task immediately after it was learned
//!   (diagonal mean).
//! * MFN — mean accuracy across tasks after the final task (last-row mean).
//! * MAA — mean over steps of the running per-step average accuracy.
//! * BWT — mean signed change between final and just-learned accuracy;
//!   negative values indicate forgetting.
//!
//! The same operations apply to joint, style-only, and content-only accuracy
//! matrices; style BWT quantifies format drift while content BWT quantifies
//! knowledge loss (an artifact-level interpretation of the two, not a claim
//! about any particular model family).

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("row {row} has {len} entries, expected {expected}")]
    NotTriangular {
        row: usize,
        len: usize,
        expected: usize,
    },
    #[error("entry A[{row}][{col}] = {value} outside [0,100]")]
    OutOfRange { row: usize, col: usize, value: f64 },
    #[error("matrix must contain at least one row")]
    Empty,
    #[error("CSV line {line}: {message}")]
    Csv { line: usize, message: String },
}

/// Lower-triangular accuracy matrix in percent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccuracyMatrix {
    rows: Vec<Vec<f64>>,
}

impl AccuracyMatrix {
    /// Validate and wrap a lower-triangular matrix (row `j` has `j+1` entries
    /// in [0,100]).
    pub fn from_rows(rows: Vec<Vec<f64>>) -> Result<Self, MetricsError> {
        if rows.is_empty() {
            return Err(MetricsError::Empty);
        }
        for (j, row) in rows.iter().enumerate() {
            if row.len() != j + 1 {
                return Err(MetricsError::NotTriangular {
                    row: j,
                    len: row.len(),
                    expected: j + 1,
                });
            }
            for (i, &v) in row.iter().enumerate() {
                if !(0.0..=100.0).contains(&v) {
                    return Err(MetricsError::OutOfRange {
                        row: j,
                        col: i,
                        value: v,
                    });
                }
            }
        }
        Ok(AccuracyMatrix { rows })
    }

    /// Number of tasks T.
    pub fn task_count(&self) -> usize {
        self.rows.len()
    }

    /// Accuracy on task `i` after training through task `j` (`i ≤ j`).
    pub fn get(&self, j: usize, i: usize) -> f64 {
        self.rows[j][i]
    }

    pub fn rows(&self) -> &[Vec<f64>] {
        &self.rows
    }

    /// One line per row, entries comma-separated, trailing newline.
    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        for row in &self.rows {
            let line: Vec<String> = row.iter().map(|v| format!("{v}")).collect();
            out.push_str(&line.join(","));
            out.push('\n');
        }
        out
    }

    /// Parse the `to_csv` form back into a validated matrix.
    pub fn from_csv(text: &str) -> Result<Self, MetricsError> {
        let mut rows = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let row: Result<Vec<f64>, _> = line.split(',').map(|f| f.trim().parse()).collect();
            rows.push(row.map_err(|e| MetricsError::Csv {
                line: i + 1,
                message: format!("{e}"),
            })?);
        }
        AccuracyMatrix::from_rows(rows)
    }
}

/// Mean fine-tune accuracy: average of the diagonal.
pub fn mft(a: &AccuracyMatrix) -> f64 {
    let t = a.task_count();
    (0..t).map(|i| a.get(i, i)).sum::<f64>() / t as f64
}

/// Mean final accuracy: average of the last row.
pub fn mfn(a: &AccuracyMatrix) -> f64 {
    let t = a.task_count();
    (0..t).map(|i| a.get(t - 1, i)).sum::<f64>() / t as f64
}

/// Mean average accuracy: mean over steps of each step's running mean.
pub fn maa(a: &AccuracyMatrix) -> f64 {
    let t = a.task_count();
    let per_step: f64 = (0..t)
        .map(|j| (0..=j).map(|i| a.get(j, i)).sum::<f64>() / (j + 1) as f64)
        .sum();
    per_step / t as f64
}

/// Backward transfer: mean of (final − just-learned) accuracy per task.
/// Negative values indicate forgetting.
pub fn bwt(a: &AccuracyMatrix) -> f64 {
    let t = a.task_count();
    (0..t)
        .map(|i| a.get(t - 1, i) - a.get(i, i))
        .sum::<f64>()
        / t as f64
}
