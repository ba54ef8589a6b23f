//! Evaluation protocols and metrics: TIL/CIL accuracy, the accuracy matrix,
//! final average, forward transfer, matching-weight heatmaps, and their CSV
//! and JSON forms.

use std::fmt;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::data::TaskSpec;
use crate::error::{MoclError, Result};
use crate::learner::{LearnerState, Method};
use crate::mocl;

/// Decimal places used in every CSV export.
pub const CSV_DECIMALS: usize = 6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Protocol {
    /// Task identity is given at test time.
    Til,
    /// Task identity must be inferred; labels are global.
    Cil,
}

impl Protocol {
    pub fn name(self) -> &'static str {
        match self {
            Protocol::Til => "til",
            Protocol::Cil => "cil",
        }
    }
}

impl fmt::Display for Protocol {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Protocol {
    type Err = MoclError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "til" => Ok(Protocol::Til),
            "cil" => Ok(Protocol::Cil),
            other => Err(MoclError::Config(format!("unknown protocol {other:?}"))),
        }
    }
}

/// Whether the learner predicts `task`'s test example `index` correctly.
/// Under CIL the predicted task's offset plus the predicted local label must
/// equal the gold global label.
pub fn is_correct(state: &LearnerState, task: &TaskSpec, index: usize, protocol: Protocol) -> Result<bool> {
    let ex = &task.test[index];
    let tokens = state.tokenize(&ex.text)?;
    match protocol {
        Protocol::Til => Ok(state.predict_til(&tokens, task.id)? == ex.label),
        Protocol::Cil => {
            let pred = state.predict_cil(&tokens)?;
            let meta = &state.tasks[pred.task_id - 1];
            Ok(meta.label_offset + pred.label == task.global_label(ex.label))
        }
    }
}

/// Fraction of `task`'s test set predicted correctly.
pub fn accuracy(state: &LearnerState, task: &TaskSpec, protocol: Protocol) -> Result<f64> {
    if task.test.is_empty() {
        return Err(MoclError::Data(format!("task {} has an empty test set", task.name)));
    }
    let mut correct = 0usize;
    for i in 0..task.test.len() {
        if is_correct(state, task, i, protocol)? {
            correct += 1;
        }
    }
    Ok(correct as f64 / task.test.len() as f64)
}

/// Fraction of test examples across `tasks` whose inferred task id is right.
pub fn task_identification(state: &LearnerState, tasks: &[TaskSpec]) -> Result<f64> {
    let mut hits = 0usize;
    let mut total = 0usize;
    for t in tasks {
        for e in &t.test {
            let pred = state.predict_cil(&state.tokenize(&e.text)?)?;
            hits += usize::from(pred.task_id == t.id);
            total += 1;
        }
    }
    if total == 0 {
        return Err(MoclError::Data("no test examples".into()));
    }
    Ok(hits as f64 / total as f64)
}

fn is_skippable(line: &str) -> bool {
    let t = line.trim();
    t.is_empty() || t.starts_with('#')
}

/// Lower-triangular matrix with task-name headers: row `i` holds columns
/// `0..=i`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TriangularMatrix {
    pub names: Vec<String>,
    pub rows: Vec<Vec<f64>>,
}

/// `a[i][j]`: accuracy on task `j` after training through task `i`.
pub type AccuracyMatrix = TriangularMatrix;
/// `w[n][k]`: mean weight of module `k` over task `n`'s training inputs.
pub type HeatmapMatrix = TriangularMatrix;

impl TriangularMatrix {
    /// Checks shape and that every entry lies in `[lo, hi]`.
    pub fn new(names: Vec<String>, rows: Vec<Vec<f64>>, lo: f64, hi: f64) -> Result<Self> {
        if names.len() != rows.len() {
            return Err(MoclError::Data(format!(
                "{} names for {} rows",
                names.len(),
                rows.len()
            )));
        }
        for (i, row) in rows.iter().enumerate() {
            if row.len() != i + 1 {
                return Err(MoclError::Data(format!(
                    "row {} has {} entries, expected {}",
                    i + 1,
                    row.len(),
                    i + 1
                )));
            }
            if let Some(v) = row.iter().find(|v| !(lo..=hi).contains(*v)) {
                return Err(MoclError::Data(format!(
                    "entry {v} in row {} outside [{lo}, {hi}]",
                    i + 1
                )));
            }
        }
        Ok(Self { names, rows })
    }

    pub fn accuracy(names: Vec<String>, rows: Vec<Vec<f64>>) -> Result<Self> {
        Self::new(names, rows, 0.0, 1.0)
    }

    pub fn heatmap(names: Vec<String>, rows: Vec<Vec<f64>>) -> Result<Self> {
        Self::new(names, rows, -1.0, 1.0)
    }

    pub fn n(&self) -> usize {
        self.rows.len()
    }

    /// Entry at 1-based row `i`, column `j`; `None` above the diagonal.
    pub fn get(&self, i: usize, j: usize) -> Option<f64> {
        self.rows.get(i.checked_sub(1)?)?.get(j.checked_sub(1)?).copied()
    }

    pub fn diagonal(&self) -> Vec<f64> {
        self.rows.iter().enumerate().map(|(i, r)| r[i]).collect()
    }

    pub fn last_row(&self) -> Option<&[f64]> {
        self.rows.last().map(Vec::as_slice)
    }

    /// Header `task,<names>`; one row per task; cells above the diagonal
    /// are left empty.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("task");
        for n in &self.names {
            out.push(',');
            out.push_str(n);
        }
        out.push('\n');
        for (name, row) in self.names.iter().zip(&self.rows) {
            out.push_str(name);
            for j in 0..self.n() {
                out.push(',');
                if let Some(v) = row.get(j) {
                    write!(out, "{v:.CSV_DECIMALS$}").expect("writing to a String");
                }
            }
            out.push('\n');
        }
        out
    }

    /// Parses [`TriangularMatrix::to_csv`] output without range checks.
    /// Blank lines and `#` comment lines are ignored.
    pub fn from_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate().filter(|(_, l)| !is_skippable(l));
        let (_, header) = lines
            .next()
            .ok_or_else(|| MoclError::Parse { line: 1, message: "empty matrix file".into() })?;
        let cols: Vec<&str> = header.split(',').collect();
        if cols.first() != Some(&"task") {
            return Err(MoclError::Parse { line: 1, message: "header must start with 'task'".into() });
        }
        let names: Vec<String> = cols[1..].iter().map(|s| s.to_string()).collect();
        let mut rows = Vec::new();
        for (ln, line) in lines {
            let cells: Vec<&str> = line.split(',').collect();
            let i = rows.len();
            let parse_err = |message: String| MoclError::Parse { line: ln + 1, message };
            if cells.len() != names.len() + 1 {
                return Err(parse_err(format!("expected {} cells, got {}", names.len() + 1, cells.len())));
            }
            if i >= names.len() || cells[0] != names[i] {
                return Err(parse_err(format!("unexpected row label {:?}", cells[0])));
            }
            let mut row = Vec::with_capacity(i + 1);
            for (j, cell) in cells[1..].iter().enumerate() {
                let cell = cell.trim();
                if j <= i {
                    row.push(cell.parse::<f64>().map_err(|e| parse_err(format!("cell {}: {e}", j + 1)))?);
                } else if !cell.is_empty() {
                    return Err(parse_err(format!("cell {} above the diagonal must be empty", j + 1)));
                }
            }
            rows.push(row);
        }
        if rows.len() != names.len() {
            return Err(MoclError::Parse {
                line: rows.len() + 1,
                message: format!("{} rows for {} tasks", rows.len(), names.len()),
            });
        }
        Ok(Self { names, rows })
    }
}

/// Mean of the final row: performance after the whole sequence.
pub fn avg_final(matrix: &AccuracyMatrix) -> Result<f64> {
    let row = matrix
        .last_row()
        .ok_or_else(|| MoclError::Data("empty accuracy matrix".into()))?;
    Ok(row.iter().sum::<f64>() / row.len() as f64)
}

/// Forward transfer `(1/(N-1)) Σ_{i=2..N} (a_ii − ã_i)`. `reference[i-1]`
/// holds `ã_i`; `ã_1` is not used.
pub fn fwt(matrix: &AccuracyMatrix, reference: &[f64]) -> Result<f64> {
    let n = matrix.n();
    if n < 2 {
        return Err(MoclError::Data("forward transfer needs at least two tasks".into()));
    }
    if reference.len() < n {
        return Err(MoclError::Data(format!(
            "reference scores cover {} tasks, matrix has {n}",
            reference.len()
        )));
    }
    let diag = matrix.diagonal();
    let total: f64 = (1..n).map(|i| diag[i] - reference[i]).sum();
    Ok(total / (n - 1) as f64)
}

/// Replays evaluation after every task boundary of a trained learner.
pub fn accuracy_matrix(state: &LearnerState, tasks: &[TaskSpec], protocol: Protocol) -> Result<AccuracyMatrix> {
    if tasks.len() != state.n_tasks() {
        return Err(MoclError::Protocol(format!(
            "{} tasks given, learner trained on {}",
            tasks.len(),
            state.n_tasks()
        )));
    }
    let mut rows = Vec::with_capacity(tasks.len());
    for i in 1..=tasks.len() {
        let view = state.view(i)?;
        rows.push(
            tasks[..i]
                .iter()
                .map(|t| accuracy(&view, t, protocol))
                .collect::<Result<Vec<f64>>>()?,
        );
    }
    AccuracyMatrix::accuracy(tasks.iter().map(|t| t.name.clone()).collect(), rows)
}

/// Matching-weight heatmap of a trained MoCL learner.
pub fn heatmap(state: &LearnerState, tasks: &[TaskSpec]) -> Result<HeatmapMatrix> {
    if state.method != Method::Mocl {
        return Err(MoclError::Protocol(format!(
            "{} has no matching weights",
            state.method
        )));
    }
    let rows = mocl::heatmap_rows(state, tasks)?;
    HeatmapMatrix::heatmap(tasks.iter().map(|t| t.name.clone()).collect(), rows)
}

/// Isolated per-task accuracies `ã_i`, one per task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReferenceScores {
    pub names: Vec<String>,
    pub accuracy: Vec<f64>,
}

impl ReferenceScores {
    /// Full round-trip precision, so forward transfer computed from a
    /// reloaded file matches the in-memory value bit for bit.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("task,accuracy\n");
        for (n, a) in self.names.iter().zip(&self.accuracy) {
            writeln!(out, "{n},{a}").expect("writing to a String");
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut names = Vec::new();
        let mut accuracy = Vec::new();
        let mut header_seen = false;
        for (ln, line) in text.lines().enumerate() {
            if is_skippable(line) {
                continue;
            }
            if !header_seen {
                header_seen = true;
                if line.trim() != "task,accuracy" {
                    return Err(MoclError::Parse {
                        line: ln + 1,
                        message: "header must be 'task,accuracy'".into(),
                    });
                }
                continue;
            }
            let (name, value) = line.split_once(',').ok_or_else(|| MoclError::Parse {
                line: ln + 1,
                message: "expected 'task,accuracy'".into(),
            })?;
            let value = value.trim().parse::<f64>().map_err(|e| MoclError::Parse {
                line: ln + 1,
                message: e.to_string(),
            })?;
            names.push(name.to_string());
            accuracy.push(value);
        }
        Ok(Self { names, accuracy })
    }
}

/// Summary of one protocol for one seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub method: Method,
    pub protocol: Protocol,
    pub seed: u64,
    pub config_hash: String,
    pub code_version: String,
    pub avg: f64,
    /// Absent under CIL and for single-task runs.
    pub fwt: Option<f64>,
    /// Final-row accuracies, one per task.
    pub per_task: Vec<f64>,
}
