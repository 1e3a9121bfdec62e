//! Per-run records: loss trajectories, step diagnostics, snapshots.

use std::fmt::Write as _;

use crate::filters::ImageBuffer;

/// Which optimizer produced an iteration.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StepKind {
    Adam,
    Lbfgs,
}

impl StepKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            StepKind::Adam => "adam",
            StepKind::Lbfgs => "lbfgs",
        }
    }
}

/// One iteration of the inference loop.
#[derive(Debug, Clone)]
pub struct RecordRow {
    pub iteration: usize,
    pub data_term: f64,
    pub consistency_term: f64,
    pub reg_term: f64,
    pub gamma: f64,
    pub step_size: f64,
    pub kind: StepKind,
}

/// Line-search diagnostics for post-hoc verification of the sufficient
/// decrease condition at every accepted step.
#[derive(Debug, Clone)]
pub struct LineSearchTrace {
    pub iteration: usize,
    pub f_before: f64,
    pub f_after: f64,
    pub alpha: f64,
    pub dir_dot: f64,
    pub xi: f64,
    pub accepted: bool,
}

/// Everything a run leaves behind for inspection.
#[derive(Debug, Clone, Default)]
pub struct RunRecord {
    pub rows: Vec<RecordRow>,
    pub line_searches: Vec<LineSearchTrace>,
    /// In-memory snapshot frames (iteration, current reconstruction).
    pub snapshots: Vec<(usize, ImageBuffer)>,
    /// File names once snapshots have been written out.
    pub snapshot_files: Vec<String>,
    pub network_description: String,
    pub wall_clock_sec: f64,
    /// Phase restarts taken after non-finite losses.
    pub restarts: usize,
}

impl RunRecord {
    pub fn push_row(&mut self, row: RecordRow) {
        if let Some(last) = self.rows.last() {
            assert!(
                row.iteration > last.iteration,
                "record rows must be strictly increasing in iteration ({} after {})",
                row.iteration,
                last.iteration
            );
        }
        self.rows.push(row);
    }

    /// CSV text of the per-iteration rows. Floats use the shortest
    /// round-trip representation, so identical runs serialize
    /// identically.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("iteration,data,consistency,reg,gamma,alpha,kind\n");
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{}",
                r.iteration,
                r.data_term,
                r.consistency_term,
                r.reg_term,
                r.gamma,
                r.step_size,
                r.kind.as_str()
            );
        }
        s
    }
}
