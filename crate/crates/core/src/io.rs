//! CSV and JSON writers for traces, scans, logs, and solutions.
//!
//! Every float is written with [`fmt_f64`], so reruns with the same seed give
//! byte-identical files.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::aden::LogRow;
use crate::anneal::TraceEntry;
use crate::error::{Error, Result};
use crate::model::{fmt_f64, AssignmentPolicy, ClusterSet};
use crate::phase::{PhaseRow, TransitionEvent};

fn csv_err(e: csv::Error) -> Error {
    Error::invalid(format!("csv: {e}"))
}

fn finish<W: Write>(mut w: csv::Writer<W>) -> Result<()> {
    w.flush()?;
    Ok(())
}

/// Annealing trace. With `q_errors`, a `q_error` column is appended.
pub fn write_trace_csv<W: Write>(out: W, trace: &[TraceEntry], q_errors: Option<&[f64]>) -> Result<()> {
    if let Some(q) = q_errors {
        if q.len() != trace.len() {
            return Err(Error::DimensionMismatch {
                expected: trace.len(),
                found: q.len(),
                context: "q_error column".into(),
            });
        }
    }
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["beta", "free_energy", "distortion", "delta_y_norm", "path", "transition_flag"];
    if q_errors.is_some() {
        header.push("q_error");
    }
    w.write_record(&header).map_err(csv_err)?;
    for (n, e) in trace.iter().enumerate() {
        let mut rec = vec![
            fmt_f64(e.beta),
            fmt_f64(e.free_energy),
            fmt_f64(e.distortion),
            fmt_f64(e.delta_y_norm),
            e.path.as_str().to_string(),
            u8::from(e.transition_flag).to_string(),
        ];
        if let Some(q) = q_errors {
            rec.push(fmt_f64(q[n]));
        }
        w.write_record(&rec).map_err(csv_err)?;
    }
    finish(w)
}

pub fn write_phase_csv<W: Write>(out: W, rows: &[PhaseRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["beta", "lambda_max", "beta_cr_estimate", "min_hessian_eig", "distinct_centers"])
        .map_err(csv_err)?;
    for r in rows {
        w.write_record([
            fmt_f64(r.beta),
            fmt_f64(r.lambda_max),
            fmt_f64(r.beta_cr_estimate),
            fmt_f64(r.min_hessian_eig),
            r.distinct_centers.to_string(),
        ])
        .map_err(csv_err)?;
    }
    finish(w)
}

pub fn write_transitions_csv<W: Write>(out: W, events: &[TransitionEvent]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["beta", "index", "end_index", "distinct_before", "distinct_after", "delta_y_norm"])
        .map_err(csv_err)?;
    for e in events {
        w.write_record([
            fmt_f64(e.beta),
            e.index.to_string(),
            e.end_index.to_string(),
            e.distinct_before.to_string(),
            e.distinct_after.to_string(),
            fmt_f64(e.delta_y_norm),
        ])
        .map_err(csv_err)?;
    }
    finish(w)
}

/// Training log; the error column is left empty when no reference model was given.
pub fn write_training_log<W: Write>(out: W, log: &[LogRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["beta", "epoch", "loss", "mean_abs_distance_error"])
        .map_err(csv_err)?;
    for r in log {
        w.write_record([
            fmt_f64(r.beta),
            r.epoch.to_string(),
            fmt_f64(r.loss),
            r.mean_abs_distance_error.map(fmt_f64).unwrap_or_default(),
        ])
        .map_err(csv_err)?;
    }
    finish(w)
}

/// Final centers and hardened assignments, optionally with the soft policy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Solution {
    pub centers: Vec<Vec<f64>>,
    pub assignments: Vec<usize>,
    /// Objective of the hardened policy at `centers`, under the true autonomy when known.
    pub distortion: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub policy: Option<Vec<Vec<f64>>>,
}

impl Solution {
    pub fn new(clusters: &ClusterSet, hardened: &AssignmentPolicy, distortion: Option<f64>) -> Self {
        Solution {
            centers: clusters.to_rows(),
            assignments: hardened.assignments(),
            distortion,
            policy: None,
        }
    }

    pub fn with_policy(mut self, policy: &AssignmentPolicy) -> Self {
        self.policy = Some((0..policy.n()).map(|i| (0..policy.k()).map(|j| policy.prob(i, j)).collect()).collect());
        self
    }

    pub fn write_json<W: Write>(&self, mut out: W) -> Result<()> {
        serde_json::to_writer_pretty(&mut out, self).map_err(|e| Error::invalid(e.to_string()))?;
        writeln!(out)?;
        Ok(())
    }
}
