//! Per-step run traces, their CSV form, and convergence summaries.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const TRACE_HEADER: &str = "step,loss,grad_norm,delta_k,restart,descent_violation,inc_norm,wall_ms";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub step: u64,
    /// Loss at the realized weights after the step.
    pub loss: f64,
    /// Frobenius norm of the exact full gradient at those weights.
    pub grad_norm: f64,
    /// Distance of the exact gradient to the freshly chosen subspace; only
    /// present at restart steps.
    pub delta_k: Option<f64>,
    /// Exploration fired at this step.
    pub restart: bool,
    pub descent_violation: bool,
    /// ‖W_k − W_{k−1}‖_F
    pub inc_norm: f64,
    /// Elapsed wall time; only recorded when asked for since it breaks
    /// byte-level reproducibility.
    pub wall_ms: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RunTrace {
    pub records: Vec<TraceRecord>,
}

fn fmt_f64(x: f64) -> String {
    format!("{x:.16e}")
}

fn parse_f64(cell: &str, line: usize) -> Result<f64> {
    cell.parse::<f64>()
        .map_err(|e| Error::Parse(format!("trace line {line}: `{cell}`: {e}")))
}

fn parse_opt(cell: &str, line: usize) -> Result<Option<f64>> {
    if cell.is_empty() {
        Ok(None)
    } else {
        parse_f64(cell, line).map(Some)
    }
}

fn parse_flag(cell: &str, line: usize) -> Result<bool> {
    match cell {
        "0" => Ok(false),
        "1" => Ok(true),
        other => Err(Error::Parse(format!("trace line {line}: bad flag `{other}`"))),
    }
}

impl RunTrace {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn push(&mut self, record: TraceRecord) {
        self.records.push(record);
    }

    pub fn losses(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.loss).collect()
    }

    pub fn restart_steps(&self) -> Vec<u64> {
        self.records
            .iter()
            .filter(|r| r.restart)
            .map(|r| r.step)
            .collect()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::with_capacity(64 * (self.records.len() + 1));
        out.push_str(TRACE_HEADER);
        out.push('\n');
        for r in &self.records {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{}",
                r.step,
                fmt_f64(r.loss),
                fmt_f64(r.grad_norm),
                r.delta_k.map(fmt_f64).unwrap_or_default(),
                u8::from(r.restart),
                u8::from(r.descent_violation),
                fmt_f64(r.inc_norm),
                r.wall_ms.map(fmt_f64).unwrap_or_default(),
            );
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<RunTrace> {
        let mut lines = text.lines().enumerate();
        match lines.next() {
            Some((_, h)) if h.trim_end() == TRACE_HEADER => {}
            Some((_, h)) => return Err(Error::Parse(format!("unexpected trace header `{h}`"))),
            None => return Err(Error::Parse("empty trace".into())),
        }
        let mut records = Vec::new();
        for (idx, line) in lines {
            let line_no = idx + 1;
            if line.trim().is_empty() {
                continue;
            }
            let cells: Vec<&str> = line.split(',').collect();
            if cells.len() != 8 {
                return Err(Error::Parse(format!(
                    "trace line {line_no}: expected 8 cells, got {}",
                    cells.len()
                )));
            }
            records.push(TraceRecord {
                step: cells[0]
                    .parse()
                    .map_err(|e| Error::Parse(format!("trace line {line_no}: step: {e}")))?,
                loss: parse_f64(cells[1], line_no)?,
                grad_norm: parse_f64(cells[2], line_no)?,
                delta_k: parse_opt(cells[3], line_no)?,
                restart: parse_flag(cells[4], line_no)?,
                descent_violation: parse_flag(cells[5], line_no)?,
                inc_norm: parse_f64(cells[6], line_no)?,
                wall_ms: parse_opt(cells[7], line_no)?,
            });
        }
        Ok(RunTrace { records })
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            if !parent.as_os_str().is_empty() {
                std::fs::create_dir_all(parent)?;
            }
        }
        std::fs::write(path, self.to_csv())?;
        Ok(())
    }
}

/// Condensed view of a trace.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceSummary {
    pub steps: usize,
    /// Minimum exact-gradient norm over all steps (liminf proxy).
    pub min_grad_norm: f64,
    pub argmin_step: u64,
    /// Minimum gradient norm over restart steps only.
    pub min_restart_grad_norm: Option<f64>,
    pub final_loss: f64,
    pub final_grad_norm: f64,
    pub mean_delta: Option<f64>,
    pub terminal_delta: Option<f64>,
    pub restarts: usize,
    pub descent_violations: usize,
}

pub fn trace_summary(trace: &RunTrace) -> Result<ConvergenceSummary> {
    let last = trace
        .records
        .last()
        .ok_or_else(|| Error::param("trace_summary of an empty trace"))?;
    let mut min_grad_norm = f64::INFINITY;
    let mut argmin_step = last.step;
    for r in &trace.records {
        // ties go to the later step
        if r.grad_norm <= min_grad_norm {
            min_grad_norm = r.grad_norm;
            argmin_step = r.step;
        }
    }
    let restart_norms = trace.records.iter().filter(|r| r.restart).map(|r| r.grad_norm);
    let min_restart_grad_norm =
        restart_norms.fold(None, |acc: Option<f64>, x| Some(acc.map_or(x, |a| a.min(x))));
    let deltas: Vec<f64> = trace.records.iter().filter_map(|r| r.delta_k).collect();
    let mean_delta = (!deltas.is_empty()).then(|| deltas.iter().sum::<f64>() / deltas.len() as f64);
    Ok(ConvergenceSummary {
        steps: trace.len(),
        min_grad_norm,
        argmin_step,
        min_restart_grad_norm,
        final_loss: last.loss,
        final_grad_norm: last.grad_norm,
        mean_delta,
        terminal_delta: deltas.last().copied(),
        restarts: trace.records.iter().filter(|r| r.restart).count(),
        descent_violations: trace.records.iter().filter(|r| r.descent_violation).count(),
    })
}
