//! Training drivers: the generic exploration/exploitation loop and the
//! concrete PESO-LoRA-R, PESO-LoRA-T, LoRA and projected-subspace runners.

mod galore;
mod generic;
mod lora;
mod spectral;

pub use galore::run_galore_baseline;
pub use generic::{
    run_peso_generic, AdamWOptimizer, FullGradientRestart, NoExploration, SgdOptimizer, SubspaceMap,
    SubspaceOptimizer, SubspaceState, UpdateSubspace, WarmStartBases,
};
pub use lora::{run_lora_baseline, run_peso_lora_r};
pub use spectral::run_peso_lora_t;

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::harness::trace::{trace_summary, ConvergenceSummary, RunTrace, TraceRecord};
use crate::linalg::{Matrix, Tolerances};
use crate::optim::{AdamHyper, LrSchedule};
use crate::problems::{NoiseModel, Objective};
use crate::subspace::SmoothingConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExplorationKind {
    FullGradientRestart,
    MuonRestart,
    WarmStartBases,
    None,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ExploitationKind {
    AdamW,
    Sgd,
}

/// Everything a driver needs besides the objective.
#[derive(Clone, Debug, PartialEq)]
pub struct PesoConfig {
    /// Exploration fires at steps with `(k − 1) mod K = 0`.
    pub frequency: u64,
    pub total_steps: u64,
    pub exploration: ExplorationKind,
    pub exploitation: ExploitationKind,
    pub rank: usize,
    /// Restart scale: adapters realize a step of size `1/γ` unless a restart
    /// schedule is given.
    pub gamma: f64,
    pub smoothing: Option<SmoothingConfig>,
    pub alignment: bool,
    pub beta2_min: f64,
    pub adam: AdamHyper,
    pub inner_lr: LrSchedule,
    /// Restart step sizes `η_j`, indexed by restart count; `None` means the
    /// constant `1/γ`.
    pub restart_lr: Option<LrSchedule>,
    pub noise: Option<NoiseModel>,
    pub seed: u64,
    pub max_restarts: Option<usize>,
    /// Projected-subspace baseline: Adam on the subspace gradient instead of SGD.
    pub galore_adam: bool,
    pub record_wall_time: bool,
    pub tolerances: Tolerances,
}

impl Default for PesoConfig {
    fn default() -> Self {
        Self {
            frequency: 10,
            total_steps: 1000,
            exploration: ExplorationKind::FullGradientRestart,
            exploitation: ExploitationKind::AdamW,
            rank: 3,
            gamma: 2.0,
            smoothing: None,
            alignment: false,
            beta2_min: 0.95,
            adam: AdamHyper::default(),
            inner_lr: LrSchedule::constant(1e-2),
            restart_lr: None,
            noise: None,
            seed: 0,
            max_restarts: None,
            galore_adam: false,
            record_wall_time: false,
            tolerances: Tolerances::default(),
        }
    }
}

impl PesoConfig {
    pub fn validate(&self, shape: (usize, usize)) -> Result<()> {
        if self.frequency == 0 {
            return Err(Error::config("method.K", "restart frequency K must be >= 1"));
        }
        if self.total_steps == 0 {
            return Err(Error::config("total_steps", "must be >= 1"));
        }
        let p = shape.0.min(shape.1);
        if self.rank == 0 || self.rank > p {
            return Err(Error::config(
                "method.r",
                format!("rank must lie in 1..={p} for a {}x{} problem", shape.0, shape.1),
            ));
        }
        if !(self.gamma > 0.0) || !self.gamma.is_finite() {
            return Err(Error::config("method.gamma", "must be > 0"));
        }
        if !(self.beta2_min > 0.0 && self.beta2_min < 1.0) {
            return Err(Error::config("method.beta2_min", "must lie in (0, 1)"));
        }
        if let Some(s) = &self.smoothing {
            for (name, t) in [("method.tau1", s.tau1), ("method.tau2", s.tau2)] {
                if !(0.0..=1.0).contains(&t) {
                    return Err(Error::config(name, "must lie in [0, 1]"));
                }
            }
        }
        if !(self.inner_lr.base_lr >= 0.0) || !self.inner_lr.base_lr.is_finite() {
            return Err(Error::config("optimizer.lr", "must be finite and >= 0"));
        }
        self.adam.validate()
    }

    /// Step size of the `j`-th restart (1-based restart count, not step index).
    pub fn restart_eta(&self, j: u64) -> f64 {
        match &self.restart_lr {
            Some(s) => s.lr_at(j),
            None => 1.0 / self.gamma,
        }
    }

    /// β₂ warm-up window `⌊K/3⌋`.
    pub fn warmup_window(&self) -> u64 {
        self.frequency / 3
    }
}

/// Exploration gate: `(k − 1) mod K = 0` for 1-based `k`.
pub fn exploration_due(k: u64, frequency: u64) -> bool {
    frequency > 0 && k >= 1 && (k - 1).is_multiple_of(frequency)
}

/// What happened at one exploration event.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RestartRecord {
    pub step: u64,
    pub kind: ExplorationKind,
    /// `ℓ(W_{k−1})`
    pub loss_before: f64,
    /// Loss right after the subspace update, before this step's exploitation.
    pub loss_after: f64,
    /// Exact gradient norm at the restart evaluation point.
    pub grad_norm: f64,
    /// `‖P_S(G)‖_F` of the exact gradient.
    pub proj_norm: Option<f64>,
    /// `dist(G, S)` of the exact gradient.
    pub delta: Option<f64>,
    pub eta: Option<f64>,
    pub degenerate: bool,
    pub notes: Vec<String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Abort {
    pub step: u64,
    pub error: Error,
}

#[derive(Clone, Debug)]
pub struct RunResult {
    pub final_w: Matrix,
    pub trace: RunTrace,
    pub restart_steps: Vec<u64>,
    pub restarts: Vec<RestartRecord>,
    pub summary: Option<ConvergenceSummary>,
    /// Set when the run stopped early; the trace holds every completed step.
    pub abort: Option<Abort>,
}

impl RunResult {
    pub fn completed(&self) -> bool {
        self.abort.is_none()
    }

    pub fn final_loss(&self) -> f64 {
        self.summary.as_ref().map_or(f64::NAN, |s| s.final_loss)
    }
}

/// Shared per-step bookkeeping for all drivers.
pub(crate) struct Recorder<'a> {
    objective: &'a dyn Objective,
    tolerances: Tolerances,
    prev_loss: f64,
    prev_w: Matrix,
    started: Option<Instant>,
    trace: RunTrace,
    restarts: Vec<RestartRecord>,
}

impl<'a> Recorder<'a> {
    pub(crate) fn new(objective: &'a dyn Objective, w0: &Matrix, config: &PesoConfig) -> Self {
        Self {
            objective,
            tolerances: config.tolerances.clone(),
            prev_loss: objective.loss(w0),
            prev_w: w0.clone(),
            started: config.record_wall_time.then(Instant::now),
            trace: RunTrace::default(),
            restarts: Vec::new(),
        }
    }

    pub(crate) fn prev_loss(&self) -> f64 {
        self.prev_loss
    }

    pub(crate) fn record(&mut self, step: u64, w: &Matrix, restart: Option<RestartRecord>) -> Result<()> {
        let loss = self.objective.loss(w);
        if !loss.is_finite() {
            return Err(Error::NonFinite(format!("loss at step {step}")));
        }
        let grad_norm = self.objective.gradient(w).frobenius_norm();
        let slack = self.tolerances.descent_rel * self.prev_loss.abs() + self.tolerances.descent_abs;
        let record = TraceRecord {
            step,
            loss,
            grad_norm,
            delta_k: restart.as_ref().and_then(|r| r.delta),
            restart: restart.is_some(),
            descent_violation: loss > self.prev_loss + slack,
            inc_norm: (w - &self.prev_w).frobenius_norm(),
            wall_ms: self.started.map(|t| t.elapsed().as_secs_f64() * 1e3),
        };
        self.trace.push(record);
        if let Some(r) = restart {
            self.restarts.push(r);
        }
        self.prev_loss = loss;
        self.prev_w = w.clone();
        Ok(())
    }

    pub(crate) fn finish(self, final_w: Matrix, abort: Option<Abort>) -> RunResult {
        let summary = trace_summary(&self.trace).ok();
        RunResult {
            final_w,
            restart_steps: self.trace.restart_steps(),
            trace: self.trace,
            restarts: self.restarts,
            summary,
            abort,
        }
    }
}

/// Runs `body` for steps `1..=total`, turning the first error into an abort.
pub(crate) fn drive(total: u64, mut body: impl FnMut(u64) -> Result<()>) -> Option<Abort> {
    for k in 1..=total {
        if let Err(error) = body(k) {
            return Some(Abort { step: k, error });
        }
    }
    None
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gate_arithmetic() {
        assert!(exploration_due(1, 1));
        assert!(exploration_due(1, 7));
        assert!(!exploration_due(2, 7));
        assert!(exploration_due(8, 7));
        assert!(!exploration_due(0, 3));
        assert!(!exploration_due(5, 0));
    }

    #[test]
    fn zero_frequency_is_a_config_error() {
        let cfg = PesoConfig {
            frequency: 0,
            ..PesoConfig::default()
        };
        match cfg.validate((4, 4)) {
            Err(Error::Config { field, .. }) => assert_eq!(field, "method.K"),
            other => panic!("unexpected {other:?}"),
        }
    }
}
