//! Inner optimizers (AdamW, SGD), learning-rate schedules, the β₂ warm-up
//! and restart-time optimizer-state surgery.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{rms_norm, Matrix};

/// Cosine ramp of β₂ from `beta2_min` back to `beta2_final` after a restart.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Beta2Warmup {
    pub beta2_min: f64,
    pub beta2_final: f64,
    pub window: u64,
    pub restart_step: u64,
}

impl Beta2Warmup {
    /// Default ramp (0.95 → 0.999) armed at `restart_step`.
    pub fn new(window: u64, restart_step: u64) -> Self {
        Self {
            beta2_min: 0.95,
            beta2_final: 0.999,
            window,
            restart_step,
        }
    }

    /// Window `⌊K/3⌋` for restart frequency `K`.
    pub fn window_for_frequency(k: u64) -> u64 {
        k / 3
    }
}

/// β₂ at optimizer step `t` (must not precede the restart step).
pub fn beta2_at(schedule: &Beta2Warmup, t: u64) -> Result<f64> {
    if t < schedule.restart_step {
        return Err(Error::param(format!(
            "beta2_at: t={t} precedes restart step {}",
            schedule.restart_step
        )));
    }
    Ok(warmup_value(schedule, t))
}

fn warmup_value(s: &Beta2Warmup, t: u64) -> f64 {
    if s.window == 0 {
        return s.beta2_final;
    }
    let elapsed = t.saturating_sub(s.restart_step);
    if elapsed > s.window {
        return s.beta2_final;
    }
    let phase = std::f64::consts::PI * elapsed as f64 / s.window as f64;
    s.beta2_min + (s.beta2_final - s.beta2_min) * 0.5 * (1.0 - phase.cos())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum Beta2Schedule {
    Constant(f64),
    Warmup(Beta2Warmup),
}

impl Beta2Schedule {
    pub fn value(&self, t: u64) -> f64 {
        match self {
            Beta2Schedule::Constant(b) => *b,
            Beta2Schedule::Warmup(w) => {
                if t < w.restart_step {
                    w.beta2_final
                } else {
                    warmup_value(w, t)
                }
            }
        }
    }

    pub fn final_value(&self) -> f64 {
        match self {
            Beta2Schedule::Constant(b) => *b,
            Beta2Schedule::Warmup(w) => w.beta2_final,
        }
    }
}

/// AdamW hyperparameters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamHyper {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamHyper {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

impl AdamHyper {
    pub fn validate(&self) -> Result<()> {
        let in_unit = |x: f64| x > 0.0 && x < 1.0;
        if !in_unit(self.beta1) {
            return Err(Error::config("optimizer.beta1", "must lie in (0, 1)"));
        }
        if !in_unit(self.beta2) {
            return Err(Error::config("optimizer.beta2", "must lie in (0, 1)"));
        }
        if !(self.eps > 0.0) {
            return Err(Error::config("optimizer.eps", "must be > 0"));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::config("optimizer.weight_decay", "must be >= 0"));
        }
        Ok(())
    }
}

/// First/second moments of one parameter tensor plus the step counter.
///
/// The counter is global to the run and is never reset at restarts; bias
/// correction therefore keeps using it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub m: Matrix,
    pub v: Matrix,
    pub step: u64,
    pub beta1: f64,
    pub beta2: Beta2Schedule,
    pub eps: f64,
    pub weight_decay: f64,
}

impl AdamState {
    pub fn new(rows: usize, cols: usize, hyper: &AdamHyper) -> Self {
        Self {
            m: Matrix::zeros(rows, cols),
            v: Matrix::zeros(rows, cols),
            step: 0,
            beta1: hyper.beta1,
            beta2: Beta2Schedule::Constant(hyper.beta2),
            eps: hyper.eps,
            weight_decay: hyper.weight_decay,
        }
    }

    /// One decoupled-weight-decay Adam step; the state is untouched on error.
    pub fn step(&mut self, param: &mut Matrix, grad: &Matrix, lr: f64) -> Result<()> {
        if grad.shape() != param.shape() || self.m.shape() != param.shape() {
            return Err(Error::shape(
                "adamw_step",
                format!("{:?}", param.shape()),
                format!("grad {:?}, state {:?}", grad.shape(), self.m.shape()),
            ));
        }
        grad.ensure_finite("adamw_step gradient")?;
        if !(lr >= 0.0) || !lr.is_finite() {
            return Err(Error::param(format!(
                "adamw learning rate must be >= 0, got {lr}"
            )));
        }
        let t = self.step + 1;
        let b1 = self.beta1;
        let b2 = self.beta2.value(t);
        let c1 = 1.0 - b1.powi(t as i32);
        let c2 = 1.0 - b2.powi(t as i32);
        let decay = lr * self.weight_decay;
        let (eps, m, v, p) = (self.eps, self.m.data_mut(), self.v.data_mut(), param.data_mut());
        for i in 0..p.len() {
            let g = grad.data()[i];
            m[i] = b1 * m[i] + (1.0 - b1) * g;
            v[i] = b2 * v[i] + (1.0 - b2) * g * g;
            let m_hat = m[i] / c1;
            let v_hat = v[i] / c2;
            p[i] = p[i] - decay * p[i] - lr * m_hat / (v_hat.sqrt() + eps);
        }
        self.step = t;
        Ok(())
    }

    /// Re-arms the β₂ warm-up so the next step uses `beta2_min`.
    pub fn arm_beta2_warmup(&mut self, beta2_min: f64, window: u64) {
        self.beta2 = Beta2Schedule::Warmup(Beta2Warmup {
            beta2_min,
            beta2_final: self.beta2.final_value(),
            window,
            restart_step: self.step + 1,
        });
    }
}

/// Free-function form of [`AdamState::step`].
pub fn adamw_step(state: &mut AdamState, param: &mut Matrix, grad: &Matrix, lr: f64) -> Result<()> {
    state.step(param, grad, lr)
}

/// `param ← param − lr·grad`
pub fn sgd_step(param: &mut Matrix, grad: &Matrix, lr: f64) -> Result<()> {
    if grad.shape() != param.shape() {
        return Err(Error::shape(
            "sgd_step",
            format!("{:?}", param.shape()),
            format!("{:?}", grad.shape()),
        ));
    }
    grad.ensure_finite("sgd_step gradient")?;
    param.axpy(-lr, grad);
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LrKind {
    Constant,
    CosineWithWarmup,
    /// `η_k = η₀ / k`: divergent sum, convergent sum of squares.
    Diminishing,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub kind: LrKind,
    pub base_lr: f64,
    pub warmup_ratio: f64,
    pub total_steps: u64,
}

impl LrSchedule {
    pub fn constant(base_lr: f64) -> Self {
        Self {
            kind: LrKind::Constant,
            base_lr,
            warmup_ratio: 0.0,
            total_steps: 0,
        }
    }

    pub fn diminishing(base_lr: f64) -> Self {
        Self {
            kind: LrKind::Diminishing,
            ..Self::constant(base_lr)
        }
    }

    pub fn cosine(base_lr: f64, warmup_ratio: f64, total_steps: u64) -> Self {
        Self {
            kind: LrKind::CosineWithWarmup,
            base_lr,
            warmup_ratio,
            total_steps,
        }
    }

    /// Learning rate for 1-based step `k`.
    pub fn lr_at(&self, k: u64) -> f64 {
        let k = k.max(1);
        match self.kind {
            LrKind::Constant => self.base_lr,
            LrKind::Diminishing => self.base_lr / k as f64,
            LrKind::CosineWithWarmup => {
                let total = self.total_steps.max(1);
                let warmup = (self.warmup_ratio * total as f64).ceil() as u64;
                if k <= warmup {
                    return self.base_lr * k as f64 / warmup as f64;
                }
                let span = total.saturating_sub(warmup).max(1);
                let progress = ((k - warmup) as f64 / span as f64).min(1.0);
                self.base_lr * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
            }
        }
    }
}

/// Which tensors skipped rescaling because their norm was below the guard.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AlignReport {
    pub guarded: Vec<&'static str>,
}

/// Restart-time surgery on the AdamW states of an adapter pair.
///
/// Rotates the momenta into the new bases (`m_A ← m_A·t_a`,
/// `m_B ← t_bᵀ·m_B`), then rescales each moment so that `rms(m) = rms(g)` and
/// `rms(v) = rms(g)²` against the post-restart gradients, and finally re-arms
/// the β₂ warm-up with the given window.
#[allow(clippy::too_many_arguments)]
pub fn align_states_after_restart(
    state_a: &mut AdamState,
    state_b: &mut AdamState,
    g_a: &Matrix,
    g_b: &Matrix,
    t_a: &Matrix,
    t_b: &Matrix,
    beta2_min: f64,
    window: u64,
) -> Result<AlignReport> {
    let r = t_a.rows();
    t_a.ensure_shape("align_states(t_a)", r, r)?;
    t_b.ensure_shape("align_states(t_b)", r, r)?;
    g_a.ensure_shape("align_states(g_a)", state_a.m.rows(), state_a.m.cols())?;
    g_b.ensure_shape("align_states(g_b)", state_b.m.rows(), state_b.m.cols())?;
    if state_a.m.cols() != r || state_b.m.rows() != r {
        return Err(Error::shape(
            "align_states",
            format!("adapter rank {r}"),
            format!("m_a {:?}, m_b {:?}", state_a.m.shape(), state_b.m.shape()),
        ));
    }

    state_a.m = state_a.m.matmul(t_a);
    state_b.m = t_b.t_matmul(&state_b.m);

    let guard = crate::linalg::Tolerances::default().norm_guard;
    let mut report = AlignReport::default();
    for (label_m, label_v, state, g) in [
        ("m_a", "v_a", &mut *state_a, g_a),
        ("m_b", "v_b", &mut *state_b, g_b),
    ] {
        let g_rms = rms_norm(g)?;
        let v_rms = rms_norm(&state.v)?;
        if v_rms < guard {
            report.guarded.push(label_v);
        } else {
            state.v = state.v.scale(g_rms * g_rms / v_rms);
        }
        let m_rms = rms_norm(&state.m)?;
        if m_rms < guard {
            report.guarded.push(label_m);
        } else {
            state.m = state.m.scale(g_rms / m_rms);
        }
        state.arm_beta2_warmup(beta2_min, window);
    }
    Ok(report)
}
