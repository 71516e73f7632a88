use super::{
    drive, exploration_due, ExploitationKind, ExplorationKind, PesoConfig, Recorder, RestartRecord, RunResult,
};
use crate::error::Result;
use crate::linalg::{svd_top_r, Matrix};
use crate::optim::{sgd_step, AdamState};
use crate::problems::{spectral_grads, GradientOracle, Objective};
use crate::subspace::SpectralAdapter;

/// PESO-LoRA-T: `W = W₀ + U·diag(ξ)·V` with `U, V` seeded from the top-r SVD
/// of `−∇ℓ(W₀)` and `ξ₀ = 0`. The bases move only at exploration steps; `ξ`
/// moves every step.
pub fn run_peso_lora_t(objective: &dyn Objective, config: &PesoConfig) -> Result<RunResult> {
    let (m, n) = objective.shape();
    config.validate((m, n))?;
    let r = config.rank;
    let oracle = GradientOracle::new(objective, config.noise);
    let w0 = objective.initial_point();
    let g0 = oracle.sample(&w0, 0, 0).observed;
    let f = svd_top_r(&g0, r)?;
    let mut adapter = SpectralAdapter::new(f.u.scale(-1.0), vec![0.0; r], f.vt.clone())?;
    let mut st_u = AdamState::new(m, r, &config.adam);
    let mut st_v = AdamState::new(r, n, &config.adam);
    let mut st_xi = AdamState::new(r, 1, &config.adam);
    let mut rec = Recorder::new(objective, &w0, config);
    let mut explorations = 0usize;

    let abort = drive(config.total_steps, |k| {
        let lr = config.inner_lr.lr_at(k);
        let mut restart = None;
        let cap_ok = config.max_restarts.is_none_or(|c| explorations < c);
        if config.exploration != ExplorationKind::None && cap_ok && exploration_due(k, config.frequency) {
            let loss_before = rec.prev_loss();
            let w = &w0 + &adapter.increment();
            let sample = oracle.sample(&w, k, 0);
            let (gu, _, gv) = spectral_grads(&sample.observed, &adapter)?;
            match config.exploitation {
                ExploitationKind::AdamW => {
                    st_u.step(&mut adapter.u, &gu, lr)?;
                    st_v.step(&mut adapter.v, &gv, lr)?;
                }
                ExploitationKind::Sgd => {
                    sgd_step(&mut adapter.u, &gu, lr)?;
                    sgd_step(&mut adapter.v, &gv, lr)?;
                }
            }
            restart = Some(RestartRecord {
                step: k,
                kind: ExplorationKind::WarmStartBases,
                loss_before,
                loss_after: objective.loss(&(&w0 + &adapter.increment())),
                grad_norm: sample.exact.frobenius_norm(),
                proj_norm: None,
                delta: None,
                eta: Some(lr),
                degenerate: false,
                notes: Vec::new(),
            });
            explorations += 1;
        }

        let w = &w0 + &adapter.increment();
        let g = oracle.sample(&w, k, 1).observed;
        let (_, gxi, _) = spectral_grads(&g, &adapter)?;
        let mut xi = Matrix::column_vector(&adapter.xi);
        let gxi = Matrix::column_vector(&gxi);
        match config.exploitation {
            ExploitationKind::AdamW => st_xi.step(&mut xi, &gxi, lr)?,
            ExploitationKind::Sgd => sgd_step(&mut xi, &gxi, lr)?,
        }
        adapter.xi = xi.into_data();
        rec.record(k, &(&w0 + &adapter.increment()), restart)
    });
    let final_w = &w0 + &adapter.increment();
    Ok(rec.finish(final_w, abort))
}
