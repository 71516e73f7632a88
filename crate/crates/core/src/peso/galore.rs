use super::{drive, exploration_due, ExplorationKind, PesoConfig, Recorder, RestartRecord, RunResult};
use crate::error::Result;
use crate::linalg::Matrix;
use crate::optim::AdamState;
use crate::problems::{GradientOracle, Objective};
use crate::subspace::{galore_step, subspace_distance, ProjectedSubspace};

/// Projected-subspace baseline: `W ← W − η·P·Pᵀ·G`, with `P` refreshed from
/// the left singular vectors of the gradient at exploration steps.
///
/// With `galore_adam` the update direction is Adam's, computed on the r×n
/// projected gradient `Pᵀ·G` and lifted back with `P`.
pub fn run_galore_baseline(objective: &dyn Objective, config: &PesoConfig) -> Result<RunResult> {
    let (m, n) = objective.shape();
    config.validate((m, n))?;
    let r = config.rank;
    let oracle = GradientOracle::new(objective, config.noise);
    let mut w = objective.initial_point();
    let mut basis: Option<ProjectedSubspace> = None;
    let mut state = AdamState::new(r, n, &config.adam);
    let mut rec = Recorder::new(objective, &w, config);
    let mut refreshes = 0usize;

    let abort = drive(config.total_steps, |k| {
        let mut restart = None;
        let cap_ok = config.max_restarts.is_none_or(|c| refreshes < c);
        if basis.is_none() || (cap_ok && exploration_due(k, config.frequency)) {
            let sample = oracle.sample(&w, k, 0);
            let p = ProjectedSubspace::from_gradient(&sample.observed, r)?;
            let proj = p.project(&sample.exact);
            restart = Some(RestartRecord {
                step: k,
                kind: ExplorationKind::FullGradientRestart,
                loss_before: rec.prev_loss(),
                loss_after: rec.prev_loss(),
                grad_norm: sample.exact.frobenius_norm(),
                proj_norm: Some(proj.frobenius_norm()),
                delta: Some(subspace_distance(&sample.exact, &proj)),
                eta: None,
                degenerate: false,
                notes: Vec::new(),
            });
            basis = Some(p);
            refreshes += 1;
        }
        let p = basis.as_ref().expect("basis set above");
        let g = oracle.sample(&w, k, 1).observed;
        let lr = config.inner_lr.lr_at(k);
        if config.galore_adam {
            let low = p.basis().t_matmul(&g);
            let mut coords = Matrix::zeros(r, n);
            state.step(&mut coords, &low, lr)?;
            w = &w + &p.basis().matmul(&coords);
        } else {
            w = galore_step(&w, &g, p, lr)?;
        }
        rec.record(k, &w, restart)
    });
    Ok(rec.finish(w, abort))
}
