use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

use super::{
    drive, exploration_due, ExploitationKind, ExplorationKind, PesoConfig, Recorder, RestartRecord, RunResult,
};
use crate::error::{Error, Result};
use crate::linalg::{svd_top_r, Matrix, SvdFactors};
use crate::optim::{align_states_after_restart, sgd_step, AdamState};
use crate::problems::{gaussian_matrix, lora_grads, GradientOracle, Objective};
use crate::subspace::{
    project_svd_subspace, restart_adapters_from_gradient, smooth_restart, subspace_distance, AdapterPair,
    AnchoredState,
};

fn exploit(
    config: &PesoConfig,
    k: u64,
    adapter: &mut AdapterPair,
    st_a: &mut AdamState,
    st_b: &mut AdamState,
    g_a: &Matrix,
    g_b: &Matrix,
) -> Result<()> {
    let lr = config.inner_lr.lr_at(k);
    match config.exploitation {
        ExploitationKind::AdamW => {
            st_a.step(&mut adapter.a, g_a, lr)?;
            st_b.step(&mut adapter.b, g_b, lr)
        }
        ExploitationKind::Sgd => {
            sgd_step(&mut adapter.a, g_a, lr)?;
            sgd_step(&mut adapter.b, g_b, lr)
        }
    }
}

/// Adapters realizing `−η·U_r·V_rᵀ`, split evenly as `√η` per factor.
fn muon_adapters(g: &Matrix, r: usize, eta: f64, gamma: f64) -> Result<(AdapterPair, SvdFactors, bool)> {
    let f = svd_top_r(g, r)?;
    let (m, n) = g.shape();
    if f.sigma[0] == 0.0 {
        return Ok((AdapterPair::zeros(m, n, r, gamma), f, true));
    }
    let guard = f.sigma[0] * 1e-12;
    let root: Vec<f64> = f
        .sigma
        .iter()
        .map(|&s| if s > guard { eta.sqrt() } else { 0.0 })
        .collect();
    let a = f.u.mul_diag_right(&root).scale(-1.0);
    let b = f.vt.mul_diag_left(&root);
    Ok((AdapterPair { a, b, gamma }, f, false))
}

/// PESO-LoRA-R: LoRA adapters that are periodically merged into the frozen
/// weights and re-seeded from the top-r SVD of the full gradient.
///
/// With `exploration = none` this is plain LoRA from zero adapters.
pub fn run_peso_lora_r(objective: &dyn Objective, config: &PesoConfig) -> Result<RunResult> {
    let (m, n) = objective.shape();
    config.validate((m, n))?;
    if config.exploration == ExplorationKind::WarmStartBases {
        return Err(Error::config(
            "method.exploration",
            "warm-start-bases has no meaning for restart adapters; use peso-lora-t",
        ));
    }
    let r = config.rank;
    let oracle = GradientOracle::new(objective, config.noise);
    let mut anchored = AnchoredState::new(objective.initial_point());
    let mut adapter = AdapterPair::zeros(m, n, r, config.gamma);
    let mut st_a = AdamState::new(m, r, &config.adam);
    let mut st_b = AdamState::new(r, n, &config.adam);
    let mut rec = Recorder::new(objective, anchored.w_tilde(), config);
    let mut restarts = 0usize;

    let abort = drive(config.total_steps, |k| {
        let mut restart = None;
        let mut rotation: Option<(Matrix, Matrix)> = None;
        let cap_ok = config.max_restarts.is_none_or(|c| restarts < c);
        let explore = !matches!(config.exploration, ExplorationKind::None);
        if explore && cap_ok && exploration_due(k, config.frequency) {
            let loss_before = rec.prev_loss();
            // The gradient at W̃ after absorbing equals the one at the current
            // realized weights, so it can be taken before touching the state.
            let w = anchored.w_tilde() + &adapter.product();
            let sample = oracle.sample(&w, k, 0);
            let eta = config.restart_eta(restarts as u64 + 1);
            let use_smoothing = config.smoothing.is_some() && !adapter.is_zero();
            // Part of the old product that the new adapter carries forward;
            // only the remainder is absorbed, so W moves by the gradient term alone.
            let mut carried: Option<Matrix> = None;
            let (new_adapter, factors, degenerate, mut notes) = if let (true, Some(s)) =
                (use_smoothing, config.smoothing.as_ref())
            {
                let sm = smooth_restart(&adapter, &sample.observed, s)?;
                let old_core = sm.u_ema.t_matmul(&adapter.product()).matmul(&sm.v_ema);
                carried = Some(sm.u_ema.matmul(&old_core.scale(s.tau2)).matmul_t(&sm.v_ema));
                let mut notes = Vec::new();
                if sm.flags.qr_rank_deficient {
                    notes.push("qr_rank_deficient".to_string());
                }
                if sm.flags.procrustes_rank_deficient {
                    notes.push("procrustes_rank_deficient".to_string());
                }
                if sm.flags.core_rank_collapsed {
                    notes.push("core_rank_collapsed".to_string());
                }
                rotation = Some((sm.t_a, sm.t_b));
                (sm.adapter, sm.factors, false, notes)
            } else if config.exploration == ExplorationKind::MuonRestart {
                let (adapter, factors, degenerate) = muon_adapters(&sample.observed, r, eta, config.gamma)?;
                (adapter, factors, degenerate, Vec::new())
            } else {
                let gr = restart_adapters_from_gradient(&sample.observed, r, 1.0 / eta)?;
                (gr.adapter, gr.factors, gr.degenerate, Vec::new())
            };
            if degenerate {
                // Zero gradient: keep training in the current subspace.
                notes.push("zero_gradient".to_string());
            } else {
                let increment = match &carried {
                    Some(c) => &adapter.product() - c,
                    None => adapter.product(),
                };
                anchored.absorb(&increment)?;
                adapter = new_adapter;
                adapter.gamma = config.gamma;
            }
            let proj = project_svd_subspace(&sample.exact, &factors.u, &factors.vt)?;
            let w_after = anchored.w_tilde() + &adapter.product();
            restart = Some(RestartRecord {
                step: k,
                kind: config.exploration,
                loss_before,
                loss_after: objective.loss(&w_after),
                grad_norm: sample.exact.frobenius_norm(),
                proj_norm: Some(proj.frobenius_norm()),
                delta: Some(subspace_distance(&sample.exact, &proj)),
                eta: Some(eta),
                degenerate,
                notes,
            });
            restarts += 1;
            if config.alignment && !degenerate {
                rotation.get_or_insert_with(|| (Matrix::identity(r), Matrix::identity(r)));
            } else {
                rotation = None;
            }
        }

        let w = anchored.w_tilde() + &adapter.product();
        let g = oracle.sample(&w, k, 1).observed;
        let (g_a, g_b) = lora_grads(&g, &adapter)?;
        if let Some((t_a, t_b)) = rotation {
            let report = align_states_after_restart(
                &mut st_a,
                &mut st_b,
                &g_a,
                &g_b,
                &t_a,
                &t_b,
                config.beta2_min,
                config.warmup_window(),
            )?;
            if let Some(r) = restart.as_mut() {
                r.notes
                    .extend(report.guarded.iter().map(|l| format!("guard:{l}")));
            }
        }
        exploit(config, k, &mut adapter, &mut st_a, &mut st_b, &g_a, &g_b)?;
        let w_new = anchored.w_tilde() + &adapter.product();
        rec.record(k, &w_new, restart)
    });
    let final_w = anchored.w_tilde() + &adapter.product();
    Ok(rec.finish(final_w, abort))
}

/// Plain LoRA: `A ~ N(0, 1/r)`, `B = 0`, frozen base weights, no restarts.
pub fn run_lora_baseline(objective: &dyn Objective, config: &PesoConfig) -> Result<RunResult> {
    let (m, n) = objective.shape();
    config.validate((m, n))?;
    let r = config.rank;
    let oracle = GradientOracle::new(objective, config.noise);
    let w0 = objective.initial_point();
    let mut rng = ChaCha20Rng::seed_from_u64(config.seed);
    let mut adapter = AdapterPair::new(
        gaussian_matrix(m, r, (1.0 / r as f64).sqrt(), &mut rng),
        Matrix::zeros(r, n),
        config.gamma,
    )?;
    let mut st_a = AdamState::new(m, r, &config.adam);
    let mut st_b = AdamState::new(r, n, &config.adam);
    let mut rec = Recorder::new(objective, &w0, config);
    let abort = drive(config.total_steps, |k| {
        let w = &w0 + &adapter.product();
        let g = oracle.sample(&w, k, 1).observed;
        let (g_a, g_b) = lora_grads(&g, &adapter)?;
        exploit(config, k, &mut adapter, &mut st_a, &mut st_b, &g_a, &g_b)?;
        rec.record(k, &(&w0 + &adapter.product()), None)
    });
    let final_w = &w0 + &adapter.product();
    Ok(rec.finish(final_w, abort))
}
