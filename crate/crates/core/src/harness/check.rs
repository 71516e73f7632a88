//! Invariant and theory-diagnostic suites behind the `check` subcommand.

use std::fmt::Write as _;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::linalg::{
    orthogonal_procrustes, polar_refactor, qr_thin, rms_norm, svd_full, svd_top_r, Matrix, Tolerances,
};
use crate::optim::{align_states_after_restart, beta2_at, AdamHyper, AdamState, Beta2Warmup, LrSchedule};
use crate::peso::{
    exploration_due, run_peso_generic, run_peso_lora_r, FullGradientRestart, NoExploration, PesoConfig,
    SgdOptimizer, SubspaceMap, SubspaceState,
};
use crate::problems::{
    lora_grads, mlp_objective, quadratic_objective, spectral_grads, MlpConfig, NoiseModel, Objective,
    QuadraticObjective,
};
use crate::subspace::{
    muon_style_restart, restart_adapters_from_gradient, smooth_restart, AdapterPair, SmoothingConfig,
    SpectralAdapter,
};

pub const SUITES: &[&str] = &[
    "linalg",
    "grads",
    "restart-identity",
    "descent",
    "theorem1",
    "exact-convergence",
    "schedule",
];

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CheckResult {
    pub suite: String,
    pub name: String,
    pub passed: bool,
    pub measured: f64,
    pub bound: f64,
    pub detail: String,
}

#[derive(Clone, Debug, Default, Serialize)]
pub struct CheckReport {
    pub suites: Vec<String>,
    pub results: Vec<CheckResult>,
    pub passed: bool,
}

impl CheckReport {
    pub fn failed(&self) -> Vec<&CheckResult> {
        self.results.iter().filter(|r| !r.passed).collect()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn human_summary(&self) -> String {
        let mut s = String::new();
        for r in &self.results {
            let _ = writeln!(
                s,
                "[{}] {}.{}: measured={:.3e} bound={:.3e}{}",
                if r.passed { "PASS" } else { "FAIL" },
                r.suite,
                r.name,
                r.measured,
                r.bound,
                if r.detail.is_empty() {
                    String::new()
                } else {
                    format!(" ({})", r.detail)
                }
            );
        }
        let failed = self.failed();
        if failed.is_empty() {
            let _ = writeln!(s, "all {} checks passed", self.results.len());
        } else {
            let names: Vec<String> = failed.iter().map(|r| format!("{}.{}", r.suite, r.name)).collect();
            let _ = writeln!(
                s,
                "{} of {} checks failed: {}",
                failed.len(),
                self.results.len(),
                names.join(", ")
            );
        }
        s
    }
}

struct Suite<'a> {
    name: &'static str,
    tol: &'a Tolerances,
    out: Vec<CheckResult>,
}

impl Suite<'_> {
    /// Records `measured ≤ bound`.
    fn at_most(&mut self, name: &str, measured: f64, bound: f64, detail: String) {
        self.out.push(CheckResult {
            suite: self.name.to_string(),
            name: name.to_string(),
            passed: measured <= bound,
            measured,
            bound,
            detail,
        });
    }
}

fn rng(seed: u64) -> ChaCha20Rng {
    ChaCha20Rng::seed_from_u64(seed)
}

fn random_matrix(rows: usize, cols: usize, rng: &mut impl Rng) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| rng.random_range(-1.0..1.0))
}

fn random_orthonormal(rows: usize, cols: usize, rng: &mut impl Rng) -> Matrix {
    qr_thin(&random_matrix(rows, cols, rng)).expect("tall input").q
}

fn linalg_suite(s: &mut Suite) {
    let mut r = rng(11);
    let (mut rec, mut orth, mut order, mut ey, mut lemma) =
        (0.0f64, 0.0f64, 0.0f64, 0.0f64, f64::NEG_INFINITY);
    for _ in 0..200 {
        let m = r.random_range(1..=9);
        let n = r.random_range(1..=9);
        let a = random_matrix(m, n, &mut r);
        let norm = a.frobenius_norm();
        let f = svd_full(&a).expect("finite input");
        rec = rec.max(a.max_abs_diff(&f.reconstruct()) / norm.max(f64::MIN_POSITIVE));
        orth = orth
            .max(f.u.orthonormal_columns_error())
            .max(f.vt.orthonormal_rows_error());
        for w in f.sigma.windows(2) {
            order = order.max(w[1] - w[0]);
        }
        let p = m.min(n);
        let k = r.random_range(1..=p);
        let top = svd_top_r(&a, k).expect("rank in range");
        let resid = (&a - &top.reconstruct()).frobenius_sq();
        let tail: f64 = f.sigma[k..].iter().map(|x| x * x).sum();
        ey = ey.max((resid - tail).abs() / (norm * norm));
        lemma = lemma.max((resid - (1.0 - k as f64 / p as f64) * norm * norm) / (norm * norm));
    }
    s.at_most(
        "svd_reconstruction",
        rec,
        s.tol.svd_reconstruction_rel,
        "200 random matrices".into(),
    );
    s.at_most("svd_orthogonality", orth, s.tol.orthogonality, String::new());
    s.at_most(
        "svd_ordering",
        order,
        0.0,
        "largest increase between consecutive singular values".into(),
    );
    s.at_most("eckart_young_tail", ey, s.tol.eckart_young_rel, String::new());
    s.at_most(
        "two_sided_lemma",
        lemma,
        1e-12,
        "max of (|G-G_r|^2 - (1-r/p)|G|^2)/|G|^2".into(),
    );

    let (mut qr_rec, mut qr_orth) = (0.0f64, 0.0f64);
    for _ in 0..200 {
        let n = r.random_range(1..=6);
        let m = r.random_range(n..=9);
        let a = random_matrix(m, n, &mut r);
        let f = qr_thin(&a).expect("tall input");
        qr_rec = qr_rec.max(a.max_abs_diff(&f.q.matmul(&f.r)));
        qr_orth = qr_orth.max(f.q.orthonormal_columns_error());
    }
    s.at_most("qr_reconstruction", qr_rec, s.tol.reconstruction, String::new());
    s.at_most("qr_orthogonality", qr_orth, s.tol.orthogonality, String::new());

    let mut losses = 0usize;
    for _ in 0..20 {
        let m = r.random_range(3..=8);
        let k = r.random_range(1..=m.min(4));
        let src = random_orthonormal(m, k, &mut r);
        let tgt = random_orthonormal(m, k, &mut r);
        let best = orthogonal_procrustes(&src, &tgt)
            .expect("orthonormal inputs")
            .rotation;
        let res = |q: &Matrix| (&src.matmul_t(q) - &tgt).frobenius_norm();
        let base = res(&best);
        for _ in 0..50 {
            let q = random_orthonormal(k, k, &mut r);
            if res(&q) < base - 1e-12 {
                losses += 1;
            }
        }
    }
    s.at_most(
        "procrustes_optimality",
        losses as f64,
        0.0,
        "sampled rotations beating the solution".into(),
    );

    let mut polar = 0.0f64;
    for _ in 0..50 {
        let k = r.random_range(1..=5);
        let a = random_matrix(k, k, &mut r);
        let f = polar_refactor(&a).expect("square input");
        let back = f.r_l.mul_diag_right(&f.sigma).matmul_t(&f.r_r);
        polar = polar.max(a.max_abs_diff(&back));
    }
    s.at_most(
        "polar_refactor_reconstruction",
        polar,
        s.tol.reconstruction,
        String::new(),
    );
}

/// Central-difference relative error of an analytic gradient.
fn fd_error(f: &dyn Fn(&Matrix) -> f64, x: &Matrix, analytic: &Matrix, h: f64) -> f64 {
    let mut fd = Matrix::zeros(x.rows(), x.cols());
    for i in 0..x.rows() {
        for j in 0..x.cols() {
            let mut p = x.clone();
            p[(i, j)] += h;
            let mut q = x.clone();
            q[(i, j)] -= h;
            fd[(i, j)] = (f(&p) - f(&q)) / (2.0 * h);
        }
    }
    (&fd - analytic).frobenius_norm() / analytic.frobenius_norm().max(1e-8)
}

fn grads_suite(s: &mut Suite) {
    let h = s.tol.finite_difference_step;
    let mut r = rng(23);
    let quad = quadratic_objective(3.0, 5, 2).expect("valid quadratic");
    let mlp = mlp_objective(&MlpConfig {
        input_dim: 4,
        hidden_dim: 5,
        output_dim: 2,
        samples: 12,
        ..MlpConfig::default()
    })
    .expect("valid mlp");
    let (mut e_quad, mut e_mlp, mut e_a, mut e_b, mut e_u, mut e_xi, mut e_v) =
        (0.0f64, 0.0f64, 0.0f64, 0.0f64, 0.0f64, 0.0f64, 0.0f64);
    for _ in 0..20 {
        let w = random_matrix(5, 5, &mut r).scale(2.0);
        e_quad = e_quad.max(fd_error(&|x| quad.loss(x), &w, &quad.gradient(&w), h));
        let wm = random_matrix(5, 4, &mut r);
        e_mlp = e_mlp.max(fd_error(&|x| mlp.loss(x), &wm, &mlp.gradient(&wm), h));

        let base = random_matrix(5, 4, &mut r);
        let a = random_matrix(5, 2, &mut r);
        let b = random_matrix(2, 4, &mut r);
        let adapter = AdapterPair::new(a.clone(), b.clone(), 1.0).expect("shapes agree");
        let g = mlp.gradient(&(&base + &adapter.product()));
        let (ga, gb) = lora_grads(&g, &adapter).expect("shapes agree");
        e_a = e_a.max(fd_error(&|x| mlp.loss(&(&base + &x.matmul(&b))), &a, &ga, h));
        e_b = e_b.max(fd_error(&|x| mlp.loss(&(&base + &a.matmul(x))), &b, &gb, h));

        let u = random_matrix(5, 2, &mut r);
        let v = random_matrix(2, 4, &mut r);
        let xi = vec![r.random_range(-1.0..1.0), r.random_range(-1.0..1.0)];
        let sa = SpectralAdapter::new(u.clone(), xi.clone(), v.clone()).expect("shapes agree");
        let g = mlp.gradient(&(&base + &sa.increment()));
        let (gu, gxi, gv) = spectral_grads(&g, &sa).expect("shapes agree");
        let inc = |u: &Matrix, xi: &[f64], v: &Matrix| &base + &u.mul_diag_right(xi).matmul(v);
        e_u = e_u.max(fd_error(&|x| mlp.loss(&inc(x, &xi, &v)), &u, &gu, h));
        e_v = e_v.max(fd_error(&|x| mlp.loss(&inc(&u, &xi, x)), &v, &gv, h));
        let xm = Matrix::column_vector(&xi);
        e_xi = e_xi.max(fd_error(
            &|x| mlp.loss(&inc(&u, x.data(), &v)),
            &xm,
            &Matrix::column_vector(&gxi),
            h,
        ));
    }
    let tol = s.tol.finite_difference_rel;
    let d = || "20 random points, central differences".to_string();
    s.at_most("quadratic_gradient", e_quad, tol, d());
    s.at_most("mlp_gradient", e_mlp, tol, d());
    s.at_most("lora_grad_a", e_a, tol, d());
    s.at_most("lora_grad_b", e_b, tol, d());
    s.at_most("spectral_grad_u", e_u, tol, d());
    s.at_most("spectral_grad_xi", e_xi, tol, d());
    s.at_most("spectral_grad_v", e_v, tol, d());
}

fn restart_identity_suite(s: &mut Suite) {
    let mut r = rng(37);
    let mut worst = 0.0f64;
    for _ in 0..500 {
        let m = r.random_range(2..=9);
        let n = r.random_range(2..=9);
        let k = r.random_range(1..=m.min(n));
        let gamma = 10f64.powf(r.random_range(-1.0..2.0));
        let g = random_matrix(m, n, &mut r).scale(10f64.powf(r.random_range(-2.0..2.0)));
        let res = restart_adapters_from_gradient(&g, k, gamma).expect("valid restart");
        let target = svd_top_r(&g, k)
            .expect("rank in range")
            .reconstruct()
            .scale(1.0 / gamma);
        worst = worst.max((&res.adapter.product() + &target).frobenius_norm());
    }
    s.at_most(
        "restart_adapters",
        worst,
        s.tol.reconstruction,
        "500 random (g, r, gamma)".into(),
    );

    let mut core = 0.0f64;
    let mut muon = 0.0f64;
    for _ in 0..50 {
        let m = r.random_range(3..=8);
        let n = r.random_range(3..=8);
        let k = r.random_range(1..=m.min(n) - 1);
        let adapter = AdapterPair::new(random_matrix(m, k, &mut r), random_matrix(k, n, &mut r), 2.0)
            .expect("shapes agree");
        let g = random_matrix(m, n, &mut r);
        let sm = smooth_restart(&adapter, &g, &SmoothingConfig::default()).expect("valid smoothing");
        let rebuilt = sm.u_ema.matmul(&sm.core).matmul_t(&sm.v_ema);
        core = core.max(sm.adapter.product().max_abs_diff(&rebuilt));
        let eta = r.random_range(0.1..2.0);
        let inc = muon_style_restart(&g, k, eta).expect("valid restart");
        let sv = svd_top_r(&inc, k).expect("rank in range");
        for x in sv.sigma {
            muon = muon.max((x - eta).abs());
        }
    }
    s.at_most("smooth_restart_core_identity", core, 1e-9, String::new());
    s.at_most("muon_unit_spectrum", muon, 1e-10, String::new());
}

/// Deterministic generic-loop run on the default quadratic with SGD at 1/L.
pub fn descent_run(
    objective: &QuadraticObjective,
    k: u64,
    steps: u64,
    tol: &Tolerances,
) -> Result<crate::peso::RunResult> {
    let l = objective.lipschitz_bound().expect("quadratic has a bound");
    let cfg = PesoConfig {
        frequency: k,
        total_steps: steps,
        tolerances: tol.clone(),
        ..PesoConfig::default()
    };
    let (m, n) = objective.shape();
    let rank = 3.min(m.min(n));
    let init = SubspaceState::new(
        objective.initial_point(),
        SubspaceMap::TwoSided {
            u: Matrix::identity(m).first_columns(rank),
            v: Matrix::identity(n).first_rows(rank),
        },
        vec![Matrix::zeros(rank, rank)],
    )?;
    let mut explorer = FullGradientRestart::new(rank, LrSchedule::constant(1.0 / l), false);
    let mut opt = SgdOptimizer {
        lr: LrSchedule::constant(1.0 / l),
    };
    run_peso_generic(objective, &cfg, init, &mut explorer, &mut opt)
}

fn descent_suite(s: &mut Suite) {
    let q = quadratic_objective(10.0, 16, 3).expect("valid quadratic");
    let l = q.lipschitz_bound().expect("known");
    for k in [1u64, 5, 20] {
        match descent_run(&q, k, 2000, s.tol) {
            Ok(res) => {
                let viol = res.summary.as_ref().map_or(usize::MAX, |x| x.descent_violations);
                s.at_most(
                    &format!("violations_k{k}"),
                    viol as f64,
                    0.0,
                    "2000 steps, SGD at 1/L".into(),
                );
                let worst = res
                    .restarts
                    .iter()
                    .map(|rr| {
                        let p = rr.proj_norm.unwrap_or(0.0);
                        p * p / (2.0 * l) - (rr.loss_before - rr.loss_after)
                    })
                    .fold(f64::NEG_INFINITY, f64::max);
                s.at_most(
                    &format!("restart_bracket_k{k}"),
                    worst,
                    s.tol.restart_bracket,
                    format!("{} restarts", res.restarts.len()),
                );
            }
            Err(e) => s.at_most(&format!("violations_k{k}"), f64::INFINITY, 0.0, e.to_string()),
        }
    }

    // The generic loop without exploration is plain gradient descent.
    let cfg = PesoConfig {
        frequency: 1,
        total_steps: 200,
        ..PesoConfig::default()
    };
    let mut opt = SgdOptimizer {
        lr: LrSchedule::constant(0.1),
    };
    let res = run_peso_generic(
        &q,
        &cfg,
        SubspaceState::full(q.initial_point()),
        &mut NoExploration,
        &mut opt,
    );
    let mut w = q.initial_point();
    for _ in 0..200 {
        let g = q.gradient(&w);
        w.axpy(-0.1, &g);
    }
    let diff = res.map_or(f64::INFINITY, |r| r.final_w.max_abs_diff(&w));
    s.at_most("generic_reduces_to_gd", diff, 1e-12, String::new());
}

/// Stochastic PESO-LoRA-R configuration for the restart-gradient diagnostic.
pub fn stochastic_restart_config(seed: u64) -> PesoConfig {
    PesoConfig {
        frequency: 10,
        total_steps: 2000,
        rank: 3,
        gamma: 2.0,
        restart_lr: Some(LrSchedule::diminishing(0.5)),
        inner_lr: LrSchedule::constant(1e-2),
        noise: Some(NoiseModel {
            variance_bound: 1.0,
            seed,
        }),
        seed,
        ..PesoConfig::default()
    }
}

/// Mean over seeds of (min restart-step gradient norm, terminal δ).
pub fn stochastic_restart_statistic(seeds: std::ops::Range<u64>) -> Result<(f64, f64)> {
    let q = quadratic_objective(10.0, 16, 3)?;
    let count = seeds.end.saturating_sub(seeds.start).max(1) as f64;
    let mut g_sum = 0.0;
    let mut d_sum = 0.0;
    for seed in seeds {
        let res = run_peso_lora_r(&q, &stochastic_restart_config(seed))?;
        if let Some(a) = res.abort {
            return Err(a.error);
        }
        let sum = res.summary.ok_or_else(|| Error::param("empty run"))?;
        g_sum += sum.min_restart_grad_norm.unwrap_or(f64::NAN);
        d_sum += sum.terminal_delta.unwrap_or(f64::NAN);
    }
    Ok((g_sum / count, d_sum / count))
}

fn stochastic_restart_suite(s: &mut Suite) {
    match stochastic_restart_statistic(0..10) {
        Ok((g, d)) => s.at_most(
            "min_grad_vs_terminal_delta",
            g - d,
            0.5,
            format!("mean min restart |G| = {g:.6}, mean terminal delta = {d:.6}, 10 seeds, C = 1"),
        ),
        Err(e) => s.at_most("min_grad_vs_terminal_delta", f64::INFINITY, 0.5, e.to_string()),
    }
}

/// Deterministic PESO-LoRA-R with smoothing and alignment on the default quadratic.
pub fn default_lora_r_config(total_steps: u64) -> PesoConfig {
    PesoConfig {
        frequency: 100,
        total_steps,
        rank: 3,
        gamma: 2.0,
        smoothing: Some(SmoothingConfig::default()),
        alignment: true,
        inner_lr: LrSchedule::constant(1e-2),
        ..PesoConfig::default()
    }
}

fn exact_convergence_suite(s: &mut Suite) {
    let res =
        quadratic_objective(10.0, 16, 3).and_then(|q| run_peso_lora_r(&q, &default_lora_r_config(10_000)));
    match res {
        Ok(r) => {
            let g = r.summary.as_ref().map_or(f64::INFINITY, |x| x.min_grad_norm);
            s.at_most("min_grad_norm", g, 1e-6, "10000 deterministic steps".into());
        }
        Err(e) => s.at_most("min_grad_norm", f64::INFINITY, 1e-6, e.to_string()),
    }
}

fn schedule_suite(s: &mut Suite) {
    let sched = Beta2Warmup::new(30, 5);
    let at = |t| beta2_at(&sched, t).unwrap_or(f64::NAN);
    s.at_most("beta2_start", (at(5) - 0.95).abs(), 0.0, "t = t_r".into());
    s.at_most("beta2_end", (at(35) - 0.999).abs(), 0.0, "t = t_r + T".into());
    s.at_most("beta2_midpoint", (at(20) - 0.9745).abs(), 1e-12, String::new());
    let dips = (5..60).filter(|&t| at(t + 1) < at(t)).count();
    s.at_most("beta2_monotone", dips as f64, 0.0, String::new());

    let mut r = rng(41);
    let (mut m_err, mut v_err) = (0.0f64, 0.0f64);
    for _ in 0..50 {
        let (m, n, k) = (6, 5, 2);
        let hyper = AdamHyper::default();
        let mut sa = AdamState::new(m, k, &hyper);
        let mut sb = AdamState::new(k, n, &hyper);
        sa.m = random_matrix(m, k, &mut r);
        sa.v = random_matrix(m, k, &mut r).map(f64::abs);
        sb.m = random_matrix(k, n, &mut r);
        sb.v = random_matrix(k, n, &mut r).map(f64::abs);
        let ga = random_matrix(m, k, &mut r);
        let gb = random_matrix(k, n, &mut r);
        let ta = random_matrix(k, k, &mut r);
        let tb = random_matrix(k, k, &mut r);
        if align_states_after_restart(&mut sa, &mut sb, &ga, &gb, &ta, &tb, 0.95, 10).is_err() {
            m_err = f64::INFINITY;
            continue;
        }
        for (st, g) in [(&sa, &ga), (&sb, &gb)] {
            let gr = rms_norm(g).unwrap_or(f64::NAN);
            m_err = m_err.max((rms_norm(&st.m).unwrap_or(f64::NAN) - gr).abs());
            v_err = v_err.max((rms_norm(&st.v).unwrap_or(f64::NAN) - gr * gr).abs());
        }
    }
    s.at_most("align_rms_m", m_err, 1e-10, String::new());
    s.at_most("align_rms_v", v_err, 1e-10, String::new());

    let dim = LrSchedule::diminishing(1.0);
    let n = 1_000_000u64;
    let (mut s1, mut s2) = (0.0, 0.0);
    for k in 1..=n {
        let e = dim.lr_at(k);
        s1 += e;
        s2 += e * e;
    }
    let euler = 0.577_215_664_901_532_9;
    s.at_most(
        "diminishing_sum_log",
        (s1 - (n as f64).ln() - euler).abs(),
        1e-5,
        "sum of eta_k against ln N + Euler gamma".into(),
    );
    s.at_most(
        "diminishing_sum_sq",
        (s2 - std::f64::consts::PI.powi(2) / 6.0).abs(),
        1e-5,
        "sum of eta_k^2 against pi^2/6".into(),
    );

    let mut bad = 0usize;
    for k in 1..=7u64 {
        for step in 1..=100u64 {
            if exploration_due(step, k) != ((step - 1) % k == 0) {
                bad += 1;
            }
        }
        let fired = (1..=k + 1).filter(|&t| exploration_due(t, k + 2)).count();
        if fired != 1 {
            bad += 1;
        }
    }
    s.at_most("gate_arithmetic", bad as f64, 0.0, "K in 1..=7".into());
}

/// Runs one suite (or `all`) with the given tolerances.
pub fn run_check(suite: &str, tol: &Tolerances) -> Result<CheckReport> {
    let names: Vec<&'static str> = if suite == "all" {
        SUITES.to_vec()
    } else if let Some(&n) = SUITES.iter().find(|&&n| n == suite) {
        vec![n]
    } else {
        return Err(Error::config(
            "suite",
            format!(
                "unknown suite `{suite}`; expected one of {} or all",
                SUITES.join(", ")
            ),
        ));
    };
    let mut report = CheckReport {
        suites: names.iter().map(|s| s.to_string()).collect(),
        ..CheckReport::default()
    };
    for name in names {
        let mut s = Suite {
            name,
            tol,
            out: Vec::new(),
        };
        match name {
            "linalg" => linalg_suite(&mut s),
            "grads" => grads_suite(&mut s),
            "restart-identity" => restart_identity_suite(&mut s),
            "descent" => descent_suite(&mut s),
            "theorem1" => stochastic_restart_suite(&mut s),
            "exact-convergence" => exact_convergence_suite(&mut s),
            "schedule" => schedule_suite(&mut s),
            _ => unreachable!("suite list is closed"),
        }
        report.results.extend(s.out);
    }
    report.passed = report.results.iter().all(|r| r.passed);
    Ok(report)
}

/// Runs the suite and writes `check_report.json` into `out` when given.
pub fn cli_check(suite: &str, out: Option<&Path>, tol: &Tolerances) -> Result<CheckReport> {
    let report = run_check(suite, tol)?;
    if let Some(dir) = out {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("check_report.json"), report.to_json())?;
    }
    Ok(report)
}
