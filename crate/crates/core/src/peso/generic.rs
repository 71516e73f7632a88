use super::{drive, exploration_due, ExplorationKind, PesoConfig, Recorder, RestartRecord, RunResult};
use crate::error::{Error, Result};
use crate::linalg::{svd_top_r, Matrix};
use crate::optim::{sgd_step, AdamHyper, AdamState, LrSchedule};
use crate::problems::{GradientOracle, Objective};
use crate::subspace::{project_svd_subspace, subspace_distance, AnchoredState};

/// How subspace coordinates map into a weight increment.
#[derive(Clone, Debug, PartialEq)]
pub enum SubspaceMap {
    /// `M(ξ) = ξ` (the whole space).
    Full,
    /// `M(ξ) = P·ξ`, `P` m×r.
    Left { p: Matrix },
    /// `M(ξ) = U·C·V`, `U` m×r, `C` r×r, `V` r×n.
    TwoSided { u: Matrix, v: Matrix },
    /// `M(ξ) = U·diag(ξ)·V`, `ξ` stored as an r×1 column.
    Diagonal { u: Matrix, v: Matrix },
    /// `M(A, B) = A·B`.
    Factored,
}

impl SubspaceMap {
    fn coord_shapes(&self, m: usize, n: usize) -> Vec<(usize, usize)> {
        match self {
            SubspaceMap::Full => vec![(m, n)],
            SubspaceMap::Left { p } => vec![(p.cols(), n)],
            SubspaceMap::TwoSided { u, .. } => vec![(u.cols(), u.cols())],
            SubspaceMap::Diagonal { u, .. } => vec![(u.cols(), 1)],
            SubspaceMap::Factored => Vec::new(),
        }
    }
}

/// `W = W̃ + M(ξ)` with its coordinates.
#[derive(Clone, Debug)]
pub struct SubspaceState {
    anchored: AnchoredState,
    map: SubspaceMap,
    coords: Vec<Matrix>,
}

impl SubspaceState {
    pub fn new(w0: Matrix, map: SubspaceMap, coords: Vec<Matrix>) -> Result<Self> {
        let (m, n) = w0.shape();
        match &map {
            SubspaceMap::Factored => {
                if coords.len() != 2 {
                    return Err(Error::param("factored map needs coordinates [A, B]"));
                }
                coords[0].ensure_shape("SubspaceState(A)", m, coords[0].cols())?;
                coords[1].ensure_shape("SubspaceState(B)", coords[0].cols(), n)?;
            }
            SubspaceMap::Left { p } => p.ensure_shape("SubspaceState(P)", m, p.cols())?,
            SubspaceMap::TwoSided { u, v } | SubspaceMap::Diagonal { u, v } => {
                u.ensure_shape("SubspaceState(U)", m, u.cols())?;
                v.ensure_shape("SubspaceState(V)", u.cols(), n)?;
            }
            SubspaceMap::Full => {}
        }
        let shapes = map.coord_shapes(m, n);
        if !shapes.is_empty() {
            if coords.len() != shapes.len() {
                return Err(Error::param("wrong number of coordinate blocks"));
            }
            for (c, (r, s)) in coords.iter().zip(&shapes) {
                c.ensure_shape("SubspaceState(coords)", *r, *s)?;
            }
        }
        Ok(Self {
            anchored: AnchoredState::new(w0),
            map,
            coords,
        })
    }

    /// Full-space state at `w0` with zero coordinates.
    pub fn full(w0: Matrix) -> Self {
        let (m, n) = w0.shape();
        Self::new(w0, SubspaceMap::Full, vec![Matrix::zeros(m, n)]).expect("consistent shapes")
    }

    pub fn anchored(&self) -> &AnchoredState {
        &self.anchored
    }

    pub fn map(&self) -> &SubspaceMap {
        &self.map
    }

    pub fn coords(&self) -> &[Matrix] {
        &self.coords
    }

    pub fn increment(&self) -> Matrix {
        let c = &self.coords;
        match &self.map {
            SubspaceMap::Full => c[0].clone(),
            SubspaceMap::Left { p } => p.matmul(&c[0]),
            SubspaceMap::TwoSided { u, v } => u.matmul(&c[0]).matmul(v),
            SubspaceMap::Diagonal { u, v } => u.mul_diag_right(c[0].data()).matmul(v),
            SubspaceMap::Factored => c[0].matmul(&c[1]),
        }
    }

    pub fn realized(&self) -> Matrix {
        self.anchored.w_tilde() + &self.increment()
    }

    /// Gradient with respect to each coordinate block, given `G = ∇ℓ(W)`.
    pub fn pullback(&self, g: &Matrix) -> Vec<Matrix> {
        let c = &self.coords;
        match &self.map {
            SubspaceMap::Full => vec![g.clone()],
            SubspaceMap::Left { p } => vec![p.t_matmul(g)],
            SubspaceMap::TwoSided { u, v } => vec![u.t_matmul(g).matmul_t(v)],
            SubspaceMap::Diagonal { u, v } => {
                let ut_g = u.t_matmul(g);
                let d: Vec<f64> = (0..u.cols())
                    .map(|i| crate::linalg::dot(ut_g.row(i), v.row(i)))
                    .collect();
                vec![Matrix::column_vector(&d)]
            }
            SubspaceMap::Factored => vec![g.matmul_t(&c[1]), c[0].t_matmul(g)],
        }
    }

    /// Absorbs the current increment and switches to a new map.
    pub fn restart(&mut self, map: SubspaceMap, coords: Vec<Matrix>) -> Result<()> {
        let inc = self.increment();
        let next = SubspaceState::new(self.anchored.w_tilde().clone(), map, coords)?;
        self.anchored.absorb(&inc)?;
        self.map = next.map;
        self.coords = next.coords;
        Ok(())
    }
}

/// Exploration plugin: may change the subspace at gated steps.
pub trait UpdateSubspace {
    fn update(
        &mut self,
        k: u64,
        state: &mut SubspaceState,
        oracle: &GradientOracle<'_>,
    ) -> Result<Option<RestartRecord>>;
}

/// Exploitation plugin: one step on the coordinates.
pub trait SubspaceOptimizer {
    fn step(&mut self, k: u64, coords: &mut [Matrix], grads: &[Matrix]) -> Result<()>;
}

pub struct NoExploration;

impl UpdateSubspace for NoExploration {
    fn update(
        &mut self,
        _: u64,
        _: &mut SubspaceState,
        _: &GradientOracle<'_>,
    ) -> Result<Option<RestartRecord>> {
        Ok(None)
    }
}

/// Restart into the top-r singular subspace of the full gradient at `W̃`.
///
/// The new core is `C = −η·diag(σ)` (or `−η·I` for the orthogonal-factor
/// variant), so the restart itself is a projected gradient step. `eta` is
/// indexed by restart count.
pub struct FullGradientRestart {
    pub rank: usize,
    pub eta: LrSchedule,
    pub muon: bool,
    restarts: u64,
}

impl FullGradientRestart {
    pub fn new(rank: usize, eta: LrSchedule, muon: bool) -> Self {
        Self {
            rank,
            eta,
            muon,
            restarts: 0,
        }
    }

    pub fn restarts(&self) -> u64 {
        self.restarts
    }
}

impl UpdateSubspace for FullGradientRestart {
    fn update(
        &mut self,
        k: u64,
        state: &mut SubspaceState,
        oracle: &GradientOracle<'_>,
    ) -> Result<Option<RestartRecord>> {
        let loss_before = oracle.objective.loss(&state.realized());
        let w = state.realized();
        let sample = oracle.sample(&w, k, 0);
        let f = svd_top_r(&sample.observed, self.rank)?;
        self.restarts += 1;
        let eta = self.eta.lr_at(self.restarts);
        let degenerate = f.sigma[0] == 0.0;
        let guard = f.sigma[0] * 1e-12;
        let core: Vec<f64> = f
            .sigma
            .iter()
            .map(|&s| match (self.muon, s > guard) {
                (true, true) => -eta,
                (true, false) => 0.0,
                (false, _) => -eta * s,
            })
            .collect();
        let proj = project_svd_subspace(&sample.exact, &f.u, &f.vt)?;
        state.restart(
            SubspaceMap::TwoSided {
                u: f.u.clone(),
                v: f.vt.clone(),
            },
            vec![Matrix::from_diag(&core)],
        )?;
        Ok(Some(RestartRecord {
            step: k,
            kind: if self.muon {
                ExplorationKind::MuonRestart
            } else {
                ExplorationKind::FullGradientRestart
            },
            loss_before,
            loss_after: oracle.objective.loss(&state.realized()),
            grad_norm: sample.exact.frobenius_norm(),
            proj_norm: Some(proj.frobenius_norm()),
            delta: Some(subspace_distance(&sample.exact, &proj)),
            eta: Some(eta),
            degenerate,
            notes: Vec::new(),
        }))
    }
}

/// Warm start: a gradient step on the bases, coordinates kept.
pub struct WarmStartBases {
    pub lr: LrSchedule,
}

impl UpdateSubspace for WarmStartBases {
    fn update(
        &mut self,
        k: u64,
        state: &mut SubspaceState,
        oracle: &GradientOracle<'_>,
    ) -> Result<Option<RestartRecord>> {
        let loss_before = oracle.objective.loss(&state.realized());
        let sample = oracle.sample(&state.realized(), k, 0);
        let g = &sample.observed;
        let lr = self.lr.lr_at(k);
        let c = state.coords[0].clone();
        match &mut state.map {
            SubspaceMap::TwoSided { u, v } => {
                // M = U·C·V: ∂/∂U = G·Vᵀ·Cᵀ, ∂/∂V = Cᵀ·Uᵀ·G
                let gu = g.matmul_t(v).matmul_t(&c);
                let gv = c.t_matmul(&u.t_matmul(g));
                sgd_step(u, &gu, lr)?;
                sgd_step(v, &gv, lr)?;
            }
            SubspaceMap::Diagonal { u, v } => {
                let gu = g.matmul_t(v).mul_diag_right(c.data());
                let gv = u.t_matmul(g).mul_diag_left(c.data());
                sgd_step(u, &gu, lr)?;
                sgd_step(v, &gv, lr)?;
            }
            SubspaceMap::Left { p } => {
                let gp = g.matmul_t(&c);
                sgd_step(p, &gp, lr)?;
            }
            SubspaceMap::Full | SubspaceMap::Factored => {}
        }
        Ok(Some(RestartRecord {
            step: k,
            kind: ExplorationKind::WarmStartBases,
            loss_before,
            loss_after: oracle.objective.loss(&state.realized()),
            grad_norm: sample.exact.frobenius_norm(),
            proj_norm: None,
            delta: None,
            eta: Some(lr),
            degenerate: false,
            notes: Vec::new(),
        }))
    }
}

pub struct SgdOptimizer {
    pub lr: LrSchedule,
}

impl SubspaceOptimizer for SgdOptimizer {
    fn step(&mut self, k: u64, coords: &mut [Matrix], grads: &[Matrix]) -> Result<()> {
        let lr = self.lr.lr_at(k);
        for (c, g) in coords.iter_mut().zip(grads) {
            sgd_step(c, g, lr)?;
        }
        Ok(())
    }
}

/// AdamW per coordinate block; states are recreated when a block changes shape.
pub struct AdamWOptimizer {
    pub hyper: AdamHyper,
    pub lr: LrSchedule,
    states: Vec<AdamState>,
}

impl AdamWOptimizer {
    pub fn new(hyper: AdamHyper, lr: LrSchedule) -> Self {
        Self {
            hyper,
            lr,
            states: Vec::new(),
        }
    }
}

impl SubspaceOptimizer for AdamWOptimizer {
    fn step(&mut self, k: u64, coords: &mut [Matrix], grads: &[Matrix]) -> Result<()> {
        let lr = self.lr.lr_at(k);
        let stale = self.states.len() != coords.len()
            || self
                .states
                .iter()
                .zip(coords.iter())
                .any(|(s, c)| s.m.shape() != c.shape());
        if stale {
            self.states = coords
                .iter()
                .map(|c| AdamState::new(c.rows(), c.cols(), &self.hyper))
                .collect();
        }
        for ((s, c), g) in self.states.iter_mut().zip(coords.iter_mut()).zip(grads) {
            s.step(c, g, lr)?;
        }
        Ok(())
    }
}

/// The generic loop: exploration at gated steps, exploitation every step.
///
/// Only `frequency`, `total_steps`, `noise`, `max_restarts`,
/// `record_wall_time` and `tolerances` are read from `config`.
pub fn run_peso_generic(
    objective: &dyn Objective,
    config: &PesoConfig,
    initial: SubspaceState,
    explorer: &mut dyn UpdateSubspace,
    optimizer: &mut dyn SubspaceOptimizer,
) -> Result<RunResult> {
    if config.frequency == 0 {
        return Err(Error::config("method.K", "restart frequency K must be >= 1"));
    }
    if config.total_steps == 0 {
        return Err(Error::config("total_steps", "must be >= 1"));
    }
    if initial.realized().shape() != objective.shape() {
        return Err(Error::shape(
            "run_peso_generic",
            format!("{:?}", objective.shape()),
            format!("{:?}", initial.realized().shape()),
        ));
    }
    let oracle = GradientOracle::new(objective, config.noise);
    let mut state = initial;
    let mut rec = Recorder::new(objective, &state.realized(), config);
    let mut explorations = 0usize;
    let abort = drive(config.total_steps, |k| {
        let mut restart = None;
        let cap_ok = config.max_restarts.is_none_or(|c| explorations < c);
        if cap_ok && exploration_due(k, config.frequency) {
            restart = explorer.update(k, &mut state, &oracle)?;
            if restart.is_some() {
                explorations += 1;
            }
        }
        let g = oracle.sample(&state.realized(), k, 1).observed;
        let grads = state.pullback(&g);
        optimizer.step(k, &mut state.coords, &grads)?;
        rec.record(k, &state.realized(), restart)
    });
    let final_w = state.realized();
    Ok(rec.finish(final_w, abort))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::problems::quadratic_objective;

    #[test]
    fn full_map_sgd_is_gradient_descent() {
        let obj = quadratic_objective(3.0, 5, 2).unwrap();
        let cfg = PesoConfig {
            frequency: 1,
            total_steps: 20,
            ..PesoConfig::default()
        };
        let mut opt = SgdOptimizer {
            lr: LrSchedule::constant(0.1),
        };
        let res = run_peso_generic(
            &obj,
            &cfg,
            SubspaceState::full(obj.initial_point()),
            &mut NoExploration,
            &mut opt,
        )
        .unwrap();
        let mut w = obj.initial_point();
        for _ in 0..20 {
            let g = obj.gradient(&w);
            w.axpy(-0.1, &g);
        }
        assert!(res.final_w.max_abs_diff(&w) < 1e-12);
    }

    #[test]
    fn restart_preserves_realized_weights() {
        let obj = quadratic_objective(2.0, 4, 1).unwrap();
        let mut st = SubspaceState::full(obj.initial_point());
        st.coords[0] = Matrix::from_fn(4, 4, |i, j| (i + 2 * j) as f64 * 0.1);
        let before = st.realized();
        let mut explorer = FullGradientRestart::new(2, LrSchedule::constant(0.0), false);
        let oracle = GradientOracle::new(&obj, None);
        explorer.update(1, &mut st, &oracle).unwrap();
        assert!(st.realized().max_abs_diff(&before) < 1e-14);
    }
}
