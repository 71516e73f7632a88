//! Subspace mechanics: anchored-state bookkeeping, projections, restart
//! construction from the full gradient, and the smoothed (basis- and
//! scale-aligned) restart.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{
    orthogonal_procrustes, polar_refactor, qr_thin, svd_top_r, Matrix, SvdFactors, Tolerances,
};

/// Accumulated baseline `W̃` together with the untouched starting weights.
#[derive(Clone, Debug, PartialEq)]
pub struct AnchoredState {
    w_tilde: Matrix,
    origin: Matrix,
    absorbed: Matrix,
    absorb_count: usize,
}

impl AnchoredState {
    pub fn new(origin: Matrix) -> Self {
        let (m, n) = origin.shape();
        Self {
            w_tilde: origin.clone(),
            origin,
            absorbed: Matrix::zeros(m, n),
            absorb_count: 0,
        }
    }

    pub fn w_tilde(&self) -> &Matrix {
        &self.w_tilde
    }

    pub fn origin(&self) -> &Matrix {
        &self.origin
    }

    /// Sum of all absorbed increments, kept independently of `w_tilde`.
    pub fn absorbed_total(&self) -> &Matrix {
        &self.absorbed
    }

    pub fn absorb_count(&self) -> usize {
        self.absorb_count
    }

    /// `max |w̃ − (origin + Σ increments)|`.
    pub fn shadow_drift(&self) -> f64 {
        self.w_tilde.max_abs_diff(&(&self.origin + &self.absorbed))
    }

    /// `W̃ ← W̃ + increment`.
    pub fn absorb(&mut self, increment: &Matrix) -> Result<()> {
        let (m, n) = self.w_tilde.shape();
        increment.ensure_shape("absorb", m, n)?;
        self.w_tilde.axpy(1.0, increment);
        self.absorbed.axpy(1.0, increment);
        self.absorb_count += 1;
        debug_assert!(
            self.shadow_drift() <= 1e-9 * (1.0 + self.absorbed.max_abs()),
            "anchored state drifted from its shadow accumulator"
        );
        Ok(())
    }
}

/// Functional form of [`AnchoredState::absorb`].
pub fn absorb(anchored: &AnchoredState, increment: &Matrix) -> Result<AnchoredState> {
    let mut next = anchored.clone();
    next.absorb(increment)?;
    Ok(next)
}

/// LoRA factors realizing the increment `a·b`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdapterPair {
    pub a: Matrix,
    pub b: Matrix,
    pub gamma: f64,
}

impl AdapterPair {
    pub fn new(a: Matrix, b: Matrix, gamma: f64) -> Result<Self> {
        if a.cols() != b.rows() {
            return Err(Error::shape(
                "AdapterPair",
                format!("a cols == b rows ({})", a.cols()),
                format!("{}", b.rows()),
            ));
        }
        if !(gamma > 0.0) {
            return Err(Error::param(format!(
                "adapter scale gamma must be > 0, got {gamma}"
            )));
        }
        Ok(Self { a, b, gamma })
    }

    pub fn zeros(m: usize, n: usize, rank: usize, gamma: f64) -> Self {
        Self {
            a: Matrix::zeros(m, rank),
            b: Matrix::zeros(rank, n),
            gamma,
        }
    }

    pub fn rank(&self) -> usize {
        self.a.cols()
    }

    pub fn product(&self) -> Matrix {
        self.a.matmul(&self.b)
    }

    pub fn is_zero(&self) -> bool {
        self.a.max_abs() == 0.0 || self.b.max_abs() == 0.0
    }
}

/// `(U, ξ, V)` realizing `U·diag(ξ)·V`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpectralAdapter {
    pub u: Matrix,
    pub xi: Vec<f64>,
    pub v: Matrix,
}

impl SpectralAdapter {
    pub fn new(u: Matrix, xi: Vec<f64>, v: Matrix) -> Result<Self> {
        if u.cols() != xi.len() || v.rows() != xi.len() {
            return Err(Error::shape(
                "SpectralAdapter",
                format!("rank {}", xi.len()),
                format!("u {:?}, v {:?}", u.shape(), v.shape()),
            ));
        }
        Ok(Self { u, xi, v })
    }

    pub fn rank(&self) -> usize {
        self.xi.len()
    }

    pub fn increment(&self) -> Matrix {
        self.u.mul_diag_right(&self.xi).matmul(&self.v)
    }
}

/// Left projection basis `P` (m×r, orthonormal columns).
#[derive(Clone, Debug, PartialEq)]
pub struct ProjectedSubspace {
    p: Matrix,
}

impl ProjectedSubspace {
    pub fn new(p: Matrix) -> Result<Self> {
        let err = p.orthonormal_columns_error();
        if err > Tolerances::default().reconstruction {
            return Err(Error::param(format!(
                "projection basis not orthonormal (deviation {err:e})"
            )));
        }
        Ok(Self { p })
    }

    /// Left singular vectors of the top-`r` SVD of `g`.
    pub fn from_gradient(g: &Matrix, r: usize) -> Result<Self> {
        Ok(Self {
            p: svd_top_r(g, r)?.u,
        })
    }

    pub fn basis(&self) -> &Matrix {
        &self.p
    }

    pub fn rank(&self) -> usize {
        self.p.cols()
    }

    /// `P·Pᵀ·g`
    pub fn project(&self, g: &Matrix) -> Matrix {
        self.p.matmul(&self.p.t_matmul(g))
    }
}

/// EMA weights for the smoothed restart.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SmoothingConfig {
    /// Weight on the old bases.
    pub tau1: f64,
    /// Weight on the old adapter's core.
    pub tau2: f64,
}

impl Default for SmoothingConfig {
    fn default() -> Self {
        Self { tau1: 0.9, tau2: 0.9 }
    }
}

/// Two-sided projection `u·uᵀ·g·vᵀ·v` onto `{u·C·v}`.
pub fn project_svd_subspace(g: &Matrix, u: &Matrix, v: &Matrix) -> Result<Matrix> {
    let (m, n) = g.shape();
    let r = u.cols();
    u.ensure_shape("project_svd_subspace(u)", m, r)?;
    v.ensure_shape("project_svd_subspace(v)", r, n)?;
    let tol = Tolerances::default().orthogonality;
    let (eu, ev) = (u.orthonormal_columns_error(), v.orthonormal_rows_error());
    if eu > tol || ev > tol {
        return Err(Error::param(format!(
            "projection factors not orthonormal (u {eu:e}, v {ev:e})"
        )));
    }
    let core = u.t_matmul(g).matmul_t(v);
    Ok(u.matmul(&core).matmul(v))
}

/// `δ = ‖g − projection‖_F`.
pub fn subspace_distance(g: &Matrix, projection: &Matrix) -> f64 {
    (g - projection).frobenius_norm()
}

/// A restart built from the full gradient.
#[derive(Clone, Debug)]
pub struct GradientRestart {
    pub adapter: AdapterPair,
    /// Top-r SVD of `g` (not of `−g`).
    pub factors: SvdFactors,
    /// Gradient was exactly zero; the adapters are zero too.
    pub degenerate: bool,
}

/// Adapters with `a·b = −(1/γ)·svd_top_r(g, r)`, i.e. a projected gradient
/// step of size `1/γ` written into a fresh adapter pair.
///
/// Built from the SVD of `−g`: `a = U√Λ/√γ`, `b = √Λ·Vᵀ/√γ`.
pub fn restart_adapters_from_gradient(g: &Matrix, r: usize, gamma: f64) -> Result<GradientRestart> {
    if !(gamma > 0.0) || !gamma.is_finite() {
        return Err(Error::param(format!("restart gamma must be > 0, got {gamma}")));
    }
    let factors = svd_top_r(g, r)?;
    let (m, n) = g.shape();
    if factors.sigma[0] == 0.0 {
        return Ok(GradientRestart {
            adapter: AdapterPair::zeros(m, n, r, gamma),
            factors,
            degenerate: true,
        });
    }
    // SVD(−g) shares singular values with g; flip the left vectors.
    let root: Vec<f64> = factors.sigma.iter().map(|s| (s / gamma).sqrt()).collect();
    let a = factors.u.mul_diag_right(&root).scale(-1.0);
    let b = factors.vt.mul_diag_left(&root);
    Ok(GradientRestart {
        adapter: AdapterPair { a, b, gamma },
        factors,
        degenerate: false,
    })
}

/// Orthogonal-factor restart increment `−η·U_r·V_rᵀ` (unit spectrum).
pub fn muon_style_restart(g: &Matrix, r: usize, eta: f64) -> Result<Matrix> {
    let f = svd_top_r(g, r)?;
    let (m, n) = g.shape();
    if f.sigma[0] == 0.0 {
        return Ok(Matrix::zeros(m, n));
    }
    // Directions with vanishing singular value carry no gradient information.
    let guard = f.sigma[0] * 1e-12;
    let ones: Vec<f64> = f
        .sigma
        .iter()
        .map(|&s| if s > guard { -eta } else { 0.0 })
        .collect();
    Ok(f.u.mul_diag_right(&ones).matmul(&f.vt))
}

/// Output of [`smooth_restart`].
#[derive(Clone, Debug)]
pub struct SmoothRestart {
    pub adapter: AdapterPair,
    /// `Q_Aᵀ·U_ema`, used to rotate `m_A`.
    pub t_a: Matrix,
    /// `Q_Bᵀ·V_ema`, used to rotate `m_B`.
    pub t_b: Matrix,
    /// `U_ema` (m×r) and `V_ema` (n×r).
    pub u_ema: Matrix,
    pub v_ema: Matrix,
    /// Smoothed core `S_new`.
    pub core: Matrix,
    /// Top-r SVD of the gradient.
    pub factors: SvdFactors,
    pub flags: SmoothFlags,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct SmoothFlags {
    /// Adapter was zero; fell back to the plain gradient restart.
    pub fallback: bool,
    pub qr_rank_deficient: bool,
    pub procrustes_rank_deficient: bool,
    /// Some singular value of the refactorized core was zero.
    pub core_rank_collapsed: bool,
}

/// Basis- and scale-aligned restart of an adapter pair against gradient `g`.
///
/// 1. thin QR `A = Q_A R_A`, `Bᵀ = Q_B R_Bᵀ`;
/// 2. top-r SVD `−g ≈ U Σ Vᵀ`;
/// 3. Procrustes-align `U` to `Q_A` and `V` to `Q_B`;
/// 4. EMA of bases with weight `tau1`;
/// 5. core `S = τ₂·U_emaᵀ(AB)V_ema − (1−τ₂)·U_emaᵀ g V_ema`;
/// 6. `S = R_L Σ' R_Rᵀ`, balanced split `A = U_ema R_L Σ'^½`, `B = Σ'^½ R_Rᵀ V_emaᵀ`.
///
/// A zero adapter falls back to [`restart_adapters_from_gradient`] with the
/// adapter's own `gamma`, returning identity rotations.
pub fn smooth_restart(adapter: &AdapterPair, g: &Matrix, cfg: &SmoothingConfig) -> Result<SmoothRestart> {
    let r = adapter.rank();
    let (m, n) = g.shape();
    adapter.a.ensure_shape("smooth_restart(a)", m, r)?;
    adapter.b.ensure_shape("smooth_restart(b)", r, n)?;

    if adapter.is_zero() {
        let plain = restart_adapters_from_gradient(g, r, adapter.gamma)?;
        return Ok(SmoothRestart {
            adapter: plain.adapter,
            t_a: Matrix::identity(r),
            t_b: Matrix::identity(r),
            u_ema: plain.factors.u.scale(-1.0),
            v_ema: plain.factors.v(),
            core: Matrix::from_diag(&plain.factors.sigma).scale(1.0 / adapter.gamma),
            factors: plain.factors,
            flags: SmoothFlags {
                fallback: true,
                ..SmoothFlags::default()
            },
        });
    }

    let mut flags = SmoothFlags::default();
    let qa = qr_thin(&adapter.a)?;
    let qb = qr_thin(&adapter.b.transpose())?;
    flags.qr_rank_deficient = qa.rank_deficient || qb.rank_deficient;

    let factors = svd_top_r(g, r)?;
    // −g ≈ (−U_g) Σ V_gᵀ
    let u_new = factors.u.scale(-1.0);
    let v_new = factors.v();

    let align_u = orthogonal_procrustes(&u_new, &qa.q)?;
    let align_v = orthogonal_procrustes(&v_new, &qb.q)?;
    flags.procrustes_rank_deficient = align_u.rank_deficient || align_v.rank_deficient;
    let u_hat = u_new.matmul_t(&align_u.rotation);
    let v_hat = v_new.matmul_t(&align_v.rotation);

    let tau1 = cfg.tau1;
    let u_ema = &qa.q.scale(tau1) + &u_hat.scale(1.0 - tau1);
    let v_ema = &qb.q.scale(tau1) + &v_hat.scale(1.0 - tau1);

    let old = adapter.product();
    let old_core = u_ema.t_matmul(&old).matmul(&v_ema);
    let grad_core = u_ema.t_matmul(g).matmul(&v_ema);
    let core = &old_core.scale(cfg.tau2) - &grad_core.scale(1.0 - cfg.tau2);

    let split = polar_refactor(&core)?;
    flags.core_rank_collapsed = split.sigma.contains(&0.0);
    let root: Vec<f64> = split.sigma.iter().map(|s| s.sqrt()).collect();
    let a_new = u_ema.matmul(&split.r_l).mul_diag_right(&root);
    let b_new = split.r_r.mul_diag_right(&root).transpose().matmul_t(&v_ema);

    Ok(SmoothRestart {
        adapter: AdapterPair {
            a: a_new,
            b: b_new,
            gamma: adapter.gamma,
        },
        t_a: qa.q.t_matmul(&u_ema),
        t_b: qb.q.t_matmul(&v_ema),
        u_ema,
        v_ema,
        core,
        factors,
        flags,
    })
}

/// Projected subspace descent step `w − η·P·Pᵀ·g`.
pub fn galore_step(w: &Matrix, g: &Matrix, p: &ProjectedSubspace, eta: f64) -> Result<Matrix> {
    let (m, n) = w.shape();
    g.ensure_shape("galore_step(g)", m, n)?;
    if p.basis().rows() != m {
        return Err(Error::shape(
            "galore_step(p)",
            format!("{m} rows"),
            format!("{}", p.basis().rows()),
        ));
    }
    let mut out = w.clone();
    out.axpy(-eta, &p.project(g));
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rand_matrix(m: usize, n: usize, seed: u64) -> Matrix {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        Matrix::from_fn(m, n, |_, _| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn absorb_examples() {
        let mut st = AnchoredState::new(rand_matrix(3, 4, 1));
        let start = st.w_tilde().clone();
        st.absorb(&Matrix::zeros(3, 4)).unwrap();
        assert_eq!(st.w_tilde(), &start);
        let x = rand_matrix(3, 4, 2);
        st.absorb(&x).unwrap();
        st.absorb(&-&x).unwrap();
        assert!(st.w_tilde().max_abs_diff(&start) < 1e-12);
        assert!(st.absorb(&Matrix::zeros(2, 2)).is_err());
        assert_eq!(st.origin(), &start);
    }

    #[test]
    fn projection_examples() {
        let u = Matrix::from_fn(4, 2, |i, j| if i == j { 1.0 } else { 0.0 });
        let v = Matrix::from_fn(2, 3, |i, j| if i == j { 1.0 } else { 0.0 });
        let inside = Matrix::from_fn(4, 3, |i, j| {
            if i < 2 && j < 2 {
                (i + 2 * j + 1) as f64
            } else {
                0.0
            }
        });
        assert_eq!(project_svd_subspace(&inside, &u, &v).unwrap(), inside);
        let outside = Matrix::from_fn(4, 3, |i, j| if i >= 2 || j >= 2 { 1.0 } else { 0.0 });
        assert_eq!(project_svd_subspace(&outside, &u, &v).unwrap().max_abs(), 0.0);
        assert!(project_svd_subspace(&inside, &u.scale(2.0), &v).is_err());
    }

    #[test]
    fn distance_of_diagonal() {
        let g = Matrix::from_diag(&[3.0, 2.0, 1.0]);
        let f = svd_top_r(&g, 2).unwrap();
        let proj = project_svd_subspace(&g, &f.u, &f.vt).unwrap();
        assert!((subspace_distance(&g, &proj) - 1.0).abs() < 1e-15);
        assert_eq!(subspace_distance(&g, &g), 0.0);
    }

    #[test]
    fn restart_sign_and_scale() {
        let gamma = 4.0;
        let g = Matrix::from_diag(&[-gamma * 3.0, -gamma * 2.0, -gamma]);
        let res = restart_adapters_from_gradient(&g, 2, gamma).unwrap();
        let expected = Matrix::from_diag(&[3.0, 2.0, 0.0]);
        assert!(res.adapter.product().max_abs_diff(&expected) < 1e-14);
        assert!(!res.degenerate);
    }

    #[test]
    fn restart_zero_gradient_is_degenerate() {
        let res = restart_adapters_from_gradient(&Matrix::zeros(3, 3), 2, 1.0).unwrap();
        assert!(res.degenerate);
        assert_eq!(res.adapter.product().max_abs(), 0.0);
        assert!(restart_adapters_from_gradient(&Matrix::zeros(3, 3), 2, 0.0).is_err());
    }

    #[test]
    fn muon_examples() {
        let inc = muon_style_restart(&Matrix::from_diag(&[3.0, 2.0]), 2, 1.0).unwrap();
        assert!(inc.max_abs_diff(&Matrix::identity(2).scale(-1.0)) < 1e-15);
        let rank1 = Matrix::from_fn(4, 3, |i, j| (i + 1) as f64 * (j as f64 - 0.7));
        let inc = muon_style_restart(&rank1, 2, 0.3).unwrap();
        assert!((inc.frobenius_norm() - 0.3).abs() < 1e-12);
    }

    #[test]
    fn smooth_restart_falls_back_on_zero_adapter() {
        let g = rand_matrix(5, 4, 3);
        let res = smooth_restart(&AdapterPair::zeros(5, 4, 2, 2.0), &g, &SmoothingConfig::default()).unwrap();
        assert!(res.flags.fallback);
        let plain = restart_adapters_from_gradient(&g, 2, 2.0).unwrap();
        assert!(res.adapter.product().max_abs_diff(&plain.adapter.product()) < 1e-14);
        assert_eq!(res.t_a, Matrix::identity(2));
    }

    #[test]
    fn smooth_restart_with_unit_taus_reproduces_adapter() {
        let adapter = AdapterPair::new(rand_matrix(6, 2, 4), rand_matrix(2, 5, 5), 1.0).unwrap();
        let g = rand_matrix(6, 5, 6);
        let cfg = SmoothingConfig { tau1: 1.0, tau2: 1.0 };
        let res = smooth_restart(&adapter, &g, &cfg).unwrap();
        assert!(res.adapter.product().max_abs_diff(&adapter.product()) < 1e-9);
    }

    #[test]
    fn galore_axis_projection() {
        let p = ProjectedSubspace::new(Matrix::from_fn(3, 1, |i, _| if i == 0 { 1.0 } else { 0.0 })).unwrap();
        let w = Matrix::from_fn(3, 2, |i, j| (i + j) as f64);
        let g = Matrix::from_fn(3, 2, |i, j| if i == 0 { (j + 1) as f64 } else { 5.0 });
        let next = galore_step(&w, &g, &p, 0.1).unwrap();
        for i in 1..3 {
            assert_eq!(next.row(i), w.row(i));
        }
        assert!((next[(0, 1)] - (w[(0, 1)] - 0.2)).abs() < 1e-15);
        assert!(ProjectedSubspace::new(Matrix::from_fn(3, 1, |_, _| 1.0)).is_err());
    }
}
