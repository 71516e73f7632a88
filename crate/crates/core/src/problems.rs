//! Desk-scale objectives with exact gradients, adapter chain rules, and the
//! unbiased gradient-noise model used in stochastic runs.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{dot, Matrix};
use crate::subspace::{AdapterPair, SpectralAdapter};

/// A smooth loss over a single m×n weight matrix.
pub trait Objective: Send + Sync {
    fn shape(&self) -> (usize, usize);
    fn loss(&self, w: &Matrix) -> f64;
    fn gradient(&self, w: &Matrix) -> Matrix;
    /// Lipschitz constant of the gradient, when known analytically.
    fn lipschitz_bound(&self) -> Option<f64>;
    /// Starting ("pretrained") weights.
    fn initial_point(&self) -> Matrix;
    fn describe(&self) -> String;
}

/// `ℓ(W) = ‖W − M‖_F²` with `M = a·diag(1,…,1,0,…,0)`.
#[derive(Clone, Debug)]
pub struct QuadraticObjective {
    target: Matrix,
    scale: f64,
    ones: usize,
}

/// Builds the rank-gap quadratic: `n×n`, `rank + 1` leading ones scaled by `a`.
///
/// A rank-`rank` factorization can at best reach loss `a²` on this problem.
pub fn quadratic_objective(a: f64, n: usize, rank: usize) -> Result<QuadraticObjective> {
    if !(a > 0.0) || !a.is_finite() {
        return Err(Error::param(format!("quadratic scale a must be > 0, got {a}")));
    }
    if n < rank + 1 {
        return Err(Error::param(format!(
            "quadratic dimension n={n} must be at least rank+1={}",
            rank + 1
        )));
    }
    let ones = rank + 1;
    let target = Matrix::from_fn(n, n, |i, j| if i == j && i < ones { a } else { 0.0 });
    Ok(QuadraticObjective {
        target,
        scale: a,
        ones,
    })
}

impl QuadraticObjective {
    pub fn target(&self) -> &Matrix {
        &self.target
    }

    pub fn scale(&self) -> f64 {
        self.scale
    }

    pub fn ones(&self) -> usize {
        self.ones
    }

    /// Best loss reachable by a rank-(ones−1) factorization: `a²`.
    pub fn low_rank_floor(&self) -> f64 {
        self.scale * self.scale
    }
}

impl Objective for QuadraticObjective {
    fn shape(&self) -> (usize, usize) {
        self.target.shape()
    }

    fn loss(&self, w: &Matrix) -> f64 {
        (w - &self.target).frobenius_sq()
    }

    fn gradient(&self, w: &Matrix) -> Matrix {
        (w - &self.target).scale(2.0)
    }

    fn lipschitz_bound(&self) -> Option<f64> {
        Some(2.0)
    }

    fn initial_point(&self) -> Matrix {
        Matrix::zeros(self.target.rows(), self.target.cols())
    }

    fn describe(&self) -> String {
        format!(
            "quadratic(a={}, n={}, ones={})",
            self.scale,
            self.target.rows(),
            self.ones
        )
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MlpConfig {
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub output_dim: usize,
    pub samples: usize,
    pub data_seed: u64,
    /// Replace the inputs by zeros (the data term then has no gradient).
    #[serde(default)]
    pub zero_inputs: bool,
}

impl Default for MlpConfig {
    fn default() -> Self {
        Self {
            input_dim: 8,
            hidden_dim: 12,
            output_dim: 3,
            samples: 64,
            data_seed: 7,
            zero_inputs: false,
        }
    }
}

/// Two-layer tanh regression network; only the first-layer weights are free.
///
/// `ŷ = W₂ · tanh(W x)`, loss `(1/N) Σ ‖ŷ − y‖²` over a fixed synthetic set
/// whose targets come from a random teacher of the same architecture.
#[derive(Clone, Debug)]
pub struct MlpObjective {
    inputs: Matrix,  // N × d_in
    targets: Matrix, // N × d_out
    readout: Matrix, // d_out × h, frozen
    init: Matrix,    // h × d_in
    config: MlpConfig,
}

pub fn mlp_objective(config: &MlpConfig) -> Result<MlpObjective> {
    let MlpConfig {
        input_dim,
        hidden_dim,
        output_dim,
        samples,
        ..
    } = *config;
    if input_dim == 0 || hidden_dim == 0 || output_dim == 0 || samples == 0 {
        return Err(Error::param(format!(
            "degenerate mlp sizes in={input_dim} hidden={hidden_dim} out={output_dim} samples={samples}"
        )));
    }
    let mut rng = ChaCha20Rng::seed_from_u64(config.data_seed);
    let mut gauss = |std: f64| -> f64 {
        let z: f64 = StandardNormal.sample(&mut rng);
        z * std
    };
    let inputs = if config.zero_inputs {
        Matrix::zeros(samples, input_dim)
    } else {
        Matrix::from_fn(samples, input_dim, |_, _| gauss(1.0))
    };
    let readout = Matrix::from_fn(output_dim, hidden_dim, |_, _| {
        gauss(1.0 / (hidden_dim as f64).sqrt())
    });
    let teacher = Matrix::from_fn(hidden_dim, input_dim, |_, _| {
        gauss(1.0 / (input_dim as f64).sqrt())
    });
    let init = Matrix::from_fn(hidden_dim, input_dim, |_, _| gauss(0.1));
    let hidden = inputs.matmul_t(&teacher).map(f64::tanh);
    let targets = hidden.matmul_t(&readout);
    Ok(MlpObjective {
        inputs,
        targets,
        readout,
        init,
        config: config.clone(),
    })
}

impl MlpObjective {
    pub fn inputs(&self) -> &Matrix {
        &self.inputs
    }

    pub fn targets(&self) -> &Matrix {
        &self.targets
    }

    /// Dataset as CSV: inputs followed by targets, one sample per row.
    pub fn dataset_csv(&self) -> String {
        let mut out = String::new();
        let header: Vec<String> = (0..self.config.input_dim)
            .map(|i| format!("x{i}"))
            .chain((0..self.config.output_dim).map(|i| format!("y{i}")))
            .collect();
        out.push_str(&header.join(","));
        out.push('\n');
        for s in 0..self.inputs.rows() {
            let cells: Vec<String> = self
                .inputs
                .row(s)
                .iter()
                .chain(self.targets.row(s))
                .map(|x| format!("{x:.16e}"))
                .collect();
            out.push_str(&cells.join(","));
            out.push('\n');
        }
        out
    }

    fn residual(&self, w: &Matrix) -> (Matrix, Matrix) {
        let hidden = self.inputs.matmul_t(w).map(f64::tanh);
        let err = &hidden.matmul_t(&self.readout) - &self.targets;
        (hidden, err)
    }
}

impl Objective for MlpObjective {
    fn shape(&self) -> (usize, usize) {
        (self.config.hidden_dim, self.config.input_dim)
    }

    fn loss(&self, w: &Matrix) -> f64 {
        let (_, err) = self.residual(w);
        err.frobenius_sq() / self.inputs.rows() as f64
    }

    fn gradient(&self, w: &Matrix) -> Matrix {
        let (hidden, err) = self.residual(w);
        let n = self.inputs.rows() as f64;
        // dL/dH = (2/N) E W₂ ; dZ = dH ⊙ (1 − H²) ; dW = dZᵀ X
        let d_hidden = err.matmul(&self.readout).scale(2.0 / n);
        let d_pre = d_hidden.zip_map(&hidden, |d, h| d * (1.0 - h * h));
        d_pre.t_matmul(&self.inputs)
    }

    fn lipschitz_bound(&self) -> Option<f64> {
        None
    }

    fn initial_point(&self) -> Matrix {
        self.init.clone()
    }

    fn describe(&self) -> String {
        format!(
            "mlp(in={}, hidden={}, out={}, samples={})",
            self.config.input_dim, self.config.hidden_dim, self.config.output_dim, self.config.samples
        )
    }
}

/// Chain rule through `W = W̃ + A·B`: returns `(G·Bᵀ, Aᵀ·G)`.
pub fn lora_grads(g: &Matrix, adapter: &AdapterPair) -> Result<(Matrix, Matrix)> {
    let (m, n) = g.shape();
    adapter.a.ensure_shape("lora_grads(a)", m, adapter.rank())?;
    adapter.b.ensure_shape("lora_grads(b)", adapter.rank(), n)?;
    Ok((g.matmul_t(&adapter.b), adapter.a.t_matmul(g)))
}

/// Chain rule through `W = W₀ + U·diag(ξ)·V`.
pub fn spectral_grads(g: &Matrix, adapter: &SpectralAdapter) -> Result<(Matrix, Vec<f64>, Matrix)> {
    let (m, n) = g.shape();
    let r = adapter.rank();
    adapter.u.ensure_shape("spectral_grads(u)", m, r)?;
    adapter.v.ensure_shape("spectral_grads(v)", r, n)?;
    let g_vt = g.matmul_t(&adapter.v); // m×r, column i = G v_iᵀ
    let ut_g = adapter.u.t_matmul(g); // r×n
    let grad_u = g_vt.mul_diag_right(&adapter.xi);
    let grad_v = ut_g.mul_diag_left(&adapter.xi);
    let grad_xi = (0..r).map(|i| dot(ut_g.row(i), adapter.v.row(i))).collect();
    Ok((grad_u, grad_xi, grad_v))
}

/// Zero-mean Gaussian gradient noise with total variance at most `variance_bound`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseModel {
    pub variance_bound: f64,
    pub seed: u64,
}

impl NoiseModel {
    pub fn new(variance_bound: f64, seed: u64) -> Result<Self> {
        if !(variance_bound >= 0.0) || !variance_bound.is_finite() {
            return Err(Error::param(format!(
                "noise variance bound must be finite and >= 0, got {variance_bound}"
            )));
        }
        Ok(Self { variance_bound, seed })
    }

    /// Noisy copy of `g` for draw `slot` of step `k`.
    ///
    /// Each (seed, k, slot) triple selects its own ChaCha stream, so draws do
    /// not depend on evaluation order.
    pub fn perturb(&self, g: &Matrix, k: u64, slot: u64) -> Matrix {
        if self.variance_bound == 0.0 {
            return g.clone();
        }
        let count = (g.rows() * g.cols()) as f64;
        let std = (self.variance_bound / count).sqrt();
        let normal = Normal::new(0.0, std).expect("finite std");
        let mut rng = ChaCha20Rng::seed_from_u64(self.seed);
        rng.set_stream(k.wrapping_mul(16).wrapping_add(slot));
        let mut out = g.clone();
        for x in out.data_mut() {
            *x += normal.sample(&mut rng);
        }
        out
    }
}

/// `g` plus the seeded noise of step `k`.
pub fn noisy_grad(g: &Matrix, noise: &NoiseModel, k: u64) -> Matrix {
    noise.perturb(g, k, 0)
}

/// Gradient access for drivers: exact gradient plus the optional noisy view.
pub struct GradientOracle<'a> {
    pub objective: &'a dyn Objective,
    pub noise: Option<NoiseModel>,
}

pub struct GradientSample {
    /// What the optimizer sees.
    pub observed: Matrix,
    /// Exact full gradient.
    pub exact: Matrix,
}

impl<'a> GradientOracle<'a> {
    pub fn new(objective: &'a dyn Objective, noise: Option<NoiseModel>) -> Self {
        Self { objective, noise }
    }

    pub fn sample(&self, w: &Matrix, k: u64, slot: u64) -> GradientSample {
        let exact = self.objective.gradient(w);
        let observed = match &self.noise {
            Some(n) => n.perturb(&exact, k, slot),
            None => exact.clone(),
        };
        GradientSample { observed, exact }
    }
}

/// Random Gaussian matrix (entries `N(0, std²)`) from a seeded stream.
pub(crate) fn gaussian_matrix(rows: usize, cols: usize, std: f64, rng: &mut impl Rng) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| {
        let z: f64 = StandardNormal.sample(rng);
        z * std
    })
}
