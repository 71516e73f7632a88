//! Dense linear-algebra kernel: matrices, SVD, thin QR, Procrustes alignment
//! and the small-core refactorization used by smoothed restarts.

mod matrix;
mod qr;
mod svd;

pub use matrix::Matrix;
pub use qr::{qr_thin, QrFactors};
pub use svd::{svd_full, svd_top_r, SvdFactors};

pub(crate) use matrix::dot;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Every numeric tolerance the library and its check suites use.
///
/// Factorizations use the defaults; check suites take an instance so single
/// bounds can be overridden (e.g. for fault injection).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Tolerances {
    pub orthogonality: f64,
    pub reconstruction: f64,
    /// Relative reconstruction bound for a full SVD (times ‖a‖_F).
    pub svd_reconstruction_rel: f64,
    /// Relative bound for the Eckart–Young tail identity.
    pub eckart_young_rel: f64,
    pub finite_difference_rel: f64,
    pub finite_difference_step: f64,
    /// Norms below this are treated as zero in state rescaling.
    pub norm_guard: f64,
    /// Relative slack before a loss increase counts as a descent violation.
    pub descent_rel: f64,
    /// Absolute slack paired with `descent_rel`.
    pub descent_abs: f64,
    /// Slack in the restart bracket inequality.
    pub restart_bracket: f64,
}

impl Default for Tolerances {
    fn default() -> Self {
        Self {
            orthogonality: 1e-8,
            reconstruction: 1e-10,
            svd_reconstruction_rel: 1e-9,
            eckart_young_rel: 1e-8,
            finite_difference_rel: 1e-6,
            finite_difference_step: 1e-5,
            norm_guard: 1e-12,
            descent_rel: 1e-12,
            descent_abs: 1e-15,
            restart_bracket: 1e-9,
        }
    }
}

impl Tolerances {
    /// Overrides one named tolerance.
    pub fn set(&mut self, name: &str, value: f64) -> Result<()> {
        let slot = match name {
            "orthogonality" => &mut self.orthogonality,
            "reconstruction" => &mut self.reconstruction,
            "svd_reconstruction_rel" => &mut self.svd_reconstruction_rel,
            "eckart_young_rel" => &mut self.eckart_young_rel,
            "finite_difference_rel" => &mut self.finite_difference_rel,
            "finite_difference_step" => &mut self.finite_difference_step,
            "norm_guard" => &mut self.norm_guard,
            "descent_rel" => &mut self.descent_rel,
            "descent_abs" => &mut self.descent_abs,
            "restart_bracket" => &mut self.restart_bracket,
            other => return Err(Error::param(format!("unknown tolerance `{other}`"))),
        };
        *slot = value;
        Ok(())
    }
}

/// Result of an orthogonal Procrustes alignment.
#[derive(Clone, Debug, PartialEq)]
pub struct Alignment {
    /// Orthogonal r×r matrix `R` such that `source · Rᵀ` best matches `target`.
    pub rotation: Matrix,
    /// The cross product `targetᵀ·source` was singular; rotation on its null
    /// block is an arbitrary (but orthogonal) completion.
    pub rank_deficient: bool,
}

/// Aligns `source` to `target` (both m×r with orthonormal columns).
///
/// With `targetᵀ·source = P Σ Qᵀ` the returned rotation is `P Qᵀ`, and
/// `source · Rᵀ` minimizes `‖source·R − target‖_F` over orthogonal `R`.
pub fn orthogonal_procrustes(source: &Matrix, target: &Matrix) -> Result<Alignment> {
    if source.shape() != target.shape() {
        return Err(Error::shape(
            "orthogonal_procrustes",
            format!("{}x{}", source.rows(), source.cols()),
            format!("{}x{}", target.rows(), target.cols()),
        ));
    }
    let tol = Tolerances::default().orthogonality;
    for (name, m) in [("source", source), ("target", target)] {
        let err = m.orthonormal_columns_error();
        if err > tol {
            return Err(Error::param(format!(
                "procrustes {name} columns not orthonormal (deviation {err:e})"
            )));
        }
    }
    let cross = target.t_matmul(source);
    let f = svd_full(&cross)?;
    let smallest = f.sigma.last().copied().unwrap_or(0.0);
    Ok(Alignment {
        rotation: f.u.matmul(&f.vt),
        rank_deficient: smallest <= Tolerances::default().norm_guard,
    })
}

/// `s = r_l · diag(sigma) · r_rᵀ` for a square core.
#[derive(Clone, Debug, PartialEq)]
pub struct CoreFactors {
    pub r_l: Matrix,
    pub sigma: Vec<f64>,
    pub r_r: Matrix,
}

/// Refactorizes a square core into rotations and a non-negative spectrum.
///
/// Computed as the full SVD of the core.
pub fn polar_refactor(s: &Matrix) -> Result<CoreFactors> {
    if s.rows() != s.cols() {
        return Err(Error::shape(
            "polar_refactor",
            "square core",
            format!("{}x{}", s.rows(), s.cols()),
        ));
    }
    let f = svd_full(s)?;
    Ok(CoreFactors {
        r_r: f.vt.transpose(),
        r_l: f.u,
        sigma: f.sigma,
    })
}

/// Root-mean-square of the entries, `‖a‖_F / sqrt(rows·cols)`.
pub fn rms_norm(a: &Matrix) -> Result<f64> {
    let count = a.rows() * a.cols();
    if count == 0 {
        return Err(Error::param("rms_norm of an empty matrix"));
    }
    Ok((a.frobenius_sq() / count as f64).sqrt())
}
