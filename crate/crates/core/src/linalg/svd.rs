//! One-sided (Hestenes) Jacobi SVD.
//!
//! Deterministic and sweep-ordered, so every trace built on top of it is
//! reproducible bit-for-bit on a given platform. Singular values come out in
//! non-increasing order; equal values keep their Jacobi output order, so only
//! the spanned subspace is meaningful under degeneracy.

use serde::{Deserialize, Serialize};

use super::Matrix;
use crate::error::{Error, Result};

const MAX_SWEEPS: usize = 80;
const ROTATION_TOL: f64 = 1e-15;

/// Thin SVD `a = u · diag(sigma) · vt`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SvdFactors {
    /// m×k, orthonormal columns.
    pub u: Matrix,
    /// k values, non-negative, non-increasing.
    pub sigma: Vec<f64>,
    /// k×n, orthonormal rows.
    pub vt: Matrix,
}

impl SvdFactors {
    pub fn rank(&self) -> usize {
        self.sigma.len()
    }

    /// `u · diag(sigma) · vt`
    pub fn reconstruct(&self) -> Matrix {
        self.u.mul_diag_right(&self.sigma).matmul(&self.vt)
    }

    /// Leading `r` triplets.
    pub fn truncate(&self, r: usize) -> SvdFactors {
        SvdFactors {
            u: self.u.first_columns(r),
            sigma: self.sigma[..r].to_vec(),
            vt: self.vt.first_rows(r),
        }
    }

    /// Right singular vectors as columns (n×k).
    pub fn v(&self) -> Matrix {
        self.vt.transpose()
    }
}

/// Full thin SVD with `k = min(m, n)`.
pub fn svd_full(a: &Matrix) -> Result<SvdFactors> {
    a.ensure_finite("svd_full")?;
    let (m, n) = a.shape();
    let (mut u, sigma, mut vt) = if m >= n {
        let (u, sigma, v) = jacobi_tall(a)?;
        (u, sigma, v.transpose())
    } else {
        // aᵀ = u' Σ v'ᵀ  ⇒  a = v' Σ u'ᵀ
        let (u_t, sigma, v_t) = jacobi_tall(&a.transpose())?;
        (v_t, sigma, u_t.transpose())
    };
    fix_signs(&mut u, &mut vt);
    Ok(SvdFactors { u, sigma, vt })
}

/// Leading-`r` singular triplets; the Frobenius-optimal rank-`r` approximation.
pub fn svd_top_r(a: &Matrix, r: usize) -> Result<SvdFactors> {
    let p = a.rows().min(a.cols());
    if r == 0 || r > p {
        return Err(Error::param(format!(
            "svd rank {r} out of range 1..={p} for {}x{} matrix",
            a.rows(),
            a.cols()
        )));
    }
    Ok(svd_full(a)?.truncate(r))
}

/// Jacobi on a tall (m ≥ n) matrix. Returns (u m×n, sigma, v n×n) with v's
/// columns the right singular vectors.
fn jacobi_tall(a: &Matrix) -> Result<(Matrix, Vec<f64>, Matrix)> {
    let (m, n) = a.shape();
    // Work on a unit-scale copy so tiny or huge inputs neither underflow nor
    // overflow the column inner products.
    let scale = a.max_abs();
    let div = if scale > 0.0 { scale } else { 1.0 };
    let mut cols: Vec<Vec<f64>> = (0..n)
        .map(|j| a.column(j).into_iter().map(|x| x / div).collect())
        .collect();
    let mut vcols: Vec<Vec<f64>> = (0..n)
        .map(|j| (0..n).map(|i| if i == j { 1.0 } else { 0.0 }).collect())
        .collect();

    // Columns below this squared norm are numerically null; rotating them
    // against others only stirs rounding noise.
    let frob_sq: f64 = cols.iter().flatten().map(|x| x * x).sum();
    let negligible = frob_sq * ((m as f64) * f64::EPSILON).powi(2);

    let mut converged = n < 2;
    let mut residual = 0.0;
    for _ in 0..MAX_SWEEPS {
        let mut rotated = false;
        residual = 0.0f64;
        for p in 0..n.saturating_sub(1) {
            for q in p + 1..n {
                let alpha: f64 = cols[p].iter().map(|x| x * x).sum();
                let beta: f64 = cols[q].iter().map(|x| x * x).sum();
                let gamma: f64 = cols[p].iter().zip(&cols[q]).map(|(x, y)| x * y).sum();
                if gamma == 0.0 || alpha.min(beta) <= negligible {
                    continue;
                }
                let off = gamma.abs() / (alpha.sqrt() * beta.sqrt());
                if !(off > ROTATION_TOL) {
                    continue;
                }
                residual = residual.max(off);
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                rotate(&mut cols, p, q, c, s);
                rotate(&mut vcols, p, q, c, s);
            }
        }
        if !rotated {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(Error::Convergence {
            op: "svd",
            sweeps: MAX_SWEEPS,
            residual,
        });
    }

    let norms: Vec<f64> = cols
        .iter()
        .map(|c| c.iter().map(|x| x * x).sum::<f64>().sqrt())
        .collect();
    let mut order: Vec<usize> = (0..n).collect();
    // stable: ties keep Jacobi order
    order.sort_by(|&i, &j| norms[j].total_cmp(&norms[i]));

    let cutoff = negligible.sqrt();

    let mut u = Matrix::zeros(m, n);
    let mut v = Matrix::zeros(n, n);
    let mut sigma = Vec::with_capacity(n);
    let mut deficient = Vec::new();
    for (slot, &j) in order.iter().enumerate() {
        sigma.push(norms[j] * scale);
        v.set_column(slot, &vcols[j]);
        if norms[j] > cutoff && norms[j] > 0.0 {
            let col: Vec<f64> = cols[j].iter().map(|x| x / norms[j]).collect();
            u.set_column(slot, &col);
        } else {
            deficient.push(slot);
        }
    }
    if !deficient.is_empty() {
        complete_basis(&mut u, &deficient);
    }
    Ok((u, sigma, v))
}

fn rotate(cols: &mut [Vec<f64>], p: usize, q: usize, c: f64, s: f64) {
    let (left, right) = cols.split_at_mut(q);
    let cp = &mut left[p];
    let cq = &mut right[0];
    for (x, y) in cp.iter_mut().zip(cq.iter_mut()) {
        let xp = *x;
        let xq = *y;
        *x = c * xp - s * xq;
        *y = s * xp + c * xq;
    }
}

/// Fills the listed columns of `u` with unit vectors orthogonal to every other
/// column, drawn from the standard basis and re-orthogonalized twice.
pub(crate) fn complete_basis(u: &mut Matrix, missing: &[usize]) {
    let (m, k) = u.shape();
    let mut accepted: Vec<Vec<f64>> = (0..k)
        .filter(|j| !missing.contains(j))
        .map(|j| u.column(j))
        .collect();
    for &slot in missing {
        let mut best: Option<(f64, Vec<f64>)> = None;
        for i in 0..m {
            let mut cand = vec![0.0; m];
            cand[i] = 1.0;
            for _ in 0..2 {
                for q in &accepted {
                    let d: f64 = q.iter().zip(&cand).map(|(a, b)| a * b).sum();
                    for (c, qv) in cand.iter_mut().zip(q) {
                        *c -= d * qv;
                    }
                }
            }
            let norm = cand.iter().map(|x| x * x).sum::<f64>().sqrt();
            if best.as_ref().is_none_or(|(b, _)| norm > *b + 1e-12) {
                best = Some((norm, cand));
            }
        }
        let (norm, mut cand) = best.expect("m >= 1");
        for c in &mut cand {
            *c /= norm;
        }
        u.set_column(slot, &cand);
        accepted.push(cand);
    }
}

/// Flips each singular pair so the largest-magnitude entry of the left vector
/// is positive.
fn fix_signs(u: &mut Matrix, vt: &mut Matrix) {
    let (m, k) = u.shape();
    for j in 0..k {
        let mut best = 0usize;
        for i in 1..m {
            if u[(i, j)].abs() > u[(best, j)].abs() {
                best = i;
            }
        }
        if u[(best, j)] < 0.0 {
            for i in 0..m {
                u[(i, j)] = -u[(i, j)];
            }
            for c in 0..vt.cols() {
                vt[(j, c)] = -vt[(j, c)];
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn random(m: usize, n: usize, seed: u64) -> Matrix {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        Matrix::from_fn(m, n, |_, _| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn diagonal_input() {
        let a = Matrix::from_diag(&[3.0, 2.0, 1.0]);
        let f = svd_full(&a).unwrap();
        assert_eq!(f.sigma, vec![3.0, 2.0, 1.0]);
        assert!(f.u.max_abs_diff(&Matrix::identity(3)) < 1e-15);
        assert!(f.vt.max_abs_diff(&Matrix::identity(3)) < 1e-15);
    }

    #[test]
    fn zero_matrix_has_orthonormal_factors() {
        let f = svd_full(&Matrix::zeros(4, 4)).unwrap();
        assert_eq!(f.sigma, vec![0.0; 4]);
        assert!(f.u.orthonormal_columns_error() < 1e-12);
        assert!(f.vt.orthonormal_rows_error() < 1e-12);
    }

    #[test]
    fn wide_and_tall_reconstruct() {
        for (m, n, seed) in [(7, 3, 1), (3, 7, 2), (5, 5, 3), (1, 4, 4), (4, 1, 5)] {
            let a = random(m, n, seed);
            let f = svd_full(&a).unwrap();
            assert_eq!(f.rank(), m.min(n));
            assert!(f.reconstruct().max_abs_diff(&a) < 1e-12, "{m}x{n}");
            assert!(f.u.orthonormal_columns_error() < 1e-12);
            assert!(f.vt.orthonormal_rows_error() < 1e-12);
            assert!(f.sigma.windows(2).all(|w| w[0] >= w[1]));
        }
    }

    #[test]
    fn sign_convention_holds() {
        let f = svd_full(&random(6, 4, 9)).unwrap();
        for j in 0..4 {
            let col = f.u.column(j);
            let big = col
                .iter()
                .cloned()
                .fold(0.0f64, |m, x| if x.abs() > m.abs() { x } else { m });
            assert!(big > 0.0);
        }
    }

    #[test]
    fn rank_deficient_completion() {
        // rank-1 tall matrix
        let a = Matrix::from_fn(6, 4, |i, j| (i as f64 + 1.0) * (j as f64 - 1.5));
        let f = svd_full(&a).unwrap();
        assert!(f.sigma[1] < 1e-12 * f.sigma[0]);
        assert!(f.u.orthonormal_columns_error() < 1e-12);
        assert!(f.reconstruct().max_abs_diff(&a) < 1e-12);
    }

    #[test]
    fn top_r_range_errors() {
        let a = random(4, 3, 0);
        assert!(matches!(svd_top_r(&a, 0), Err(Error::Parameter(_))));
        assert!(matches!(svd_top_r(&a, 4), Err(Error::Parameter(_))));
        assert_eq!(svd_top_r(&a, 3).unwrap(), svd_full(&a).unwrap());
    }
}
