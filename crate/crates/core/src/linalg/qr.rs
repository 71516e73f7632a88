//! Householder thin QR.

use super::Matrix;
use crate::error::{Error, Result};

/// `a = q · r` with `q` m×r orthonormal and `r` upper-triangular with a
/// non-negative diagonal.
#[derive(Clone, Debug, PartialEq)]
pub struct QrFactors {
    pub q: Matrix,
    pub r: Matrix,
    /// Set when some column was (numerically) dependent on earlier ones; the
    /// matching columns of `q` are completion vectors orthogonal to the rest.
    pub rank_deficient: bool,
}

const RANK_TOL: f64 = 1e-12;

pub fn qr_thin(a: &Matrix) -> Result<QrFactors> {
    a.ensure_finite("qr_thin")?;
    let (m, r) = a.shape();
    if m < r {
        return Err(Error::param(format!("qr_thin needs m >= r, got {m}x{r}")));
    }
    let scale = (0..r)
        .map(|j| a.column(j).iter().map(|x| x * x).sum::<f64>().sqrt())
        .fold(0.0, f64::max);

    let mut work = a.clone();
    let mut reflectors: Vec<Option<Vec<f64>>> = Vec::with_capacity(r);
    let mut rank_deficient = false;

    for j in 0..r {
        let x: Vec<f64> = (j..m).map(|i| work[(i, j)]).collect();
        let norm = x.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm <= RANK_TOL * scale.max(f64::MIN_POSITIVE) {
            rank_deficient = true;
        }
        if norm == 0.0 {
            reflectors.push(None);
            continue;
        }
        let alpha = if x[0] >= 0.0 { -norm } else { norm };
        let mut v = x;
        v[0] -= alpha;
        let vnorm = v.iter().map(|t| t * t).sum::<f64>().sqrt();
        for t in &mut v {
            *t /= vnorm;
        }
        apply_reflector(&mut work, &v, j, j);
        reflectors.push(Some(v));
    }

    // q = H_0 H_1 … H_{r-1} applied to the first r columns of the identity.
    let mut q = Matrix::from_fn(m, r, |i, j| if i == j { 1.0 } else { 0.0 });
    for (j, refl) in reflectors.iter().enumerate().rev() {
        if let Some(v) = refl {
            apply_reflector(&mut q, v, j, 0);
        }
    }
    let mut rf = Matrix::from_fn(r, r, |i, j| if j >= i { work[(i, j)] } else { 0.0 });

    for j in 0..r {
        if rf[(j, j)] < 0.0 {
            for c in 0..r {
                rf[(j, c)] = -rf[(j, c)];
            }
            for i in 0..m {
                q[(i, j)] = -q[(i, j)];
            }
        }
    }
    Ok(QrFactors {
        q,
        r: rf,
        rank_deficient,
    })
}

/// Applies `I − 2vvᵀ` (acting on rows `row0..`) to columns `col0..` of `a`.
fn apply_reflector(a: &mut Matrix, v: &[f64], row0: usize, col0: usize) {
    let cols = a.cols();
    for c in col0..cols {
        let d: f64 = v.iter().enumerate().map(|(k, vk)| vk * a[(row0 + k, c)]).sum();
        if d == 0.0 {
            continue;
        }
        for (k, vk) in v.iter().enumerate() {
            a[(row0 + k, c)] -= 2.0 * d * vk;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_is_fixed_point() {
        let f = qr_thin(&Matrix::identity(3)).unwrap();
        assert_eq!(f.q, Matrix::identity(3));
        assert_eq!(f.r, Matrix::identity(3));
        assert!(!f.rank_deficient);
    }

    #[test]
    fn axis_aligned_columns() {
        let a = Matrix::from_rows(&[vec![2.0, 0.0], vec![0.0, 0.0], vec![0.0, 3.0]]).unwrap();
        let f = qr_thin(&a).unwrap();
        let expected_q = Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 0.0], vec![0.0, 1.0]]).unwrap();
        assert!(f.q.max_abs_diff(&expected_q) < 1e-15);
        assert!(f.r.max_abs_diff(&Matrix::from_diag(&[2.0, 3.0])) < 1e-15);
    }

    #[test]
    fn dependent_columns_are_completed() {
        let a = Matrix::from_rows(&[
            vec![1.0, 2.0, 0.0],
            vec![1.0, 2.0, 0.0],
            vec![0.0, 0.0, 0.0],
            vec![1.0, 2.0, 0.0],
        ])
        .unwrap();
        let f = qr_thin(&a).unwrap();
        assert!(f.rank_deficient);
        assert!(f.q.orthonormal_columns_error() < 1e-12);
        assert!(f.q.matmul(&f.r).max_abs_diff(&a) < 1e-12);
    }

    #[test]
    fn wide_input_rejected() {
        assert!(matches!(qr_thin(&Matrix::zeros(2, 3)), Err(Error::Parameter(_))));
    }
}
