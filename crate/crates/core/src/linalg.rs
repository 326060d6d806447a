//! Small dense helpers shared by the constraint and dynamics code.

use nalgebra::{DMatrix, DVector};

/// Relative cutoff below which singular values are treated as zero.
pub const PINV_RCOND: f64 = 1e-10;

/// Condition number above which the multiplier solve switches to the
/// pseudo-inverse.
pub const COND_LIMIT: f64 = 1e10;

/// Moore-Penrose pseudo-inverse via SVD.
pub fn pinv(a: &DMatrix<f64>) -> DMatrix<f64> {
    let (r, c) = a.shape();
    if r == 0 || c == 0 {
        return DMatrix::zeros(c, r);
    }
    let svd = a.clone().svd(true, true);
    let smax = svd.singular_values.max();
    let cutoff = PINV_RCOND * smax;
    let u = svd.u.expect("svd u");
    let vt = svd.v_t.expect("svd v_t");
    let mut out = DMatrix::zeros(c, r);
    for (i, &s) in svd.singular_values.iter().enumerate() {
        if s > cutoff && s > 0.0 {
            // out += v_i * u_i^T / s
            let vi = vt.row(i).transpose();
            let ui = u.column(i);
            out += (vi * ui.transpose()) / s;
        }
    }
    out
}

/// Solution of a small symmetric positive semi-definite system `a x = b`.
///
/// Uses a Cholesky factorization when the matrix is well conditioned and
/// falls back to the pseudo-inverse otherwise. The flag reports the fallback.
pub fn solve_spd(a: &DMatrix<f64>, b: &DVector<f64>) -> (DVector<f64>, bool) {
    if a.nrows() == 0 {
        return (DVector::zeros(0), false);
    }
    if let Some(chol) = a.clone().cholesky() {
        // Cheap conditioning estimate from the factor's diagonal.
        let l = chol.l_dirty();
        let (mut dmin, mut dmax) = (f64::INFINITY, 0.0_f64);
        for i in 0..a.nrows() {
            let d = l[(i, i)].abs();
            dmin = dmin.min(d);
            dmax = dmax.max(d);
        }
        let cond = (dmax / dmin).powi(2);
        if cond.is_finite() && cond < COND_LIMIT {
            return (chol.solve(b), false);
        }
    }
    (pinv(a) * b, true)
}
