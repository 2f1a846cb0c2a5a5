//! Small dense linear-algebra helpers shared across modules.

use std::cell::RefCell;

use nalgebra::{DMatrix, DVector};
use rustfft::FftPlanner;

use crate::{CMatrix, CVector, C64};

thread_local! {
    static PLANNER: RefCell<FftPlanner<f64>> = RefCell::new(FftPlanner::new());
}

fn fft_in_place(buf: &mut [C64], inverse: bool) {
    let m = buf.len();
    if m == 0 {
        return;
    }
    let plan = PLANNER.with(|p| {
        let mut p = p.borrow_mut();
        if inverse {
            p.plan_fft_inverse(m)
        } else {
            p.plan_fft_forward(m)
        }
    });
    plan.process(buf);
    let s = 1.0 / (m as f64).sqrt();
    for v in buf.iter_mut() {
        *v *= s;
    }
}

/// Unitary DFT `F h`, `[F]_{pq} = exp(-j 2 pi p q / M) / sqrt(M)`.
pub fn dft(h: &CVector) -> CVector {
    let mut out = h.clone();
    fft_in_place(out.as_mut_slice(), false);
    out
}

/// Inverse unitary DFT `F^H h`.
pub fn idft(h: &CVector) -> CVector {
    let mut out = h.clone();
    fft_in_place(out.as_mut_slice(), true);
    out
}

/// Applies the unitary DFT to every column.
pub fn dft_columns(x: &CMatrix) -> CMatrix {
    let mut out = x.clone();
    for mut col in out.column_iter_mut() {
        fft_in_place(col.as_mut_slice(), false);
    }
    out
}

/// Applies the inverse unitary DFT to every column.
pub fn idft_columns(x: &CMatrix) -> CMatrix {
    let mut out = x.clone();
    for mut col in out.column_iter_mut() {
        fft_in_place(col.as_mut_slice(), true);
    }
    out
}

/// Moore-Penrose pseudo-inverse through a thresholded SVD.
///
/// Returns the pseudo-inverse and the numerical rank.
pub fn pinv(a: &CMatrix, rel_tol: f64) -> (CMatrix, usize) {
    let svd = a.clone().svd(true, true);
    let smax = svd.singular_values.iter().cloned().fold(0.0, f64::max);
    let cut = rel_tol * smax;
    let u = svd.u.as_ref().expect("u requested");
    let vt = svd.v_t.as_ref().expect("v_t requested");
    let mut out = CMatrix::zeros(a.ncols(), a.nrows());
    let mut rank = 0;
    for (i, &s) in svd.singular_values.iter().enumerate() {
        if s <= cut || s == 0.0 {
            continue;
        }
        rank += 1;
        let inv = 1.0 / s;
        // out += v_i * inv * u_i^H
        let v = vt.row(i).adjoint();
        let uh = u.column(i).adjoint();
        out += (v * uh) * C64::new(inv, 0.0);
    }
    (out, rank)
}

/// Lower-triangular factor `L` with `L L^T = a` for a symmetric PSD matrix.
///
/// Zero pivots are tolerated (the matching column is set to zero) so
/// rank-deficient covariances still yield sigma points.
pub fn psd_cholesky(a: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    let n = a.nrows();
    let scale = a.diagonal().iter().fold(0.0_f64, |m, v| m.max(v.abs()));
    let tol = 1e-14 * scale.max(f64::MIN_POSITIVE);
    let mut l = DMatrix::<f64>::zeros(n, n);
    for j in 0..n {
        let mut d = a[(j, j)];
        for k in 0..j {
            d -= l[(j, k)] * l[(j, k)];
        }
        if d < -tol.max(1e-300) * 1e3 || !d.is_finite() {
            return None;
        }
        if d <= tol {
            continue;
        }
        let djj = d.sqrt();
        l[(j, j)] = djj;
        for i in (j + 1)..n {
            let mut s = a[(i, j)];
            for k in 0..j {
                s -= l[(i, k)] * l[(j, k)];
            }
            l[(i, j)] = s / djj;
        }
    }
    Some(l)
}

/// `(P + P^T) / 2`.
pub fn symmetrize(p: &DMatrix<f64>) -> DMatrix<f64> {
    (p + p.transpose()) * 0.5
}

/// Inverse of a small symmetric positive-definite matrix, `None` if singular.
pub fn spd_inverse(a: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    if a.nrows() == 1 {
        let v = a[(0, 0)];
        if v.abs() <= 1e-300 || !v.is_finite() {
            return None;
        }
        return Some(DMatrix::from_element(1, 1, 1.0 / v));
    }
    a.clone().try_inverse()
}

/// Squared Euclidean norm of a complex vector.
pub fn norm_sqr(v: &CVector) -> f64 {
    v.iter().map(|c| c.norm_sqr()).sum()
}

/// Real vector from a slice.
pub fn rvec(v: &[f64]) -> DVector<f64> {
    DVector::from_column_slice(v)
}
