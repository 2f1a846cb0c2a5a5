//! Scalar special functions and quadrature.

use crate::C64;

/// Bessel function of the first kind, order zero.
///
/// Power series below |x| = 8, Miller's backward recurrence above it,
/// normalised with `J0 + 2 * sum J_2k = 1`.
pub fn bessel_j0(x: f64) -> f64 {
    let ax = x.abs();
    if ax < 8.0 {
        let q = -0.25 * ax * ax;
        let mut term: f64 = 1.0;
        let mut sum: f64 = 1.0;
        let mut k = 1.0;
        while term.abs() > 1e-18 * sum.abs().max(1e-300) || k < 3.0 {
            term *= q / (k * k);
            sum += term;
            k += 1.0;
            if k > 200.0 {
                break;
            }
        }
        return sum;
    }
    let start = {
        let n = (ax + 20.0 + (40.0 * ax).sqrt()) as usize;
        n + (n & 1)
    };
    let mut next = 0.0; // J_{k+1}
    let mut cur = 1e-30; // J_k
    let mut norm = 0.0;
    let mut j0 = 0.0;
    for k in (1..=start).rev() {
        let prev = 2.0 * k as f64 / ax * cur - next;
        next = cur;
        cur = prev;
        // cur is now J_{k-1}
        if (k - 1) % 2 == 0 && k > 1 {
            norm += 2.0 * cur;
        }
        if k == 1 {
            j0 = cur;
        }
        if cur.abs() > 1e200 {
            cur *= 1e-200;
            next *= 1e-200;
            norm *= 1e-200;
        }
    }
    norm += j0;
    j0 / norm
}

/// Adaptive Simpson quadrature of a complex integrand on `[a, b]`.
pub fn adaptive_simpson<F>(f: F, a: f64, b: f64, tol: f64) -> C64
where
    F: Fn(f64) -> C64,
{
    if a == b {
        return C64::new(0.0, 0.0);
    }
    let fa = f(a);
    let fb = f(b);
    let m = 0.5 * (a + b);
    let fm = f(m);
    let whole = (b - a) / 6.0 * (fa + 4.0 * fm + fb);
    simpson_rec(&f, a, b, fa, fm, fb, whole, tol, 48)
}

#[allow(clippy::too_many_arguments)]
fn simpson_rec<F>(f: &F, a: f64, b: f64, fa: C64, fm: C64, fb: C64, whole: C64, tol: f64, depth: u32) -> C64
where
    F: Fn(f64) -> C64,
{
    let m = 0.5 * (a + b);
    let lm = 0.5 * (a + m);
    let rm = 0.5 * (m + b);
    let flm = f(lm);
    let frm = f(rm);
    let left = (m - a) / 6.0 * (fa + 4.0 * flm + fm);
    let right = (b - m) / 6.0 * (fm + 4.0 * frm + fb);
    let delta = left + right - whole;
    if depth == 0 || delta.norm() <= 15.0 * tol {
        return left + right + delta / 15.0;
    }
    simpson_rec(f, a, m, fa, flm, fm, left, 0.5 * tol, depth - 1)
        + simpson_rec(f, m, b, fm, frm, fb, right, 0.5 * tol, depth - 1)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    // J0(x) = (1/pi) * integral_0^pi cos(x sin t) dt; the integrand is smooth and
    // periodic so the trapezoid rule converges geometrically.
    fn j0_trapezoid(x: f64) -> f64 {
        let n = 2000;
        let h = PI / n as f64;
        let mut s = 0.0;
        for i in 0..n {
            s += (x * (i as f64 * h).sin()).cos();
        }
        s * h / PI
    }

    #[test]
    fn j0_matches_integral_representation() {
        let mut x = -3.0;
        while x < 60.0 {
            let a = bessel_j0(x);
            let b = j0_trapezoid(x);
            assert!((a - b).abs() < 1e-12, "x={x} series={a} integral={b}");
            x += 0.173;
        }
    }

    #[test]
    fn j0_first_zero() {
        assert!(bessel_j0(2.404825557695773).abs() < 1e-14);
        assert_eq!(bessel_j0(0.0), 1.0);
    }

    #[test]
    fn simpson_polynomial_and_oscillatory() {
        let v = adaptive_simpson(|x| C64::new(x * x * x, 0.0), 0.0, 2.0, 1e-12);
        assert!((v.re - 4.0).abs() < 1e-12);
        let w = adaptive_simpson(|x| C64::from_polar(1.0, 3.0 * x), 0.0, 1.0, 1e-12);
        let exact = (C64::from_polar(1.0, 3.0) - 1.0) / C64::new(0.0, 3.0);
        assert!((w - exact).norm() < 1e-10);
    }
}
