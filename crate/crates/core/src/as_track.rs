//! Blind angular-spread estimation from the block covariance using a
//! first-order Taylor expansion of the steering vector.

use std::f64::consts::PI;

use crate::channel::{steering_vector, SystemConfig};
use crate::linalg::pinv;
use crate::{CMatrix, CVector, Error, Result, C64};

/// Minimum separation of two tracked DOAs before the dictionary is singular.
pub const MIN_DOA_SEPARATION: f64 = 1e-6;

/// `d a / d theta`: element `m` is `j 2 pi m (d/lambda) cos(theta) a_m(theta)`.
pub fn steering_derivative(cfg: &SystemConfig, theta: f64) -> CVector {
    let a = steering_vector(cfg, theta);
    let k = 2.0 * PI * cfg.d_over_lambda * theta.cos();
    CVector::from_fn(cfg.m, |m, _| a[m] * C64::new(0.0, k * m as f64))
}

/// `[a(theta_1) .. a(theta_K), a'(theta_1) .. a'(theta_K)]`.
#[derive(Debug, Clone, PartialEq)]
pub struct TaylorDictionary {
    pub a: CMatrix,
}

impl TaylorDictionary {
    pub fn new(cfg: &SystemConfig, thetas: &[f64]) -> Result<Self> {
        let k = thetas.len();
        if 2 * k > cfg.m {
            return Err(Error::Dimension(format!("{k} users need 2K <= M = {}", cfg.m)));
        }
        for i in 0..k {
            for j in (i + 1)..k {
                if (thetas[i] - thetas[j]).abs() < MIN_DOA_SEPARATION {
                    return Err(Error::DegenerateGeometry(i, j));
                }
            }
        }
        let mut a = CMatrix::zeros(cfg.m, 2 * k);
        for (i, &t) in thetas.iter().enumerate() {
            a.set_column(i, &steering_vector(cfg, t));
            a.set_column(k + i, &steering_derivative(cfg, t));
        }
        Ok(TaylorDictionary { a })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampleCovariance {
    pub rx: CMatrix,
    pub n_samples: usize,
}

/// `(1/N) sum_n x(n) x(n)^H` over the columns of `x`.
pub fn sample_covariance(x: &CMatrix) -> Result<SampleCovariance> {
    let n = x.ncols();
    if n == 0 {
        return Err(Error::Dimension("no snapshots".into()));
    }
    let mut rx = x * x.adjoint() / C64::new(n as f64, 0.0);
    hermitize(&mut rx);
    Ok(SampleCovariance { rx, n_samples: n })
}

fn hermitize(a: &mut CMatrix) {
    let h = (a.clone() + a.adjoint()) * C64::new(0.5, 0.0);
    *a = h;
}

/// Per-user spread variance and the implied maximum spread `sqrt(3 sigma^2)`.
#[derive(Debug, Clone, PartialEq)]
pub struct SpreadEstimate {
    pub sigma2: Vec<f64>,
    pub max_as: Vec<f64>,
}

/// Noise power of the covariance: the mean of its `M - 2K` smallest eigenvalues.
pub fn eigen_noise_floor(rx: &SampleCovariance, k: usize) -> f64 {
    let m = rx.rx.nrows();
    let mut ev: Vec<f64> = rx.rx.clone().symmetric_eigenvalues().iter().cloned().collect();
    ev.sort_by(|a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal));
    let keep = m.saturating_sub(2 * k).max(1);
    ev[..keep].iter().sum::<f64>() / keep as f64
}

/// `Sigma = A^+ (Rx - sigma_n^2 I) A^+^H`, `sigma_k^2 = Sigma[K+k, K+k] / Sigma[k, k]`.
pub fn estimate_sigma(rx: &SampleCovariance, thetas: &[f64], cfg: &SystemConfig, noise_var: f64) -> Result<SpreadEstimate> {
    let dict = TaylorDictionary::new(cfg, thetas)?;
    if rx.rx.nrows() != cfg.m || rx.rx.ncols() != cfg.m {
        return Err(Error::Dimension(format!("covariance is {}x{}, M = {}", rx.rx.nrows(), rx.rx.ncols(), cfg.m)));
    }
    let k = thetas.len();
    let (ap, rank) = pinv(&dict.a, 1e-10);
    if rank < 2 * k {
        return Err(Error::RankDeficient);
    }
    let mut r = rx.rx.clone();
    for i in 0..cfg.m {
        r[(i, i)] -= C64::new(noise_var, 0.0);
    }
    let sigma = &ap * r * ap.adjoint();
    let mut sigma2 = Vec::with_capacity(k);
    for i in 0..k {
        let s = sigma[(i, i)].re;
        let d = sigma[(k + i, k + i)].re;
        let v = if s > 0.0 && d > 0.0 { d / s } else { 0.0 };
        sigma2.push(v);
    }
    let max_as = sigma2.iter().map(|v| (3.0 * v).sqrt()).collect();
    Ok(SpreadEstimate { sigma2, max_as })
}

/// Same estimate as [`estimate_sigma`] computed from the snapshots directly:
/// `(A^+ X)(A^+ X)^H / N - sigma_n^2 A^+ A^+^H`, without forming `Rx`.
pub fn estimate_sigma_from_snapshots(x: &CMatrix, thetas: &[f64], cfg: &SystemConfig, noise_var: f64) -> Result<SpreadEstimate> {
    let dict = TaylorDictionary::new(cfg, thetas)?;
    if x.nrows() != cfg.m || x.ncols() == 0 {
        return Err(Error::Dimension(format!("snapshots are {}x{}, M = {}", x.nrows(), x.ncols(), cfg.m)));
    }
    let k = thetas.len();
    let (ap, rank) = pinv(&dict.a, 1e-10);
    if rank < 2 * k {
        return Err(Error::RankDeficient);
    }
    let z = &ap * x;
    let n = x.ncols() as f64;
    let mut sigma2 = Vec::with_capacity(k);
    for i in 0..k {
        let ratio = |row: usize| {
            let p: f64 = z.row(row).iter().map(|c| c.norm_sqr()).sum::<f64>() / n;
            let q: f64 = ap.row(row).iter().map(|c| c.norm_sqr()).sum::<f64>();
            p - noise_var * q
        };
        let s = ratio(i);
        let d = ratio(k + i);
        sigma2.push(if s > 0.0 && d > 0.0 { d / s } else { 0.0 });
    }
    let max_as = sigma2.iter().map(|v| (3.0 * v).sqrt()).collect();
    Ok(SpreadEstimate { sigma2, max_as })
}

/// Median of the last three inputs (fewer at start-up).
#[derive(Debug, Clone, Default)]
pub struct TrailingMedian {
    window: Vec<f64>,
}

impl TrailingMedian {
    pub fn new() -> Self {
        TrailingMedian { window: Vec::with_capacity(3) }
    }

    pub fn push(&mut self, v: f64) -> f64 {
        if self.window.len() == 3 {
            self.window.remove(0);
        }
        self.window.push(v);
        let mut s = self.window.clone();
        s.sort_by(|a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal));
        match s.len() {
            1 => s[0],
            2 => 0.5 * (s[0] + s[1]),
            _ => s[1],
        }
    }
}
