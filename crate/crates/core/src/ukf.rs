//! Unscented Kalman filter and unscented Rauch-Tung-Striebel smoother.
//!
//! The state is an `R`-vector; measurement and system maps are plain closures.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::linalg::{psd_cholesky, spd_inverse, symmetrize};
use crate::{Error, Result};

const JITTER: f64 = 1e-12;

/// Unscented-transform scaling.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UtConfig {
    pub alpha: f64,
    pub kappa: f64,
    pub beta: f64,
    pub dim: usize,
}

impl UtConfig {
    /// `alpha = 1`, `kappa = 3 - R`, `beta = 2`.
    pub fn new(dim: usize) -> Self {
        UtConfig { alpha: 1.0, kappa: 3.0 - dim as f64, beta: 2.0, dim }
    }

    pub fn with_params(dim: usize, alpha: f64, kappa: f64, beta: f64) -> Result<Self> {
        let ut = UtConfig { alpha, kappa, beta, dim };
        if dim == 0 || !(dim as f64 + ut.epsilon() > 0.0) || !alpha.is_finite() || alpha == 0.0 {
            return Err(Error::Config(format!("invalid unscented parameters {ut:?}")));
        }
        Ok(ut)
    }

    /// `eps = alpha^2 (R + kappa) - R`.
    pub fn epsilon(&self) -> f64 {
        self.alpha * self.alpha * (self.dim as f64 + self.kappa) - self.dim as f64
    }

    pub fn weights(&self) -> Weights {
        let r = self.dim as f64;
        let eps = self.epsilon();
        let w0 = eps / (r + eps);
        let wi = 1.0 / (2.0 * (r + eps));
        let n = 2 * self.dim + 1;
        let mut mean = vec![wi; n];
        let mut cov = vec![wi; n];
        mean[0] = w0;
        cov[0] = w0 + 1.0 - self.alpha * self.alpha + self.beta;
        let w = Weights { mean, cov, spread: (r + eps).sqrt() };
        debug_assert!((w.mean.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        debug_assert!(w.cov.iter().all(|v| v.is_finite()));
        w
    }
}

/// Sigma-point weights and the spread factor `sqrt(R + eps)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Weights {
    pub mean: Vec<f64>,
    pub cov: Vec<f64>,
    pub spread: f64,
}

/// Gaussian belief over the state.
#[derive(Debug, Clone, PartialEq)]
pub struct FilterState {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
}

impl FilterState {
    pub fn new(mean: DVector<f64>, cov: DMatrix<f64>) -> Self {
        FilterState { mean, cov }
    }

    pub fn scalar(mean: f64, var: f64) -> Self {
        FilterState { mean: DVector::from_element(1, mean), cov: DMatrix::from_element(1, 1, var) }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

/// Intermediate quantities of one measurement update.
#[derive(Debug, Clone, PartialEq)]
pub struct GainBundle {
    pub kalman_gain: DMatrix<f64>,
    pub pxy: DMatrix<f64>,
    pub pyy: DMatrix<f64>,
    pub y_pred: DVector<f64>,
    pub innovation: DVector<f64>,
    pub predicted: FilterState,
}

impl GainBundle {
    /// Gaussian log-density of the innovation.
    pub fn log_likelihood(&self) -> f64 {
        let d = self.innovation.len() as f64;
        let det = self.pyy.determinant();
        let inv = spd_inverse(&self.pyy).unwrap_or_else(|| DMatrix::zeros(self.pyy.nrows(), self.pyy.ncols()));
        let quad = (self.innovation.transpose() * inv * &self.innovation)[(0, 0)];
        -0.5 * (d * (2.0 * std::f64::consts::PI).ln() + det.ln() + quad)
    }
}

/// `2R + 1` sigma points: the mean, then `mean + s L_i`, then `mean - s L_i`.
pub fn sigma_points(state: &FilterState, ut: &UtConfig) -> Result<Vec<DVector<f64>>> {
    let r = state.dim();
    let l = match psd_cholesky(&state.cov) {
        Some(l) => l,
        None => psd_cholesky(&(&state.cov + DMatrix::identity(r, r) * JITTER)).ok_or(Error::Cholesky)?,
    };
    let s = ut.weights().spread;
    let mut pts = Vec::with_capacity(2 * r + 1);
    pts.push(state.mean.clone());
    for i in 0..r {
        pts.push(&state.mean + l.column(i) * s);
    }
    for i in 0..r {
        pts.push(&state.mean - l.column(i) * s);
    }
    Ok(pts)
}

fn weighted_mean(points: &[DVector<f64>], w: &[f64]) -> DVector<f64> {
    let mut m = DVector::zeros(points[0].len());
    for (p, &wi) in points.iter().zip(w) {
        m.axpy(wi, p, 1.0);
    }
    m
}

fn weighted_cross(a: &[DVector<f64>], am: &DVector<f64>, b: &[DVector<f64>], bm: &DVector<f64>, w: &[f64]) -> DMatrix<f64> {
    let mut c = DMatrix::zeros(am.len(), bm.len());
    for ((x, y), &wi) in a.iter().zip(b).zip(w) {
        let dx = x - am;
        let dy = y - bm;
        c += (dx * dy.transpose()) * wi;
    }
    c
}

/// Unscented prediction through `sys`; returns predicted state, the
/// propagated points and the cross covariance between input and output.
fn propagate<S>(state: &FilterState, q: &DMatrix<f64>, ut: &UtConfig, sys: &S) -> Result<(FilterState, DMatrix<f64>)>
where
    S: Fn(&DVector<f64>) -> DVector<f64>,
{
    let w = ut.weights();
    let chi = sigma_points(state, ut)?;
    let prop: Vec<_> = chi.iter().map(sys).collect();
    let m = weighted_mean(&prop, &w.mean);
    let p = symmetrize(&(weighted_cross(&prop, &m, &prop, &m, &w.cov) + q));
    let c = weighted_cross(&chi, &state.mean, &prop, &m, &w.cov);
    Ok((FilterState::new(m, p), c))
}

/// One predict/update cycle.
///
/// `block` only labels errors.
#[allow(clippy::too_many_arguments)]
pub fn ukf_step<S, H>(
    state: &FilterState,
    y: &DVector<f64>,
    q: &DMatrix<f64>,
    r: &DMatrix<f64>,
    ut: &UtConfig,
    sys: S,
    meas: H,
    block: usize,
) -> Result<(FilterState, GainBundle)>
where
    S: Fn(&DVector<f64>) -> DVector<f64>,
    H: Fn(&DVector<f64>) -> DVector<f64>,
{
    let w = ut.weights();
    let (pred, _) = propagate(state, q, ut, &sys)?;
    let xi = sigma_points(&pred, ut)?;
    let ys: Vec<_> = xi.iter().map(meas).collect();
    let y_pred = weighted_mean(&ys, &w.mean);
    let pyy = symmetrize(&(weighted_cross(&ys, &y_pred, &ys, &y_pred, &w.cov) + r));
    let pxy = weighted_cross(&xi, &pred.mean, &ys, &y_pred, &w.cov);
    let inv = spd_inverse(&pyy).ok_or(Error::SingularInnovation { block })?;
    if !inv.iter().all(|v| v.is_finite()) || pyy.determinant() <= 0.0 {
        return Err(Error::SingularInnovation { block });
    }
    let gain = &pxy * inv;
    let innovation = y - &y_pred;
    let mean = &pred.mean + &gain * &innovation;
    let cov = symmetrize(&(&pred.cov - &gain * &pyy * gain.transpose()));
    let bundle = GainBundle { kalman_gain: gain, pxy, pyy, y_pred, innovation, predicted: pred };
    Ok((FilterState::new(mean, cov), bundle))
}

/// Smoothed means, covariances and lag-one cross covariances
/// (`cross[i] = Cov(x_i, x_{i+1} | all data)`).
#[derive(Debug, Clone, PartialEq)]
pub struct SmoothedTrajectory {
    pub mean: Vec<DVector<f64>>,
    pub cov: Vec<DMatrix<f64>>,
    pub cross: Vec<DMatrix<f64>>,
}

impl SmoothedTrajectory {
    pub fn len(&self) -> usize {
        self.mean.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mean.is_empty()
    }

    /// First state component of each block.
    pub fn scalar_means(&self) -> Vec<f64> {
        self.mean.iter().map(|m| m[0]).collect()
    }

    pub fn scalar_vars(&self) -> Vec<f64> {
        self.cov.iter().map(|p| p[(0, 0)]).collect()
    }

    pub fn scalar_cross(&self) -> Vec<f64> {
        self.cross.iter().map(|c| c[(0, 0)]).collect()
    }
}

/// Backward unscented RTS recursion over filtered states.
pub fn urtss_pass<S>(filtered: &[FilterState], ut: &UtConfig, q: &DMatrix<f64>, sys: S) -> Result<SmoothedTrajectory>
where
    S: Fn(&DVector<f64>) -> DVector<f64>,
{
    let t = filtered.len();
    if t == 0 {
        return Err(Error::Dimension("smoother needs at least one filtered state".into()));
    }
    let mut mean = vec![filtered[t - 1].mean.clone(); t];
    let mut cov = vec![filtered[t - 1].cov.clone(); t];
    let mut cross = vec![DMatrix::zeros(filtered[0].dim(), filtered[0].dim()); t.saturating_sub(1)];
    for z in (0..t.saturating_sub(1)).rev() {
        let f = &filtered[z];
        let (pred, c) = propagate(f, q, ut, &sys)?;
        let inv = spd_inverse(&pred.cov).ok_or(Error::SingularPrediction { block: z + 1 })?;
        let g = c * inv;
        let m_s = &f.mean + &g * (&mean[z + 1] - &pred.mean);
        let p_s = symmetrize(&(&f.cov + &g * (&cov[z + 1] - &pred.cov) * g.transpose()));
        cross[z] = &g * &cov[z + 1];
        mean[z] = m_s;
        cov[z] = p_s;
    }
    Ok(SmoothedTrajectory { mean, cov, cross })
}

/// Output of a full forward pass.
#[derive(Debug, Clone)]
pub struct FilterRun {
    /// `filtered[0]` is the prior; `filtered[i + 1]` follows observation `i`.
    pub filtered: Vec<FilterState>,
    pub gains: Vec<GainBundle>,
    pub log_likelihood: f64,
}

/// Runs [`ukf_step`] over a sequence of observations starting from `prior`.
#[allow(clippy::too_many_arguments)]
pub fn filter_sequence<S, H>(
    prior: &FilterState,
    observations: &[DVector<f64>],
    q: &DMatrix<f64>,
    r: &DMatrix<f64>,
    ut: &UtConfig,
    sys: S,
    meas: H,
) -> Result<FilterRun>
where
    S: Fn(&DVector<f64>) -> DVector<f64>,
    H: Fn(&DVector<f64>) -> DVector<f64>,
{
    let mut filtered = Vec::with_capacity(observations.len() + 1);
    let mut gains = Vec::with_capacity(observations.len());
    filtered.push(prior.clone());
    let mut ll = 0.0;
    for (i, y) in observations.iter().enumerate() {
        let (next, g) = ukf_step(filtered.last().expect("prior present"), y, q, r, ut, &sys, &meas, i)?;
        ll += g.log_likelihood();
        filtered.push(next);
        gains.push(g);
    }
    Ok(FilterRun { filtered, gains, log_likelihood: ll })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scalar_sigma_points_and_weights() {
        let ut = UtConfig::new(1);
        assert_eq!(ut.kappa, 2.0);
        let pts = sigma_points(&FilterState::scalar(0.0, 1.0), &ut).unwrap();
        let s3 = 3f64.sqrt();
        assert!((pts[1][0] - s3).abs() < 1e-15 && (pts[2][0] + s3).abs() < 1e-15 && pts[0][0] == 0.0);
        let w = ut.weights();
        assert!((w.mean[0] - 2.0 / 3.0).abs() < 1e-15);
        assert!((w.mean[1] - 1.0 / 6.0).abs() < 1e-15);
        assert!((w.cov[0] - 8.0 / 3.0).abs() < 1e-15);
        let zero = sigma_points(&FilterState::scalar(0.7, 0.0), &ut).unwrap();
        assert!(zero.iter().all(|p| p[0] == 0.7));
    }

    #[test]
    fn rejects_collapsed_spread() {
        assert!(UtConfig::with_params(2, 1.0, -2.0, 2.0).is_err());
        assert!(UtConfig::with_params(2, 0.5, 1.0, 2.0).is_ok());
    }

    #[test]
    fn zero_innovation_fixed_point() {
        let ut = UtConfig::new(1);
        let truth = 0.4;
        let c = 64.0;
        let y = DVector::from_element(1, c * f64::sin(truth));
        let q = DMatrix::from_element(1, 1, 1e-14);
        let r = DMatrix::from_element(1, 1, 1e-14);
        let (post, _) = ukf_step(
            &FilterState::scalar(truth, 1e-14),
            &y,
            &q,
            &r,
            &ut,
            |x| x.clone(),
            |x| x.map(|t| c * t.sin()),
            0,
        )
        .unwrap();
        assert!((post.mean[0] - truth).abs() < 1e-9);
    }

    #[test]
    fn single_block_smoother_is_identity() {
        let f = vec![FilterState::scalar(0.2, 0.01)];
        let s = urtss_pass(&f, &UtConfig::new(1), &DMatrix::from_element(1, 1, 1e-4), |x| x.clone()).unwrap();
        assert_eq!(s.mean[0], f[0].mean);
        assert_eq!(s.cov[0], f[0].cov);
        assert!(s.cross.is_empty());
    }
}
