//! Markov DOA dynamics, central-SSI observations and EM learning of the
//! process and measurement noise variances.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::basis::{beamspace_power, SsiSet};
use crate::ukf::{filter_sequence, sigma_points, urtss_pass, FilterRun, FilterState, SmoothedTrajectory, UtConfig};
use crate::{CMatrix, Error, Result};

/// Variance floor applied by the M-step.
pub const VARIANCE_FLOOR: f64 = 1e-10;

/// Minimum peak-to-median ratio of the averaged beamspace power for a valid observation.
pub const NO_SIGNAL_RATIO: f64 = 3.0;

/// `Q_omega` in rad^2, `Q_u` in bins^2.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseParams {
    pub q_omega: f64,
    pub q_u: f64,
}

impl NoiseParams {
    /// `(0.1 deg)^2` and one bin squared.
    pub fn initial() -> Self {
        NoiseParams { q_omega: 0.1f64.to_radians().powi(2), q_u: 1.0 }
    }

    fn relative_change(&self, other: &NoiseParams) -> f64 {
        let a = (other.q_omega - self.q_omega).abs() / self.q_omega.abs().max(VARIANCE_FLOOR);
        let b = (other.q_u - self.q_u).abs() / self.q_u.abs().max(VARIANCE_FLOOR);
        a.max(b)
    }
}

/// Observed central SSI bins, on the unwrapped integer line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObservationVector {
    pub q_obs: Vec<f64>,
}

impl ObservationVector {
    pub fn new(q_obs: Vec<f64>) -> Result<Self> {
        if q_obs.len() < 2 {
            return Err(Error::Dimension(format!("need at least two observations, got {}", q_obs.len())));
        }
        Ok(ObservationVector { q_obs })
    }

    pub fn len(&self) -> usize {
        self.q_obs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.q_obs.is_empty()
    }
}

/// Scalar DOA state-space model: random walk in angle, bin-index measurement.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DoaModel {
    /// `M d / lambda`.
    pub bins_per_sine: f64,
    /// Round the predicted measurement to the nearest bin.
    pub rounding: bool,
    /// Belief about the state one block before the first observation.
    pub prior_mean: f64,
    pub prior_var: f64,
    pub ut: UtConfig,
}

impl DoaModel {
    /// Prior centred on an initial bin with one bin of uncertainty.
    pub fn anchored(bins_per_sine: f64, initial_bin: f64, rounding: bool) -> Self {
        let s = (initial_bin / bins_per_sine).clamp(-0.999, 0.999);
        let theta = s.asin();
        let per_bin = 1.0 / (bins_per_sine * theta.cos());
        DoaModel { bins_per_sine, rounding, prior_mean: theta, prior_var: per_bin * per_bin, ut: UtConfig::new(1) }
    }

    pub fn measure(&self, theta: f64) -> f64 {
        let v = self.bins_per_sine * theta.sin();
        if self.rounding {
            v.round()
        } else {
            v
        }
    }

    /// Raw inversion of an observed bin to an angle.
    pub fn invert(&self, q: f64) -> f64 {
        (q / self.bins_per_sine).clamp(-1.0, 1.0).asin()
    }

    fn prior(&self) -> FilterState {
        FilterState::scalar(self.prior_mean, self.prior_var)
    }
}

/// Peak bin of the block-averaged beamspace power inside `predicted.center() +- window`.
pub fn observe_central_ssi(x: &CMatrix, predicted: &SsiSet, window: usize) -> Result<f64> {
    observe_from_profile(&beamspace_power(x), predicted, window)
}

/// Same as [`observe_central_ssi`] on a precomputed power profile.
pub fn observe_from_profile(profile: &[f64], predicted: &SsiSet, window: usize) -> Result<f64> {
    let window = window.max(predicted.size());
    let m = profile.len() as i64;
    let at = |q: i64| profile[q.rem_euclid(m) as usize];
    let c = predicted.center();
    let w = window as i64;
    let mut best = c;
    for q in (c - w)..=(c + w) {
        if at(q) > at(best) || (at(q) == at(best) && (q - c).abs() < (best - c).abs()) {
            best = q;
        }
    }
    let peak = at(best);
    let mut sorted = profile.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal));
    let median = sorted[sorted.len() / 2];
    let ratio = if median > 0.0 { peak / median } else if peak > 0.0 { f64::INFINITY } else { 0.0 };
    if !(ratio >= NO_SIGNAL_RATIO) {
        return Err(Error::NoSignal { ratio });
    }
    Ok(best as f64)
}

/// `theta + omega`, `omega ~ N(0, q_omega)`.
pub fn markov_step<R: Rng + ?Sized>(theta_prev: f64, q_omega: f64, rng: &mut R) -> f64 {
    let w: f64 = rng.sample(StandardNormal);
    theta_prev + q_omega.max(0.0).sqrt() * w
}

fn scalar_matrix(v: f64) -> DMatrix<f64> {
    DMatrix::from_element(1, 1, v)
}

fn observations(obs: &ObservationVector) -> Vec<DVector<f64>> {
    obs.q_obs.iter().map(|&q| DVector::from_element(1, q)).collect()
}

/// Forward UKF pass; `filtered[0]` is the prior.
pub fn filter_doa(obs: &ObservationVector, params: &NoiseParams, model: &DoaModel) -> Result<FilterRun> {
    let meas = |x: &DVector<f64>| DVector::from_element(1, model.measure(x[0]));
    filter_sequence(
        &model.prior(),
        &observations(obs),
        &scalar_matrix(params.q_omega),
        &scalar_matrix(params.q_u),
        &model.ut,
        |x: &DVector<f64>| x.clone(),
        meas,
    )
}

/// Forward pass followed by the backward smoother. The trajectory has
/// `obs.len() + 1` entries; the first is the pre-observation state.
pub fn smooth_doa(obs: &ObservationVector, params: &NoiseParams, model: &DoaModel) -> Result<(SmoothedTrajectory, FilterRun)> {
    let run = filter_doa(obs, params, model)?;
    let traj = urtss_pass(&run.filtered, &model.ut, &scalar_matrix(params.q_omega), |x: &DVector<f64>| x.clone())?;
    Ok((traj, run))
}

/// M-step output.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MStep {
    pub params: NoiseParams,
    pub clamped: bool,
}

/// Closed-form variance updates from smoothed moments.
///
/// `traj` must hold `obs.len() + 1` states with the pre-observation state first.
pub fn m_step(obs: &ObservationVector, traj: &SmoothedTrajectory, model: &DoaModel) -> Result<MStep> {
    let s = obs.len();
    if traj.len() != s + 1 || traj.cross.len() != s {
        return Err(Error::Dimension(format!("trajectory of {} states for {s} observations", traj.len())));
    }
    let ut = UtConfig::new(1);
    let w = ut.weights();
    let c = model.bins_per_sine;
    let mut su = 0.0;
    let mut sw = 0.0;
    for i in 0..s {
        let st = FilterState::new(traj.mean[i + 1].clone(), traj.cov[i + 1].clone());
        let pts = sigma_points(&st, &ut)?;
        let q = obs.q_obs[i];
        su += pts.iter().zip(&w.mean).map(|(p, wi)| wi * (q - c * p[0].sin()).powi(2)).sum::<f64>();
        let d = traj.mean[i + 1][0] - traj.mean[i][0];
        sw += d * d + traj.cov[i + 1][(0, 0)] + traj.cov[i][(0, 0)] - 2.0 * traj.cross[i][(0, 0)];
    }
    let mut q_u = su / s as f64;
    let mut q_omega = sw / s as f64;
    let mut clamped = false;
    if !(q_u > VARIANCE_FLOOR) {
        q_u = VARIANCE_FLOOR;
        clamped = true;
    }
    if !(q_omega > VARIANCE_FLOOR) {
        q_omega = VARIANCE_FLOOR;
        clamped = true;
    }
    Ok(MStep { params: NoiseParams { q_omega, q_u }, clamped })
}

/// One EM iteration.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EmStep {
    pub params: NoiseParams,
    /// Innovation log-likelihood under the parameters the E-step used.
    pub log_likelihood: f64,
    pub clamped: bool,
}

pub fn em_iterate(obs: &ObservationVector, current: &NoiseParams, model: &DoaModel) -> Result<EmStep> {
    if model.ut.dim == 1 {
        return scalar::em_iterate(obs, current, model);
    }
    let (traj, run) = smooth_doa(obs, current, model)?;
    let m = m_step(obs, &traj, model)?;
    Ok(EmStep { params: m.params, log_likelihood: run.log_likelihood, clamped: m.clamped })
}

/// Allocation-free scalar versions of the filter, smoother and M-step.
/// Same arithmetic as the generic path; checked against it in the tests.
mod scalar {
    use super::*;
    use crate::ukf::Weights;

    const JITTER: f64 = 1e-12;

    fn points(m: f64, p: f64, w: &Weights) -> Result<[f64; 3]> {
        let tol = 1e-14 * p.abs().max(f64::MIN_POSITIVE);
        let l = if p > tol {
            p.sqrt()
        } else if p >= -tol.max(1e-300) * 1e3 {
            0.0
        } else if p + JITTER > 0.0 {
            (p + JITTER).sqrt()
        } else {
            return Err(Error::Cholesky);
        };
        Ok([m, m + w.spread * l, m - w.spread * l])
    }

    fn mean3(v: &[f64; 3], w: &Weights) -> f64 {
        v[0] * w.mean[0] + v[1] * w.mean[1] + v[2] * w.mean[2]
    }

    fn cross3(a: &[f64; 3], am: f64, b: &[f64; 3], bm: f64, w: &Weights) -> f64 {
        (0..3).map(|i| (a[i] - am) * (b[i] - bm) * w.cov[i]).sum()
    }

    /// Identity dynamics prediction: `(mean, var, cov(x_prev, x_pred))`.
    fn predict(m: f64, p: f64, q: f64, w: &Weights) -> Result<(f64, f64, f64)> {
        let chi = points(m, p, w)?;
        let mp = mean3(&chi, w);
        let pp = cross3(&chi, mp, &chi, mp, w) + q;
        let c = cross3(&chi, m, &chi, mp, w);
        Ok((mp, pp, c))
    }

    pub(super) struct Pass {
        pub mean: Vec<f64>,
        pub var: Vec<f64>,
        pub log_likelihood: f64,
    }

    pub(super) fn filter(obs: &ObservationVector, params: &NoiseParams, model: &DoaModel) -> Result<Pass> {
        let w = model.ut.weights();
        let s = obs.len();
        let mut mean = Vec::with_capacity(s + 1);
        let mut var = Vec::with_capacity(s + 1);
        mean.push(model.prior_mean);
        var.push(model.prior_var);
        let mut ll = 0.0;
        for (i, &y) in obs.q_obs.iter().enumerate() {
            let (mp, pp, _) = predict(mean[i], var[i], params.q_omega, &w)?;
            let xi = points(mp, pp, &w)?;
            let ys = xi.map(|x| model.measure(x));
            let yp = mean3(&ys, &w);
            let pyy = cross3(&ys, yp, &ys, yp, &w) + params.q_u;
            let pxy = cross3(&xi, mp, &ys, yp, &w);
            if !(pyy > 0.0) || !(1.0 / pyy).is_finite() {
                return Err(Error::SingularInnovation { block: i });
            }
            let k = pxy / pyy;
            let innov = y - yp;
            mean.push(mp + k * innov);
            var.push(pp - k * pyy * k);
            ll += -0.5 * ((2.0 * std::f64::consts::PI).ln() + pyy.ln() + innov * innov / pyy);
        }
        Ok(Pass { mean, var, log_likelihood: ll })
    }

    /// Smoothed `(mean, var, lag-one cross)` over the filtered pass.
    pub(super) fn smooth(f: &Pass, q: f64, w: &Weights) -> Result<(Vec<f64>, Vec<f64>, Vec<f64>)> {
        let t = f.mean.len();
        let mut mean = vec![f.mean[t - 1]; t];
        let mut var = vec![f.var[t - 1]; t];
        let mut cross = vec![0.0; t - 1];
        for z in (0..t - 1).rev() {
            let (mp, pp, c) = predict(f.mean[z], f.var[z], q, w)?;
            if !(pp > 0.0) || !(1.0 / pp).is_finite() {
                return Err(Error::SingularPrediction { block: z + 1 });
            }
            let g = c / pp;
            mean[z] = f.mean[z] + g * (mean[z + 1] - mp);
            var[z] = f.var[z] + g * (var[z + 1] - pp) * g;
            cross[z] = g * var[z + 1];
        }
        Ok((mean, var, cross))
    }

    pub(super) fn em_iterate(obs: &ObservationVector, current: &NoiseParams, model: &DoaModel) -> Result<EmStep> {
        let w = model.ut.weights();
        let f = filter(obs, current, model)?;
        let (mean, var, cross) = smooth(&f, current.q_omega, &w)?;
        let w1 = UtConfig::new(1).weights();
        let c = model.bins_per_sine;
        let s = obs.len();
        let mut su = 0.0;
        let mut sw = 0.0;
        for i in 0..s {
            let pts = points(mean[i + 1], var[i + 1], &w1)?;
            let q = obs.q_obs[i];
            su += pts.iter().zip(&w1.mean).map(|(p, wi)| wi * (q - c * p.sin()).powi(2)).sum::<f64>();
            let d = mean[i + 1] - mean[i];
            sw += d * d + var[i + 1] + var[i] - 2.0 * cross[i];
        }
        let mut q_u = su / s as f64;
        let mut q_omega = sw / s as f64;
        let mut clamped = false;
        if !(q_u > VARIANCE_FLOOR) {
            q_u = VARIANCE_FLOOR;
            clamped = true;
        }
        if !(q_omega > VARIANCE_FLOOR) {
            q_omega = VARIANCE_FLOOR;
            clamped = true;
        }
        Ok(EmStep { params: NoiseParams { q_omega, q_u }, log_likelihood: f.log_likelihood, clamped })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmOutcome {
    pub params: NoiseParams,
    /// Log-likelihood before each iteration, then under the returned parameters.
    pub trace: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    pub clamped: bool,
}

/// Iterates EM until the largest relative parameter change drops below `tol`.
pub fn em_learn(obs: &ObservationVector, init: &NoiseParams, model: &DoaModel, max_iters: usize, tol: f64) -> Result<EmOutcome> {
    if max_iters == 0 {
        return Err(Error::Config("EM needs at least one iteration".into()));
    }
    if !(init.q_omega > 0.0 && init.q_u > 0.0) {
        return Err(Error::Config(format!("initial noise parameters must be positive: {init:?}")));
    }
    let mut params = *init;
    let mut trace = Vec::with_capacity(max_iters + 1);
    let mut converged = false;
    let mut clamped = false;
    let mut iterations = 0;
    for _ in 0..max_iters {
        let step = em_iterate(obs, &params, model)?;
        iterations += 1;
        trace.push(step.log_likelihood);
        clamped |= step.clamped;
        let change = params.relative_change(&step.params);
        params = step.params;
        if change < tol {
            converged = true;
            break;
        }
    }
    trace.push(final_log_likelihood(obs, &params, model)?);
    Ok(EmOutcome { params, trace, iterations, converged, clamped })
}

fn final_log_likelihood(obs: &ObservationVector, params: &NoiseParams, model: &DoaModel) -> Result<f64> {
    if model.ut.dim == 1 {
        return Ok(scalar::filter(obs, params, model)?.log_likelihood);
    }
    Ok(filter_doa(obs, params, model)?.log_likelihood)
}

/// Filtered angle estimate after each observation.
pub fn track_doa(obs: &ObservationVector, params: &NoiseParams, model: &DoaModel) -> Result<Vec<f64>> {
    if model.ut.dim == 1 {
        return Ok(scalar::filter(obs, params, model)?.mean.split_off(1));
    }
    let run = filter_doa(obs, params, model)?;
    Ok(run.filtered[1..].iter().map(|f| f.mean[0]).collect())
}

/// Joint tracker for the users of one group: the state stacks their angles,
/// process and measurement noise are diagonal.
pub fn track_group(obs: &[ObservationVector], params: &[NoiseParams], models: &[DoaModel]) -> Result<Vec<Vec<f64>>> {
    let r = obs.len();
    if r == 0 || params.len() != r || models.len() != r {
        return Err(Error::Dimension("one observation vector, parameter set and model per user".into()));
    }
    let s = obs[0].len();
    if obs.iter().any(|o| o.len() != s) {
        return Err(Error::Dimension("observation vectors of unequal length".into()));
    }
    let prior = FilterState::new(
        DVector::from_iterator(r, models.iter().map(|m| m.prior_mean)),
        DMatrix::from_diagonal(&DVector::from_iterator(r, models.iter().map(|m| m.prior_var))),
    );
    let q = DMatrix::from_diagonal(&DVector::from_iterator(r, params.iter().map(|p| p.q_omega)));
    let rr = DMatrix::from_diagonal(&DVector::from_iterator(r, params.iter().map(|p| p.q_u)));
    let ys: Vec<DVector<f64>> = (0..s).map(|i| DVector::from_iterator(r, obs.iter().map(|o| o.q_obs[i]))).collect();
    let meas = |x: &DVector<f64>| DVector::from_iterator(r, x.iter().zip(models).map(|(t, m)| m.measure(*t)));
    let run = filter_sequence(&prior, &ys, &q, &rr, &UtConfig::new(r), |x: &DVector<f64>| x.clone(), meas)?;
    Ok((0..r).map(|u| run.filtered[1..].iter().map(|f| f.mean[u]).collect()).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn markov_step_without_noise_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert_eq!(markov_step(0.3, 0.0, &mut rng), 0.3);
    }

    #[test]
    fn markov_step_variance() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let q = 2.5e-5;
        let n = 100_000;
        let d: Vec<f64> = (0..n).map(|_| markov_step(0.0, q, &mut rng)).collect();
        let mean = d.iter().sum::<f64>() / n as f64;
        let var = d.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        assert!((var / q - 1.0).abs() < 0.03);
    }

    #[test]
    fn observation_picks_window_peak() {
        let mut p = vec![0.01; 128];
        p[30] = 5.0;
        p[90] = 9.0;
        let pred = SsiSet::centered(28, 5, 128);
        assert_eq!(observe_from_profile(&p, &pred, 8).unwrap(), 30.0);
        let pred = SsiSet::centered(1, 3, 128);
        p[127] = 4.0;
        assert_eq!(observe_from_profile(&p, &pred, 4).unwrap(), -1.0);
    }

    #[test]
    fn flat_profile_is_no_signal() {
        let p = vec![1.0; 64];
        let e = observe_from_profile(&p, &SsiSet::centered(10, 3, 64), 4).unwrap_err();
        assert!(matches!(e, Error::NoSignal { .. }));
        assert!(observe_from_profile(&vec![0.0; 64], &SsiSet::centered(10, 3, 64), 4).is_err());
    }

    #[test]
    fn constant_noiseless_trajectory_floors_both_variances() {
        let model = DoaModel { rounding: false, ..DoaModel::anchored(64.0, 10.0, false) };
        let q0 = model.measure(model.prior_mean);
        let obs = ObservationVector::new(vec![q0; 60]).unwrap();
        let out = em_learn(&obs, &NoiseParams::initial(), &model, 60, 1e-6).unwrap();
        assert!(out.params.q_u < 1e-3, "{:?}", out.params);
        assert!(out.params.q_omega < 1e-6, "{:?}", out.params);
    }

    #[test]
    fn anchored_prior_inverts_bin() {
        let m = DoaModel::anchored(64.0, 30.0, true);
        assert!((m.prior_mean - (30.0f64 / 64.0).asin()).abs() < 1e-15);
        assert_eq!(m.measure(m.prior_mean), 30.0);
        assert!((m.invert(30.0) - m.prior_mean).abs() < 1e-15);
    }

    #[test]
    fn scalar_path_matches_generic_path() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for rounding in [false, true] {
            let model = DoaModel::anchored(64.0, 12.0, rounding);
            let mut th = model.prior_mean;
            let q: Vec<f64> = (0..80)
                .map(|_| {
                    th = markov_step(th, 1e-5, &mut rng);
                    model.measure(th) + rng.sample::<f64, _>(StandardNormal)
                })
                .collect();
            let obs = ObservationVector::new(q).unwrap();
            let p = NoiseParams { q_omega: 3e-6, q_u: 0.7 };
            let (traj, run) = smooth_doa(&obs, &p, &model).unwrap();
            let generic = m_step(&obs, &traj, &model).unwrap();
            let fast = em_iterate(&obs, &p, &model).unwrap();
            assert!((fast.log_likelihood - run.log_likelihood).abs() < 1e-9 * run.log_likelihood.abs());
            assert!((fast.params.q_omega / generic.params.q_omega - 1.0).abs() < 1e-9);
            assert!((fast.params.q_u / generic.params.q_u - 1.0).abs() < 1e-9);
            let f = track_doa(&obs, &p, &model).unwrap();
            for (a, b) in f.iter().zip(&run.filtered[1..]) {
                assert!((a - b.mean[0]).abs() < 1e-12);
            }
        }
    }
}
