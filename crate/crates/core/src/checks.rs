//! Self-contained numerical checks shared by the `selftest` command and the
//! acceptance suite. Each returns the measured quantity next to its verdict.

use std::time::{Duration, Instant};

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::basis::{beamspace_power, cebem_fit, basis_matrix, full_slots, power_support, BemConfig};
use crate::channel::{draw_rays, synthesize, SpatialState, SystemConfig};
use crate::em::{em_learn, markov_step, DoaModel, NoiseParams, ObservationVector};
use crate::linalg::{dft, dft_columns};
use crate::pilots::{design_pilots, PilotMode};
use crate::ukf::{filter_sequence, urtss_pass, FilterState, UtConfig};
use crate::{CVector, Result};

#[derive(Debug, Clone)]
pub struct Check {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
    pub elapsed: Duration,
}

impl Check {
    fn new(name: &'static str, passed: bool, detail: String, start: Instant) -> Self {
        Check { name, passed, detail, elapsed: start.elapsed() }
    }

    pub fn line(&self) -> String {
        format!("{} {}: {} ({:.2} s)", if self.passed { "PASS" } else { "FAIL" }, self.name, self.detail, self.elapsed.as_secs_f64())
    }
}

fn gauss(rng: &mut impl Rng) -> f64 {
    rng.sample(StandardNormal)
}

fn random_matrix(r: usize, c: usize, scale: f64, rng: &mut impl Rng) -> DMatrix<f64> {
    DMatrix::from_fn(r, c, |_, _| scale * gauss(rng))
}

fn random_spd(r: usize, rng: &mut impl Rng) -> DMatrix<f64> {
    let b = random_matrix(r, r, 0.5, rng);
    &b * b.transpose() + DMatrix::identity(r, r) * 0.2
}

fn inverse(a: &DMatrix<f64>) -> DMatrix<f64> {
    a.clone().try_inverse().expect("well-conditioned test matrix")
}

/// Largest deviation of the unscented filter and smoother from the
/// closed-form Kalman filter and RTS smoother on random linear models.
pub fn linear_oracle_deviation(dim: usize, instances: usize, steps: usize, seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..instances {
        let f = DMatrix::identity(dim, dim) * 0.9 + random_matrix(dim, dim, 0.2, &mut rng);
        let h = DMatrix::identity(dim, dim) + random_matrix(dim, dim, 0.3, &mut rng);
        let q = random_spd(dim, &mut rng);
        let r = random_spd(dim, &mut rng);
        let prior = FilterState::new(DVector::from_fn(dim, |_, _| gauss(&mut rng)), random_spd(dim, &mut rng));
        let ys: Vec<DVector<f64>> = (0..steps).map(|_| DVector::from_fn(dim, |_, _| 2.0 * gauss(&mut rng))).collect();

        let ut = UtConfig::new(dim);
        let fs = f.clone();
        let hs = h.clone();
        let run = filter_sequence(&prior, &ys, &q, &r, &ut, move |x: &DVector<f64>| &fs * x, move |x: &DVector<f64>| &hs * x)?;
        let fs = f.clone();
        let smooth = urtss_pass(&run.filtered, &ut, &q, move |x: &DVector<f64>| &fs * x)?;

        let mut m = vec![prior.mean.clone()];
        let mut p = vec![prior.cov.clone()];
        for y in &ys {
            let mp = &f * m.last().unwrap();
            let pp = &f * p.last().unwrap() * f.transpose() + &q;
            let s = &h * &pp * h.transpose() + &r;
            let k = &pp * h.transpose() * inverse(&s);
            m.push(&mp + &k * (y - &h * &mp));
            p.push(&pp - &k * &s * k.transpose());
        }
        let t = m.len();
        let mut ms = m.clone();
        let mut ps = p.clone();
        for z in (0..t - 1).rev() {
            let pp = &f * &p[z] * f.transpose() + &q;
            let g = &p[z] * f.transpose() * inverse(&pp);
            ms[z] = &m[z] + &g * (&ms[z + 1] - &f * &m[z]);
            ps[z] = &p[z] + &g * (&ps[z + 1] - &pp) * g.transpose();
        }
        for z in 0..t {
            worst = worst
                .max((&run.filtered[z].mean - &m[z]).amax())
                .max((&run.filtered[z].cov - &p[z]).amax())
                .max((&smooth.mean[z] - &ms[z]).amax())
                .max((&smooth.cov[z] - &ps[z]).amax());
        }
    }
    Ok(worst)
}

pub fn check_linear_oracle() -> Check {
    let start = Instant::now();
    let res: Result<Vec<f64>> = [1, 3].iter().map(|&d| linear_oracle_deviation(d, 100, 30, 17 + d as u64)).collect();
    match res {
        Ok(v) => {
            let worst = v.iter().cloned().fold(0.0, f64::max);
            let passed = worst <= 1e-8 && start.elapsed() < Duration::from_secs(10);
            Check::new("ukf-urtss linear oracle", passed, format!("max deviation {worst:.2e} (R=1 {:.1e}, R=3 {:.1e})", v[0], v[1]), start)
        }
        Err(e) => Check::new("ukf-urtss linear oracle", false, e.to_string(), start),
    }
}

/// Worst orthogonality residual over `(groups, mu, n)` cases.
pub fn pilot_orthogonality(cases: &[(usize, usize, usize)]) -> Result<f64> {
    let mut worst: f64 = 0.0;
    for &(g, mu, n) in cases {
        let book = design_pilots(PilotMode::Uplink { groups: g }, mu, n)?;
        worst = worst.max(book.orthogonality_error());
    }
    Ok(worst)
}

pub fn check_pilot_orthogonality() -> Check {
    let start = Instant::now();
    match pilot_orthogonality(&[(3, 4, 100), (2, 2, 60), (4, 6, 200)]) {
        Ok(e) => Check::new("pilot orthogonality", e <= 1e-12 && start.elapsed() < Duration::from_secs(1), format!("max residual {e:.2e}"), start),
        Err(e) => Check::new("pilot orthogonality", false, e.to_string(), start),
    }
}

/// Smallest in-band periodogram power fraction over the support bins of
/// `users` channels observed for `slots` consecutive slots.
pub fn spectrum_in_band_fraction(cfg: &SystemConfig, users: usize, slots: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 1.0;
    for _ in 0..users {
        let doa = rng.random_range(-60f64..60.0).to_radians();
        let rays = draw_rays(cfg.p, &SpatialState::uniform(doa, 2f64.to_radians()), &mut rng);
        let h = synthesize(cfg.m, cfg.d_over_lambda, cfg.fd, cfg.ts, &rays, slots);
        let beam = dft_columns(&h);
        let ssi = power_support(&beamspace_power(&h), 0.95);
        for q in ssi.bins() {
            let series = CVector::from_iterator(slots, beam.row(q).iter().cloned());
            let spec = dft(&series);
            let mut inside = 0.0;
            let mut total = 0.0;
            for (i, c) in spec.iter().enumerate() {
                let k = if i <= slots / 2 { i as f64 } else { i as f64 - slots as f64 };
                let f = k / (slots as f64 * cfg.ts);
                let p = c.norm_sqr();
                total += p;
                if f.abs() <= cfg.fd {
                    inside += p;
                }
            }
            worst = worst.min(inside / total);
        }
    }
    worst
}

pub fn check_spectrum_bound() -> Check {
    let start = Instant::now();
    let frac = spectrum_in_band_fraction(&SystemConfig::default(), 4, 20_000, 5);
    let passed = frac >= 0.98 && start.elapsed() < Duration::from_secs(30);
    Check::new("spectrum bound", passed, format!("min in-band fraction {frac:.4}"), start)
}

/// Per-bin CE-BEM fit errors over the 95% support of one noiseless block:
/// `(worst NMSE, mean NMSE)`.
pub fn cebem_bin_nmse(cfg: &SystemConfig, mu: usize, seed: u64) -> Result<(f64, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let doa = rng.random_range(-60f64..60.0).to_radians();
    let rays = draw_rays(cfg.p, &SpatialState::uniform(doa, 2f64.to_radians()), &mut rng);
    let h = synthesize(cfg.m, cfg.d_over_lambda, cfg.fd, cfg.ts, &rays, cfg.n);
    let beam = dft_columns(&h);
    let ssi = power_support(&beamspace_power(&h), 0.95);
    let bem = BemConfig::new(mu, cfg.n);
    let c = basis_matrix(&bem, &full_slots(&bem));
    let mut worst: f64 = 0.0;
    let mut sum = 0.0;
    let mut count = 0;
    for q in ssi.bins() {
        let series: Vec<_> = beam.row(q).iter().cloned().collect();
        let g = cebem_fit(&series, &bem)?;
        let fit = g.transpose() * &c;
        let err: f64 = series.iter().zip(fit.iter()).map(|(a, b)| (a - b).norm_sqr()).sum();
        let pow: f64 = series.iter().map(|a| a.norm_sqr()).sum();
        let e = err / pow;
        worst = worst.max(e);
        sum += e;
        count += 1;
    }
    Ok((worst, sum / count as f64))
}

pub fn check_cebem_order() -> Check {
    let start = Instant::now();
    let cfg = SystemConfig::default();
    let mut worst4: f64 = 0.0;
    let mut mean4 = 0.0;
    let mut mean2 = 0.0;
    for seed in 0..20 {
        match (cebem_bin_nmse(&cfg, 4, seed), cebem_bin_nmse(&cfg, 2, seed)) {
            (Ok(a), Ok(b)) => {
                worst4 = worst4.max(a.0);
                mean4 += a.1 / 20.0;
                mean2 += b.1 / 20.0;
            }
            (Err(e), _) | (_, Err(e)) => return Check::new("ce-bem order", false, e.to_string(), start),
        }
    }
    let passed = worst4 <= 5e-2 && mean4 <= mean2 / 10.0;
    Check::new(
        "ce-bem order",
        passed,
        format!("worst bin NMSE(mu=4) {worst4:.2e}, mean NMSE mu=4 {mean4:.2e} vs mu=2 {mean2:.2e}"),
        start,
    )
}

/// Mean size of the 95%-power beamspace support for a cluster spanning
/// `[lo_deg, hi_deg]`, one slot per draw.
pub fn mean_support_size(cfg: &SystemConfig, lo_deg: f64, hi_deg: f64, draws: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let center = 0.5 * (lo_deg + hi_deg);
    let spread = 0.5 * (hi_deg - lo_deg);
    let spatial = SpatialState::uniform(center.to_radians(), spread.to_radians());
    let mut total = 0.0;
    for _ in 0..draws {
        let rays = draw_rays(cfg.p, &spatial, &mut rng);
        let h = synthesize(cfg.m, cfg.d_over_lambda, cfg.fd, cfg.ts, &rays, 1);
        total += power_support(&beamspace_power(&h), 0.95).size() as f64;
    }
    total / draws as f64
}

pub fn check_ssi_concentration() -> Check {
    let start = Instant::now();
    let size = mean_support_size(&SystemConfig::default(), 27.0, 29.0, 100, 3);
    let passed = (size - 11.0).abs() <= 2.0 && start.elapsed() < Duration::from_secs(10);
    Check::new("ssi concentration", passed, format!("mean 95% support {size:.2} bins (target 11 +- 2)"), start)
}

/// Synthetic DOA sequence from the scalar state-space model.
pub fn planted_observations(params: &NoiseParams, model: &DoaModel, len: usize, rng: &mut impl Rng) -> ObservationVector {
    let mut theta = model.prior_mean;
    let q = (0..len)
        .map(|_| {
            theta = markov_step(theta, params.q_omega, rng);
            model.measure(theta) + params.q_u.sqrt() * gauss(rng)
        })
        .collect();
    ObservationVector { q_obs: q }
}

/// Largest per-iteration likelihood decrease over `runs` EM runs started
/// 100x away from the planted parameters.
pub fn em_worst_decrease(runs: usize, seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let planted = NoiseParams { q_omega: 1e-5, q_u: 0.5 };
    let model = DoaModel::anchored(64.0, 20.0, false);
    let mut worst: f64 = f64::NEG_INFINITY;
    for i in 0..runs {
        let obs = planted_observations(&planted, &model, 200, &mut rng);
        let init = if i % 2 == 0 {
            NoiseParams { q_omega: planted.q_omega * 100.0, q_u: planted.q_u * 100.0 }
        } else {
            NoiseParams { q_omega: planted.q_omega / 100.0, q_u: planted.q_u / 100.0 }
        };
        let out = em_learn(&obs, &init, &model, 50, 1e-12)?;
        for w in out.trace.windows(2) {
            worst = worst.max(w[0] - w[1]);
        }
    }
    Ok(worst)
}

/// Learned-over-planted ratios `(q_omega, q_u)` for one run of length `len`.
pub fn em_recovery_ratio(planted: &NoiseParams, len: usize, seed: u64) -> Result<(f64, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let model = DoaModel::anchored(64.0, 20.0, false);
    let obs = planted_observations(planted, &model, len, &mut rng);
    let out = em_learn(&obs, &NoiseParams::initial(), &model, 2000, 1e-6)?;
    Ok((out.params.q_omega / planted.q_omega, out.params.q_u / planted.q_u))
}

pub fn check_em_behaviour() -> Check {
    let start = Instant::now();
    let dec = match em_worst_decrease(20, 11) {
        Ok(d) => d,
        Err(e) => return Check::new("em behaviour", false, e.to_string(), start),
    };
    let planted = NoiseParams { q_omega: 1e-5, q_u: 0.5 };
    let (ro, ru) = match em_recovery_ratio(&planted, 500, 23) {
        Ok(r) => r,
        Err(e) => return Check::new("em behaviour", false, e.to_string(), start),
    };
    let within = |r: f64| (0.5..=2.0).contains(&r);
    let passed = dec <= 1e-9 && within(ro) && within(ru);
    Check::new(
        "em behaviour",
        passed,
        format!("largest likelihood drop {dec:.2e}; learned/planted Q_omega {ro:.3}, Q_u {ru:.3}"),
        start,
    )
}

/// The suites `selftest` runs.
pub fn selftest() -> Vec<Check> {
    vec![check_linear_oracle(), check_pilot_orthogonality(), check_spectrum_bound(), check_em_behaviour()]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn line_format() {
        let c = Check { name: "x", passed: true, detail: "ok".into(), elapsed: Duration::from_millis(1500) };
        assert_eq!(c.line(), "PASS x: ok (1.50 s)");
    }
}
