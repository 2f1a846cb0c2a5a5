//! Multi-ray ULA channel generation and uplink reception.

use std::f64::consts::{FRAC_PI_2, PI};

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::numeric::{adaptive_simpson, bessel_j0};
use crate::{CMatrix, CVector, Error, Result, C64};

/// Physical and system constants.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SystemConfig {
    /// Antenna count.
    #[serde(rename = "M")]
    pub m: usize,
    /// Element spacing in carrier wavelengths.
    pub d_over_lambda: f64,
    /// Users.
    #[serde(rename = "K")]
    pub k: usize,
    /// Pilot groups.
    #[serde(rename = "G")]
    pub g: usize,
    /// Slots per block.
    #[serde(rename = "N")]
    pub n: usize,
    /// Sampling period in seconds.
    #[serde(rename = "Ts")]
    pub ts: f64,
    /// Maximum Doppler in Hz.
    pub fd: f64,
    /// Rays per user.
    #[serde(rename = "P")]
    pub p: usize,
    /// Noise power per antenna.
    pub noise_var: f64,
    pub seed: u64,
}

impl Default for SystemConfig {
    fn default() -> Self {
        SystemConfig {
            m: 128,
            d_over_lambda: 0.5,
            k: 12,
            g: 3,
            n: 100,
            ts: 1e-4,
            fd: 200.0,
            p: 20,
            noise_var: 0.1,
            seed: 1,
        }
    }
}

impl SystemConfig {
    pub fn validate(&self) -> Result<()> {
        if self.m < 2 {
            return Err(Error::Config(format!("M must be at least 2, got {}", self.m)));
        }
        if !(self.d_over_lambda > 0.0 && self.d_over_lambda <= 0.5) {
            return Err(Error::Config(format!("d_over_lambda must lie in (0, 0.5], got {}", self.d_over_lambda)));
        }
        if self.n == 0 {
            return Err(Error::Config("N must be positive".into()));
        }
        if !(self.fd >= 0.0 && self.ts > 0.0 && self.fd * self.ts < 0.5) {
            return Err(Error::Config(format!("need fd*Ts < 0.5, got {}", self.fd * self.ts)));
        }
        if self.p == 0 {
            return Err(Error::Config("P must be positive".into()));
        }
        if !(self.noise_var >= 0.0) {
            return Err(Error::Config(format!("noise_var must be non-negative, got {}", self.noise_var)));
        }
        if self.k == 0 {
            return Err(Error::Config("K must be positive".into()));
        }
        Ok(())
    }

    /// Beamspace bins per unit of `sin(theta)`: `M d / lambda`.
    pub fn bins_per_sine(&self) -> f64 {
        self.m as f64 * self.d_over_lambda
    }

    /// Normalised Doppler spread over one block, `fd N Ts`.
    pub fn doppler_block_product(&self) -> f64 {
        self.fd * self.n as f64 * self.ts
    }
}

/// One propagation ray of one user.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RayParams {
    pub gain: C64,
    pub motion_angle: f64,
    pub init_phase: f64,
    pub doa: f64,
    pub as_offset: f64,
}

/// Central DOA and angular spread of one user in one block.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpatialState {
    pub central_doa: f64,
    pub max_as: f64,
    pub as_var: f64,
}

impl SpatialState {
    /// Uniform spread on `[-max_as, max_as]`.
    pub fn uniform(central_doa: f64, max_as: f64) -> Self {
        SpatialState { central_doa, max_as, as_var: max_as * max_as / 3.0 }
    }
}

/// Channels of all users over one block.
#[derive(Debug, Clone)]
pub struct ChannelBlock {
    pub block_index: usize,
    /// `h[k]` is `M x N`; column `n` is `h_k(n)`.
    pub h: Vec<CMatrix>,
    pub rays: Vec<Vec<RayParams>>,
}

impl ChannelBlock {
    pub fn slot(&self, user: usize, n: usize) -> CVector {
        self.h[user].column(n).into_owned()
    }

    pub fn users(&self) -> usize {
        self.h.len()
    }

    pub fn slots(&self) -> usize {
        self.h.first().map_or(0, |h| h.ncols())
    }
}

/// `a_m(theta) = exp(j 2 pi m (d/lambda) sin theta)`.
pub fn steering_vector(cfg: &SystemConfig, theta: f64) -> CVector {
    steering_with_spacing(cfg.m, cfg.d_over_lambda, theta)
}

pub(crate) fn steering_with_spacing(m: usize, d_over_lambda: f64, theta: f64) -> CVector {
    let w = 2.0 * PI * d_over_lambda * theta.sin();
    CVector::from_fn(m, |i, _| C64::from_polar(1.0, w * i as f64))
}

/// Standard circularly-symmetric complex Gaussian sample with variance `var`.
pub fn complex_gaussian<R: Rng + ?Sized>(rng: &mut R, var: f64) -> C64 {
    let s = (0.5 * var).sqrt();
    let re: f64 = rng.sample(StandardNormal);
    let im: f64 = rng.sample(StandardNormal);
    C64::new(s * re, s * im)
}

/// Draws the `P` rays of one user.
pub fn draw_rays<R: Rng + ?Sized>(p: usize, spatial: &SpatialState, rng: &mut R) -> Vec<RayParams> {
    (0..p)
        .map(|_| {
            let gain = complex_gaussian(rng, 1.0);
            let motion_angle = rng.random::<f64>() * 2.0 * PI;
            let init_phase = rng.random::<f64>() * 2.0 * PI;
            let as_offset = if spatial.max_as > 0.0 {
                rng.random_range(-spatial.max_as..=spatial.max_as)
            } else {
                0.0
            };
            RayParams { gain, motion_angle, init_phase, doa: spatial.central_doa + as_offset, as_offset }
        })
        .collect()
}

/// Evaluates the channel of one user at `slots` from its rays.
///
/// `m`, `d_over_lambda`, `fd`, `ts` are passed separately so the same rays can
/// be synthesised on a different carrier.
pub fn synthesize(m: usize, d_over_lambda: f64, fd: f64, ts: f64, rays: &[RayParams], slots: usize) -> CMatrix {
    let p = rays.len().max(1) as f64;
    let amp = 1.0 / p.sqrt();
    let mut a = CMatrix::zeros(m, rays.len());
    let mut coef = CMatrix::zeros(rays.len(), slots);
    for (r, ray) in rays.iter().enumerate() {
        a.set_column(r, &steering_with_spacing(m, d_over_lambda, ray.doa));
        let w = 2.0 * PI * fd * ts * ray.motion_angle.cos();
        for n in 0..slots {
            coef[(r, n)] = ray.gain * amp * C64::from_polar(1.0, -(w * n as f64 + ray.init_phase));
        }
    }
    a * coef
}

/// Draws rays for every user and evaluates their channels over one block.
pub fn generate_block<R: Rng + ?Sized>(
    cfg: &SystemConfig,
    spatial: &[SpatialState],
    zeta: usize,
    rng: &mut R,
) -> Result<ChannelBlock> {
    for s in spatial {
        if s.max_as >= FRAC_PI_2 {
            return Err(Error::SpreadTooWide(s.max_as));
        }
    }
    let mut rays = Vec::with_capacity(spatial.len());
    let mut h = Vec::with_capacity(spatial.len());
    for s in spatial {
        let r = draw_rays(cfg.p, s, rng);
        h.push(synthesize(cfg.m, cfg.d_over_lambda, cfg.fd, cfg.ts, &r, cfg.n));
        rays.push(r);
    }
    Ok(ChannelBlock { block_index: zeta, h, rays })
}

/// Direct evaluation of one slot from a ray list; used to verify stored blocks.
pub fn channel_from_rays(cfg: &SystemConfig, rays: &[RayParams], n: usize) -> CVector {
    let mut h = CVector::zeros(cfg.m);
    for r in rays {
        let phase = 2.0 * PI * cfg.fd * n as f64 * cfg.ts * r.motion_angle.cos() + r.init_phase;
        h += steering_vector(cfg, r.doa) * (r.gain * C64::from_polar(1.0, -phase));
    }
    h / C64::new((rays.len() as f64).sqrt(), 0.0)
}

/// `x(n) = sum_k h_k(n) s_k(n) + w(n)`, returned as an `M x N` matrix.
pub fn uplink_received<R: Rng + ?Sized>(
    block: &ChannelBlock,
    symbols: &[Vec<C64>],
    cfg: &SystemConfig,
    rng: &mut R,
) -> Result<CMatrix> {
    if symbols.len() != block.users() {
        return Err(Error::Dimension(format!("{} symbol streams for {} users", symbols.len(), block.users())));
    }
    let n = block.slots();
    let m = block.h.first().map_or(cfg.m, |h| h.nrows());
    let mut x = CMatrix::zeros(m, n);
    for (h, s) in block.h.iter().zip(symbols) {
        if s.len() != n {
            return Err(Error::Dimension(format!("symbol stream of length {} for {n} slots", s.len())));
        }
        for (j, &sym) in s.iter().enumerate() {
            if sym == C64::new(0.0, 0.0) {
                continue;
            }
            let mut col = x.column_mut(j);
            col.axpy(sym, &h.column(j), C64::new(1.0, 0.0));
        }
    }
    add_noise(&mut x, cfg.noise_var, rng);
    Ok(x)
}

/// Adds i.i.d. `CN(0, var)` noise to every entry.
pub fn add_noise<R: Rng + ?Sized>(x: &mut CMatrix, var: f64, rng: &mut R) {
    if var <= 0.0 {
        return;
    }
    for v in x.iter_mut() {
        *v += complex_gaussian(rng, var);
    }
}

/// Unit-variance complex Gaussian matrix; scaled by the caller.
pub fn unit_noise<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> CMatrix {
    DMatrix::from_fn(rows, cols, |_, _| complex_gaussian(rng, 1.0))
}

/// `J0(2 pi fd m Ts) * g(2 pi (d/lambda) (l - i))` with `g` the spread average of
/// `exp(-j x sin theta)` over `[theta - dtheta, theta + dtheta]`.
pub fn theoretical_correlation(cfg: &SystemConfig, spatial: &SpatialState, lag_m: i64, pair: (usize, usize)) -> C64 {
    let temporal = bessel_j0(2.0 * PI * cfg.fd * lag_m as f64 * cfg.ts);
    let x = 2.0 * PI * cfg.d_over_lambda * (pair.1 as f64 - pair.0 as f64);
    temporal * spatial_correlation(x, spatial)
}

fn spatial_correlation(x: f64, spatial: &SpatialState) -> C64 {
    let c = spatial.central_doa;
    let w = spatial.max_as;
    if w <= 0.0 {
        return C64::from_polar(1.0, -x * c.sin());
    }
    let integral = adaptive_simpson(|y| C64::from_polar(1.0, -x * y.sin()), c - w, c + w, 1e-8 * 2.0 * w);
    integral / (2.0 * w)
}
