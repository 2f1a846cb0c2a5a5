//! Beamspace (DFT) and CE-BEM temporal expansions, and SSI interval arithmetic.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::channel::{SpatialState, SystemConfig};
use crate::linalg::{dft, dft_columns, idft, idft_columns};
use crate::{CMatrix, CVector, Error, Result, C64};

/// Contiguous interval of beamspace bins on the `M`-bin circle.
///
/// Bounds are kept on the unwrapped integer line so that intervals crossing
/// bin 0 stay contiguous; [`SsiSet::bins`] reduces them modulo `M`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SsiSet {
    lo: i64,
    hi: i64,
    center: i64,
    m: usize,
}

impl SsiSet {
    pub fn new(lo: i64, hi: i64, center: i64, m: usize) -> Result<Self> {
        if m == 0 || lo > center || center > hi {
            return Err(Error::Config(format!("invalid SSI interval [{lo}, {hi}] centre {center}")));
        }
        if (hi - lo + 1) as usize > m {
            return Err(Error::Config(format!("SSI interval [{lo}, {hi}] wider than {m} bins")));
        }
        Ok(SsiSet { lo, hi, center, m })
    }

    /// Interval clamped to at most `M` bins around `center`.
    pub fn clamped(lo: i64, hi: i64, center: i64, m: usize) -> Self {
        let mut lo = lo.min(center);
        let mut hi = hi.max(center);
        let mm = m as i64;
        if hi - lo + 1 > mm {
            let extra = hi - lo + 1 - mm;
            let cut_lo = extra / 2;
            lo += cut_lo;
            hi -= extra - cut_lo;
            lo = lo.min(center);
            hi = hi.max(center);
            if hi - lo + 1 > mm {
                hi = lo + mm - 1;
            }
        }
        SsiSet { lo, hi, center: center.clamp(lo, hi), m }
    }

    /// `size` bins centred on `center` (extra bin of an even size goes right).
    pub fn centered(center: i64, size: usize, m: usize) -> Self {
        let size = size.clamp(1, m) as i64;
        let lo = center - (size - 1) / 2;
        SsiSet { lo, hi: lo + size - 1, center, m }
    }

    /// All `M` bins.
    pub fn full(m: usize) -> Self {
        SsiSet { lo: 0, hi: m as i64 - 1, center: (m / 2) as i64, m }
    }

    pub fn lo(&self) -> i64 {
        self.lo
    }

    pub fn hi(&self) -> i64 {
        self.hi
    }

    /// Centre on the unwrapped line.
    pub fn center(&self) -> i64 {
        self.center
    }

    /// Centre reduced to `0..M`.
    pub fn center_bin(&self) -> usize {
        self.center.rem_euclid(self.m as i64) as usize
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn size(&self) -> usize {
        (self.hi - self.lo + 1) as usize
    }

    /// True when the interval crosses the `M-1 -> 0` boundary.
    pub fn wraps(&self) -> bool {
        let mm = self.m as i64;
        self.lo.div_euclid(mm) != self.hi.div_euclid(mm)
    }

    /// Member bins in `0..M`, from `lo` to `hi`.
    pub fn bins(&self) -> impl Iterator<Item = usize> + '_ {
        let mm = self.m as i64;
        (self.lo..=self.hi).map(move |q| q.rem_euclid(mm) as usize)
    }

    pub fn contains(&self, bin: usize) -> bool {
        let mm = self.m as i64;
        let off = (bin as i64 - self.lo).rem_euclid(mm);
        off < self.size() as i64
    }

    /// Same interval shifted by whole turns so that the centre lies in `0..M`.
    pub fn canonical(&self) -> Self {
        let mm = self.m as i64;
        let shift = self.center.div_euclid(mm) * mm;
        SsiSet { lo: self.lo - shift, hi: self.hi - shift, center: self.center - shift, m: self.m }
    }

    pub fn intersects(&self, other: &SsiSet) -> bool {
        self.bins().any(|b| other.contains(b))
    }
}

/// Smallest contiguous window, grown greedily from the peak, holding a fraction
/// `eta` of the total power of `profile` on the circle.
pub fn power_support(profile: &[f64], eta: f64) -> SsiSet {
    let m = profile.len();
    let peak = argmax(profile);
    let total: f64 = profile.iter().sum();
    grow_support(m, peak as i64, total * eta, |q| profile[q.rem_euclid(m as i64) as usize], i64::MIN, i64::MAX)
}

/// Like [`power_support`] but restricted to the bins of `region`; the fraction
/// is taken relative to the power inside the region.
pub fn power_support_within(profile: &[f64], eta: f64, region: &SsiSet) -> SsiSet {
    let m = profile.len();
    let at = |q: i64| profile[q.rem_euclid(m as i64) as usize];
    let mut peak = region.lo();
    for q in region.lo()..=region.hi() {
        if at(q) > at(peak) {
            peak = q;
        }
    }
    let total: f64 = (region.lo()..=region.hi()).map(at).sum();
    grow_support(m, peak, total * eta, at, region.lo(), region.hi())
}

fn grow_support<F: Fn(i64) -> f64>(m: usize, peak: i64, target: f64, at: F, min_lo: i64, max_hi: i64) -> SsiSet {
    let (mut lo, mut hi) = (peak, peak);
    let mut acc = at(peak);
    while acc < target && ((hi - lo + 1) as usize) < m {
        let can_l = lo > min_lo;
        let can_r = hi < max_hi;
        if !can_l && !can_r {
            break;
        }
        let left = if can_l { at(lo - 1) } else { f64::NEG_INFINITY };
        let right = if can_r { at(hi + 1) } else { f64::NEG_INFINITY };
        if right > left {
            hi += 1;
            acc += right;
        } else {
            lo -= 1;
            acc += left;
        }
    }
    SsiSet { lo, hi, center: peak, m }
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// SSI interval implied by a central DOA and maximum spread.
pub fn ssi_from_angles(cfg: &SystemConfig, spatial: &SpatialState) -> SsiSet {
    ssi_from_angles_raw(cfg.m, cfg.bins_per_sine(), spatial.central_doa, spatial.max_as)
}

pub(crate) fn ssi_from_angles_raw(m: usize, c: f64, theta: f64, dtheta: f64) -> SsiSet {
    let dtheta = dtheta.max(0.0);
    let lo = (c * (theta - dtheta).sin()).floor() as i64;
    let hi = (c * (theta + dtheta).sin()).ceil() as i64;
    let center = (c * theta.sin()).round() as i64;
    SsiSet::clamped(lo, hi, center, m)
}

/// Leakage-free SSI size `ceil(2 (M d/lambda) |cos theta| dtheta)`, at least 1.
pub fn asymptotic_ssi_size(cfg: &SystemConfig, spatial: &SpatialState) -> usize {
    let w = 2.0 * cfg.bins_per_sine() * spatial.central_doa.cos().abs() * spatial.max_as;
    (w.ceil() as usize).clamp(1, cfg.m)
}

/// Unitary DFT of an antenna-domain vector.
pub fn dft_beamspace(h: &CVector) -> CVector {
    dft(h)
}

/// Block-averaged beamspace power `(1/N) sum_n |F h(n)|^2` for the columns of `x`.
pub fn beamspace_power(x: &CMatrix) -> Vec<f64> {
    let f = dft_columns(x);
    let n = x.ncols().max(1) as f64;
    f.row_iter().map(|r| r.iter().map(|c| c.norm_sqr()).sum::<f64>() / n).collect()
}

/// CE-BEM order and block length.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BemConfig {
    pub mu: usize,
    pub n: usize,
}

impl BemConfig {
    /// Odd orders are rounded up to the next even value.
    pub fn new(mu: usize, n: usize) -> Self {
        BemConfig { mu: mu + (mu & 1), n }
    }

    /// Smallest admissible order `2 ceil(fd N Ts)` for a system.
    pub fn for_system(cfg: &SystemConfig) -> Self {
        BemConfig::new(min_order(cfg), cfg.n)
    }

    pub fn check_against(&self, cfg: &SystemConfig) -> Result<()> {
        if self.n != cfg.n {
            return Err(Error::Config(format!("BEM block length {} differs from N = {}", self.n, cfg.n)));
        }
        if self.mu < min_order(cfg) {
            return Err(Error::Config(format!("BEM order {} below 2*ceil(fd N Ts) = {}", self.mu, min_order(cfg))));
        }
        Ok(())
    }

    /// `mu + 1`.
    pub fn width(&self) -> usize {
        self.mu + 1
    }
}

fn min_order(cfg: &SystemConfig) -> usize {
    2 * (cfg.doppler_block_product() - 1e-9).ceil().max(0.0) as usize
}

/// `c_n[r] = exp(j 2 pi (r - mu/2) n / N)`.
pub fn basis_vector(bem: &BemConfig, n: usize) -> CVector {
    let half = (bem.mu / 2) as f64;
    let w = 2.0 * PI * n as f64 / bem.n as f64;
    CVector::from_fn(bem.width(), |r, _| C64::from_polar(1.0, (r as f64 - half) * w))
}

/// Columns `c_n` for each slot in `slots`.
pub fn basis_matrix(bem: &BemConfig, slots: &[usize]) -> CMatrix {
    let mut c = CMatrix::zeros(bem.width(), slots.len());
    for (j, &n) in slots.iter().enumerate() {
        c.set_column(j, &basis_vector(bem, n));
    }
    c
}

/// All slots of a block.
pub fn full_slots(bem: &BemConfig) -> Vec<usize> {
    (0..bem.n).collect()
}

/// Per-user ST-BEM coefficient matrix; row `q` is `gamma_q^T`.
#[derive(Debug, Clone, PartialEq)]
pub struct BemCoefficients {
    pub gamma: CMatrix,
}

impl BemCoefficients {
    pub fn zeros(m: usize, bem: &BemConfig) -> Self {
        BemCoefficients { gamma: CMatrix::zeros(m, bem.width()) }
    }

    /// Exact least-squares coefficients of a whole block restricted to `ssi`.
    pub fn fit_block(h: &CMatrix, ssi: &SsiSet, bem: &BemConfig) -> Result<Self> {
        let beam = dft_columns(h);
        let mut gamma = CMatrix::zeros(h.nrows(), bem.width());
        for q in ssi.bins() {
            let series: Vec<C64> = beam.row(q).iter().cloned().collect();
            let g = cebem_fit(&series, bem)?;
            gamma.set_row(q, &g.transpose());
        }
        Ok(BemCoefficients { gamma })
    }
}

/// `h(n) = sum_{q in ssi} (gamma_q^T c_n) f_q`.
pub fn stbem_reconstruct(gamma: &BemCoefficients, ssi: &SsiSet, bem: &BemConfig, n: usize) -> CVector {
    let c = basis_vector(bem, n);
    let m = gamma.gamma.nrows();
    let mut beam = CVector::zeros(m);
    for q in ssi.bins() {
        beam[q] = gamma.gamma.row(q).iter().zip(c.iter()).map(|(g, c)| g * c).sum();
    }
    idft(&beam)
}

/// Reconstruction of every slot of the block, as an `M x N` matrix.
pub fn stbem_reconstruct_block(gamma: &BemCoefficients, ssi: &SsiSet, bem: &BemConfig) -> CMatrix {
    let c = basis_matrix(bem, &full_slots(bem));
    let m = gamma.gamma.nrows();
    let mut beam = CMatrix::zeros(m, bem.n);
    for q in ssi.bins() {
        let row = gamma.gamma.row(q) * &c;
        beam.set_row(q, &row);
    }
    idft_columns(&beam)
}

/// Least-squares CE-BEM fit of a full block (`N` samples).
pub fn cebem_fit(series: &[C64], bem: &BemConfig) -> Result<CVector> {
    let slots = full_slots(bem);
    if series.len() != slots.len() {
        return Err(Error::Dimension(format!("series of length {} for N = {}", series.len(), bem.n)));
    }
    cebem_fit_at(series, &slots, bem)
}

/// Least-squares CE-BEM fit from samples at arbitrary slots.
pub fn cebem_fit_at(series: &[C64], slots: &[usize], bem: &BemConfig) -> Result<CVector> {
    if series.len() != slots.len() {
        return Err(Error::Dimension(format!("{} samples for {} slots", series.len(), slots.len())));
    }
    if slots.len() < bem.width() {
        return Err(Error::RankDeficient);
    }
    let a = basis_matrix(bem, slots).transpose();
    let svd = a.svd(true, true);
    let smax = svd.singular_values.max();
    let smin = svd.singular_values.min();
    if smin <= 1e-10 * smax {
        return Err(Error::RankDeficient);
    }
    let y = CVector::from_column_slice(series);
    svd.solve(&y, 0.0).map_err(|_| Error::RankDeficient)
}

/// Keeps only the beamspace rows in `ssi`: the best any SSI-restricted model can do.
pub fn sbem_project(h: &CMatrix, ssi: &SsiSet) -> CMatrix {
    let mut beam = dft_columns(h);
    for q in 0..h.nrows() {
        if !ssi.contains(q) {
            beam.row_mut(q).fill(C64::new(0.0, 0.0));
        }
    }
    idft_columns(&beam)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ssi_examples() {
        let cfg = SystemConfig::default();
        let s = ssi_from_angles(&cfg, &SpatialState::uniform(0.0, 0.0));
        assert_eq!((s.center(), s.size()), (0, 1));
        let t = 28f64.to_radians();
        let s = ssi_from_angles(&cfg, &SpatialState::uniform(t, 0.0));
        assert_eq!(s.center(), 30);
        let n = asymptotic_ssi_size(&cfg, &SpatialState::uniform(t, 1f64.to_radians()));
        assert_eq!(n, 2);
    }

    #[test]
    fn negative_angles_wrap() {
        let cfg = SystemConfig::default();
        let s = ssi_from_angles(&cfg, &SpatialState::uniform(-0.02, 0.03));
        assert!(s.wraps());
        assert!(s.contains(0) && s.contains(127));
        assert_eq!(s.center_bin(), 127);
    }

    #[test]
    fn basis_column_symmetry() {
        let bem = BemConfig::new(4, 100);
        let c = basis_vector(&bem, 25);
        assert!((c[2] - C64::new(1.0, 0.0)).norm() < 1e-15);
        for k in 1..=2 {
            assert!((c[2 + k] - c[2 - k].conj()).norm() < 1e-15);
        }
        assert!((c[3] - C64::new(0.0, 1.0)).norm() < 1e-12);
        assert!(basis_vector(&bem, 0).iter().all(|v| (v - C64::new(1.0, 0.0)).norm() < 1e-15));
        let b0 = basis_matrix(&BemConfig::new(0, 10), &[0, 3, 7]);
        assert_eq!(b0.nrows(), 1);
        assert!(b0.iter().all(|v| (v - C64::new(1.0, 0.0)).norm() < 1e-15));
    }

    #[test]
    fn odd_order_rounds_up() {
        assert_eq!(BemConfig::new(3, 100).mu, 4);
        assert_eq!(BemConfig::for_system(&SystemConfig::default()).mu, 4);
    }

    #[test]
    fn cebem_recovers_single_exponential_and_constant() {
        let bem = BemConfig::new(4, 100);
        for r in 0..5 {
            let s: Vec<C64> = (0..100).map(|n| basis_vector(&bem, n)[r]).collect();
            let g = cebem_fit(&s, &bem).unwrap();
            for i in 0..5 {
                let want = if i == r { 1.0 } else { 0.0 };
                assert!((g[i] - C64::new(want, 0.0)).norm() < 1e-12);
            }
        }
        let c = C64::new(0.3, -1.2);
        let g = cebem_fit(&vec![c; 100], &bem).unwrap();
        assert!((g[2] - c).norm() < 1e-12);
        assert!(g.iter().enumerate().all(|(i, v)| i == 2 || v.norm() < 1e-12));
    }

    #[test]
    fn reconstruct_single_bin() {
        let bem = BemConfig::new(2, 10);
        let mut gamma = BemCoefficients::zeros(8, &bem);
        gamma.gamma[(5, 1)] = C64::new(1.0, 0.0);
        let ssi = SsiSet::centered(5, 1, 8);
        let h = stbem_reconstruct(&gamma, &ssi, &bem, 3);
        let mut e = CVector::zeros(8);
        e[5] = C64::new(1.0, 0.0);
        assert!((h - idft(&e)).norm() < 1e-12);
        let z = stbem_reconstruct(&BemCoefficients::zeros(8, &bem), &ssi, &bem, 3);
        assert_eq!(z.norm(), 0.0);
    }

    #[test]
    fn block_reconstruction_matches_per_slot() {
        let bem = BemConfig::new(4, 20);
        let gamma = BemCoefficients {
            gamma: CMatrix::from_fn(16, 5, |i, j| C64::new((i * j) as f64 * 0.1, i as f64 - j as f64)),
        };
        let ssi = SsiSet::new(-2, 3, 0, 16).unwrap();
        let blk = stbem_reconstruct_block(&gamma, &ssi, &bem);
        for n in [0, 7, 19] {
            assert!((blk.column(n) - stbem_reconstruct(&gamma, &ssi, &bem, n)).norm() < 1e-10);
        }
    }

    #[test]
    fn power_support_grows_from_peak() {
        let mut p = vec![0.0; 16];
        p[0] = 5.0;
        p[15] = 3.0;
        p[1] = 1.0;
        p[8] = 1.0;
        let s = power_support(&p, 0.75);
        assert_eq!((s.lo(), s.hi(), s.center()), (-1, 0, 0));
        let s = power_support(&p, 0.85);
        assert_eq!(s.size(), 3);
    }

    #[test]
    fn clamp_keeps_size_at_most_m() {
        let s = SsiSet::clamped(-10, 20, 3, 16);
        assert_eq!(s.size(), 16);
        assert!(s.lo() <= 3 && s.hi() >= 3);
    }
}
