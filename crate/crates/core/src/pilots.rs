//! Pilot design, uplink least-squares recovery of BEM coefficients, and
//! downlink training through angle reciprocity.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::basis::{basis_vector, BemCoefficients, BemConfig, SsiSet};
use crate::linalg::{dft_columns, pinv};
use crate::{CMatrix, CVector, Error, Result, C64};

/// Who shares the pilot sequences: uplink groups or downlink beams.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PilotMode {
    Uplink { groups: usize },
    Downlink { tau: usize },
}

impl PilotMode {
    /// Number of distinct sequences.
    pub fn count(&self) -> usize {
        match *self {
            PilotMode::Uplink { groups } => groups,
            PilotMode::Downlink { tau } => tau,
        }
    }
}

/// Equi-spaced phase-shift pilots.
#[derive(Debug, Clone)]
pub struct PilotBook {
    pub mode: PilotMode,
    pub slots: Vec<usize>,
    /// `sequences[g][i] = s_g(n_i)`; each has unit energy.
    pub sequences: Vec<Vec<C64>>,
    pub t: usize,
    pub mu: usize,
    pub n: usize,
    /// Pilot energy per user over the block.
    pub power: f64,
    stacked: std::sync::OnceLock<CMatrix>,
}

impl PartialEq for PilotBook {
    fn eq(&self, other: &Self) -> bool {
        self.mode == other.mode
            && self.slots == other.slots
            && self.sequences == other.sequences
            && self.t == other.t
            && self.mu == other.mu
            && self.n == other.n
            && self.power == other.power
    }
}

fn smallest_divisor_at_least(n: usize, lower: usize) -> Option<usize> {
    (lower.max(1)..=n).find(|t| n.is_multiple_of(*t))
}

/// Pilots for `mode` with the shortest length `T >= count (mu + 1)` that divides `N`,
/// so that slot spacing `N / T` is exact and the sequences are orthonormal.
pub fn design_pilots(mode: PilotMode, mu: usize, n: usize) -> Result<PilotBook> {
    let need = mode.count() * (mu + 1);
    if need == 0 {
        return Err(Error::Config("pilot design needs at least one sequence".into()));
    }
    let t = smallest_divisor_at_least(n, need).ok_or(Error::PilotInfeasible { t: need, n })?;
    design_pilots_with_length(mode, mu, n, t)
}

/// Pilots with an explicit length `T`; slots are `n_i = i floor(N / T)`.
pub fn design_pilots_with_length(mode: PilotMode, mu: usize, n: usize, t: usize) -> Result<PilotBook> {
    let count = mode.count();
    if t > n {
        return Err(Error::PilotInfeasible { t, n });
    }
    if t < count * (mu + 1) || t == 0 {
        return Err(Error::PilotDesign(format!("T = {t} below {} sequences x {} coefficients", count, mu + 1)));
    }
    let spacing = n / t;
    let slots: Vec<usize> = (0..t).map(|i| i * spacing).collect();
    let amp = (1.0 / t as f64).sqrt();
    let sequences = (0..count)
        .map(|g| {
            (0..t)
                .map(|i| C64::from_polar(amp, 2.0 * PI * (i * g * (mu + 1)) as f64 / t as f64))
                .collect()
        })
        .collect();
    Ok(PilotBook { mode, slots, sequences, t, mu, n, power: t as f64, stacked: std::sync::OnceLock::new() })
}

impl PilotBook {
    pub fn with_power(mut self, power: f64) -> Self {
        self.power = power;
        self
    }

    pub fn bem(&self) -> BemConfig {
        BemConfig { mu: self.mu, n: self.n }
    }

    /// True when the slot spacing `N / T` is exact, which makes the
    /// stacked pilot matrix orthonormal.
    pub fn is_equispaced(&self) -> bool {
        self.n.is_multiple_of(self.t)
    }

    /// Stacked `[C S_1; ..; C S_G]`, `count (mu + 1) x T` (cached).
    pub fn stacked_matrix(&self) -> &CMatrix {
        self.stacked.get_or_init(|| self.build_stacked())
    }

    fn build_stacked(&self) -> CMatrix {
        let w = self.mu + 1;
        let bem = self.bem();
        let cols: Vec<CVector> = self.slots.iter().map(|&n| basis_vector(&bem, n)).collect();
        let mut psi = CMatrix::zeros(self.sequences.len() * w, self.t);
        for (g, seq) in self.sequences.iter().enumerate() {
            for (i, c) in cols.iter().enumerate() {
                for r in 0..w {
                    psi[(g * w + r, i)] = c[r] * seq[i];
                }
            }
        }
        psi
    }

    /// Largest entry of `Psi Psi^H - I`.
    pub fn orthogonality_error(&self) -> f64 {
        let psi = self.stacked_matrix();
        let g = psi * psi.adjoint();
        let mut worst: f64 = 0.0;
        for i in 0..g.nrows() {
            for j in 0..g.ncols() {
                let want = if i == j { 1.0 } else { 0.0 };
                worst = worst.max((g[(i, j)] - C64::new(want, 0.0)).norm());
            }
        }
        worst
    }

    /// Predicted `E ||Gamma_hat - Gamma||_F^2 = M sigma^2 tr((Psi Psi^H)^-1) / P`.
    pub fn predicted_mse(&self, m: usize, noise_var: f64) -> Result<f64> {
        let psi = self.stacked_matrix();
        let g = psi * psi.adjoint();
        let inv = g.try_inverse().ok_or_else(|| Error::PilotDesign("singular pilot Gram matrix".into()))?;
        let tr: f64 = (0..inv.nrows()).map(|i| inv[(i, i)].re).sum();
        Ok(m as f64 * noise_var * tr / self.power)
    }

    /// Right inverse of the stacked matrix; its adjoint when orthonormal.
    fn right_inverse(&self) -> Result<CMatrix> {
        let psi = self.stacked_matrix();
        if self.is_equispaced() {
            return Ok(psi.adjoint());
        }
        let (p, rank) = pinv(psi, 1e-10);
        if rank < psi.nrows() {
            return Err(Error::PilotDesign(format!("stacked pilot matrix has rank {rank} < {}", psi.nrows())));
        }
        Ok(p)
    }

    /// Transmit matrix `sqrt(P) s_g(n_i)` of sequence `g` over the pilot slots.
    pub fn scaled_sequence(&self, g: usize) -> Vec<C64> {
        let a = self.power.sqrt();
        self.sequences[g].iter().map(|s| s * a).collect()
    }
}

/// `Gamma_hat = F Y Psi^+ / sqrt(P)`; `Y` is `M x T`, the result `M x count (mu + 1)`.
pub fn ls_estimate_gamma(y: &CMatrix, book: &PilotBook) -> Result<CMatrix> {
    if y.ncols() != book.t {
        return Err(Error::Dimension(format!("{} pilot snapshots for T = {}", y.ncols(), book.t)));
    }
    let p = book.right_inverse()?;
    Ok(dft_columns(y) * p / C64::new(book.power.sqrt(), 0.0))
}

/// Rows of `ssi` from the column block of `group_slot`; other rows zero.
pub fn extract_user_gamma(gamma_hat: &CMatrix, ssi: &SsiSet, group_slot: usize, mu: usize) -> BemCoefficients {
    let w = mu + 1;
    let mut gamma = CMatrix::zeros(gamma_hat.nrows(), w);
    for q in ssi.bins() {
        for r in 0..w {
            gamma[(q, r)] = gamma_hat[(q, group_slot * w + r)];
        }
    }
    BemCoefficients { gamma }
}

/// Downlink SSI derived from the uplink one.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DownlinkMap {
    pub ul_wavelength: f64,
    pub dl_wavelength: f64,
    pub ssi_dl: SsiSet,
    pub tau: usize,
}

impl DownlinkMap {
    /// Complex scalars fed back per block.
    pub fn feedback_len(&self, mu: usize) -> usize {
        self.tau * (mu + 1)
    }
}

/// Scales the bounds by `lambda1 / lambda2` with floor on the low edge and
/// ceiling on the high edge.
pub fn reciprocity_map(ssi_ul: &SsiSet, lambda1: f64, lambda2: f64) -> DownlinkMap {
    let r = lambda1 / lambda2;
    let lo = (r * ssi_ul.lo() as f64).floor() as i64;
    let hi = (r * ssi_ul.hi() as f64).ceil() as i64;
    let center = (r * ssi_ul.center() as f64).round() as i64;
    let ssi_dl = SsiSet::clamped(lo, hi, center, ssi_ul.m());
    DownlinkMap { ul_wavelength: lambda1, dl_wavelength: lambda2, ssi_dl, tau: ssi_dl.size() }
}

/// Base-station training signal (`M x T`) for the users of one downlink group:
/// the `i`-th bin of each user is sounded along `conj(f_q)` with sequence `i`.
pub fn downlink_training_signal(book: &PilotBook, maps: &[DownlinkMap], m: usize) -> Result<CMatrix> {
    let mut x = CMatrix::zeros(m, book.t);
    let sm = (m as f64).sqrt();
    for map in maps {
        if map.tau > book.sequences.len() {
            return Err(Error::PilotDesign(format!("user needs {} beams, book has {}", map.tau, book.sequences.len())));
        }
        let amp = (book.power / map.tau as f64).sqrt();
        for (i, q) in map.ssi_dl.bins().enumerate() {
            // conj(f_q)[a] = exp(-j 2 pi a q / M) / sqrt(M)
            let beam = CVector::from_fn(m, |a, _| C64::from_polar(1.0 / sm, -2.0 * PI * (a * q) as f64 / m as f64));
            for (t, s) in book.sequences[i].iter().enumerate() {
                let coef = s * amp;
                let mut col = x.column_mut(t);
                col.axpy(coef, &beam, C64::new(1.0, 0.0));
            }
        }
    }
    Ok(x)
}

/// User-side least squares on its `T` pilot observations; returns
/// `tau x (mu + 1)` coefficients ordered by beam index.
pub fn downlink_train_estimate(y_dl: &[C64], book: &PilotBook, map: &DownlinkMap) -> Result<CMatrix> {
    if y_dl.len() != book.t {
        return Err(Error::Dimension(format!("{} downlink samples for T = {}", y_dl.len(), book.t)));
    }
    let tau = map.tau;
    if tau == 0 || tau > book.sequences.len() {
        return Err(Error::PilotDesign(format!("tau = {tau} outside the book's {} sequences", book.sequences.len())));
    }
    let w = book.mu + 1;
    let psi = book.stacked_matrix().rows(0, tau * w);
    let scale = (book.power / tau as f64).sqrt();
    let y = CVector::from_column_slice(y_dl);
    let g = if book.is_equispaced() {
        // Phi = scale Psi^T has orthogonal columns, Phi^+ = conj(Psi) / scale.
        (psi.map(|c| c.conj()) * y) / C64::new(scale, 0.0)
    } else {
        let phi = psi.transpose() * C64::new(scale, 0.0);
        let (pp, rank) = pinv(&phi, 1e-10);
        if rank < tau * w {
            return Err(Error::PilotDesign(format!("downlink pilot matrix rank {rank} < {}", tau * w)));
        }
        pp * y
    };
    Ok(CMatrix::from_fn(tau, w, |i, r| g[i * w + r]))
}

/// Places fed-back beam coefficients on their downlink bins.
pub fn assemble_downlink(coeffs: &CMatrix, map: &DownlinkMap, m: usize) -> BemCoefficients {
    let mut gamma = CMatrix::zeros(m, coeffs.ncols());
    for (i, q) in map.ssi_dl.bins().enumerate().take(coeffs.nrows()) {
        gamma.set_row(q, &coeffs.row(i));
    }
    BemCoefficients { gamma }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn divisor_rule() {
        assert_eq!(smallest_divisor_at_least(100, 15), Some(20));
        assert_eq!(smallest_divisor_at_least(60, 6), Some(6));
        assert_eq!(smallest_divisor_at_least(200, 28), Some(40));
        assert_eq!(smallest_divisor_at_least(4, 5), None);
    }

    #[test]
    fn single_pilot() {
        let b = design_pilots(PilotMode::Uplink { groups: 1 }, 0, 4).unwrap();
        assert_eq!(b.t, 1);
        assert_eq!(b.slots, vec![0]);
        assert!(b.orthogonality_error() < 1e-15);
    }

    #[test]
    fn infeasible_length() {
        let e = design_pilots(PilotMode::Uplink { groups: 3 }, 4, 10).unwrap_err();
        assert!(matches!(e, Error::PilotInfeasible { .. }));
        let e = design_pilots_with_length(PilotMode::Uplink { groups: 1 }, 0, 4, 5).unwrap_err();
        assert!(matches!(e, Error::PilotInfeasible { t: 5, n: 4 }));
    }

    #[test]
    fn reciprocity_examples() {
        let s = SsiSet::new(28, 33, 30, 128).unwrap();
        assert_eq!(reciprocity_map(&s, 1.0, 1.0).ssi_dl, s);
        let d = reciprocity_map(&s, 1.1, 1.0);
        assert_eq!((d.ssi_dl.lo(), d.ssi_dl.hi(), d.tau), (30, 37, 8));
        let one = SsiSet::new(5, 5, 5, 128).unwrap();
        assert!(reciprocity_map(&one, 0.5, 1.0).tau >= 1);
    }

    #[test]
    fn feedback_payload() {
        let s = SsiSet::new(10, 21, 15, 128).unwrap();
        let d = reciprocity_map(&s, 1.0, 1.0);
        assert_eq!(d.feedback_len(4), 60);
    }
}
