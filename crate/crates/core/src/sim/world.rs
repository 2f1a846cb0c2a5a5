//! Ground truth of one trial: user geometry, DOA trajectories and channels.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::rng::{substream, Stream};
use super::spec::ExperimentSpec;
use crate::basis::{beamspace_power, power_support, SsiSet};
use crate::channel::{complex_gaussian, generate_block, synthesize, ChannelBlock, RayParams, SpatialState, SystemConfig};
use crate::em::markov_step;
use crate::{CMatrix, Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Geometry {
    pub cluster_centers_deg: Vec<f64>,
    pub cluster_of: Vec<usize>,
    pub initial_doa_deg: Vec<f64>,
}

/// Cluster centres by rejection sampling, users uniformly offset around them.
pub(crate) fn draw_geometry<R: Rng>(spec: &ExperimentSpec, k: usize, rng: &mut R) -> Result<Geometry> {
    let span = spec.cluster_span_deg;
    let mut centers = Vec::new();
    for _attempt in 0..100_000 {
        centers = (0..spec.clusters).map(|_| rng.random_range(-span..=span)).collect::<Vec<f64>>();
        let ok = (0..centers.len())
            .all(|i| ((i + 1)..centers.len()).all(|j| (centers[i] - centers[j]).abs() >= spec.cluster_min_sep_deg));
        if ok {
            break;
        }
        centers.clear();
    }
    if centers.is_empty() {
        return Err(Error::Config(format!(
            "cannot place {} clusters {} degrees apart within +-{span} degrees",
            spec.clusters, spec.cluster_min_sep_deg
        )));
    }
    centers.sort_by(|a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal));
    let cluster_of: Vec<usize> = (0..k).map(|u| u * spec.clusters / k).collect();
    let off = spec.user_offset_deg;
    let initial_doa_deg = cluster_of
        .iter()
        .map(|&c| centers[c] + if off > 0.0 { rng.random_range(-off..=off) } else { 0.0 })
        .collect();
    Ok(Geometry { cluster_centers_deg: centers, cluster_of, initial_doa_deg })
}

/// Process-noise variance of the true trajectory: `(v T_block / R)^2` rad^2.
pub(crate) fn true_q_omega(spec: &ExperimentSpec, cfg: &SystemConfig) -> f64 {
    let v = spec.speed_kmh / 3.6;
    let step = v * cfg.n as f64 * cfg.ts / spec.cell_radius_m;
    step * step
}

/// Everything about one trial that does not depend on the SNR.
pub(crate) struct World<'a> {
    pub cfg: &'a SystemConfig,
    pub spec: &'a ExperimentSpec,
    pub seed: u64,
    pub trial: usize,
    pub geometry: Geometry,
    /// `truth[k][zeta]` in radians.
    pub truth: Vec<Vec<f64>>,
    pub max_as: f64,
}

impl<'a> World<'a> {
    pub fn new(cfg: &'a SystemConfig, spec: &'a ExperimentSpec, trial: usize) -> Result<Self> {
        let seed = cfg.seed;
        let geometry = draw_geometry(spec, cfg.k, &mut substream(seed, trial, Stream::Geometry, 0))?;
        let q = true_q_omega(spec, cfg);
        let mut rng = substream(seed, trial, Stream::Trajectory, 0);
        let truth = geometry
            .initial_doa_deg
            .iter()
            .map(|d| {
                let mut t = Vec::with_capacity(spec.n_blocks);
                let mut cur = d.to_radians();
                for z in 0..spec.n_blocks {
                    if z > 0 {
                        cur = markov_step(cur, q, &mut rng);
                    }
                    t.push(cur);
                }
                t
            })
            .collect();
        Ok(World { cfg, spec, seed, trial, geometry, truth, max_as: spec.max_as_deg.to_radians() })
    }

    pub fn users(&self) -> usize {
        self.cfg.k
    }

    pub fn spatial(&self, zeta: usize) -> Vec<SpatialState> {
        self.truth.iter().map(|t| SpatialState::uniform(t[zeta], self.max_as)).collect()
    }

    /// Uplink channel of block `zeta`; identical on every call.
    pub fn uplink_block(&self, zeta: usize) -> Result<ChannelBlock> {
        generate_block(self.cfg, &self.spatial(zeta), zeta, &mut substream(self.seed, self.trial, Stream::Channel, zeta))
    }

    /// Downlink channel over `dl_slots` slots of the same block duration.
    ///
    /// Ray directions and motion angles are shared with the uplink; gains
    /// and initial phases are redrawn.
    pub fn downlink_block(&self, ul: &ChannelBlock) -> Vec<CMatrix> {
        let r = self.spec.lambda_ratio;
        let slots = self.spec.dl_slots;
        let ts = self.cfg.ts * self.cfg.n as f64 / slots as f64;
        let mut rng = substream(self.seed, self.trial, Stream::DownlinkChannel, ul.block_index);
        ul.rays
            .iter()
            .map(|rays| {
                let dl: Vec<RayParams> = rays
                    .iter()
                    .map(|ray| RayParams {
                        gain: complex_gaussian(&mut rng, 1.0),
                        init_phase: rng.random::<f64>() * 2.0 * std::f64::consts::PI,
                        ..*ray
                    })
                    .collect();
                synthesize(self.cfg.m, self.cfg.d_over_lambda * r, self.cfg.fd * r, ts, &dl, slots)
            })
            .collect()
    }
}

/// Highest-power interval of a noiseless channel, with its centre moved to `[-M/2, M/2)`.
pub(crate) fn support_of(h: &CMatrix, eta: f64) -> SsiSet {
    signed(power_support(&beamspace_power(h), eta))
}

/// Shifts an interval by whole turns so its centre lies in `[-M/2, M/2)`.
pub(crate) fn signed(s: SsiSet) -> SsiSet {
    let c = s.canonical();
    let m = c.m() as i64;
    if c.center() >= m / 2 {
        SsiSet::new(c.lo() - m, c.hi() - m, c.center() - m, c.m()).expect("shift keeps ordering")
    } else {
        c
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn geometry_respects_separation() {
        let spec = ExperimentSpec::default();
        for s in 0..20 {
            let g = draw_geometry(&spec, 12, &mut ChaCha8Rng::seed_from_u64(s)).unwrap();
            for w in g.cluster_centers_deg.windows(2) {
                assert!(w[1] - w[0] >= spec.cluster_min_sep_deg);
            }
            for (u, d) in g.initial_doa_deg.iter().enumerate() {
                assert!((d - g.cluster_centers_deg[g.cluster_of[u]]).abs() <= spec.user_offset_deg);
            }
            assert_eq!(g.cluster_of.iter().filter(|&&c| c == 0).count(), 3);
        }
    }

    #[test]
    fn impossible_separation_is_a_config_error() {
        let spec = ExperimentSpec { cluster_span_deg: 10.0, cluster_min_sep_deg: 15.0, ..Default::default() };
        let e = draw_geometry(&spec, 12, &mut ChaCha8Rng::seed_from_u64(0)).unwrap_err();
        assert!(e.is_config());
    }

    #[test]
    fn speed_mapping() {
        let spec = ExperimentSpec::default();
        let cfg = SystemConfig::default();
        let q = true_q_omega(&spec, &cfg);
        let expect = 80.0 / 3.6 * 0.01 / 500.0;
        assert!((q.sqrt() - expect).abs() < 1e-15);
    }

    #[test]
    fn signed_interval() {
        let s = SsiSet::new(120, 125, 122, 128).unwrap();
        let t = signed(s);
        assert_eq!((t.lo(), t.center(), t.hi()), (-8, -6, -3));
    }
}
