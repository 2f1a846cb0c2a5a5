//! One Monte Carlo trial: observation and EM pass, then per-block scoring.
//!
//! Every SNR point of the grid is processed inside the same trial with common
//! random numbers: channels, symbols and unit-variance noise are drawn once per
//! block and the noise is scaled by each SNR's standard deviation.

use std::collections::HashMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::rng::{substream, Stream};
use super::spec::{Baseline, ExperimentSpec, Scenario};
use super::world::{support_of, World};
use super::{score_mse, MetricRow, TraceRow};
use crate::as_track::{estimate_sigma_from_snapshots, TrailingMedian};
use crate::basis::{
    power_support_within, ssi_from_angles_raw, stbem_reconstruct_block, BemConfig, SsiSet,
};
use crate::channel::{complex_gaussian, unit_noise, ChannelBlock, SystemConfig};
use crate::em::{em_learn, observe_from_profile, track_doa, DoaModel, EmOutcome, NoiseParams, ObservationVector};
use crate::grouping::{group_users, GroupPlan, GroupingConfig};
use crate::linalg::dft_columns;
use crate::pilots::{
    assemble_downlink, design_pilots, design_pilots_with_length, downlink_train_estimate, downlink_training_signal,
    extract_user_gamma, ls_estimate_gamma, reciprocity_map, DownlinkMap, PilotBook, PilotMode,
};
use crate::{CMatrix, CVector, Error, Result, C64};

/// Per-trial facts written to the manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialRecord {
    pub trial: usize,
    pub geometry: super::world::Geometry,
    pub groups: GroupPlan,
    pub initial_ssi: Vec<[i64; 3]>,
    pub snr: Vec<SnrRecord>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SnrRecord {
    pub snr_db: f64,
    pub noise_var: f64,
    pub learned: Vec<NoiseParams>,
    pub em_iterations: Vec<usize>,
    pub em_clamped: Vec<bool>,
    /// Blocks where the observation fell below the no-signal threshold and
    /// the previous observation was held.
    pub no_signal_holds: usize,
}

pub(crate) struct TrialOutput {
    pub rows: Vec<MetricRow>,
    pub record: TrialRecord,
    pub trace: Vec<TraceRow>,
}

pub(crate) fn noise_var_for(snr_db: f64) -> f64 {
    10f64.powf(-snr_db / 10.0)
}

fn qpsk<R: Rng>(rng: &mut R) -> (C64, [bool; 2]) {
    let b0 = rng.random::<bool>();
    let b1 = rng.random::<bool>();
    let s = std::f64::consts::FRAC_1_SQRT_2;
    (C64::new(if b0 { -s } else { s }, if b1 { -s } else { s }), [b0, b1])
}

/// Noise-free and unit-noise parts of one group's received block.
struct GroupSignal {
    base: CMatrix,
    noise: CMatrix,
    base_f: CMatrix,
    noise_f: CMatrix,
}

impl GroupSignal {
    fn received(&self, sigma: f64) -> CMatrix {
        &self.base + &self.noise * C64::new(sigma, 0.0)
    }

    fn profile(&self, sigma: f64) -> Vec<f64> {
        let n = self.base.ncols() as f64;
        let s = C64::new(sigma, 0.0);
        (0..self.base.nrows())
            .map(|q| {
                (0..self.base.ncols()).map(|j| (self.base_f[(q, j)] + s * self.noise_f[(q, j)]).norm_sqr()).sum::<f64>() / n
            })
            .collect()
    }
}

fn group_signals(world: &World, block: &ChannelBlock, plan: &GroupPlan) -> Vec<GroupSignal> {
    let cfg = world.cfg;
    let zeta = block.block_index;
    let mut sym_rng = substream(world.seed, world.trial, Stream::Symbols, zeta);
    let symbols: Vec<Vec<C64>> = (0..world.users()).map(|_| (0..cfg.n).map(|_| qpsk(&mut sym_rng).0).collect()).collect();
    let mut noise_rng = substream(world.seed, world.trial, Stream::ObservationNoise, zeta);
    plan.groups
        .iter()
        .map(|members| {
            let mut base = CMatrix::zeros(cfg.m, cfg.n);
            for &k in members {
                for j in 0..cfg.n {
                    let mut col = base.column_mut(j);
                    col.axpy(symbols[k][j], &block.h[k].column(j), C64::new(1.0, 0.0));
                }
            }
            let noise = unit_noise(cfg.m, cfg.n, &mut noise_rng);
            let base_f = dft_columns(&base);
            let noise_f = dft_columns(&noise);
            GroupSignal { base, noise, base_f, noise_f }
        })
        .collect()
}

/// Tracking results of one SNR point.
struct SnrTrack {
    snr_db: f64,
    sigma: f64,
    obs: Vec<Vec<f64>>,
    holds: usize,
    learned: Vec<EmOutcome>,
    em_est: Vec<Vec<f64>>,
    no_em_est: Vec<Vec<f64>>,
    models: Vec<DoaModel>,
}

struct Setup {
    plan: GroupPlan,
    init_ssi: Vec<SsiSet>,
}

fn setup(world: &World) -> Result<Setup> {
    let b0 = world.uplink_block(0)?;
    let init_ssi: Vec<SsiSet> = b0.h.iter().map(|h| support_of(h, world.spec.init_eta)).collect();
    let plan = group_users(&init_ssi, &GroupingConfig { guard: world.spec.guard, max_groups: None })?;
    Ok(Setup { plan, init_ssi })
}

/// Pass 1: per-block central-SSI observations for all SNR points, then EM
/// learning and filtering per user.
fn observe_and_track(world: &World, st: &Setup, snrs: &[f64]) -> Result<Vec<SnrTrack>> {
    let spec = world.spec;
    let k = world.users();
    let c = world.cfg.bins_per_sine();
    let mut tracks: Vec<SnrTrack> = snrs
        .iter()
        .map(|&s| SnrTrack {
            snr_db: s,
            sigma: noise_var_for(s).sqrt(),
            obs: vec![Vec::with_capacity(spec.n_blocks); k],
            holds: 0,
            learned: Vec::new(),
            em_est: Vec::new(),
            no_em_est: Vec::new(),
            models: st.init_ssi.iter().map(|s| DoaModel::anchored(c, s.center() as f64, spec.rounding)).collect(),
        })
        .collect();
    for zeta in 0..spec.n_blocks {
        let block = world.uplink_block(zeta)?;
        let sig = group_signals(world, &block, &st.plan);
        for tr in tracks.iter_mut() {
            for (g, members) in st.plan.groups.iter().enumerate() {
                let profile = sig[g].profile(tr.sigma);
                for &u in members {
                    let prev = tr.obs[u].last().copied().unwrap_or(st.init_ssi[u].center() as f64);
                    let size = st.init_ssi[u].size();
                    let pred = SsiSet::centered(prev as i64, size, world.cfg.m);
                    let q = match observe_from_profile(&profile, &pred, size) {
                        Ok(q) => q,
                        Err(Error::NoSignal { .. }) => {
                            tr.holds += 1;
                            prev
                        }
                        Err(e) => return Err(e),
                    };
                    tr.obs[u].push(q);
                }
            }
        }
    }
    let init = NoiseParams::initial();
    for tr in tracks.iter_mut() {
        for u in 0..k {
            let obs = ObservationVector::new(tr.obs[u].clone())?;
            let model = tr.models[u];
            let out = em_learn(&obs, &init, &model, spec.em_max_iters, spec.em_tol)?;
            tr.em_est.push(track_doa(&obs, &out.params, &model)?);
            tr.no_em_est.push(track_doa(&obs, &init, &model)?);
            tr.learned.push(out);
        }
    }
    Ok(tracks)
}

/// Voronoi cell of `user` among the observed centres of its group.
fn voronoi_region(centers: &[(usize, i64)], user: usize, m: usize) -> SsiSet {
    let mm = m as i64;
    let own = centers.iter().find(|(u, _)| *u == user).map(|c| c.1).unwrap_or(0);
    if centers.len() < 2 {
        return SsiSet::new(own - mm / 2 + 1, own + mm / 2, own, m).expect("valid full circle");
    }
    let mut right = mm;
    let mut left = mm;
    for &(u, c) in centers {
        if u == user {
            continue;
        }
        let r = (c - own).rem_euclid(mm);
        let l = (own - c).rem_euclid(mm);
        if r > 0 {
            right = right.min(r);
        }
        if l > 0 {
            left = left.min(l);
        }
    }
    let hi = own + (right - 1) / 2;
    let lo = own - (left - 1) / 2;
    let lo = lo.max(hi - mm + 1);
    SsiSet::new(lo, hi, own, m).expect("region contains its centre")
}

/// Downlink pilot resources shared by all blocks of a trial.
struct DownlinkPlan {
    bem: BemConfig,
    /// `(T, book)` per ST-BEM divisor, headline first.
    books: Vec<(usize, PilotBook)>,
    conventional: PilotBook,
    conventional_x: CMatrix,
    conventional_map: DownlinkMap,
}

fn downlink_plan(cfg: &SystemConfig, spec: &ExperimentSpec) -> Result<DownlinkPlan> {
    let kappa = cfg.m * (spec.mu + 1);
    let slots = spec.dl_slots;
    let bem = BemConfig::new(spec.mu, slots);
    let power = (kappa / spec.dl_pilot_divisors[0]) as f64;
    let books = spec
        .dl_pilot_divisors
        .iter()
        .map(|&d| {
            let t = kappa / d;
            let cap = t / (spec.mu + 1);
            design_pilots_with_length(PilotMode::Downlink { tau: cap }, spec.mu, slots, t).map(|b| (t, b))
        })
        .collect::<Result<Vec<_>>>()?;
    let conventional = design_pilots_with_length(PilotMode::Downlink { tau: cfg.m }, spec.mu, slots, kappa)?.with_power(power);
    let full = SsiSet::full(cfg.m);
    let conventional_map = DownlinkMap { ul_wavelength: 1.0, dl_wavelength: 1.0, ssi_dl: full, tau: cfg.m };
    let conventional_x = downlink_training_signal(&conventional, &[conventional_map], cfg.m)?;
    Ok(DownlinkPlan { bem, books, conventional, conventional_x, conventional_map })
}

/// `y_k(t) = g_k(n_t)^T x(t)` for the pilot slots of `book`.
fn pilot_observation(g: &CMatrix, x: &CMatrix, book: &PilotBook) -> Vec<C64> {
    book.slots
        .iter()
        .enumerate()
        .map(|(t, &n)| g.column(n).iter().zip(x.column(t).iter()).map(|(a, b)| a * b).sum())
        .collect()
}

fn unit_vec<R: Rng>(len: usize, rng: &mut R) -> Vec<C64> {
    (0..len).map(|_| complex_gaussian(rng, 1.0)).collect()
}

fn add_scaled(a: &[C64], b: &[C64], s: f64) -> Vec<C64> {
    a.iter().zip(b).map(|(x, y)| x + y * s).collect()
}

/// Downlink estimate of every user in `members` through beams on `maps`.
#[allow(clippy::too_many_arguments)]
fn train_downlink(
    g_true: &[CMatrix],
    members: &[usize],
    maps: &[DownlinkMap],
    book: &PilotBook,
    power: f64,
    bem: &BemConfig,
    noise: &[Vec<C64>],
    sigma: f64,
    m: usize,
) -> Result<Vec<CMatrix>> {
    let tau_max = maps.iter().map(|d| d.tau).max().unwrap_or(1);
    let need = tau_max * (bem.mu + 1);
    if need > book.t {
        return Err(Error::PilotDesign(format!("{tau_max} downlink beams need {need} pilots, T = {}", book.t)));
    }
    let book = book.clone().with_power(power);
    let x = downlink_training_signal(&book, maps, m)?;
    members
        .iter()
        .zip(maps)
        .zip(noise)
        .map(|((&u, map), w)| {
            let y = add_scaled(&pilot_observation(&g_true[u], &x, &book), w, sigma);
            let coeffs = downlink_train_estimate(&y, &book, map)?;
            Ok(stbem_reconstruct_block(&assemble_downlink(&coeffs, map, m), &map.ssi_dl, bem))
        })
        .collect()
}

/// QPSK bit errors of matched-filter beams built from `est` on the true `g`.
fn count_bit_errors(g: &[&CMatrix], est: &[&CMatrix], data: &[Vec<(C64, [bool; 2])>], noise: &[Vec<C64>], sigma: f64) -> u64 {
    let users = g.len();
    let slots = g[0].ncols();
    let mut errors = 0;
    for n in 0..slots {
        let beams: Vec<CVector> = est
            .iter()
            .map(|e| {
                let v = e.column(n).map(|c| c.conj());
                let norm = v.norm();
                if norm > 0.0 {
                    v / C64::new(norm, 0.0)
                } else {
                    v
                }
            })
            .collect();
        for k in 0..users {
            let gk = g[k].column(n);
            let mut y = noise[k][n] * sigma;
            for (l, beam) in beams.iter().enumerate() {
                let gain: C64 = gk.iter().zip(beam.iter()).map(|(a, b)| a * b).sum();
                y += gain * data[l][n].0;
            }
            let bits = data[k][n].1;
            errors += u64::from((y.re < 0.0) != bits[0]) + u64::from((y.im < 0.0) != bits[1]);
        }
    }
    errors
}

/// Accumulates per-method values over blocks and users.
#[derive(Default)]
struct Tally {
    order: Vec<String>,
    per_block: HashMap<String, Vec<(f64, f64)>>,
}

impl Tally {
    fn add(&mut self, method: &str, block: usize, value: f64, weight: f64) {
        if !self.per_block.contains_key(method) {
            self.order.push(method.to_string());
        }
        let v = self.per_block.entry(method.to_string()).or_default();
        if v.len() <= block {
            v.resize(block + 1, (0.0, 0.0));
        }
        v[block].0 += value;
        v[block].1 += weight;
    }
}

struct ScenarioRows<'a> {
    spec: &'a ExperimentSpec,
    trial: usize,
    rows: Vec<MetricRow>,
}

impl ScenarioRows<'_> {
    fn push(&mut self, snr: f64, block: i64, method: &str, value: f64) {
        self.rows.push(MetricRow {
            scenario: self.spec.scenario.name().to_string(),
            snr_db: snr,
            block,
            method: method.to_string(),
            trial: self.trial,
            value,
        });
    }

    /// Per-block rows of the mean, then the overall mean (`block = -1`).
    fn emit_mean(&mut self, snr: f64, tally: &Tally, finish: impl Fn(f64) -> f64) {
        for method in &tally.order {
            let blocks = &tally.per_block[method];
            if self.spec.per_block_rows {
                for (z, &(s, w)) in blocks.iter().enumerate() {
                    if w > 0.0 {
                        self.push(snr, z as i64, method, finish(s / w));
                    }
                }
            }
            let (s, w) = blocks.iter().fold((0.0, 0.0), |a, b| (a.0 + b.0, a.1 + b.1));
            if w > 0.0 {
                self.push(snr, -1, method, finish(s / w));
            }
        }
    }
}

pub(crate) fn run_trial(cfg: &SystemConfig, spec: &ExperimentSpec, trial: usize) -> TrialOutput {
    let world = match World::new(cfg, spec, trial) {
        Ok(w) => w,
        Err(e) => return failed(spec, trial, None, e),
    };
    match run_trial_inner(&world) {
        Ok(out) => out,
        Err(e) => failed(spec, trial, Some(world.geometry.clone()), e),
    }
}

fn failed(spec: &ExperimentSpec, trial: usize, geometry: Option<super::world::Geometry>, e: Error) -> TrialOutput {
    let rows = spec
        .snr_grid
        .iter()
        .map(|&s| MetricRow {
            scenario: spec.scenario.name().to_string(),
            snr_db: s,
            block: -1,
            method: "error".to_string(),
            trial,
            value: 0.0,
        })
        .collect();
    let record = TrialRecord {
        trial,
        geometry: geometry.unwrap_or(super::world::Geometry {
            cluster_centers_deg: vec![],
            cluster_of: vec![],
            initial_doa_deg: vec![],
        }),
        groups: GroupPlan { groups: vec![] },
        initial_ssi: vec![],
        snr: vec![],
        error: Some(e.to_string()),
    };
    TrialOutput { rows, record, trace: vec![] }
}

fn run_trial_inner(world: &World) -> Result<TrialOutput> {
    let spec = world.spec;
    let st = setup(world)?;
    let tracks = observe_and_track(world, &st, &spec.snr_grid)?;
    let mut out = ScenarioRows { spec, trial: world.trial, rows: Vec::new() };
    let mut trace = Vec::new();
    let k = world.users();
    let deg = |r: f64| r.to_degrees();

    if spec.scenario == Scenario::DoaTrack {
        for tr in &tracks {
            let mut tally = Tally::default();
            for z in 0..spec.n_blocks {
                for u in 0..k {
                    let truth = world.truth[u][z];
                    tally.add("em_ukf", z, deg(tr.em_est[u][z] - truth).powi(2), 1.0);
                    if spec.has(Baseline::NoEm) {
                        tally.add("no_em", z, deg(tr.no_em_est[u][z] - truth).powi(2), 1.0);
                    }
                    if spec.has(Baseline::DftSearch) {
                        tally.add("dft_search", z, deg(tr.models[u].invert(tr.obs[u][z]) - truth).powi(2), 1.0);
                    }
                    trace.push(trace_row(world, tr, u, z));
                }
            }
            out.emit_mean(tr.snr_db, &tally, f64::sqrt);
        }
    } else {
        score_blocks(world, &st, &tracks, &mut out, &mut trace)?;
    }

    let record = TrialRecord {
        trial: world.trial,
        geometry: world.geometry.clone(),
        groups: st.plan.clone(),
        initial_ssi: st.init_ssi.iter().map(|s| [s.lo(), s.center(), s.hi()]).collect(),
        snr: tracks
            .iter()
            .map(|tr| SnrRecord {
                snr_db: tr.snr_db,
                noise_var: tr.sigma * tr.sigma,
                learned: tr.learned.iter().map(|o| o.params).collect(),
                em_iterations: tr.learned.iter().map(|o| o.iterations).collect(),
                em_clamped: tr.learned.iter().map(|o| o.clamped).collect(),
                no_signal_holds: tr.holds,
            })
            .collect(),
        error: None,
    };
    Ok(TrialOutput { rows: out.rows, record, trace })
}

fn trace_row(world: &World, tr: &SnrTrack, u: usize, z: usize) -> TraceRow {
    TraceRow {
        trial: world.trial,
        snr_db: tr.snr_db,
        block: z,
        user: u,
        truth_deg: world.truth[u][z].to_degrees(),
        observed_bin: tr.obs[u][z],
        em_ukf_deg: tr.em_est[u][z].to_degrees(),
        no_em_deg: tr.no_em_est[u][z].to_degrees(),
        dft_deg: tr.models[u].invert(tr.obs[u][z]).to_degrees(),
        max_as_hat_deg: None,
        tracked_ssi_lo: None,
        tracked_ssi_hi: None,
        reference_size: None,
    }
}

/// Pass 2: regenerate each block and score the scenario's methods.
fn score_blocks(world: &World, st: &Setup, tracks: &[SnrTrack], out: &mut ScenarioRows, trace: &mut Vec<TraceRow>) -> Result<()> {
    let spec = world.spec;
    let cfg = world.cfg;
    let k = world.users();
    let m = cfg.m;
    let c = cfg.bins_per_sine();
    let bem = BemConfig::new(spec.mu, cfg.n);
    let n_groups = st.plan.n_groups();
    let ul_book = design_pilots(PilotMode::Uplink { groups: n_groups }, spec.mu, cfg.n)?;
    let ul_conv_book = if spec.scenario == Scenario::UlMse && spec.has(Baseline::ConventionalLs) {
        Some(design_pilots(PilotMode::Uplink { groups: k }, spec.mu, cfg.n)?)
    } else {
        None
    };
    let dl = if matches!(spec.scenario, Scenario::DlMse | Scenario::Ber) { Some(downlink_plan(cfg, spec)?) } else { None };
    let upsilons = spec.upsilons();
    let ratio = spec.lambda_ratio;

    let mut tallies: Vec<Tally> = tracks.iter().map(|_| Tally::default()).collect();
    let mut medians: Vec<Vec<TrailingMedian>> = tracks.iter().map(|_| vec![TrailingMedian::new(); k]).collect();
    let mut aging: Vec<Vec<Option<CMatrix>>> = tracks.iter().map(|_| vec![None; k]).collect();
    let mut deviation: Vec<Tally> = tracks.iter().map(|_| Tally::default()).collect();

    for zeta in 0..spec.n_blocks {
        let block = world.uplink_block(zeta)?;
        let sig = group_signals(world, &block, &st.plan);
        let reference: Vec<SsiSet> = block.h.iter().map(|h| support_of(h, spec.reference_eta)).collect();
        let g_dl = dl.as_ref().map(|_| world.downlink_block(&block));

        // Uplink pilot block: noiseless part and unit noise, both through LS.
        let (gamma_base, gamma_noise) = if spec.scenario == Scenario::UlMse {
            let mut rng = substream(world.seed, world.trial, Stream::PilotNoise, zeta);
            let y = uplink_pilots(&block, &st.plan, &ul_book, m);
            let w = unit_noise(m, ul_book.t, &mut rng);
            (Some(ls_estimate_gamma(&y, &ul_book)?), Some(ls_estimate_gamma(&w, &ul_book)?))
        } else {
            (None, None)
        };
        let conv_ul = match &ul_conv_book {
            Some(book) => {
                let mut rng = substream(world.seed, world.trial, Stream::ConventionalNoise, zeta);
                let per_user = GroupPlan { groups: (0..k).map(|u| vec![u]).collect() };
                let y = uplink_pilots(&block, &per_user, book, m);
                let w = unit_noise(m, book.t, &mut rng);
                Some((ls_estimate_gamma(&y, book)?, ls_estimate_gamma(&w, book)?))
            }
            None => None,
        };

        for (si, tr) in tracks.iter().enumerate() {
            let sigma = tr.sigma;
            let noise_var = sigma * sigma;
            // Angular spread and tracked SSI per user.
            let mut tracked = vec![SsiSet::full(m); k];
            let mut as_hat = vec![0.0; k];
            let mut dft_ssi = vec![SsiSet::full(m); k];
            for (g, members) in st.plan.groups.iter().enumerate() {
                let thetas: Vec<f64> = members.iter().map(|&u| tr.em_est[u][zeta]).collect();
                let x = sig[g].received(sigma);
                let est = estimate_sigma_from_snapshots(&x, &thetas, cfg, noise_var)?;
                let profile = sig[g].profile(sigma);
                let centers: Vec<(usize, i64)> = members.iter().map(|&u| (u, tr.obs[u][zeta] as i64)).collect();
                for (i, &u) in members.iter().enumerate() {
                    let smooth = medians[si][u].push(est.max_as[i]);
                    as_hat[u] = smooth;
                    tracked[u] = ssi_from_angles_raw(m, c, tr.em_est[u][zeta], smooth);
                    let region = voronoi_region(&centers, u, m);
                    dft_ssi[u] = power_support_within(&profile, spec.reference_eta, &region);
                }
            }
            for u in 0..k {
                let mut row = trace_row(world, tr, u, zeta);
                row.max_as_hat_deg = Some(as_hat[u].to_degrees());
                row.tracked_ssi_lo = Some(tracked[u].lo());
                row.tracked_ssi_hi = Some(tracked[u].hi());
                row.reference_size = Some(reference[u].size());
                trace.push(row);
            }
            let tally = &mut tallies[si];
            match spec.scenario {
                Scenario::AsTrack => {
                    for u in 0..k {
                        let r = reference[u].size() as f64;
                        tally.add("reference", zeta, r, 1.0);
                        tally.add("taylor", zeta, tracked[u].size() as f64, 1.0);
                        deviation[si].add("taylor", zeta, (tracked[u].size() as f64 - r).abs(), 1.0);
                        if spec.has(Baseline::DftSearch) {
                            tally.add("dft_search", zeta, dft_ssi[u].size() as f64, 1.0);
                            deviation[si].add("dft_search", zeta, (dft_ssi[u].size() as f64 - r).abs(), 1.0);
                        }
                    }
                }
                Scenario::UlMse => {
                    let gamma = gamma_base.as_ref().expect("uplink pilots") + gamma_noise.as_ref().expect("uplink pilots") * C64::new(sigma, 0.0);
                    for u in 0..k {
                        let (g, _) = st.plan.locate(u).expect("every user grouped");
                        let h = &block.h[u];
                        let recon = |ssi: &SsiSet| stbem_reconstruct_block(&extract_user_gamma(&gamma, ssi, g, spec.mu), ssi, &bem);
                        let est = recon(&tracked[u]);
                        tally.add("tracked", zeta, mse(h, &est)?, 1.0);
                        if spec.has(Baseline::Aging) {
                            let old = aging[si][u].get_or_insert_with(|| est.clone());
                            tally.add("aging", zeta, mse(h, old)?, 1.0);
                        }
                        for &ups in &upsilons {
                            let ssi = SsiSet::centered(tracked[u].center(), ups, m);
                            tally.add(&format!("fixed_upsilon_{ups}"), zeta, mse(h, &recon(&ssi))?, 1.0);
                        }
                        if spec.has(Baseline::SbemStatic) {
                            tally.add("sbem_static", zeta, mse(h, &recon(&st.init_ssi[u]))?, 1.0);
                        }
                        if spec.has(Baseline::DftSearch) {
                            tally.add("dft_search", zeta, mse(h, &recon(&dft_ssi[u]))?, 1.0);
                        }
                        if let Some((base, w)) = &conv_ul {
                            let gm = base + w * C64::new(sigma, 0.0);
                            let full = SsiSet::full(m);
                            let e = stbem_reconstruct_block(&extract_user_gamma(&gm, &full, u, spec.mu), &full, &bem);
                            tally.add("conventional_ls", zeta, mse(h, &e)?, 1.0);
                        }
                    }
                }
                Scenario::DlMse | Scenario::Ber => {
                    let plan = dl.as_ref().expect("downlink plan");
                    let g_true = g_dl.as_ref().expect("downlink channel");
                    let mut noise_rng = substream(world.seed, world.trial, Stream::DownlinkNoise, zeta);
                    let mut estimates: Vec<(String, Vec<CMatrix>)> = Vec::new();
                    let headline = plan.books[0].0;
                    let n_books = if spec.scenario == Scenario::DlMse { plan.books.len() } else { 1 };
                    for (bi, (t, book)) in plan.books.iter().take(n_books).enumerate() {
                        let name = if bi == 0 { "tracked".to_string() } else { format!("tracked_t{t}") };
                        let est = downlink_estimates(world, &st.plan, &tracked, ratio, book, *t as f64, &plan.bem, g_true, &mut noise_rng, sigma)?;
                        estimates.push((name, est));
                    }
                    if spec.has(Baseline::SbemStatic) {
                        let est = downlink_estimates(world, &st.plan, &st.init_ssi, ratio, &plan.books[0].1, headline as f64, &plan.bem, g_true, &mut noise_rng, sigma)?;
                        estimates.push(("sbem_static".into(), est));
                    }
                    if spec.has(Baseline::ConventionalLs) {
                        let mut est = Vec::with_capacity(k);
                        for u in 0..k {
                            let w = unit_vec(plan.conventional.t, &mut noise_rng);
                            let y = add_scaled(&pilot_observation(&g_true[u], &plan.conventional_x, &plan.conventional), &w, sigma);
                            let coeffs = downlink_train_estimate(&y, &plan.conventional, &plan.conventional_map)?;
                            est.push(stbem_reconstruct_block(&assemble_downlink(&coeffs, &plan.conventional_map, m), &plan.conventional_map.ssi_dl, &plan.bem));
                        }
                        estimates.push(("conventional_ls".into(), est));
                    }
                    if spec.scenario == Scenario::DlMse {
                        for (name, est) in &estimates {
                            for u in 0..k {
                                tally.add(name, zeta, mse(&g_true[u], &est[u])?, 1.0);
                            }
                        }
                    } else {
                        if spec.has(Baseline::PerfectCsi) {
                            estimates.push(("perfect_csi".into(), g_true.clone()));
                        }
                        let mut data_rng = substream(world.seed, world.trial, Stream::Data, zeta);
                        let mut dn_rng = substream(world.seed, world.trial, Stream::DataNoise, zeta);
                        for members in &st.plan.groups {
                            let data: Vec<Vec<(C64, [bool; 2])>> =
                                members.iter().map(|_| (0..spec.dl_slots).map(|_| qpsk(&mut data_rng)).collect()).collect();
                            let noise: Vec<Vec<C64>> = members.iter().map(|_| unit_vec(spec.dl_slots, &mut dn_rng)).collect();
                            let g: Vec<&CMatrix> = members.iter().map(|&u| &g_true[u]).collect();
                            for (name, est) in &estimates {
                                let e: Vec<&CMatrix> = members.iter().map(|&u| &est[u]).collect();
                                let errs = count_bit_errors(&g, &e, &data, &noise, sigma);
                                let total = 2 * (members.len() * spec.dl_slots) as u64;
                                tally.add(name, zeta, errs as f64, total as f64);
                            }
                        }
                    }
                }
                Scenario::DoaTrack => unreachable!("handled in pass 1"),
            }
        }
    }

    for (si, tr) in tracks.iter().enumerate() {
        match spec.scenario {
            Scenario::AsTrack => {
                // Per-block rows are mean sizes; the aggregate of each
                // estimator is its mean absolute deviation from the reference.
                let t = &tallies[si];
                if spec.per_block_rows {
                    for method in &t.order {
                        for (z, &(s, w)) in t.per_block[method].iter().enumerate() {
                            out.push(tr.snr_db, z as i64, method, s / w);
                        }
                    }
                }
                let (s, w) = t.per_block["reference"].iter().fold((0.0, 0.0), |a, b| (a.0 + b.0, a.1 + b.1));
                out.push(tr.snr_db, -1, "reference", s / w);
                for method in &deviation[si].order {
                    let (s, w) = deviation[si].per_block[method].iter().fold((0.0, 0.0), |a, b| (a.0 + b.0, a.1 + b.1));
                    out.push(tr.snr_db, -1, method, s / w);
                }
            }
            _ => out.emit_mean(tr.snr_db, &tallies[si], |v| v),
        }
    }
    Ok(())
}

fn uplink_pilots(block: &ChannelBlock, plan: &GroupPlan, book: &PilotBook, m: usize) -> CMatrix {
    let mut y = CMatrix::zeros(m, book.t);
    for (g, members) in plan.groups.iter().enumerate() {
        let s = book.scaled_sequence(g);
        for &u in members {
            for (i, &n) in book.slots.iter().enumerate() {
                let mut col = y.column_mut(i);
                col.axpy(s[i], &block.h[u].column(n), C64::new(1.0, 0.0));
            }
        }
    }
    y
}

#[allow(clippy::too_many_arguments)]
fn downlink_estimates<R: Rng>(
    world: &World,
    plan: &GroupPlan,
    ssis: &[SsiSet],
    ratio: f64,
    book: &PilotBook,
    power: f64,
    bem: &BemConfig,
    g_true: &[CMatrix],
    noise_rng: &mut R,
    sigma: f64,
) -> Result<Vec<CMatrix>> {
    let m = world.cfg.m;
    let mut est = vec![CMatrix::zeros(0, 0); world.users()];
    for members in &plan.groups {
        let maps: Vec<DownlinkMap> = members.iter().map(|&u| reciprocity_map(&ssis[u], ratio, 1.0)).collect();
        let noise: Vec<Vec<C64>> = members.iter().map(|_| unit_vec(book.t, noise_rng)).collect();
        let e = train_downlink(g_true, members, &maps, book, power, bem, &noise, sigma, m)?;
        for (&u, h) in members.iter().zip(e) {
            est[u] = h;
        }
    }
    Ok(est)
}

fn mse(h: &CMatrix, est: &CMatrix) -> Result<f64> {
    score_mse(h, est).map(|s| s.value)
}
