//! Monte Carlo harness.

mod manifest;
pub mod par;
pub(crate) mod rng;
pub mod spec;
mod trial;
pub mod world;

use std::io::Write;

use serde::{Deserialize, Serialize};

pub use manifest::{BookRecord, Manifest};
pub use par::Execution;
pub use spec::{parse_baselines, parse_snr_grid, Baseline, ExperimentSpec, RunConfig, Scenario};
pub use trial::{SnrRecord, TrialRecord};

use crate::channel::SystemConfig;
use crate::{CMatrix, Error, Result};

/// One CSV line of results.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub scenario: String,
    pub snr_db: f64,
    /// Block index, or `-1` for the value aggregated over the trial.
    pub block: i64,
    pub method: String,
    pub trial: usize,
    pub value: f64,
}

/// Per-block, per-user diagnostics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub trial: usize,
    pub snr_db: f64,
    pub block: usize,
    pub user: usize,
    pub truth_deg: f64,
    pub observed_bin: f64,
    pub em_ukf_deg: f64,
    pub no_em_deg: f64,
    pub dft_deg: f64,
    pub max_as_hat_deg: Option<f64>,
    pub tracked_ssi_lo: Option<i64>,
    pub tracked_ssi_hi: Option<i64>,
    pub reference_size: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MseScore {
    /// Mean of `|h - h_hat|^2 / |h|^2` over the scored slots.
    pub value: f64,
    /// Slots left out because the true channel was zero.
    pub skipped: usize,
}

/// Normalized MSE of one user's `M x N` channel estimate, averaged over slots.
pub fn score_mse(true_h: &CMatrix, est_h: &CMatrix) -> Result<MseScore> {
    if true_h.shape() != est_h.shape() {
        return Err(Error::Dimension(format!("truth is {:?}, estimate is {:?}", true_h.shape(), est_h.shape())));
    }
    let mut sum = 0.0;
    let mut used = 0;
    for (h, e) in true_h.column_iter().zip(est_h.column_iter()) {
        let p = h.norm_squared();
        if p == 0.0 {
            continue;
        }
        sum += (h - e).norm_squared() / p;
        used += 1;
    }
    let skipped = true_h.ncols() - used;
    if used == 0 {
        return Err(Error::ZeroNorm);
    }
    Ok(MseScore { value: sum / used as f64, skipped })
}

/// Everything one run produces.
#[derive(Debug, Clone)]
pub struct RunOutput {
    pub rows: Vec<MetricRow>,
    pub trace: Vec<TraceRow>,
    pub manifest: Manifest,
}

impl RunOutput {
    pub fn failed_trials(&self) -> usize {
        self.manifest.trials.iter().filter(|t| t.error.is_some()).count()
    }
}

pub fn run_experiment(spec: &ExperimentSpec, cfg: &SystemConfig) -> Result<RunOutput> {
    run_experiment_with(spec, cfg, Execution::default())
}

/// Runs all trials. Configuration problems are returned as errors; numerical
/// failures inside a trial become `method = "error"` rows and a manifest note.
pub fn run_experiment_with(spec: &ExperimentSpec, cfg: &SystemConfig, exec: Execution) -> Result<RunOutput> {
    let spec = &spec.resolved();
    cfg.validate()?;
    spec.validate(cfg)?;
    world::World::new(cfg, spec, 0)?;
    let outs = par::map_indexed(spec.n_trials, exec, |t| trial::run_trial(cfg, spec, t));
    let mut rows = Vec::new();
    let mut trace = Vec::new();
    let mut trials = Vec::with_capacity(outs.len());
    for o in outs {
        rows.extend(o.rows);
        trace.extend(o.trace);
        trials.push(o.record);
    }
    let manifest = Manifest::new(spec, cfg, trials)?;
    Ok(RunOutput { rows, trace, manifest })
}

pub const CSV_HEADER: &str = "scenario,snr_db,block,method,trial,value";

pub fn write_rows<W: Write>(w: W, rows: &[MetricRow]) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    for r in rows {
        out.serialize(r)?;
    }
    if rows.is_empty() {
        out.write_record(CSV_HEADER.split(','))?;
    }
    out.flush()?;
    Ok(())
}

pub fn write_trace<W: Write>(w: W, rows: &[TraceRow]) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    for r in rows {
        out.serialize(r)?;
    }
    out.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::C64;

    fn sample() -> CMatrix {
        CMatrix::from_fn(4, 3, |i, j| C64::new(i as f64 + 1.0, j as f64 - 1.0))
    }

    #[test]
    fn mse_identities() {
        let h = sample();
        assert_eq!(score_mse(&h, &h).unwrap().value, 0.0);
        let z = CMatrix::zeros(4, 3);
        assert!((score_mse(&h, &z).unwrap().value - 1.0).abs() < 1e-15);
        let two = &h * C64::new(2.0, 0.0);
        assert!((score_mse(&h, &two).unwrap().value - 1.0).abs() < 1e-15);
    }

    #[test]
    fn zero_slots_are_skipped() {
        let mut h = sample();
        h.column_mut(1).fill(C64::new(0.0, 0.0));
        let s = score_mse(&h, &CMatrix::zeros(4, 3)).unwrap();
        assert_eq!(s.skipped, 1);
        assert!((s.value - 1.0).abs() < 1e-15);
        assert!(matches!(score_mse(&CMatrix::zeros(2, 2), &CMatrix::zeros(2, 2)), Err(Error::ZeroNorm)));
    }

    #[test]
    fn header_is_exact() {
        let mut buf = Vec::new();
        let row = MetricRow { scenario: "ul_mse".into(), snr_db: 10.0, block: -1, method: "tracked".into(), trial: 0, value: 0.5 };
        write_rows(&mut buf, &[row]).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().next().unwrap(), CSV_HEADER);
    }
}
