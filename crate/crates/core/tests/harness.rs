use std::collections::{BTreeMap, BTreeSet};

use stbem::channel::SystemConfig;
use stbem::pilots::{design_pilots, PilotMode};
use stbem::sim::{
    parse_snr_grid, run_experiment, run_experiment_with, write_rows, Baseline, Execution, ExperimentSpec, Manifest, Scenario,
};

fn small(scenario: Scenario, snr: &str, trials: usize, blocks: usize) -> ExperimentSpec {
    ExperimentSpec {
        snr_grid: parse_snr_grid(snr).unwrap(),
        n_trials: trials,
        n_blocks: blocks,
        ..ExperimentSpec::for_scenario(scenario)
    }
}

fn csv_bytes(rows: &[stbem::sim::MetricRow]) -> Vec<u8> {
    let mut out = Vec::new();
    write_rows(&mut out, rows).unwrap();
    out
}

#[test]
fn identical_inputs_give_identical_bytes() {
    let spec = small(Scenario::DoaTrack, "10", 2, 12);
    let cfg = SystemConfig { seed: 7, ..Default::default() };
    let a = run_experiment(&spec, &cfg).unwrap();
    let b = run_experiment(&spec, &cfg).unwrap();
    assert_eq!(csv_bytes(&a.rows), csv_bytes(&b.rows));
    assert_eq!(a.manifest.to_toml().unwrap(), b.manifest.to_toml().unwrap());

    let other = run_experiment(&spec, &SystemConfig { seed: 8, ..cfg }).unwrap();
    assert_ne!(csv_bytes(&a.rows), csv_bytes(&other.rows));
}

#[test]
fn sequential_and_parallel_schedules_agree() {
    let spec = small(Scenario::UlMse, "0,20", 3, 6);
    let cfg = SystemConfig::default();
    let par = run_experiment_with(&spec, &cfg, Execution::Parallel).unwrap();
    let seq = run_experiment_with(&spec, &cfg, Execution::Sequential).unwrap();
    assert_eq!(csv_bytes(&par.rows), csv_bytes(&seq.rows));
    assert_eq!(par.manifest, seq.manifest);
}

#[test]
fn aggregate_rows_cover_every_point_once() {
    let spec = ExperimentSpec { per_block_rows: false, ..small(Scenario::UlMse, "-10:2:20", 2, 4) };
    let out = run_experiment(&spec, &SystemConfig::default()).unwrap();
    assert_eq!(out.failed_trials(), 0);
    let mut count: BTreeMap<(i64, String, usize), usize> = BTreeMap::new();
    for r in &out.rows {
        assert_eq!(r.block, -1);
        *count.entry(((r.snr_db * 10.0).round() as i64, r.method.clone(), r.trial)).or_default() += 1;
    }
    assert!(count.values().all(|&c| c == 1));
    let methods: BTreeSet<&String> = count.keys().map(|k| &k.1).collect();
    for m in ["tracked", "aging", "fixed_upsilon_4", "fixed_upsilon_8", "sbem_static"] {
        assert!(methods.contains(&m.to_string()), "missing {m}");
    }
    assert_eq!(out.rows.len(), 16 * methods.len() * 2);
}

#[test]
fn manifest_round_trips_and_books_decode_to_design() {
    let spec = small(Scenario::UlMse, "10", 2, 4);
    let cfg = SystemConfig::default();
    let out = run_experiment(&spec, &cfg).unwrap();
    let text = out.manifest.to_toml().unwrap();
    let back: Manifest = toml::from_str(&text).unwrap();
    assert_eq!(back, out.manifest);
    assert_eq!(back.config.system, cfg);
    assert_eq!(back.config.experiment, spec.resolved());
    assert_eq!(back.trials.len(), 2);
    assert!(back.trials.iter().all(|t| t.error.is_none() && !t.snr.is_empty()));

    assert!(!back.pilot_books.is_empty());
    for rec in &back.pilot_books {
        let book = design_pilots(rec.mode, rec.mu, rec.n).unwrap();
        assert_eq!(rec.slots, book.slots);
        assert_eq!(rec.decode_sequences().unwrap(), book.sequences);
    }
    let groups: Vec<usize> = back.trials.iter().map(|t| t.groups.n_groups()).collect();
    for g in groups {
        assert!(back.pilot_books.iter().any(|b| b.mode == PilotMode::Uplink { groups: g }));
    }
}

#[test]
fn invalid_experiments_are_config_errors() {
    let cfg = SystemConfig::default();
    let cases = [
        ExperimentSpec { n_trials: 0, ..Default::default() },
        ExperimentSpec { snr_grid: vec![], ..Default::default() },
        ExperimentSpec { n_blocks: 1, ..Default::default() },
        ExperimentSpec { dl_pilot_divisors: vec![7], ..ExperimentSpec::for_scenario(Scenario::DlMse) },
        ExperimentSpec { cluster_span_deg: 10.0, cluster_min_sep_deg: 15.0, ..Default::default() },
    ];
    for spec in cases {
        let e = run_experiment(&spec, &cfg).unwrap_err();
        assert!(e.is_config(), "{e}");
    }
    let e = run_experiment(&ExperimentSpec::default(), &SystemConfig { m: 0, ..cfg }).unwrap_err();
    assert!(e.is_config(), "{e}");
}

#[test]
fn perfect_csi_bounds_tracked_ber() {
    let spec = ExperimentSpec {
        per_block_rows: false,
        baselines: vec![Baseline::PerfectCsi],
        ..small(Scenario::Ber, "-10,0", 1, 6)
    };
    let out = run_experiment(&spec, &SystemConfig::default()).unwrap();
    let get = |snr: f64, m: &str| {
        out.rows.iter().find(|r| r.snr_db == snr && r.method == m).map(|r| r.value).unwrap()
    };
    for snr in [-10.0, 0.0] {
        assert!(get(snr, "perfect_csi") <= get(snr, "tracked"), "{snr} dB");
    }
}

#[test]
fn empty_baselines_select_scenario_defaults() {
    let spec = ExperimentSpec { baselines: vec![], per_block_rows: false, ..small(Scenario::DoaTrack, "10", 1, 6) };
    let out = run_experiment(&spec, &SystemConfig::default()).unwrap();
    let methods: BTreeSet<&str> = out.rows.iter().map(|r| r.method.as_str()).collect();
    assert!(methods.contains("no_em") && methods.contains("dft_search") && methods.contains("em_ukf"), "{methods:?}");
}
