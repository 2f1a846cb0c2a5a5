use std::collections::BTreeMap;
use std::path::Path;
use std::process::{Command, Output};

fn stbem(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_stbem")).args(args).output().expect("binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn simulate_is_byte_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let mut outputs = Vec::new();
    for run in ["a", "b"] {
        let out = dir.path().join(run);
        let o = stbem(&["simulate", "--scenario", "doa_track", "--snr", "10", "--seed", "7", "--blocks", "20", "--out", out.to_str().unwrap()]);
        assert!(o.status.success(), "{}", stderr(&o));
        outputs.push((std::fs::read(out.join("metrics.csv")).unwrap(), std::fs::read(out.join("manifest.toml")).unwrap()));
    }
    assert_eq!(outputs[0], outputs[1]);
    assert!(!outputs[0].0.is_empty());
}

fn read_rows(path: &Path) -> Vec<BTreeMap<String, String>> {
    let mut r = csv::Reader::from_path(path).unwrap();
    let headers = r.headers().unwrap().clone();
    r.records().map(|rec| headers.iter().zip(rec.unwrap().iter()).map(|(h, v)| (h.to_string(), v.to_string())).collect()).collect()
}

#[test]
fn sweep_emits_one_row_per_point() {
    let dir = tempfile::tempdir().unwrap();
    let o = stbem(&["sweep", "--scenario", "ul_mse", "--snr", "-10:2:20", "--blocks", "4", "--trials", "2", "--out", dir.path().to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let rows = read_rows(&dir.path().join("metrics.csv"));
    let mut seen = BTreeMap::new();
    for r in &rows {
        assert_eq!(r["block"], "-1");
        *seen.entry((r["snr_db"].clone(), r["method"].clone(), r["trial"].clone())).or_insert(0) += 1;
    }
    assert!(seen.values().all(|&c| c == 1));
    let snrs: std::collections::BTreeSet<_> = seen.keys().map(|k| k.0.clone()).collect();
    let methods: std::collections::BTreeSet<_> = seen.keys().map(|k| k.1.clone()).collect();
    assert_eq!(snrs.len(), 16);
    assert_eq!(rows.len(), 16 * methods.len() * 2);
}

#[test]
fn trace_writes_trajectories() {
    let dir = tempfile::tempdir().unwrap();
    let o = stbem(&["trace", "--scenario", "doa_track", "--blocks", "8", "--out", dir.path().to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let rows = read_rows(&dir.path().join("trace.csv"));
    assert_eq!(rows.len(), 8 * 12);
    assert!(rows.iter().all(|r| r["truth_deg"].parse::<f64>().is_ok()));
}

#[test]
fn selftest_passes() {
    let o = stbem(&["selftest"]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stdout));
    let text = String::from_utf8_lossy(&o.stdout);
    assert!(text.lines().filter(|l| l.starts_with("PASS")).count() >= 3);
}

#[test]
fn usage_and_config_errors_exit_two() {
    assert_eq!(stbem(&["simulate", "--no-such-flag"]).status.code(), Some(2));
    assert_eq!(stbem(&["simulate", "--scenario", "nonsense"]).status.code(), Some(2));
    assert_eq!(stbem(&["simulate", "--snr", "1:x:3"]).status.code(), Some(2));

    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    std::fs::write(&cfg, "[experiment]\nn_trials = 0\n").unwrap();
    let o = stbem(&["simulate", "--config", cfg.to_str().unwrap(), "--out", dir.path().join("o").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));

    std::fs::write(&cfg, "[system]\nunknown_key = 1\n").unwrap();
    assert_eq!(stbem(&["simulate", "--config", cfg.to_str().unwrap()]).status.code(), Some(2));
    assert_eq!(stbem(&["simulate", "--config", dir.path().join("missing.toml").to_str().unwrap()]).status.code(), Some(2));
}
