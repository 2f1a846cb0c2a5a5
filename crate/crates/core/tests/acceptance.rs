//! One PASS/FAIL line per acceptance criterion, with the measured numbers.
//! With `STBEM_ACCEPTANCE_STRICT=1` the process exits non-zero when any criterion fails.

use std::collections::BTreeMap;
use std::time::{Duration, Instant};

use stbem::channel::SystemConfig;
use stbem::checks::{self, Check};
use stbem::sim::{parse_snr_grid, run_experiment, ExperimentSpec, MetricRow, Scenario};

fn check(name: &'static str, passed: bool, detail: String, start: Instant) -> Check {
    Check { name, passed, detail, elapsed: start.elapsed() }
}

/// Aggregate rows keyed by `(snr in tenths of dB, method)`, one value per trial.
fn by_point(rows: &[MetricRow]) -> BTreeMap<(i64, String), Vec<f64>> {
    let mut out: BTreeMap<(i64, String), Vec<f64>> = BTreeMap::new();
    for r in rows.iter().filter(|r| r.block == -1) {
        out.entry(((r.snr_db * 10.0).round() as i64, r.method.clone())).or_default().push(r.value);
    }
    out
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn at(points: &BTreeMap<(i64, String), Vec<f64>>, snr: f64, method: &str) -> Vec<f64> {
    points.get(&((snr * 10.0).round() as i64, method.to_string())).cloned().unwrap_or_default()
}

fn run(spec: &ExperimentSpec) -> Result<Vec<MetricRow>, String> {
    let out = run_experiment(spec, &SystemConfig::default()).map_err(|e| e.to_string())?;
    if out.failed_trials() > 0 {
        return Err(format!("{} trials failed", out.failed_trials()));
    }
    Ok(out.rows)
}

fn spec(scenario: Scenario, snr: &str, trials: usize, blocks: usize) -> ExperimentSpec {
    ExperimentSpec {
        snr_grid: parse_snr_grid(snr).expect("valid grid"),
        n_trials: trials,
        n_blocks: blocks,
        per_block_rows: false,
        ..ExperimentSpec::for_scenario(scenario)
    }
}

fn doa_ordering() -> Check {
    let start = Instant::now();
    let name = "doa tracking ordering";
    let rows = match run(&spec(Scenario::DoaTrack, "10,20,30", 50, 100)) {
        Ok(r) => r,
        Err(e) => return check(name, false, e, start),
    };
    let p = by_point(&rows);
    let (em, no, dft) = (at(&p, 10.0, "em_ukf"), at(&p, 10.0, "no_em"), at(&p, 10.0, "dft_search"));
    let n = em.len() as f64;
    let a = em.iter().zip(&no).filter(|(x, y)| x < y).count() as f64 / n;
    let b = no.iter().zip(&dft).filter(|(x, y)| x < y).count() as f64 / n;
    let r20 = mean(&at(&p, 20.0, "em_ukf"));
    let r30 = mean(&at(&p, 30.0, "em_ukf"));
    let floor_db = 20.0 * (r30 / r20).log10();
    let passed = a >= 0.8 && b >= 0.8 && floor_db.abs() <= 3.0 && start.elapsed() < Duration::from_secs(300);
    check(
        name,
        passed,
        format!(
            "RMSE at 10 dB em_ukf {:.3} deg, no_em {:.3}, dft {:.3}; strict em<no_em {:.0}%, no_em<dft {:.0}%; 30 vs 20 dB {floor_db:+.2} dB",
            mean(&em),
            mean(&no),
            mean(&dft),
            100.0 * a,
            100.0 * b
        ),
        start,
    )
}

fn as_tracking() -> Check {
    let start = Instant::now();
    let name = "angular spread tracking";
    let rows = match run(&spec(Scenario::AsTrack, "10", 5, 100)) {
        Ok(r) => r,
        Err(e) => return check(name, false, e, start),
    };
    let p = by_point(&rows);
    let taylor = mean(&at(&p, 10.0, "taylor"));
    let dft = mean(&at(&p, 10.0, "dft_search"));
    let reference = mean(&at(&p, 10.0, "reference"));
    check(
        name,
        taylor <= 0.5 * dft,
        format!("mean |size - reference|: taylor {taylor:.2} bins, dft_search {dft:.2} bins (reference mean size {reference:.2})"),
        start,
    )
}

fn uplink_ordering() -> Check {
    let start = Instant::now();
    let name = "uplink mse ordering";
    let s = spec(Scenario::UlMse, "10,20,30", 50, 100);
    let upsilons = s.resolved().upsilons();
    let rows = match run(&s) {
        Ok(r) => r,
        Err(e) => return check(name, false, e, start),
    };
    let p = by_point(&rows);
    let m = |snr: f64, method: &str| mean(&at(&p, snr, method));
    let tracked = m(10.0, "tracked");
    let aging = m(10.0, "aging");
    let fixed: Vec<(usize, f64)> = upsilons.iter().map(|&u| (u, m(10.0, &format!("fixed_upsilon_{u}")))).collect();
    let order = fixed.iter().all(|&(_, f)| tracked < f && f < aging);
    let mut floors = vec![("tracked".to_string(), m(30.0, "tracked") / m(20.0, "tracked"))];
    for &(u, _) in &fixed {
        let k = format!("fixed_upsilon_{u}");
        floors.push((k.clone(), m(30.0, &k) / m(20.0, &k)));
    }
    let floor = floors.iter().all(|(_, r)| *r >= 0.5);
    let fixed_txt: Vec<String> = fixed.iter().map(|(u, f)| format!("fixed {u} {f:.3}")).collect();
    let floor_txt: Vec<String> = floors.iter().map(|(k, r)| format!("{k} {r:.2}")).collect();
    check(
        name,
        order && floor && start.elapsed() < Duration::from_secs(600),
        format!(
            "MSE at 10 dB tracked {tracked:.3}, {}, aging {aging:.3}; MSE(30)/MSE(20): {}",
            fixed_txt.join(", "),
            floor_txt.join(", ")
        ),
        start,
    )
}

fn downlink_efficiency() -> Check {
    let start = Instant::now();
    let name = "downlink pilot efficiency";
    let rows = match run(&spec(Scenario::DlMse, "-10,-5,0", 4, 20)) {
        Ok(r) => r,
        Err(e) => return check(name, false, e, start),
    };
    let p = by_point(&rows);
    let mut ok = true;
    let mut txt = Vec::new();
    for snr in [-10.0, -5.0, 0.0] {
        let t = mean(&at(&p, snr, "tracked"));
        let c = mean(&at(&p, snr, "conventional_ls"));
        ok &= t < c;
        txt.push(format!("{snr} dB: T=k/4 {t:.3} vs LS {c:.3}"));
    }
    check(name, ok, txt.join("; "), start)
}

/// SNR where a decreasing BER curve crosses `target`, interpolated in log BER.
fn crossing(curve: &[(f64, f64)], target: f64) -> Option<f64> {
    curve.windows(2).find_map(|w| {
        let (s0, b0) = w[0];
        let (s1, b1) = w[1];
        if b0 >= target && b1 < target && b1 > 0.0 {
            let t = (b0.ln() - target.ln()) / (b0.ln() - b1.ln());
            Some(s0 + t * (s1 - s0))
        } else {
            None
        }
    })
}

fn ber() -> Check {
    let start = Instant::now();
    let name = "downlink ber";
    let s = spec(Scenario::Ber, "-20:2:0", 2, 40);
    let bits = s.n_trials * s.n_blocks * SystemConfig::default().k * s.dl_slots * 2;
    let rows = match run(&s) {
        Ok(r) => r,
        Err(e) => return check(name, false, e, start),
    };
    let p = by_point(&rows);
    let curve = |method: &str| -> Vec<(f64, f64)> { s.snr_grid.iter().map(|&x| (x, mean(&at(&p, x, method)))).collect() };
    let tracked = curve("tracked");
    let perfect = curve("perfect_csi");
    let conventional = curve("conventional_ls");
    let gap = match (crossing(&tracked, 1e-2), crossing(&perfect, 1e-2)) {
        (Some(a), Some(b)) => Some(a - b),
        _ => None,
    };
    let beats = tracked.iter().zip(&conventional).filter(|(t, _)| t.0 <= 0.0).all(|(t, c)| t.1 < c.1);
    let passed = bits >= 1_000_000 && beats && gap.is_some_and(|g| g <= 1.5);
    check(
        name,
        passed,
        format!(
            "{bits} bits per point; gap to perfect CSI at 1e-2: {}; tracked below conventional LS at every SNR <= 0 dB: {beats}",
            gap.map_or("no crossing".to_string(), |g| format!("{g:.2} dB"))
        ),
        start,
    )
}

fn main() {
    let results = vec![
        checks::check_linear_oracle(),
        checks::check_pilot_orthogonality(),
        checks::check_spectrum_bound(),
        checks::check_cebem_order(),
        checks::check_ssi_concentration(),
        doa_ordering(),
        as_tracking(),
        uplink_ordering(),
        downlink_efficiency(),
        ber(),
        checks::check_em_behaviour(),
    ];
    for c in &results {
        println!("{}", c.line());
    }
    let failed = results.iter().filter(|c| !c.passed).count();
    println!("acceptance: {} passed, {failed} failed", results.len() - failed);
    if failed > 0 && std::env::var("STBEM_ACCEPTANCE_STRICT").is_ok_and(|v| v == "1") {
        std::process::exit(1);
    }
}
