use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::channel::SystemConfig;
use crate::{Error, Result};

/// Experiment family.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scenario {
    DoaTrack,
    AsTrack,
    UlMse,
    DlMse,
    Ber,
}

impl Scenario {
    pub const ALL: [Scenario; 5] = [Scenario::DoaTrack, Scenario::AsTrack, Scenario::UlMse, Scenario::DlMse, Scenario::Ber];

    pub fn name(&self) -> &'static str {
        match self {
            Scenario::DoaTrack => "doa_track",
            Scenario::AsTrack => "as_track",
            Scenario::UlMse => "ul_mse",
            Scenario::DlMse => "dl_mse",
            Scenario::Ber => "ber",
        }
    }
}

impl fmt::Display for Scenario {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Scenario {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Scenario::ALL
            .iter()
            .copied()
            .find(|sc| sc.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown scenario '{s}'")))
    }
}

/// Comparison methods run next to the tracker.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum Baseline {
    DftSearch,
    NoEm,
    Aging,
    /// Fixed SSI size; `None` takes the spec's `fixed_upsilon` list.
    FixedUpsilon(Option<usize>),
    ConventionalLs,
    SbemStatic,
    PerfectCsi,
}

impl fmt::Display for Baseline {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Baseline::DftSearch => f.write_str("dft_search"),
            Baseline::NoEm => f.write_str("no_em"),
            Baseline::Aging => f.write_str("aging"),
            Baseline::FixedUpsilon(None) => f.write_str("fixed_upsilon"),
            Baseline::FixedUpsilon(Some(u)) => write!(f, "fixed_upsilon({u})"),
            Baseline::ConventionalLs => f.write_str("conventional_ls"),
            Baseline::SbemStatic => f.write_str("sbem_static"),
            Baseline::PerfectCsi => f.write_str("perfect_csi"),
        }
    }
}

impl FromStr for Baseline {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        Ok(match s {
            "dft_search" => Baseline::DftSearch,
            "no_em" => Baseline::NoEm,
            "aging" => Baseline::Aging,
            "fixed_upsilon" => Baseline::FixedUpsilon(None),
            "conventional_ls" => Baseline::ConventionalLs,
            "sbem_static" => Baseline::SbemStatic,
            "perfect_csi" => Baseline::PerfectCsi,
            _ => {
                let inner = s
                    .strip_prefix("fixed_upsilon(")
                    .and_then(|r| r.strip_suffix(')'))
                    .ok_or_else(|| Error::Config(format!("unknown baseline '{s}'")))?;
                let u: usize = inner.trim().parse().map_err(|_| Error::Config(format!("bad SSI size in '{s}'")))?;
                if u == 0 {
                    return Err(Error::Config("fixed_upsilon size must be positive".into()));
                }
                Baseline::FixedUpsilon(Some(u))
            }
        })
    }
}

impl TryFrom<String> for Baseline {
    type Error = Error;
    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<Baseline> for String {
    fn from(b: Baseline) -> String {
        b.to_string()
    }
}

/// Parses a comma-separated baseline list. Commas inside parentheses are kept.
pub fn parse_baselines(s: &str) -> Result<Vec<Baseline>> {
    let mut out = Vec::new();
    let mut depth = 0;
    let mut cur = String::new();
    for ch in s.chars() {
        match ch {
            '(' => depth += 1,
            ')' => depth -= 1,
            ',' if depth == 0 => {
                if !cur.trim().is_empty() {
                    out.push(cur.parse()?);
                }
                cur.clear();
                continue;
            }
            _ => {}
        }
        cur.push(ch);
    }
    if !cur.trim().is_empty() {
        out.push(cur.parse()?);
    }
    Ok(out)
}

/// Parses `a,b,c` or an inclusive grid `start:step:stop`.
pub fn parse_snr_grid(s: &str) -> Result<Vec<f64>> {
    let bad = || Error::Config(format!("cannot parse SNR list '{s}'"));
    let s = s.trim();
    if s.contains(':') {
        let parts: Vec<f64> = s.split(':').map(|p| p.trim().parse::<f64>()).collect::<std::result::Result<_, _>>().map_err(|_| bad())?;
        if parts.len() != 3 || parts[1] == 0.0 || !parts.iter().all(|v| v.is_finite()) {
            return Err(bad());
        }
        let (a, step, b) = (parts[0], parts[1], parts[2]);
        if (b - a) / step < 0.0 {
            return Err(bad());
        }
        let n = ((b - a) / step + 1e-9).floor() as usize;
        return Ok((0..=n).map(|i| a + step * i as f64).collect());
    }
    let v: Vec<f64> = s.split(',').map(|p| p.trim().parse::<f64>()).collect::<std::result::Result<_, _>>().map_err(|_| bad())?;
    if v.is_empty() || !v.iter().all(|x| x.is_finite()) {
        return Err(bad());
    }
    Ok(v)
}

/// Everything that defines one Monte Carlo experiment besides the system constants.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentSpec {
    pub scenario: Scenario,
    pub snr_grid: Vec<f64>,
    /// Blocks per trial.
    pub n_blocks: usize,
    pub n_trials: usize,
    /// Empty selects the scenario defaults.
    pub baselines: Vec<Baseline>,
    pub speed_kmh: f64,
    /// SSI sizes for `fixed_upsilon` without an explicit size.
    pub fixed_upsilon: Vec<usize>,
    /// Emit one row per block in addition to the per-trial aggregate.
    pub per_block_rows: bool,
    pub max_as_deg: f64,
    pub clusters: usize,
    pub cluster_span_deg: f64,
    pub cluster_min_sep_deg: f64,
    pub user_offset_deg: f64,
    pub cell_radius_m: f64,
    pub guard: usize,
    pub mu: usize,
    /// Uplink over downlink carrier wavelength.
    pub lambda_ratio: f64,
    pub em_max_iters: usize,
    pub em_tol: f64,
    pub rounding: bool,
    /// Power fraction defining the initial SSI sets.
    pub init_eta: f64,
    /// Power fraction of the reference and DFT-search SSI sets.
    pub reference_eta: f64,
    /// Downlink slots per block (also the conventional pilot count `M (mu + 1)`).
    pub dl_slots: usize,
    /// Downlink ST-BEM pilot counts as divisors of `M (mu + 1)`; the first is the headline one.
    pub dl_pilot_divisors: Vec<usize>,
}

impl Default for ExperimentSpec {
    fn default() -> Self {
        ExperimentSpec {
            scenario: Scenario::DoaTrack,
            snr_grid: vec![10.0],
            n_blocks: 100,
            n_trials: 1,
            baselines: Vec::new(),
            speed_kmh: 80.0,
            fixed_upsilon: vec![4, 8],
            per_block_rows: true,
            max_as_deg: 2.0,
            clusters: 4,
            cluster_span_deg: 60.0,
            cluster_min_sep_deg: 15.0,
            user_offset_deg: 1.5,
            cell_radius_m: 500.0,
            guard: 4,
            mu: 4,
            lambda_ratio: 1.05,
            em_max_iters: 200,
            em_tol: 1e-4,
            rounding: false,
            init_eta: 0.95,
            reference_eta: 0.98,
            dl_slots: 640,
            dl_pilot_divisors: vec![4, 8, 2],
        }
    }
}

impl ExperimentSpec {
    /// Defaults with the baselines each scenario compares against.
    pub fn for_scenario(scenario: Scenario) -> Self {
        let baselines = match scenario {
            Scenario::DoaTrack => vec![Baseline::NoEm, Baseline::DftSearch],
            Scenario::AsTrack => vec![Baseline::DftSearch],
            Scenario::UlMse => vec![Baseline::FixedUpsilon(None), Baseline::Aging, Baseline::SbemStatic],
            Scenario::DlMse => vec![Baseline::ConventionalLs],
            Scenario::Ber => vec![Baseline::PerfectCsi, Baseline::ConventionalLs, Baseline::SbemStatic],
        };
        ExperimentSpec { scenario, baselines, ..Default::default() }
    }

    pub fn validate(&self, cfg: &SystemConfig) -> Result<()> {
        cfg.validate()?;
        let bad = |m: String| Err(Error::Config(m));
        if self.n_trials == 0 {
            return bad("n_trials must be at least 1".into());
        }
        if self.snr_grid.is_empty() || !self.snr_grid.iter().all(|s| s.is_finite()) {
            return bad("snr_grid must be a non-empty list of finite values".into());
        }
        if self.n_blocks < 2 {
            return bad("n_blocks must be at least 2".into());
        }
        if self.clusters == 0 || self.clusters > cfg.k {
            return bad(format!("clusters must lie in 1..=K, got {}", self.clusters));
        }
        if !(self.max_as_deg >= 0.0 && self.max_as_deg < 90.0) {
            return bad(format!("max_as_deg out of range: {}", self.max_as_deg));
        }
        if !(self.cluster_span_deg > 0.0 && self.cluster_span_deg + self.user_offset_deg + self.max_as_deg < 90.0) {
            return bad("cluster span plus offsets must stay below 90 degrees".into());
        }
        if self.cluster_min_sep_deg < 0.0 || self.user_offset_deg < 0.0 || self.speed_kmh < 0.0 || self.cell_radius_m <= 0.0 {
            return bad("negative geometry or speed parameter".into());
        }
        if self.lambda_ratio <= 0.0 || !self.lambda_ratio.is_finite() {
            return bad("lambda_ratio must be positive".into());
        }
        if self.em_max_iters == 0 || !(self.em_tol > 0.0) {
            return bad("EM needs max_iters >= 1 and tol > 0".into());
        }
        if !(self.init_eta > 0.0 && self.init_eta <= 1.0 && self.reference_eta > 0.0 && self.reference_eta <= 1.0) {
            return bad("power fractions must lie in (0, 1]".into());
        }
        if self.fixed_upsilon.iter().any(|&u| u == 0 || u > cfg.m) {
            return bad("fixed_upsilon sizes must lie in 1..=M".into());
        }
        if self.mu + 1 > cfg.n {
            return bad(format!("mu + 1 = {} exceeds N = {}", self.mu + 1, cfg.n));
        }
        if matches!(self.scenario, Scenario::DlMse | Scenario::Ber) {
            let kappa = cfg.m * (self.mu + 1);
            if self.dl_slots < kappa {
                return bad(format!("dl_slots {} below M (mu + 1) = {kappa}", self.dl_slots));
            }
            if self.dl_pilot_divisors.is_empty() || self.dl_pilot_divisors.iter().any(|&d| d == 0 || !kappa.is_multiple_of(d)) {
                return bad("dl_pilot_divisors must be non-empty divisors of M (mu + 1)".into());
            }
        }
        Ok(())
    }

    /// SSI sizes of every fixed-size baseline, in first-seen order.
    pub fn upsilons(&self) -> Vec<usize> {
        let mut out = Vec::new();
        for b in &self.baselines {
            match b {
                Baseline::FixedUpsilon(Some(u)) => out.push(*u),
                Baseline::FixedUpsilon(None) => out.extend(self.fixed_upsilon.iter().copied()),
                _ => {}
            }
        }
        let mut seen = std::collections::HashSet::new();
        out.retain(|u| seen.insert(*u));
        out
    }

    /// Copy with an empty baseline list replaced by the scenario's defaults.
    pub fn resolved(&self) -> Self {
        let mut out = self.clone();
        if out.baselines.is_empty() {
            out.baselines = ExperimentSpec::for_scenario(self.scenario).baselines;
        }
        out
    }

    pub fn has(&self, b: Baseline) -> bool {
        self.baselines.contains(&b)
    }
}

/// System constants plus experiment definition, as read from a config file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub system: SystemConfig,
    pub experiment: ExperimentSpec,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        Ok(toml::from_str(text)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn baseline_round_trip() {
        for s in ["dft_search", "no_em", "aging", "fixed_upsilon", "fixed_upsilon(6)", "conventional_ls", "sbem_static", "perfect_csi"] {
            let b: Baseline = s.parse().unwrap();
            assert_eq!(b.to_string(), s);
        }
        assert!("fixed_upsilon(0)".parse::<Baseline>().is_err());
        assert!("bogus".parse::<Baseline>().is_err());
    }

    #[test]
    fn baseline_lists() {
        let v = parse_baselines("aging, fixed_upsilon(4),fixed_upsilon(8)").unwrap();
        assert_eq!(v, vec![Baseline::Aging, Baseline::FixedUpsilon(Some(4)), Baseline::FixedUpsilon(Some(8))]);
    }

    #[test]
    fn snr_grids() {
        assert_eq!(parse_snr_grid("-10:2:-4").unwrap(), vec![-10.0, -8.0, -6.0, -4.0]);
        assert_eq!(parse_snr_grid("10").unwrap(), vec![10.0]);
        assert_eq!(parse_snr_grid("0, 5,10").unwrap(), vec![0.0, 5.0, 10.0]);
        assert_eq!(parse_snr_grid("-10:2:20").unwrap().len(), 16);
        assert!(parse_snr_grid("1:0:3").is_err());
        assert!(parse_snr_grid("5:1:0").is_err());
        assert!(parse_snr_grid("x").is_err());
    }

    #[test]
    fn config_file_round_trip() {
        let rc = RunConfig::default();
        let text = toml::to_string(&rc).unwrap();
        assert!(text.contains("M = 128"));
        assert_eq!(RunConfig::from_toml(&text).unwrap(), rc);
        let partial = RunConfig::from_toml("[system]\nM = 64\n[experiment]\nscenario = \"ber\"\n").unwrap();
        assert_eq!(partial.system.m, 64);
        assert_eq!(partial.experiment.scenario, Scenario::Ber);
        assert!(RunConfig::from_toml("[system]\nbogus = 1\n").is_err());
    }
}
