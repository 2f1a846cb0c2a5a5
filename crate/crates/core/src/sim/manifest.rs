//! Run manifest: everything needed to replay a run.

use serde::{Deserialize, Serialize};

use super::spec::{ExperimentSpec, RunConfig, Scenario};
use super::trial::TrialRecord;
use super::world::true_q_omega;
use crate::channel::SystemConfig;
use crate::pilots::{design_pilots, design_pilots_with_length, PilotBook, PilotMode};
use crate::{Result, C64};

/// A pilot book with each complex entry stored as the bit patterns of its
/// real and imaginary parts (`{re:016x}{im:016x}`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BookRecord {
    pub role: String,
    pub mode: PilotMode,
    pub t: usize,
    pub mu: usize,
    pub n: usize,
    pub power: f64,
    pub slots: Vec<usize>,
    pub sequences: Vec<Vec<String>>,
}

pub fn encode_complex(c: C64) -> String {
    format!("{:016x}{:016x}", c.re.to_bits(), c.im.to_bits())
}

pub fn decode_complex(s: &str) -> Option<C64> {
    if s.len() != 32 {
        return None;
    }
    let re = u64::from_str_radix(&s[..16], 16).ok()?;
    let im = u64::from_str_radix(&s[16..], 16).ok()?;
    Some(C64::new(f64::from_bits(re), f64::from_bits(im)))
}

impl BookRecord {
    pub fn new(role: &str, book: &PilotBook) -> Self {
        BookRecord {
            role: role.to_string(),
            mode: book.mode,
            t: book.t,
            mu: book.mu,
            n: book.n,
            power: book.power,
            slots: book.slots.clone(),
            sequences: book.sequences.iter().map(|s| s.iter().map(|&c| encode_complex(c)).collect()).collect(),
        }
    }

    pub fn decode_sequences(&self) -> Option<Vec<Vec<C64>>> {
        self.sequences.iter().map(|s| s.iter().map(|h| decode_complex(h)).collect()).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub config: RunConfig,
    /// Per-block DOA increment variance of the true trajectories, rad^2.
    pub q_omega_true: f64,
    pub pilot_books: Vec<BookRecord>,
    pub trials: Vec<TrialRecord>,
}

impl Manifest {
    pub(crate) fn new(spec: &ExperimentSpec, cfg: &SystemConfig, trials: Vec<TrialRecord>) -> Result<Self> {
        let mut pilot_books = Vec::new();
        // Uplink books depend on the number of groups, which can differ
        // between trials; record one per distinct value.
        let mut groups: Vec<usize> = trials.iter().map(|t| t.groups.n_groups()).filter(|&g| g > 0).collect();
        groups.sort_unstable();
        groups.dedup();
        if matches!(spec.scenario, Scenario::UlMse) {
            for g in groups {
                let book = design_pilots(PilotMode::Uplink { groups: g }, spec.mu, cfg.n)?;
                pilot_books.push(BookRecord::new(&format!("uplink_g{g}"), &book));
            }
            if spec.has(super::Baseline::ConventionalLs) {
                let book = design_pilots(PilotMode::Uplink { groups: cfg.k }, spec.mu, cfg.n)?;
                pilot_books.push(BookRecord::new("uplink_conventional", &book));
            }
        }
        if matches!(spec.scenario, Scenario::DlMse | Scenario::Ber) {
            let kappa = cfg.m * (spec.mu + 1);
            for &d in &spec.dl_pilot_divisors {
                let t = kappa / d;
                let book = design_pilots_with_length(PilotMode::Downlink { tau: t / (spec.mu + 1) }, spec.mu, spec.dl_slots, t)?
                    .with_power(t as f64);
                pilot_books.push(BookRecord::new(&format!("downlink_t{t}"), &book));
            }
            if spec.has(super::Baseline::ConventionalLs) {
                let book = design_pilots_with_length(PilotMode::Downlink { tau: cfg.m }, spec.mu, spec.dl_slots, kappa)?
                    .with_power((kappa / spec.dl_pilot_divisors[0]) as f64);
                pilot_books.push(BookRecord::new("downlink_conventional", &book));
            }
        }
        Ok(Manifest {
            config: RunConfig { system: cfg.clone(), experiment: spec.clone() },
            q_omega_true: true_q_omega(spec, cfg),
            pilot_books,
            trials,
        })
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string(self)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn complex_hex_round_trip() {
        for c in [C64::new(0.1, -3.5), C64::new(-0.0, f64::MIN_POSITIVE), C64::new(1e300, 2.0f64.sqrt())] {
            let s = encode_complex(c);
            let d = decode_complex(&s).unwrap();
            assert_eq!(d.re.to_bits(), c.re.to_bits());
            assert_eq!(d.im.to_bits(), c.im.to_bits());
        }
        assert!(decode_complex("xyz").is_none());
    }
}
