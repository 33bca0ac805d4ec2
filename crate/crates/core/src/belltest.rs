//! CHSH estimation over repeated acquisition runs and the n-sigma verdict.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::photonsim::{CoincidenceRecord, Provenance, RoundKind, RunTally};

/// Sign of each correlator in `S = E11 + E12 - E21 + E22`, indexed `[a][b]`.
pub const CHSH_SIGNS: [[f64; 2]; 2] = [[1.0, 1.0], [-1.0, 1.0]];

/// Classical bound on `|S|`.
pub const LOCAL_BOUND: f64 = 2.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BellTestConfig {
    pub n_runs: usize,
    /// Duration of each run [s].
    pub t_acq: f64,
    /// `n` in the n-sigma criterion.
    pub confidence_n: f64,
    pub min_valid_runs: usize,
}

impl Default for BellTestConfig {
    fn default() -> Self {
        BellTestConfig {
            n_runs: 30,
            t_acq: 1e-3,
            confidence_n: 1.0,
            min_valid_runs: 2,
        }
    }
}

impl BellTestConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_runs < 2 {
            return Err(Error::invalid("bell.n_runs", "must be >= 2"));
        }
        if !(self.t_acq > 0.0 && self.t_acq.is_finite()) {
            return Err(Error::invalid("bell.t_acq", "must be finite and > 0"));
        }
        if !(self.confidence_n > 0.0 && self.confidence_n.is_finite()) {
            return Err(Error::invalid("bell.confidence_n", "must be finite and > 0"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BellTestResult {
    pub s_mean: f64,
    /// Population standard deviation over valid runs.
    pub s_std: f64,
    pub valid_runs: usize,
    pub verdict: bool,
    /// `None` marks a run with an empty correlator.
    pub per_run_s: Vec<Option<f64>>,
}

impl BellTestResult {
    pub fn from_runs(per_run_s: Vec<Option<f64>>, confidence_n: f64, min_valid_runs: usize) -> Self {
        let (mean, std, valid) = mean_std(per_run_s.iter().flatten().copied());
        let mut out = BellTestResult {
            s_mean: mean,
            s_std: std,
            valid_runs: valid,
            verdict: false,
            per_run_s,
        };
        out.verdict = out.verdict_at(confidence_n, min_valid_runs);
        out
    }

    pub fn from_tallies(tallies: &[RunTally], cfg: &BellTestConfig) -> Self {
        Self::from_runs(
            tallies.iter().map(chsh_from_tally).collect(),
            cfg.confidence_n,
            cfg.min_valid_runs,
        )
    }

    /// `|S| - n sigma >= 2` on the same data with a different `n`.
    pub fn verdict_at(&self, confidence_n: f64, min_valid_runs: usize) -> bool {
        self.valid_runs >= min_valid_runs.max(1)
            && self.s_mean.abs() - confidence_n * self.s_std >= LOCAL_BOUND
    }

    /// Largest `n` for which the verdict still holds (negative if none).
    pub fn margin_sigmas(&self) -> f64 {
        if self.s_std > 0.0 {
            (self.s_mean.abs() - LOCAL_BOUND) / self.s_std
        } else if self.s_mean.abs() >= LOCAL_BOUND {
            f64::INFINITY
        } else {
            f64::NEG_INFINITY
        }
    }
}

/// Mean, population standard deviation and count; zeros when empty.
pub fn mean_std(values: impl Iterator<Item = f64>) -> (f64, f64, usize) {
    let v: Vec<f64> = values.collect();
    if v.is_empty() {
        return (0.0, 0.0, 0);
    }
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt(), v.len())
}

fn chsh_from_sums(sums: [[f64; 2]; 2], counts: [[u64; 2]; 2]) -> Option<f64> {
    let mut s = 0.0;
    for a in 0..2 {
        for b in 0..2 {
            if counts[a][b] == 0 {
                return None;
            }
            s += CHSH_SIGNS[a][b] * sums[a][b] / counts[a][b] as f64;
        }
    }
    Some(s)
}

/// CHSH value of the Bell-round records; `None` if any basis pair is empty.
pub fn chsh_from_records(records: &[CoincidenceRecord]) -> Option<f64> {
    let mut sums = [[0.0; 2]; 2];
    let mut counts = [[0u64; 2]; 2];
    for r in records.iter().filter(|r| r.kind == RoundKind::Bell) {
        let (a, b) = ((r.alice_basis - 1) as usize, (r.bob_basis - 1) as usize);
        sums[a][b] += (r.alice_outcome * r.bob_outcome) as f64;
        counts[a][b] += 1;
    }
    chsh_from_sums(sums, counts)
}

pub fn chsh_from_tally(t: &RunTally) -> Option<f64> {
    let mut sums = [[0.0; 2]; 2];
    let mut counts = [[0u64; 2]; 2];
    for prov in [Provenance::Genuine, Provenance::Contaminated] {
        for a in 0..2 {
            for b in 0..2 {
                for oa in 0..2 {
                    for ob in 0..2 {
                        let c = t.counts[RunTally::index(RoundKind::Bell, prov, a, b, oa, ob)];
                        let product = if oa == ob { 1.0 } else { -1.0 };
                        sums[a][b] += product * c as f64;
                        counts[a][b] += c;
                    }
                }
            }
        }
    }
    chsh_from_sums(sums, counts)
}

/// Produces the tally of run `index`, which starts at time `t_start`.
pub trait RunSource: Sync {
    fn run(&self, index: usize, t_start: f64) -> Result<RunTally>;
}

impl<F> RunSource for F
where
    F: Fn(usize, f64) -> Result<RunTally> + Sync,
{
    fn run(&self, index: usize, t_start: f64) -> Result<RunTally> {
        self(index, t_start)
    }
}

/// Runs `cfg.n_runs` back-to-back acquisitions starting at `t0`.
pub fn run_tallies(source: &impl RunSource, cfg: &BellTestConfig, t0: f64) -> Result<Vec<RunTally>> {
    cfg.validate()?;
    (0..cfg.n_runs)
        .map(|i| source.run(i, t0 + i as f64 * cfg.t_acq))
        .collect()
}

pub fn run_bell_test(source: &impl RunSource, cfg: &BellTestConfig, t0: f64) -> Result<BellTestResult> {
    let tallies = run_tallies(source, cfg, t0)?;
    Ok(BellTestResult::from_tallies(&tallies, cfg))
}
