//! Slotted photon-counting model of one acquisition run.
//!
//! Time is cut into slots of `slot_duration`. In each slot a pair may be
//! emitted, each arm may detect its photon, and each receiver may register a
//! background photon or a dark count. A coincidence is recorded when both
//! receivers click in the same slot.
//!
//! Slots are independent and identically distributed, so the per-run counts
//! of each record category follow a multinomial law. [`Sampling::Aggregated`]
//! draws those counts directly; [`Sampling::PerSlot`] walks the slots one by
//! one and is kept as the reference path.

use std::f64::consts::FRAC_PI_4;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Binomial, Distribution, Hypergeometric};
use serde::{Deserialize, Serialize};

use crate::channel::check_probability;
use crate::error::{Error, Result};
use crate::rng::{lane, SimRng, StreamId};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QuantumState {
    /// (|HV> - |VH>)/sqrt(2)
    #[default]
    Singlet,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SourceParams {
    /// Emitted pairs per second.
    pub pair_rate: f64,
    pub state: QuantumState,
}

impl Default for SourceParams {
    fn default() -> Self {
        SourceParams {
            pair_rate: 1e7,
            state: QuantumState::Singlet,
        }
    }
}

impl SourceParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.pair_rate >= 0.0 && self.pair_rate.is_finite()) {
            return Err(Error::invalid("source.pair_rate", "must be finite and >= 0"));
        }
        Ok(())
    }
}

/// Uncorrelated click rates at the two receivers, A and B [Hz].
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NoiseParams {
    pub bkg_rate_a: f64,
    pub bkg_rate_b: f64,
    pub dark_rate_a: f64,
    pub dark_rate_b: f64,
}

impl NoiseParams {
    pub fn noiseless() -> Self {
        Self::default()
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("noise.bkg_rate_a", self.bkg_rate_a),
            ("noise.bkg_rate_b", self.bkg_rate_b),
            ("noise.dark_rate_a", self.dark_rate_a),
            ("noise.dark_rate_b", self.dark_rate_b),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::invalid(name, "rate must be finite and >= 0"));
            }
        }
        Ok(())
    }
}

/// Polarizer angles [rad] for basis indices 1 and 2 on each side.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MeasurementBases {
    pub alice: [f64; 2],
    pub bob: [f64; 2],
}

impl Default for MeasurementBases {
    /// CHSH-optimal angles. Bob's first setting is -22.5 deg so that
    /// `S = E11 + E12 - E21 + E22` reaches `-2 sqrt(2)` for the singlet.
    fn default() -> Self {
        MeasurementBases {
            alice: [0.0, FRAC_PI_4],
            bob: [-FRAC_PI_4 / 2.0, FRAC_PI_4 / 2.0],
        }
    }
}

impl MeasurementBases {
    /// Matched {0, 45} deg settings on both sides for key generation.
    pub fn key() -> Self {
        MeasurementBases {
            alice: [0.0, FRAC_PI_4],
            bob: [0.0, FRAC_PI_4],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RoundKind {
    Bell,
    Key,
}

/// How each coincidence picks its settings: a Bell-test round with
/// probability `1 - key_fraction`, otherwise a key round.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RoundPlan {
    pub bell: MeasurementBases,
    pub key: MeasurementBases,
    pub key_fraction: f64,
}

impl RoundPlan {
    pub fn bell_only(bases: MeasurementBases) -> Self {
        RoundPlan {
            bell: bases,
            key: MeasurementBases::key(),
            key_fraction: 0.0,
        }
    }

    pub fn with_key(bell: MeasurementBases, key: MeasurementBases, key_fraction: f64) -> Self {
        RoundPlan {
            bell,
            key,
            key_fraction,
        }
    }

    pub fn validate(&self) -> Result<()> {
        check_probability("key_fraction", self.key_fraction)?;
        for a in self.bell.alice.iter().chain(&self.bell.bob).chain(&self.key.alice).chain(&self.key.bob) {
            if !a.is_finite() {
                return Err(Error::invalid("bases", "angles must be finite"));
            }
        }
        Ok(())
    }

    fn bases(&self, kind: RoundKind) -> &MeasurementBases {
        match kind {
            RoundKind::Bell => &self.bell,
            RoundKind::Key => &self.key,
        }
    }

    fn kind_probability(&self, kind: RoundKind) -> f64 {
        match kind {
            RoundKind::Bell => 1.0 - self.key_fraction,
            RoundKind::Key => self.key_fraction,
        }
    }
}

impl From<MeasurementBases> for RoundPlan {
    fn from(b: MeasurementBases) -> Self {
        RoundPlan::bell_only(b)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Genuine,
    Contaminated,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct CoincidenceRecord {
    pub kind: RoundKind,
    /// 1 or 2
    pub alice_basis: u8,
    /// 1 or 2
    pub bob_basis: u8,
    /// +1 or -1
    pub alice_outcome: i8,
    /// +1 or -1
    pub bob_outcome: i8,
    pub provenance: Provenance,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Sampling {
    /// Per-run category counts drawn from their exact joint law.
    #[default]
    Aggregated,
    /// One Bernoulli trial per slot and event type.
    PerSlot,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    /// [s]
    pub t_acq: f64,
    /// Photon detection probability of arm A.
    pub eta_a: f64,
    pub eta_b: f64,
    /// [s]
    pub slot_duration: f64,
    pub seed_stream: StreamId,
    pub sampling: Sampling,
}

impl RunConfig {
    /// Slot length tied to the source period.
    pub fn new(src: &SourceParams, t_acq: f64, eta_a: f64, eta_b: f64, seed_stream: StreamId) -> Self {
        let slot_duration = if src.pair_rate > 0.0 { 1.0 / src.pair_rate } else { 1e-7 };
        RunConfig {
            t_acq,
            eta_a,
            eta_b,
            slot_duration,
            seed_stream,
            sampling: Sampling::Aggregated,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.slot_duration > 0.0) {
            return Err(Error::invalid("slot_duration", "must be > 0"));
        }
        if !(self.t_acq >= self.slot_duration) {
            return Err(Error::invalid("t_acq", "must be >= slot_duration"));
        }
        check_probability("eta_a", self.eta_a)?;
        check_probability("eta_b", self.eta_b)
    }

    pub fn n_slots(&self) -> u64 {
        (self.t_acq / self.slot_duration).round() as u64
    }
}

/// Per-slot probabilities of one link configuration.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SlotModel {
    pub p_pair: f64,
    pub eta_a: f64,
    pub eta_b: f64,
    /// Probability of at least one background or dark click at A.
    pub noise_a: f64,
    pub noise_b: f64,
    /// Probability that a side holding both a pair photon and a noise click
    /// is resolved as the pair photon.
    pub resolve_a: f64,
    pub resolve_b: f64,
}

impl SlotModel {
    pub fn new(src: &SourceParams, noise: &NoiseParams, eta_a: f64, eta_b: f64, slot: f64) -> Result<Self> {
        let p_pair = src.pair_rate * slot;
        for (category, expected) in [
            ("pair", p_pair),
            ("background A", noise.bkg_rate_a * slot),
            ("background B", noise.bkg_rate_b * slot),
            ("dark A", noise.dark_rate_a * slot),
            ("dark B", noise.dark_rate_b * slot),
        ] {
            if expected > 1.0 + 1e-12 {
                return Err(Error::SlotTooCoarse { category, expected });
            }
        }
        let p_pair = p_pair.min(1.0);
        let side = |bkg: f64, dark: f64, eta: f64| {
            let qb = (bkg * slot).min(1.0);
            let qd = (dark * slot).min(1.0);
            let noise = 1.0 - (1.0 - qb) * (1.0 - qd);
            let genuine = p_pair * eta;
            let total = genuine + qb + qd;
            let resolve = if total > 0.0 { genuine / total } else { 1.0 };
            (noise, resolve)
        };
        let (noise_a, resolve_a) = side(noise.bkg_rate_a, noise.dark_rate_a, eta_a);
        let (noise_b, resolve_b) = side(noise.bkg_rate_b, noise.dark_rate_b, eta_b);
        Ok(SlotModel {
            p_pair,
            eta_a,
            eta_b,
            noise_a,
            noise_b,
            resolve_a,
            resolve_b,
        })
    }

    pub fn from_run(src: &SourceParams, noise: &NoiseParams, cfg: &RunConfig) -> Result<Self> {
        Self::new(src, noise, cfg.eta_a, cfg.eta_b, cfg.slot_duration)
    }

    /// Probability that a slot yields a genuine coincidence.
    pub fn p_genuine(&self) -> f64 {
        let keep_a = (1.0 - self.noise_a) + self.noise_a * self.resolve_a;
        let keep_b = (1.0 - self.noise_b) + self.noise_b * self.resolve_b;
        self.p_pair * self.eta_a * self.eta_b * keep_a * keep_b
    }

    /// Probability that a slot yields any coincidence.
    pub fn p_coincidence(&self) -> f64 {
        let click_a = 1.0 - (1.0 - self.eta_a) * (1.0 - self.noise_a);
        let click_b = 1.0 - (1.0 - self.eta_b) * (1.0 - self.noise_b);
        self.p_pair * click_a * click_b + (1.0 - self.p_pair) * self.noise_a * self.noise_b
    }

    pub fn contaminated_fraction(&self) -> f64 {
        let tot = self.p_coincidence();
        if tot > 0.0 {
            1.0 - self.p_genuine() / tot
        } else {
            0.0
        }
    }

    /// Per-run (coincidences, genuine coincidences).
    pub fn sample_counts(&self, n_slots: u64, sampling: Sampling, rng: &mut SimRng) -> (u64, u64) {
        match sampling {
            Sampling::Aggregated => {
                let p_tot = self.p_coincidence().clamp(0.0, 1.0);
                let k = binomial(n_slots, p_tot, rng);
                let ratio = if p_tot > 0.0 {
                    (self.p_genuine() / p_tot).clamp(0.0, 1.0)
                } else {
                    0.0
                };
                (k, binomial(k, ratio, rng))
            }
            Sampling::PerSlot => {
                let (mut k, mut g) = (0, 0);
                for _ in 0..n_slots {
                    if let Some(genuine) = self.slot(rng) {
                        k += 1;
                        g += genuine as u64;
                    }
                }
                (k, g)
            }
        }
    }

    /// One slot; `Some(genuine)` when both sides click.
    fn slot(&self, rng: &mut SimRng) -> Option<bool> {
        let pair = rng.random::<f64>() < self.p_pair;
        let arm_a = pair && rng.random::<f64>() < self.eta_a;
        let arm_b = pair && rng.random::<f64>() < self.eta_b;
        let noise_a = rng.random::<f64>() < self.noise_a;
        let noise_b = rng.random::<f64>() < self.noise_b;
        if !((arm_a || noise_a) && (arm_b || noise_b)) {
            return None;
        }
        let gen_a = arm_a && (!noise_a || rng.random::<f64>() < self.resolve_a);
        let gen_b = arm_b && (!noise_b || rng.random::<f64>() < self.resolve_b);
        Some(gen_a && gen_b)
    }
}

fn binomial(n: u64, p: f64, rng: &mut SimRng) -> u64 {
    if n == 0 || p <= 0.0 {
        return 0;
    }
    if p >= 1.0 {
        return n;
    }
    Binomial::new(n, p).expect("valid binomial").sample(rng)
}

fn hypergeometric(total: u64, successes: u64, draws: u64, rng: &mut SimRng) -> u64 {
    if draws == 0 || successes == 0 {
        return 0;
    }
    if draws == total {
        return successes;
    }
    Hypergeometric::new(total, successes, draws)
        .expect("valid hypergeometric")
        .sample(rng)
}

/// Splits `n` over categories with the given (not necessarily normalized)
/// weights using a chain of conditional binomials.
fn multinomial(n: u64, weights: &[f64], rng: &mut SimRng, out: &mut [u64]) {
    let mut rest = n;
    let mut mass: f64 = weights.iter().sum();
    let last = weights.iter().rposition(|&w| w > 0.0);
    for (i, (&w, o)) in weights.iter().zip(out.iter_mut()).enumerate() {
        if rest == 0 || w <= 0.0 {
            *o = 0;
            continue;
        }
        if Some(i) == last {
            *o = rest;
            rest = 0;
            continue;
        }
        let k = binomial(rest, (w / mass).min(1.0), rng);
        *o = k;
        rest -= k;
        mass -= w;
    }
}

/// Joint outcome probabilities for (+,+), (+,-), (-,+), (-,-).
pub fn outcome_probabilities(state: QuantumState, alpha: f64, beta: f64) -> [f64; 4] {
    match state {
        QuantumState::Singlet => {
            let s2 = 0.5 * (alpha - beta).sin().powi(2);
            let c2 = 0.5 * (alpha - beta).cos().powi(2);
            [s2, c2, c2, s2]
        }
    }
}

pub fn born_outcome(state: QuantumState, alpha: f64, beta: f64, rng: &mut impl Rng) -> (i8, i8) {
    let p = outcome_probabilities(state, alpha, beta);
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (idx, &pi) in p.iter().enumerate() {
        acc += pi;
        if u < acc {
            return index_outcomes(idx);
        }
    }
    index_outcomes(3)
}

fn index_outcomes(idx: usize) -> (i8, i8) {
    let sign = |bit: usize| if bit == 0 { 1 } else { -1 };
    (sign(idx >> 1), sign(idx & 1))
}

fn outcome_index(o: i8) -> usize {
    if o > 0 {
        0
    } else {
        1
    }
}

const KINDS: [RoundKind; 2] = [RoundKind::Bell, RoundKind::Key];
const PROVS: [Provenance; 2] = [Provenance::Genuine, Provenance::Contaminated];

/// Counts of every distinct record value produced by one run.
///
/// Index layout: kind, provenance, alice basis, bob basis, alice outcome,
/// bob outcome, one bit each from most to least significant.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RunTally {
    pub counts: [u64; 64],
}

impl Default for RunTally {
    fn default() -> Self {
        RunTally { counts: [0; 64] }
    }
}

impl RunTally {
    pub fn index(kind: RoundKind, prov: Provenance, ai: usize, bi: usize, oa: usize, ob: usize) -> usize {
        let k = matches!(kind, RoundKind::Key) as usize;
        let p = matches!(prov, Provenance::Contaminated) as usize;
        (k << 5) | (p << 4) | (ai << 3) | (bi << 2) | (oa << 1) | ob
    }

    pub fn record_at(idx: usize) -> CoincidenceRecord {
        let (alice_outcome, bob_outcome) = index_outcomes(idx & 3);
        CoincidenceRecord {
            kind: KINDS[(idx >> 5) & 1],
            alice_basis: ((idx >> 3) & 1) as u8 + 1,
            bob_basis: ((idx >> 2) & 1) as u8 + 1,
            alice_outcome,
            bob_outcome,
            provenance: PROVS[(idx >> 4) & 1],
        }
    }

    pub fn add(&mut self, r: &CoincidenceRecord) {
        let i = Self::index(
            r.kind,
            r.provenance,
            (r.alice_basis - 1) as usize,
            (r.bob_basis - 1) as usize,
            outcome_index(r.alice_outcome),
            outcome_index(r.bob_outcome),
        );
        self.counts[i] += 1;
    }

    pub fn from_records(records: &[CoincidenceRecord]) -> Self {
        let mut t = Self::default();
        for r in records {
            t.add(r);
        }
        t
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn genuine(&self) -> u64 {
        self.counts
            .iter()
            .enumerate()
            .filter(|(i, _)| (i >> 4) & 1 == 0)
            .map(|(_, c)| c)
            .sum()
    }

    pub fn of_kind(&self, kind: RoundKind) -> u64 {
        let k = matches!(kind, RoundKind::Key) as usize;
        self.counts
            .iter()
            .enumerate()
            .filter(|(i, _)| (i >> 5) & 1 == k)
            .map(|(_, c)| c)
            .sum()
    }

    /// Expands into records in a uniformly random order.
    pub fn to_records(&self, rng: &mut impl Rng) -> Vec<CoincidenceRecord> {
        let mut out = Vec::with_capacity(self.total() as usize);
        for (i, &c) in self.counts.iter().enumerate() {
            let r = Self::record_at(i);
            out.extend(std::iter::repeat_n(r, c as usize));
        }
        out.shuffle(rng);
        out
    }

    /// Allocates `genuine` and `contaminated` coincidences over settings and
    /// outcomes according to `plan`.
    pub fn fill(
        genuine: u64,
        contaminated: u64,
        plan: &RoundPlan,
        state: QuantumState,
        rng: &mut SimRng,
    ) -> Self {
        let mut gw = [0.0; 32];
        let mut cw = [0.0; 32];
        for (k, &kind) in KINDS.iter().enumerate() {
            let pk = plan.kind_probability(kind);
            let bases = plan.bases(kind);
            for ai in 0..2 {
                for bi in 0..2 {
                    let probs = outcome_probabilities(state, bases.alice[ai], bases.bob[bi]);
                    for (o, p) in probs.iter().enumerate() {
                        let j = (k << 4) | (ai << 3) | (bi << 2) | o;
                        gw[j] = pk * 0.25 * p;
                        cw[j] = pk / 16.0;
                    }
                }
            }
        }
        let mut g = [0u64; 32];
        let mut c = [0u64; 32];
        multinomial(genuine, &gw, rng, &mut g);
        multinomial(contaminated, &cw, rng, &mut c);
        let mut t = Self::default();
        for j in 0..32 {
            let kind = KINDS[j >> 4];
            let (ai, bi, oa, ob) = ((j >> 3) & 1, (j >> 2) & 1, (j >> 1) & 1, j & 1);
            t.counts[Self::index(kind, Provenance::Genuine, ai, bi, oa, ob)] = g[j];
            t.counts[Self::index(kind, Provenance::Contaminated, ai, bi, oa, ob)] = c[j];
        }
        t
    }
}

fn random_record(kind: RoundKind, genuine: bool, plan: &RoundPlan, state: QuantumState, rng: &mut SimRng) -> CoincidenceRecord {
    let ai = rng.random_range(0..2usize);
    let bi = rng.random_range(0..2usize);
    let bases = plan.bases(kind);
    let (alice_outcome, bob_outcome) = if genuine {
        born_outcome(state, bases.alice[ai], bases.bob[bi], rng)
    } else {
        (
            if rng.random::<bool>() { 1 } else { -1 },
            if rng.random::<bool>() { 1 } else { -1 },
        )
    };
    CoincidenceRecord {
        kind,
        alice_basis: ai as u8 + 1,
        bob_basis: bi as u8 + 1,
        alice_outcome,
        bob_outcome,
        provenance: if genuine {
            Provenance::Genuine
        } else {
            Provenance::Contaminated
        },
    }
}

fn random_kind(plan: &RoundPlan, rng: &mut SimRng) -> RoundKind {
    if rng.random::<f64>() < plan.key_fraction {
        RoundKind::Key
    } else {
        RoundKind::Bell
    }
}

fn validate_inputs(src: &SourceParams, noise: &NoiseParams, plan: &RoundPlan, cfg: &RunConfig) -> Result<SlotModel> {
    src.validate()?;
    noise.validate()?;
    plan.validate()?;
    cfg.validate()?;
    SlotModel::from_run(src, noise, cfg)
}

/// Tally of one run. With [`Sampling::PerSlot`] this walks every slot.
pub fn simulate_run_tally(
    src: &SourceParams,
    noise: &NoiseParams,
    plan: &RoundPlan,
    cfg: &RunConfig,
) -> Result<RunTally> {
    let model = validate_inputs(src, noise, plan, cfg)?;
    let mut rng = cfg.seed_stream.rng();
    match cfg.sampling {
        Sampling::Aggregated => {
            let (k, g) = model.sample_counts(cfg.n_slots(), Sampling::Aggregated, &mut rng);
            Ok(RunTally::fill(g, k - g, plan, src.state, &mut rng))
        }
        Sampling::PerSlot => Ok(RunTally::from_records(&per_slot_records(&model, src, plan, cfg, &mut rng))),
    }
}

fn per_slot_records(
    model: &SlotModel,
    src: &SourceParams,
    plan: &RoundPlan,
    cfg: &RunConfig,
    rng: &mut SimRng,
) -> Vec<CoincidenceRecord> {
    let mut out = Vec::new();
    for _ in 0..cfg.n_slots() {
        if let Some(genuine) = model.slot(rng) {
            let kind = random_kind(plan, rng);
            out.push(random_record(kind, genuine, plan, src.state, rng));
        }
    }
    out
}

/// Records of one run, in time order.
pub fn simulate_run(
    src: &SourceParams,
    noise: &NoiseParams,
    plan: &RoundPlan,
    cfg: &RunConfig,
) -> Result<Vec<CoincidenceRecord>> {
    let model = validate_inputs(src, noise, plan, cfg)?;
    let mut rng = cfg.seed_stream.rng();
    match cfg.sampling {
        Sampling::Aggregated => {
            let (k, g) = model.sample_counts(cfg.n_slots(), Sampling::Aggregated, &mut rng);
            let tally = RunTally::fill(g, k - g, plan, src.state, &mut rng);
            Ok(tally.to_records(&mut rng))
        }
        Sampling::PerSlot => Ok(per_slot_records(&model, src, plan, cfg, &mut rng)),
    }
}

/// What a failed swap leaves behind.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FailedSwap {
    /// The failure is heralded and the pairing is discarded.
    Dropped,
    /// The failure is not heralded; the stations still measure and obtain
    /// uncorrelated outcomes.
    #[default]
    Unheralded,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct SwapCounts {
    pub stored_1: u64,
    pub stored_2: u64,
    pub paired: u64,
    pub swapped_genuine: u64,
    pub swapped_contaminated: u64,
    pub failed: u64,
}

/// Swap statistics for two memory-assisted downlinks.
///
/// Each link is a run whose arm A is the on-board memory and arm B a ground
/// receiver; `noise_1` and `noise_2` describe those two links.
pub fn simulate_swap_counts(
    cfg_link1: &RunConfig,
    cfg_link2: &RunConfig,
    src: &SourceParams,
    noise_1: &NoiseParams,
    noise_2: &NoiseParams,
    p_sw: f64,
) -> Result<SwapCounts> {
    check_probability("p_sw", p_sw)?;
    src.validate()?;
    noise_1.validate()?;
    noise_2.validate()?;
    cfg_link1.validate()?;
    cfg_link2.validate()?;
    let m1 = SlotModel::from_run(src, noise_1, cfg_link1)?;
    let m2 = SlotModel::from_run(src, noise_2, cfg_link2)?;
    let (k1, g1) = m1.sample_counts(cfg_link1.n_slots(), cfg_link1.sampling, &mut cfg_link1.seed_stream.rng());
    let (k2, g2) = m2.sample_counts(cfg_link2.n_slots(), cfg_link2.sampling, &mut cfg_link2.seed_stream.rng());
    let mut rng = cfg_link1.seed_stream.with_lane(lane::SWAP).rng();
    let m = k1.min(k2);
    // genuine links among the m oldest-first stored links of each memory bank
    let u1 = hypergeometric(k1, g1, m, &mut rng);
    let u2 = hypergeometric(k2, g2, m, &mut rng);
    let both = hypergeometric(m, u1, u2, &mut rng);
    let ok_gen = binomial(both, p_sw, &mut rng);
    let ok_other = binomial(m - both, p_sw, &mut rng);
    Ok(SwapCounts {
        stored_1: k1,
        stored_2: k2,
        paired: m,
        swapped_genuine: ok_gen,
        swapped_contaminated: ok_other,
        failed: m - ok_gen - ok_other,
    })
}

#[allow(clippy::too_many_arguments)]
pub fn simulate_swap_tally(
    cfg_link1: &RunConfig,
    cfg_link2: &RunConfig,
    src: &SourceParams,
    noise_1: &NoiseParams,
    noise_2: &NoiseParams,
    plan: &RoundPlan,
    p_sw: f64,
    failed: FailedSwap,
) -> Result<RunTally> {
    plan.validate()?;
    let c = simulate_swap_counts(cfg_link1, cfg_link2, src, noise_1, noise_2, p_sw)?;
    let contaminated = c.swapped_contaminated
        + match failed {
            FailedSwap::Dropped => 0,
            FailedSwap::Unheralded => c.failed,
        };
    let mut rng = cfg_link2.seed_stream.with_lane(lane::SWAP).rng();
    Ok(RunTally::fill(c.swapped_genuine, contaminated, plan, src.state, &mut rng))
}

/// Records between the two ground stations after swapping.
#[allow(clippy::too_many_arguments)]
pub fn simulate_swap_run(
    cfg_link1: &RunConfig,
    cfg_link2: &RunConfig,
    src: &SourceParams,
    noise_1: &NoiseParams,
    noise_2: &NoiseParams,
    plan: &RoundPlan,
    p_sw: f64,
    failed: FailedSwap,
) -> Result<Vec<CoincidenceRecord>> {
    let tally = simulate_swap_tally(cfg_link1, cfg_link2, src, noise_1, noise_2, plan, p_sw, failed)?;
    let mut rng = cfg_link2.seed_stream.with_lane(lane::SYNTH).rng();
    Ok(tally.to_records(&mut rng))
}

/// How synthetic records spread over the four Bell basis pairs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BasisAllocation {
    /// Independent uniform choice per record.
    Random,
    /// Exactly `n / 4` records per basis pair; `n` must be a multiple of 4.
    Balanced,
}

/// Exactly `n` records, each genuine with probability `genuine_fraction`.
pub fn synthesize_records(
    n: usize,
    genuine_fraction: f64,
    plan: &RoundPlan,
    allocation: BasisAllocation,
    rng: &mut SimRng,
) -> Result<Vec<CoincidenceRecord>> {
    check_probability("genuine_fraction", genuine_fraction)?;
    plan.validate()?;
    let state = QuantumState::Singlet;
    match allocation {
        BasisAllocation::Random => Ok((0..n)
            .map(|_| {
                let kind = random_kind(plan, rng);
                let genuine = rng.random::<f64>() < genuine_fraction;
                random_record(kind, genuine, plan, state, rng)
            })
            .collect()),
        BasisAllocation::Balanced => {
            if n % 4 != 0 {
                return Err(Error::invalid("n", "balanced allocation needs a multiple of 4"));
            }
            let mut out = Vec::with_capacity(n);
            for ai in 0..2usize {
                for bi in 0..2usize {
                    for _ in 0..n / 4 {
                        let genuine = rng.random::<f64>() < genuine_fraction;
                        let (alice_outcome, bob_outcome) = if genuine {
                            born_outcome(state, plan.bell.alice[ai], plan.bell.bob[bi], rng)
                        } else {
                            (
                                if rng.random::<bool>() { 1 } else { -1 },
                                if rng.random::<bool>() { 1 } else { -1 },
                            )
                        };
                        out.push(CoincidenceRecord {
                            kind: RoundKind::Bell,
                            alice_basis: ai as u8 + 1,
                            bob_basis: bi as u8 + 1,
                            alice_outcome,
                            bob_outcome,
                            provenance: if genuine {
                                Provenance::Genuine
                            } else {
                                Provenance::Contaminated
                            },
                        });
                    }
                }
            }
            out.shuffle(rng);
            Ok(out)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::StreamId;

    fn stream(run: u64) -> StreamId {
        StreamId::new(11, 0, run, lane::LINK_A)
    }

    fn lossless(src: &SourceParams, t_acq: f64, run: u64) -> RunConfig {
        RunConfig::new(src, t_acq, 1.0, 1.0, stream(run))
    }

    #[test]
    fn born_rule_equal_angles_anticorrelated() {
        let mut rng = stream(0).rng();
        for _ in 0..1000 {
            let (a, b) = born_outcome(QuantumState::Singlet, 0.3, 0.3, &mut rng);
            assert_eq!(a, -b);
        }
    }

    #[test]
    fn born_rule_correlator_at_22_5() {
        let mut rng = stream(1).rng();
        let n = 1_000_000;
        let beta = 22.5f64.to_radians();
        let sum: i64 = (0..n)
            .map(|_| {
                let (a, b) = born_outcome(QuantumState::Singlet, 0.0, beta, &mut rng);
                (a * b) as i64
            })
            .sum();
        let e = sum as f64 / n as f64;
        assert!((e + std::f64::consts::FRAC_1_SQRT_2).abs() < 0.003, "E = {e}");
        let p = outcome_probabilities(QuantumState::Singlet, 0.0, FRAC_PI_4);
        assert!((p[0] + p[3] - p[1] - p[2]).abs() < 1e-15);
    }

    #[test]
    fn lossless_noiseless_all_genuine() {
        let src = SourceParams {
            pair_rate: 1e7,
            ..Default::default()
        };
        let cfg = lossless(&src, 1e-4, 0);
        let recs = simulate_run(&src, &NoiseParams::noiseless(), &MeasurementBases::default().into(), &cfg).unwrap();
        assert_eq!(recs.len(), 1000);
        assert!(recs.iter().all(|r| r.provenance == Provenance::Genuine));
        let mut cfg = cfg;
        cfg.sampling = Sampling::PerSlot;
        let recs = simulate_run(&src, &NoiseParams::noiseless(), &MeasurementBases::default().into(), &cfg).unwrap();
        assert_eq!(recs.len(), 1000);
    }

    #[test]
    fn no_source_gives_only_contaminated() {
        let src = SourceParams {
            pair_rate: 0.0,
            ..Default::default()
        };
        let noise = NoiseParams {
            bkg_rate_a: 2e6,
            bkg_rate_b: 2e6,
            ..Default::default()
        };
        let mut cfg = RunConfig::new(&src, 1e-3, 1.0, 1.0, stream(3));
        cfg.slot_duration = 1e-7;
        let recs = simulate_run(&src, &noise, &MeasurementBases::default().into(), &cfg).unwrap();
        assert!(!recs.is_empty());
        assert!(recs.iter().all(|r| r.provenance == Provenance::Contaminated));
    }

    #[test]
    fn coarse_slot_rejected() {
        let src = SourceParams::default();
        let noise = NoiseParams {
            bkg_rate_a: 2e7,
            ..Default::default()
        };
        let cfg = RunConfig::new(&src, 1e-3, 0.5, 0.5, stream(0));
        let err = simulate_run(&src, &noise, &MeasurementBases::default().into(), &cfg).unwrap_err();
        assert!(matches!(err, Error::SlotTooCoarse { .. }));
        let mut cfg2 = cfg;
        cfg2.slot_duration = 1e-6;
        assert!(matches!(
            simulate_run(&src, &NoiseParams::noiseless(), &MeasurementBases::default().into(), &cfg2),
            Err(Error::SlotTooCoarse { .. })
        ));
    }

    // Enumerates the 2^5 slot event combinations plus the resolution draws.
    fn brute_force(m: &SlotModel) -> (f64, f64) {
        let mut p_coinc = 0.0;
        let mut p_gen = 0.0;
        for mask in 0..32u32 {
            let bit = |i: u32| mask & (1 << i) != 0;
            let (pair, arm_a, arm_b, na, nb) = (bit(0), bit(1), bit(2), bit(3), bit(4));
            if !pair && (arm_a || arm_b) {
                continue;
            }
            let f = |b: bool, p: f64| if b { p } else { 1.0 - p };
            let mut w = f(pair, m.p_pair) * f(na, m.noise_a) * f(nb, m.noise_b);
            if pair {
                w *= f(arm_a, m.eta_a) * f(arm_b, m.eta_b);
            }
            if (arm_a || na) && (arm_b || nb) {
                p_coinc += w;
                let ga = if !arm_a { 0.0 } else if na { m.resolve_a } else { 1.0 };
                let gb = if !arm_b { 0.0 } else if nb { m.resolve_b } else { 1.0 };
                p_gen += w * ga * gb;
            }
        }
        (p_coinc, p_gen)
    }

    #[test]
    fn closed_form_slot_probabilities() {
        let src = SourceParams::default();
        let noise = NoiseParams {
            bkg_rate_a: 3e5,
            bkg_rate_b: 1e6,
            dark_rate_a: 1e5,
            dark_rate_b: 2e4,
        };
        let m = SlotModel::new(&src, &noise, 0.3, 0.2, 1e-7).unwrap();
        let (pc, pg) = brute_force(&m);
        assert!((pc - m.p_coincidence()).abs() < 1e-15);
        assert!((pg - m.p_genuine()).abs() < 1e-15);
        let half = SlotModel::new(&SourceParams { pair_rate: 5e6, ..src }, &noise, 0.7, 0.9, 1e-7).unwrap();
        let (pc, pg) = brute_force(&half);
        assert!((pc - half.p_coincidence()).abs() < 1e-15);
        assert!((pg - half.p_genuine()).abs() < 1e-15);
    }

    #[test]
    fn genuine_count_matches_binomial_mean() {
        let src = SourceParams::default();
        let noise = NoiseParams::noiseless();
        let (ea, eb) = (0.5, 0.02);
        let runs = 100;
        let mut total = 0u64;
        let mut n_slots = 0;
        for run in 0..runs {
            let cfg = RunConfig::new(&src, 1e-3, ea, eb, stream(run));
            n_slots = cfg.n_slots();
            total += simulate_run_tally(&src, &noise, &MeasurementBases::default().into(), &cfg).unwrap().genuine();
        }
        let p = ea * eb;
        let mean = p * n_slots as f64;
        let se = (n_slots as f64 * p * (1.0 - p) / runs as f64).sqrt();
        let got = total as f64 / runs as f64;
        assert!((got - mean).abs() < 3.0 * se, "{got} vs {mean} ± {se}");
    }

    #[test]
    fn per_slot_and_aggregated_agree_in_distribution() {
        let src = SourceParams::default();
        let noise = NoiseParams {
            bkg_rate_a: 5e5,
            bkg_rate_b: 5e5,
            ..Default::default()
        };
        let plan: RoundPlan = MeasurementBases::default().into();
        let (mut agg, mut slot) = ((0u64, 0u64), (0u64, 0u64));
        for run in 0..40 {
            let mut cfg = RunConfig::new(&src, 2e-4, 0.4, 0.3, stream(run));
            let t = simulate_run_tally(&src, &noise, &plan, &cfg).unwrap();
            agg.0 += t.total();
            agg.1 += t.genuine();
            cfg.sampling = Sampling::PerSlot;
            let t = simulate_run_tally(&src, &noise, &plan, &cfg).unwrap();
            slot.0 += t.total();
            slot.1 += t.genuine();
        }
        let m = SlotModel::new(&src, &noise, 0.4, 0.3, 1e-7).unwrap();
        let n = 40.0 * 2000.0;
        for (got, p) in [(agg.0, m.p_coincidence()), (slot.0, m.p_coincidence()), (agg.1, m.p_genuine()), (slot.1, m.p_genuine())] {
            let se = (n * p * (1.0 - p)).sqrt();
            assert!((got as f64 - n * p).abs() < 4.0 * se, "{got} vs {}", n * p);
        }
    }

    #[test]
    fn tally_index_round_trip() {
        for i in 0..64 {
            let r = RunTally::record_at(i);
            let mut t = RunTally::default();
            t.add(&r);
            assert_eq!(t.counts[i], 1);
        }
    }

    #[test]
    fn swap_examples() {
        let src = SourceParams::default();
        let noise = NoiseParams::noiseless();
        let plan: RoundPlan = MeasurementBases::default().into();
        let c1 = RunConfig::new(&src, 1e-4, 1.0, 0.3, StreamId::new(5, 0, 0, lane::LINK_A));
        let c2 = RunConfig::new(&src, 1e-4, 1.0, 0.2, StreamId::new(5, 0, 0, lane::LINK_B));
        let counts = simulate_swap_counts(&c1, &c2, &src, &noise, &noise, 1.0).unwrap();
        let full = simulate_swap_run(&c1, &c2, &src, &noise, &noise, &plan, 1.0, FailedSwap::Dropped).unwrap();
        assert_eq!(full.len() as u64, counts.stored_1.min(counts.stored_2));
        let none = simulate_swap_run(&c1, &c2, &src, &noise, &noise, &plan, 0.0, FailedSwap::Dropped).unwrap();
        assert!(none.is_empty());
        let unheralded = simulate_swap_run(&c1, &c2, &src, &noise, &noise, &plan, 0.0, FailedSwap::Unheralded).unwrap();
        assert_eq!(unheralded.len(), full.len());
        assert!(unheralded.iter().all(|r| r.provenance == Provenance::Contaminated));

        let l1 = RunConfig::new(&src, 1e-4, 1.0, 1.0, StreamId::new(6, 0, 0, lane::LINK_A));
        let l2 = RunConfig::new(&src, 1e-4, 1.0, 1.0, StreamId::new(6, 0, 0, lane::LINK_B));
        let half = simulate_swap_run(&l1, &l2, &src, &noise, &noise, &plan, 0.5, FailedSwap::Dropped).unwrap();
        let (m, k) = (1000.0, half.len() as f64);
        assert!((k - 0.5 * m).abs() < 3.0 * (m * 0.25f64).sqrt());
        assert!(simulate_swap_run(&l1, &l2, &src, &noise, &noise, &plan, 1.5, FailedSwap::Dropped).is_err());
    }

    #[test]
    fn synthesized_counts() {
        let mut rng = stream(9).rng();
        let plan: RoundPlan = MeasurementBases::default().into();
        let recs = synthesize_records(40, 1.0, &plan, BasisAllocation::Balanced, &mut rng).unwrap();
        assert_eq!(recs.len(), 40);
        for ai in 1..=2 {
            for bi in 1..=2 {
                assert_eq!(recs.iter().filter(|r| r.alice_basis == ai && r.bob_basis == bi).count(), 10);
            }
        }
        assert!(synthesize_records(10, 1.0, &plan, BasisAllocation::Balanced, &mut rng).is_err());
        let none = synthesize_records(50, 0.0, &plan, BasisAllocation::Random, &mut rng).unwrap();
        assert!(none.iter().all(|r| r.provenance == Provenance::Contaminated));
    }

    #[test]
    fn deterministic_for_a_stream() {
        let src = SourceParams::default();
        let noise = NoiseParams {
            bkg_rate_b: 1e4,
            dark_rate_a: 1e3,
            ..Default::default()
        };
        let plan = RoundPlan::with_key(MeasurementBases::default(), MeasurementBases::key(), 0.5);
        let cfg = RunConfig::new(&src, 1e-3, 0.5, 0.05, stream(4));
        let a = simulate_run(&src, &noise, &plan, &cfg).unwrap();
        let b = simulate_run(&src, &noise, &plan, &cfg).unwrap();
        assert_eq!(a, b);
        assert!(a.iter().any(|r| r.kind == RoundKind::Key));
    }
}
