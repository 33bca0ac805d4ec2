//! Closed-form distribution of the CHSH estimator under finite statistics.
//!
//! Each of `n` coincidences contributes `+1` (after multiplying by its CHSH
//! sign) with probability `p1` and `-1` otherwise. With `k` positive and
//! `l = n - k` negative contributions and `n / 4` coincidences per basis pair,
//! the estimator is `S = 4 (k - l) / n`. The number of coincidences per run is
//! Poisson with mean `nbar`; runs with `n = 0` carry no estimate and are left
//! out, so the mixture over `n >= 1` has total mass `1 - exp(-nbar)`.

use std::collections::BTreeMap;
use std::f64::consts::SQRT_2;

use serde::{Deserialize, Serialize};
use statrs::distribution::{Binomial, Discrete, DiscreteCDF, Poisson};

use crate::channel::check_probability;
use crate::error::{Error, Result};

/// Single-parameter outcome law; `p1 + pm1 = 1`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OutcomeModel {
    pub p1: f64,
    pub pm1: f64,
}

impl OutcomeModel {
    pub fn new(p1: f64) -> Result<Self> {
        check_probability("p1", p1)?;
        Ok(OutcomeModel { p1, pm1: 1.0 - p1 })
    }

    /// Mirror image, describing `-S`.
    pub fn flipped(&self) -> Self {
        OutcomeModel {
            p1: self.pm1,
            pm1: self.p1,
        }
    }
}

/// `p1` of the ideal singlet with CHSH-optimal settings, `(2 + sqrt 2) / 4`.
pub fn ideal_p1() -> f64 {
    (2.0 + SQRT_2) / 4.0
}

/// Mixture of a fraction `f` of ideal coincidences with uniformly random ones.
pub fn effective_p1(genuine_fraction: f64) -> Result<f64> {
    check_probability("genuine_fraction", genuine_fraction)?;
    Ok(genuine_fraction * ideal_p1() + (1.0 - genuine_fraction) * 0.5)
}

fn binomial(p1: f64, n: u64) -> Binomial {
    Binomial::new(p1, n).expect("validated binomial parameters")
}

/// Number of `+1` contributions `k` that produce `s`, if `s` is attainable.
pub fn lattice_index(n: u64, s: f64) -> Option<u64> {
    if n == 0 || !s.is_finite() {
        return None;
    }
    let k = n as f64 * (s / 4.0 + 1.0) / 2.0;
    let kr = k.round();
    if (k - kr).abs() > 1e-9 * (1.0 + n as f64) || kr < 0.0 || kr > n as f64 {
        return None;
    }
    Some(kr as u64)
}

pub fn s_value(n: u64, k: u64) -> f64 {
    4.0 * (2.0 * k as f64 - n as f64) / n as f64
}

/// `P(S = s | n)`; zero for values of `s` not on the lattice.
pub fn p_s_given_n(p1: f64, n: u64, s: f64) -> Result<f64> {
    check_probability("p1", p1)?;
    if n == 0 {
        return Err(Error::invalid("n", "needs at least one coincidence"));
    }
    Ok(lattice_index(n, s).map_or(0.0, |k| binomial(p1, n).pmf(k)))
}

/// Whole conditional distribution as `(s, probability)` in increasing `s`.
pub fn distribution_given_n(p1: f64, n: u64) -> Result<Vec<(f64, f64)>> {
    check_probability("p1", p1)?;
    if n == 0 {
        return Err(Error::invalid("n", "needs at least one coincidence"));
    }
    let b = binomial(p1, n);
    Ok((0..=n).map(|k| (s_value(n, k), b.pmf(k))).collect())
}

/// Smallest `n_max` with Poisson tail mass beyond it below `tail`.
pub fn poisson_cutoff(nbar: f64, tail: f64) -> Result<u64> {
    if !(nbar > 0.0 && nbar.is_finite()) {
        return Err(Error::invalid("nbar", "must be finite and > 0"));
    }
    let pois = Poisson::new(nbar).expect("positive mean");
    let mut n = nbar.ceil() as u64;
    while pois.sf(n) >= tail {
        n += 1 + (nbar.sqrt() as u64) / 4;
    }
    while n > 0 && pois.sf(n - 1) < tail {
        n -= 1;
    }
    Ok(n)
}

const DEFAULT_TAIL: f64 = 1e-12;

/// Poisson mixture `sum_{n=1}^{n_max} Poisson(n; nbar) P(s | n)`.
pub fn p_s(p1: f64, nbar: f64, s: f64, n_max: u64) -> Result<f64> {
    check_probability("p1", p1)?;
    if !(nbar > 0.0) {
        return Err(Error::invalid("nbar", "must be > 0"));
    }
    let pois = Poisson::new(nbar).expect("positive mean");
    let mut acc = 0.0;
    for n in 1..=n_max {
        if let Some(k) = lattice_index(n, s) {
            acc += pois.pmf(n) * binomial(p1, n).pmf(k);
        }
    }
    Ok(acc)
}

/// Exact rational key `(2k - n) / n` in lowest terms, so equal `S` values
/// from different `n` merge.
fn reduced(n: u64, k: u64) -> (i64, u64) {
    let num = 2 * k as i64 - n as i64;
    let g = gcd(num.unsigned_abs(), n);
    (num / g as i64, n / g)
}

fn gcd(mut a: u64, mut b: u64) -> u64 {
    while b != 0 {
        (a, b) = (b, a % b);
    }
    a
}

/// Full mixture distribution, merged over `n`, in increasing `s`.
pub fn distribution(p1: f64, nbar: f64, n_max: Option<u64>) -> Result<Vec<(f64, f64)>> {
    check_probability("p1", p1)?;
    let n_max = match n_max {
        Some(n) => n,
        None => poisson_cutoff(nbar, DEFAULT_TAIL)?,
    };
    let pois = Poisson::new(nbar).map_err(|_| Error::invalid("nbar", "must be finite and > 0"))?;
    let mut acc: BTreeMap<(i64, u64), f64> = BTreeMap::new();
    for n in 1..=n_max {
        let w = pois.pmf(n);
        if w == 0.0 {
            continue;
        }
        let b = binomial(p1, n);
        for k in 0..=n {
            *acc.entry(reduced(n, k)).or_default() += w * b.pmf(k);
        }
    }
    let mut out: Vec<(f64, f64)> = acc
        .into_iter()
        .map(|((num, den), p)| (4.0 * num as f64 / den as f64, p))
        .collect();
    out.sort_by(|a, b| a.0.total_cmp(&b.0));
    Ok(out)
}

/// Conditional probability that `|S| > 2` given `n` coincidences.
pub fn p_success_given_n(p1: f64, n: u64) -> Result<f64> {
    check_probability("p1", p1)?;
    if n == 0 {
        return Ok(0.0);
    }
    // |2k/n - 1| > 1/2  <=>  k > 3n/4  or  k < n/4
    let b = binomial(p1, n);
    let upper = b.sf(3 * n / 4);
    let lower_edge = n.div_ceil(4);
    let lower = if lower_edge >= 1 { b.cdf(lower_edge - 1) } else { 0.0 };
    Ok((upper + lower).clamp(0.0, 1.0))
}

/// Probability mass of the mixture with `|S| > 2`.
pub fn p_success(p1: f64, nbar: f64) -> Result<f64> {
    let n_max = poisson_cutoff(nbar, DEFAULT_TAIL)?;
    let pois = Poisson::new(nbar).expect("positive mean");
    let mut acc = 0.0;
    for n in 1..=n_max {
        acc += pois.pmf(n) * p_success_given_n(p1, n)?;
    }
    Ok(acc.min(1.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Moments {
    /// Total probability carried by `n >= 1`.
    pub mass: f64,
    /// Mean of `S` conditional on `n >= 1`.
    pub mean: f64,
    /// Variance of `S` conditional on `n >= 1`.
    pub variance: f64,
}

/// Closed-form moments: the conditional mean is `4 (2 p1 - 1)` for every `n`
/// and the conditional variance is `64 p1 (1 - p1) / n`.
pub fn moments(p1: f64, nbar: f64) -> Result<Moments> {
    check_probability("p1", p1)?;
    let n_max = poisson_cutoff(nbar, DEFAULT_TAIL)?;
    let pois = Poisson::new(nbar).expect("positive mean");
    let mass = -(-nbar).exp_m1();
    let inv_n: f64 = (1..=n_max).map(|n| pois.pmf(n) / n as f64).sum::<f64>() / mass;
    Ok(Moments {
        mass,
        mean: 4.0 * (2.0 * p1 - 1.0),
        variance: 64.0 * p1 * (1.0 - p1) * inv_n,
    })
}

/// `v |Bell><Bell| + (1 - v) I/4`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WernerParams {
    pub visibility: f64,
}

impl WernerParams {
    pub fn from_visibility(v: f64) -> Result<Self> {
        check_probability("visibility", v)?;
        Ok(WernerParams { visibility: v })
    }

    /// Mixing weight `w` of `(1 - w/4) |Bell><Bell| + (w/4) I`, with `I` the
    /// identity on the two-qubit space; positivity requires `w in [0, 4]`.
    pub fn from_mixing(w: f64) -> Result<Self> {
        if !(0.0..=4.0).contains(&w) {
            return Err(Error::invalid("w", "must lie in [0, 4]"));
        }
        Ok(WernerParams {
            visibility: 1.0 - w / 4.0,
        })
    }

    /// A stream whose coincidences are genuine with probability `f` and
    /// otherwise uniformly random behaves as a Werner state with `v = f`.
    pub fn from_genuine_fraction(f: f64) -> Result<Self> {
        Self::from_visibility(f)
    }
}

/// Maximal `|S|` reachable by the Werner state.
pub fn werner_chsh(params: &WernerParams) -> f64 {
    2.0 * SQRT_2 * params.visibility
}
