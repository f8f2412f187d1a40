//! Committee-sampling probabilities and complexity accounting.

use std::collections::BTreeMap;
use std::fmt;

use num_bigint::BigInt;
use num_rational::BigRational;
use num_traits::{One, ToPrimitive, Zero};
use rand::seq::{index, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::codec::{feed_response_bytes, Canonical};
use crate::error::ConfigError;
use crate::netsim::report::MsgKind;
use crate::netsim::RunReport;
use crate::protocol::Via;
use crate::types::{
    DataSourceId, NodeId, Phase, Price, RoundId, Signature, ValueMsg, VariableId,
};

/// An exact probability with its nearest `f64`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Probability {
    pub exact: BigRational,
}

impl Probability {
    fn new(exact: BigRational) -> Self {
        Probability { exact }
    }

    pub fn zero() -> Self {
        Probability::new(BigRational::zero())
    }

    pub fn value(&self) -> f64 {
        self.exact.to_f64().unwrap_or(f64::NAN)
    }

    /// `p/q` in lowest terms.
    pub fn ratio_string(&self) -> String {
        format!("{}/{}", self.exact.numer(), self.exact.denom())
    }
}

impl fmt::Display for Probability {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} ({:.6e})", self.ratio_string(), self.value())
    }
}

pub fn binomial(n: u64, k: u64) -> BigInt {
    if k > n {
        return BigInt::zero();
    }
    let k = k.min(n - k);
    let mut acc = BigInt::one();
    for i in 0..k {
        acc = acc * BigInt::from(n - i) / BigInt::from(i + 1);
    }
    acc
}

fn ratio(num: BigInt, den: BigInt) -> BigRational {
    BigRational::new(num, den)
}

fn check(cond: bool, msg: impl Into<String>) -> Result<(), ConfigError> {
    if cond {
        Ok(())
    } else {
        Err(ConfigError::new(msg))
    }
}

/// Chance that a uniformly drawn family of `n_a` aggregators is entirely
/// corrupt: `C(b, n_a) / C(n_t, n_a)`.
pub fn family_all_byzantine_prob(n_t: u64, b: u64, n_a: u64) -> Result<Probability, ConfigError> {
    check(b <= n_t, "byzantine count exceeds tribe")?;
    check(n_a <= n_t, "family larger than tribe")?;
    Ok(Probability::new(ratio(binomial(b, n_a), binomial(n_t, n_a))))
}

fn hypergeometric(n_t: u64, b: u64, n_c: u64, j: u64) -> BigRational {
    if j > n_c || j > b || n_c - j > n_t - b {
        return BigRational::zero();
    }
    ratio(binomial(b, j) * binomial(n_t - b, n_c - j), binomial(n_t, n_c))
}

/// Chance that a uniformly drawn clan has a corrupt majority.
pub fn clan_majority_fail_prob(n_t: u64, b: u64, n_c: u64) -> Result<Probability, ConfigError> {
    check(b <= n_t, "byzantine count exceeds tribe")?;
    check(n_c >= 1 && n_c <= n_t, "clan size must be in 1..=n_t")?;
    let p = (n_c / 2 + 1..=n_c).map(|j| hypergeometric(n_t, b, n_c, j)).sum();
    Ok(Probability::new(p))
}

/// Chance that at least one of `clans` disjoint clans of size `n_c` has a
/// corrupt majority. Clans are drawn one after another without replacement;
/// the state is the number of corrupted nodes already seated.
pub fn any_clan_fail_prob(n_t: u64, b: u64, n_c: u64, clans: u64) -> Result<Probability, ConfigError> {
    check(b <= n_t, "byzantine count exceeds tribe")?;
    check(n_c >= 1, "clan size must be positive")?;
    check(clans.saturating_mul(n_c) <= n_t, "clans do not fit in the tribe")?;
    let honest_cap = n_c / 2;
    // ok[j]: probability that every clan so far is fine with j corrupted seated
    let mut ok: BTreeMap<u64, BigRational> = BTreeMap::from([(0, BigRational::one())]);
    for i in 0..clans {
        let left = n_t - i * n_c;
        let mut next: BTreeMap<u64, BigRational> = BTreeMap::new();
        for (&j, p) in &ok {
            for k in 0..=honest_cap.min(b - j) {
                let step = hypergeometric(left, b - j, n_c, k);
                if step.is_zero() {
                    continue;
                }
                *next.entry(j + k).or_insert_with(BigRational::zero) += p * step;
            }
        }
        ok = next;
    }
    let survive: BigRational = ok.into_values().sum();
    Ok(Probability::new(BigRational::one() - survive))
}

/// A Monte Carlo estimate with its binomial standard error.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct McEstimate {
    pub estimate: f64,
    pub stderr: f64,
    pub draws: u64,
    pub hits: u64,
}

impl McEstimate {
    fn from_hits(hits: u64, draws: u64) -> Self {
        let p = if draws == 0 { 0.0 } else { hits as f64 / draws as f64 };
        let stderr = if draws == 0 { 0.0 } else { (p * (1.0 - p) / draws as f64).sqrt() };
        McEstimate {
            estimate: p,
            stderr,
            draws,
            hits,
        }
    }

    /// Whether the hit count is consistent with `exact` at `k` standard
    /// deviations. When the binomial variance is large enough for the normal
    /// approximation this is the plain `k`-sigma band; for rare events it
    /// is the exact binomial tail at the same two-sided level, since a
    /// single hit can sit many sigmas out when the expected count is below 1.
    pub fn within(&self, exact: f64, k: f64) -> bool {
        let n = self.draws.max(1) as f64;
        let var = n * exact * (1.0 - exact);
        if var >= 9.0 {
            return (self.estimate - exact).abs() <= k * var.sqrt() / n;
        }
        let alpha = normal_two_sided_tail(k) / 2.0;
        let below = binomial_cdf(self.hits, self.draws, exact);
        let above = if self.hits == 0 { 1.0 } else { 1.0 - binomial_cdf(self.hits - 1, self.draws, exact) };
        below >= alpha && above >= alpha
    }
}

/// `P(X <= x)` for `X ~ Binomial(n, p)`, summed term by term.
fn binomial_cdf(x: u64, n: u64, p: f64) -> f64 {
    if p <= 0.0 {
        return 1.0;
    }
    if p >= 1.0 {
        return if x >= n { 1.0 } else { 0.0 };
    }
    let mut term = (n as f64 * (1.0 - p).ln()).exp();
    let mut sum = term;
    for i in 0..x.min(n) {
        term *= (n - i) as f64 / (i + 1) as f64 * p / (1.0 - p);
        sum += term;
    }
    sum.min(1.0)
}

/// `P(|Z| > k)` for a standard normal, via the complementary error
/// function (Abramowitz-Stegun 7.1.26, absolute error below 1.5e-7).
fn normal_two_sided_tail(k: f64) -> f64 {
    let x = k / std::f64::consts::SQRT_2;
    let t = 1.0 / (1.0 + 0.3275911 * x);
    let poly = t * (0.254829592 + t * (-0.284496736 + t * (1.421413741 + t * (-1.453152027 + t * 1.061405429))));
    poly * (-x * x).exp()
}

/// Node ids `0..b` are the corrupted ones throughout the estimators.
pub fn mc_family_all_byzantine(n_t: u64, b: u64, n_a: u64, draws: u64, seed: u64) -> McEstimate {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let hits = (0..draws)
        .filter(|_| index::sample(&mut rng, n_t as usize, n_a as usize).iter().all(|i| (i as u64) < b))
        .count() as u64;
    McEstimate::from_hits(hits, draws)
}

pub fn mc_clan_majority_fail(n_t: u64, b: u64, n_c: u64, draws: u64, seed: u64) -> McEstimate {
    mc_any_clan_fail(n_t, b, n_c, 1, draws, seed)
}

pub fn mc_any_clan_fail(n_t: u64, b: u64, n_c: u64, clans: u64, draws: u64, seed: u64) -> McEstimate {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let seated = (n_c * clans) as usize;
    let mut hits = 0;
    let mut ids: Vec<u64> = (0..n_t).collect();
    for _ in 0..draws {
        let (picked, _) = ids.partial_shuffle(&mut rng, seated);
        let bad = picked
            .chunks(n_c as usize)
            .any(|c| c.iter().filter(|&&i| i < b).count() as u64 > n_c / 2);
        hits += u64::from(bad);
    }
    McEstimate::from_hits(hits, draws)
}

/// Sizes that parameterise message and bit counts.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct ComplexityParams {
    /// Upper bound on a feed response, an unsigned VALUE, or a hash, in bytes.
    pub k: u64,
    /// Signature length in bytes.
    pub lambda: u64,
    pub n_c: u64,
    pub n_a: u64,
    pub n_t: u64,
    pub f_d: u64,
    pub n_tau: u64,
}

impl ComplexityParams {
    /// `k` and `lambda` measured from this crate's wire encoding.
    pub fn measured(n_c: u64, n_a: u64, n_t: u64, f_d: u64, n_tau: u64) -> Self {
        let (k, lambda) = wire_sizes();
        ComplexityParams {
            k,
            lambda,
            n_c,
            n_a,
            n_t,
            f_d,
            n_tau,
        }
    }

    /// `(k + lambda) * n_c^2 * n_a * n_tau`.
    pub fn bit_unit(&self) -> u64 {
        (self.k + self.lambda) * self.n_c * self.n_c * self.n_a * self.n_tau.max(1)
    }
}

/// `(k, lambda)` for the canonical encoding: `k` is the largest of a feed
/// response, an unsigned VALUE and a digest.
pub fn wire_sizes() -> (u64, u64) {
    let lambda = Signature([0; 32]).0.len() as u64;
    let value = ValueMsg {
        sender: NodeId(0),
        round: RoundId(0),
        variable: VariableId(0),
        phase: Phase::Clan,
        value: Price::ZERO,
        signature: Signature([0; 32]),
    };
    let unsigned = value.encoded_len() as u64 - lambda;
    let feed = feed_response_bytes(DataSourceId(0), VariableId(0), Price::ZERO).len() as u64;
    (unsigned.max(feed).max(32), lambda)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum Path {
    Cc,
    Fallback,
}

/// Messages per instance. The clan path is exact:
/// `(2f_d+1) n_c + 3 n_c n_a + n_a`. The fallback figure is an itemised
/// upper bound: the same terms at tribe scale plus the trigger traffic
/// (`n_c n_a` fallback votes and `n_a` FTPOSTs).
pub fn expected_message_count(p: &ComplexityParams, path: Path) -> u64 {
    let feed = 2 * p.f_d + 1;
    let tau = p.n_tau.max(1);
    let per = match path {
        Path::Cc => feed * p.n_c + 3 * p.n_c * p.n_a + p.n_a,
        Path::Fallback => feed * p.n_t + 3 * p.n_t * p.n_a + p.n_a + p.n_c * p.n_a + p.n_a,
    };
    per * tau
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BitComplexity {
    pub clan_bytes: BTreeMap<MsgKind, u64>,
    pub fallback_bytes: BTreeMap<MsgKind, u64>,
    pub total: u64,
    /// `(k + lambda) n_c^2 n_a` summed over instances.
    pub unit: u64,
    /// `total / unit`.
    pub constant: f64,
}

pub fn measured_bit_complexity(run: &RunReport, params: &ComplexityParams) -> BitComplexity {
    let bytes = |m: &BTreeMap<MsgKind, crate::netsim::report::KindCount>| {
        m.iter().map(|(k, c)| (*k, c.bytes)).collect::<BTreeMap<_, _>>()
    };
    let instances = run.decisions.len() as u64;
    let unit = ComplexityParams {
        n_tau: instances,
        ..*params
    }
    .bit_unit();
    let total = run.counters.total_bytes();
    BitComplexity {
        clan_bytes: bytes(&run.counters.clan),
        fallback_bytes: bytes(&run.counters.fallback),
        total,
        unit: if instances == 0 { 0 } else { unit },
        constant: if instances == 0 || unit == 0 { 0.0 } else { total as f64 / unit as f64 },
    }
}

/// One instance's error against the honest-only ideal.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct DeviationRow {
    pub round: RoundId,
    pub variable: VariableId,
    pub via: Option<Via>,
    pub s: Option<Price>,
    pub ideal: Option<Price>,
    pub error: Option<u64>,
    pub honest_min: Option<Price>,
    pub honest_max: Option<Price>,
    pub widened_min: Option<Price>,
    pub widened_max: Option<Price>,
    /// `error > (H_max - H_min)`: the adversary pushed past the honest spread.
    pub exceeds_spread: bool,
    /// `error > (H_max - H_min) + d`.
    pub bound_violated: bool,
    /// Outside `[H_min - d, H_max + d]`.
    pub widened_violated: bool,
    /// A fallback result outside `[H_min, H_max]`.
    pub fallback_violated: bool,
}

pub fn deviation_report(run: &RunReport, d: u64) -> Vec<DeviationRow> {
    let dd = i64::try_from(d).unwrap_or(i64::MAX);
    run.decisions
        .iter()
        .map(|x| {
            let spread = x.honest_min.zip(x.honest_max).map(|(lo, hi)| hi.distance(lo));
            let widened_min = x.honest_min.map(|p| p.saturating_offset(-dd));
            let widened_max = x.honest_max.map(|p| p.saturating_offset(dd));
            let outside = |lo: Option<Price>, hi: Option<Price>| match (x.s, lo, hi) {
                (Some(s), Some(lo), Some(hi)) => s < lo || s > hi,
                _ => false,
            };
            DeviationRow {
                round: x.round,
                variable: x.variable,
                via: x.via,
                s: x.s,
                ideal: x.ideal,
                error: x.error,
                honest_min: x.honest_min,
                honest_max: x.honest_max,
                widened_min,
                widened_max,
                exceeds_spread: matches!((x.error, spread), (Some(e), Some(sp)) if e > sp),
                bound_violated: matches!((x.error, spread), (Some(e), Some(sp)) if e > sp.saturating_add(d)),
                widened_violated: outside(widened_min, widened_max),
                fallback_violated: x.via == Some(Via::Fallback) && outside(x.honest_min, x.honest_max),
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn exact(p: &Probability, num: i64, den: i64) -> bool {
        p.exact == BigRational::new(num.into(), den.into())
    }

    #[test]
    fn family_examples() {
        assert!(exact(&family_all_byzantine_prob(100, 33, 1).unwrap(), 33, 100));
        assert!(exact(&family_all_byzantine_prob(100, 33, 2).unwrap(), 1056, 9900));
        assert!(family_all_byzantine_prob(100, 33, 34).unwrap().exact.is_zero());
        assert!(family_all_byzantine_prob(10, 11, 1).is_err());
    }

    #[test]
    fn clan_examples() {
        assert!(clan_majority_fail_prob(4, 1, 3).unwrap().exact.is_zero());
        assert!(exact(&clan_majority_fail_prob(10, 3, 3).unwrap(), 22, 120));
    }

    #[test]
    fn one_clan_reduces_to_single_clan_tail() {
        for (n_t, b, n_c) in [(10, 3, 3), (30, 9, 7), (50, 20, 5)] {
            assert_eq!(
                any_clan_fail_prob(n_t, b, n_c, 1).unwrap(),
                clan_majority_fail_prob(n_t, b, n_c).unwrap()
            );
        }
        assert!(any_clan_fail_prob(5, 0, 1, 5).unwrap().exact.is_zero());
        assert!(any_clan_fail_prob(9, 3, 2, 5).is_err());
    }

    #[test]
    fn any_clan_matches_enumeration() {
        // every arrangement of 3 corrupted among 8 seats in two clans of 3 plus 2 spare
        let (n_t, b, n_c, clans) = (8u64, 3u64, 3u64, 2u64);
        let mut bad = 0u64;
        let mut total = 0u64;
        for mask in 0u32..(1 << n_t) {
            if u64::from(mask.count_ones()) != b {
                continue;
            }
            total += 1;
            let fails = (0..clans).any(|c| {
                let seats = (c * n_c..(c + 1) * n_c).filter(|i| mask & (1 << i) != 0).count() as u64;
                seats > n_c / 2
            });
            bad += u64::from(fails);
        }
        let p = any_clan_fail_prob(n_t, b, n_c, clans).unwrap();
        assert_eq!(p.exact, BigRational::new(bad.into(), total.into()));
    }

    #[test]
    fn message_count_examples() {
        let p = |n_c, n_a| ComplexityParams {
            k: 1,
            lambda: 1,
            n_c,
            n_a,
            n_t: 10,
            f_d: 1,
            n_tau: 1,
        };
        assert_eq!(expected_message_count(&p(5, 3), Path::Cc), 63);
        assert_eq!(expected_message_count(&p(5, 0), Path::Cc), 15);
    }

    #[test]
    fn wire_sizes_are_positive() {
        let (k, lambda) = wire_sizes();
        assert_eq!(lambda, 32);
        assert!(k >= 32);
    }

    #[test]
    fn rare_event_tails() {
        assert!((normal_two_sided_tail(3.0) - 0.0027).abs() < 1e-4);
        let one_hit = McEstimate::from_hits(1, 1_000_000);
        assert!(one_hit.within(8e-8, 3.0));
        assert!(!McEstimate::from_hits(5, 1_000_000).within(8e-8, 3.0));
        assert!(!McEstimate::from_hits(0, 1_000_000).within(1e-5, 3.0));
    }

    #[test]
    fn mc_tracks_exact() {
        let e = mc_clan_majority_fail(10, 3, 3, 20_000, 1);
        assert!(e.within(22.0 / 120.0, 4.0), "{e:?}");
        let f = mc_family_all_byzantine(100, 33, 2, 20_000, 2);
        assert!(f.within(1056.0 / 9900.0, 4.0), "{f:?}");
    }
}
