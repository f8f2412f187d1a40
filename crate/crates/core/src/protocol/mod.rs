//! Clan-level coherent-cluster agreement with a tribe-level median fallback.
//!
//! [`NodeRound`] and [`AggregatorRound`] are pure event-driven state machines
//! for one `(round, variable)` instance. They never read clocks or touch the
//! network; the caller feeds them events and routes what they return.

mod aggregator;
mod node;

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::codec::{value_signing_bytes, vprop_signing_bytes, Signable};
use crate::crypto::{SignatureScheme, SimulatedScheme};
use crate::datasource::robust_median;
use crate::error::{ConfigError, CryptoError};
use crate::types::{
    AgreementDistance, CoherentCluster, InstanceKey, NodeId, Phase, Price, ProposalPayload, SimTime, VPropMsg,
    ValueMsg,
};

pub use aggregator::AggregatorRound;
pub use node::{NodePhase, NodeRound, WitnessOutcome};

/// How a round's value was committed.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Via {
    Cluster,
    Fallback,
}

impl From<Phase> for Via {
    fn from(p: Phase) -> Self {
        match p {
            Phase::Clan => Via::Cluster,
            Phase::Fallback => Via::Fallback,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClanConfig {
    pub clan: BTreeSet<NodeId>,
    pub f_c: usize,
    pub aggregators: BTreeSet<NodeId>,
    pub d: AgreementDistance,
    pub t_fallback: SimTime,
    pub t_ds: SimTime,
    pub f_d: usize,
}

impl ClanConfig {
    /// Largest tolerable fault count for a clan of `n_c` nodes.
    pub fn default_f_c(n_c: usize) -> usize {
        n_c.saturating_sub(1) / 2
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TribeConfig {
    pub tribe: BTreeSet<NodeId>,
    pub f_t: usize,
}

impl TribeConfig {
    pub fn default_f_t(n_t: usize) -> usize {
        n_t.saturating_sub(1) / 3
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProtocolConfig {
    pub clan: ClanConfig,
    pub tribe: TribeConfig,
}

impl ProtocolConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        let (c, t) = (&self.clan, &self.tribe);
        if c.clan.len() < 2 * c.f_c + 1 {
            return Err(ConfigError::new(format!(
                "clan of {} cannot tolerate f_c = {}",
                c.clan.len(),
                c.f_c
            )));
        }
        if t.tribe.len() < 3 * t.f_t + 1 {
            return Err(ConfigError::new(format!(
                "tribe of {} cannot tolerate f_t = {}",
                t.tribe.len(),
                t.f_t
            )));
        }
        if !c.clan.is_subset(&t.tribe) {
            return Err(ConfigError::new("clan is not a subset of the tribe"));
        }
        if !c.aggregators.is_subset(&t.tribe) {
            return Err(ConfigError::new("aggregators are not a subset of the tribe"));
        }
        Ok(())
    }

    pub fn cluster_quorum(&self) -> usize {
        self.clan.f_c + 1
    }

    pub fn fallback_quorum(&self) -> usize {
        2 * self.tribe.f_t + 1
    }

    pub fn is_aggregator(&self, n: NodeId) -> bool {
        self.clan.aggregators.contains(&n)
    }

    pub fn in_clan(&self, n: NodeId) -> bool {
        self.clan.clan.contains(&n)
    }

    pub fn in_tribe(&self, n: NodeId) -> bool {
        self.tribe.tribe.contains(&n)
    }

    pub fn smr_rules(&self) -> crate::smr::SmrRules {
        crate::smr::SmrRules {
            clan: self.clan.clan.clone(),
            tribe: self.tribe.tribe.clone(),
            aggregators: self.clan.aggregators.clone(),
            f_c: self.clan.f_c,
            f_t: self.tribe.f_t,
        }
    }
}

/// Configuration and key registry shared by every state machine of a run.
#[derive(Clone)]
pub struct Ctx {
    pub config: Arc<ProtocolConfig>,
    pub scheme: Arc<dyn SignatureScheme>,
}

impl Ctx {
    pub fn new(config: ProtocolConfig, scheme: Arc<dyn SignatureScheme>) -> Self {
        Ctx {
            config: Arc::new(config),
            scheme,
        }
    }

    /// Simulated keys for every tribe member.
    pub fn simulated(config: ProtocolConfig, seed: u64) -> Self {
        let scheme = SimulatedScheme::generate(config.tribe.tribe.iter().copied(), seed);
        Ctx::new(config, Arc::new(scheme))
    }
}

/// Why a proposal failed validation. One code per clause.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Error, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Rejection {
    #[error("proposer is not an aggregator")]
    NotAggregator,
    #[error("proposal signature does not verify")]
    BadAggregatorSignature,
    #[error("payload kind does not match the expected phase")]
    WrongPhase,
    #[error("member belongs to a different round or variable")]
    WrongInstance,
    #[error("member signed by a node outside the eligible set")]
    ForeignSigner,
    #[error("two members from the same sender")]
    DuplicateSender,
    #[error("member signature does not verify")]
    BadMemberSignature,
    #[error("too few members")]
    TooSmall,
    #[error("member values span more than the agreement distance")]
    SpanExceeded,
    #[error("proposed mean differs from the recomputed mean")]
    MeanMismatch,
    #[error("proposed median differs from the recomputed median")]
    MedianMismatch,
}

/// Leftmost qualifying window over values sorted ascending.
///
/// Returns the index range of the maximal run starting at the first index
/// `i` for which at least `quorum` values lie in `[v[i], v[i] + d]`.
pub fn cluster_window(sorted: &[Price], quorum: usize, d: AgreementDistance) -> Option<std::ops::Range<usize>> {
    if quorum == 0 {
        return None;
    }
    let mut j = 0;
    for i in 0..sorted.len() {
        j = j.max(i);
        while j < sorted.len() && sorted[j].distance(sorted[i]) <= d.micros() {
            j += 1;
        }
        if j - i >= quorum {
            return Some(i..j);
        }
    }
    None
}

/// Detects a coherent cluster of at least `f_c + 1` received values.
pub fn find_coherent_cluster(
    obs: &BTreeMap<NodeId, ValueMsg>,
    f_c: usize,
    d: AgreementDistance,
) -> Option<CoherentCluster> {
    let mut msgs: Vec<&ValueMsg> = obs.values().collect();
    msgs.sort_by_key(|m| (m.value, m.sender));
    let values: Vec<Price> = msgs.iter().map(|m| m.value).collect();
    let range = cluster_window(&values, f_c + 1, d)?;
    Some(CoherentCluster::new(msgs[range].iter().map(|m| (*m).clone()).collect()))
}

/// Same rule over bare values, returning the `(sender, value)` members.
pub fn find_cluster_values(
    obs: &BTreeMap<NodeId, Price>,
    quorum: usize,
    d: AgreementDistance,
) -> Option<Vec<(NodeId, Price)>> {
    let mut pairs: Vec<(Price, NodeId)> = obs.iter().map(|(n, v)| (*v, *n)).collect();
    pairs.sort();
    let values: Vec<Price> = pairs.iter().map(|p| p.0).collect();
    let range = cluster_window(&values, quorum, d)?;
    Some(pairs[range].iter().map(|(v, n)| (*n, *v)).collect())
}

/// Integer mean of `values`, rounding halves to even.
pub fn mean_half_even(values: impl IntoIterator<Item = Price>) -> Option<Price> {
    let mut sum: i128 = 0;
    let mut n: i128 = 0;
    for v in values {
        sum += i128::from(v.micros());
        n += 1;
    }
    if n == 0 {
        return None;
    }
    let q = sum.div_euclid(n);
    let twice_r = 2 * sum.rem_euclid(n);
    let q = match twice_r.cmp(&n) {
        std::cmp::Ordering::Less => q,
        std::cmp::Ordering::Greater => q + 1,
        std::cmp::Ordering::Equal => q + (q & 1),
    };
    // the mean of i64 values is itself within i64 range
    Some(Price::from_micros(q as i64))
}

pub fn cluster_mean(cluster: &CoherentCluster) -> Option<Price> {
    mean_half_even(cluster.values())
}

pub fn sign_value(ctx: &Ctx, sender: NodeId, key: InstanceKey, phase: Phase, value: Price) -> Result<ValueMsg, CryptoError> {
    let signature = ctx.scheme.sign(sender, &value_signing_bytes(sender, key, phase, value))?;
    Ok(ValueMsg {
        sender,
        round: key.round,
        variable: key.variable,
        phase,
        value,
        signature,
    })
}

pub fn sign_vprop(
    ctx: &Ctx,
    aggregator: NodeId,
    key: InstanceKey,
    payload: ProposalPayload,
) -> Result<VPropMsg, CryptoError> {
    let signature = ctx.scheme.sign(aggregator, &vprop_signing_bytes(aggregator, key, &payload))?;
    Ok(VPropMsg {
        aggregator,
        round: key.round,
        variable: key.variable,
        payload,
        signature,
    })
}

/// Proposal for `members` with the recomputed mean.
pub fn cluster_proposal(ctx: &Ctx, aggregator: NodeId, key: InstanceKey, members: Vec<ValueMsg>) -> Result<VPropMsg, CryptoError> {
    let cluster = CoherentCluster::new(members);
    let mean = cluster_mean(&cluster).unwrap_or(Price::ZERO);
    sign_vprop(ctx, aggregator, key, ProposalPayload::Cluster { cluster, mean })
}

/// Proposal for `observations` with their lower median.
pub fn fallback_proposal(
    ctx: &Ctx,
    aggregator: NodeId,
    key: InstanceKey,
    observations: Vec<ValueMsg>,
) -> Result<VPropMsg, CryptoError> {
    let values: Vec<Price> = observations.iter().map(|m| m.value).collect();
    let median = robust_median(&values).unwrap_or(Price::ZERO);
    sign_vprop(ctx, aggregator, key, ProposalPayload::fallback(observations, median))
}

fn check_members(
    ctx: &Ctx,
    prop: &VPropMsg,
    phase: Phase,
    eligible: &BTreeSet<NodeId>,
    min_len: usize,
) -> Result<(), Rejection> {
    let cfg = &ctx.config;
    if !cfg.is_aggregator(prop.aggregator) {
        return Err(Rejection::NotAggregator);
    }
    if !ctx.scheme.verify(prop.aggregator, &prop.signing_bytes(), &prop.signature) {
        return Err(Rejection::BadAggregatorSignature);
    }
    if prop.payload.phase() != phase {
        return Err(Rejection::WrongPhase);
    }
    let key = prop.key();
    let mut seen = BTreeSet::new();
    for m in prop.payload.messages() {
        if m.key() != key {
            return Err(Rejection::WrongInstance);
        }
        if m.phase != phase {
            return Err(Rejection::WrongPhase);
        }
        if !eligible.contains(&m.sender) {
            return Err(Rejection::ForeignSigner);
        }
        if !seen.insert(m.sender) {
            return Err(Rejection::DuplicateSender);
        }
        if !ctx.scheme.verify(m.sender, &m.signing_bytes(), &m.signature) {
            return Err(Rejection::BadMemberSignature);
        }
    }
    if seen.len() < min_len {
        return Err(Rejection::TooSmall);
    }
    Ok(())
}

/// Validation of a cluster proposal: aggregator, member signatures from
/// distinct clan nodes, size, span and mean.
pub fn validate_vprop_cc(ctx: &Ctx, prop: &VPropMsg) -> Result<(), Rejection> {
    check_members(ctx, prop, Phase::Clan, &ctx.config.clan.clan, ctx.config.cluster_quorum())?;
    let ProposalPayload::Cluster { cluster, mean } = &prop.payload else {
        return Err(Rejection::WrongPhase);
    };
    if cluster.span() > ctx.config.clan.d.micros() {
        return Err(Rejection::SpanExceeded);
    }
    if cluster_mean(cluster) != Some(*mean) {
        return Err(Rejection::MeanMismatch);
    }
    Ok(())
}

/// Validation of a fallback proposal: aggregator, member signatures from
/// distinct tribe nodes, at least `2f_t+1` of them, and the median.
pub fn validate_vprop_fallback(ctx: &Ctx, prop: &VPropMsg) -> Result<(), Rejection> {
    check_members(ctx, prop, Phase::Fallback, &ctx.config.tribe.tribe, ctx.config.fallback_quorum())?;
    let ProposalPayload::Fallback { observations, median } = &prop.payload else {
        return Err(Rejection::WrongPhase);
    };
    let values: Vec<Price> = observations.iter().map(|m| m.value).collect();
    if robust_median(&values).ok() != Some(*median) {
        return Err(Rejection::MedianMismatch);
    }
    Ok(())
}

pub fn validate_vprop(ctx: &Ctx, prop: &VPropMsg) -> Result<(), Rejection> {
    match prop.payload.phase() {
        Phase::Clan => validate_vprop_cc(ctx, prop),
        Phase::Fallback => validate_vprop_fallback(ctx, prop),
    }
}
