//! Byzantine node and aggregator behaviour.
//!
//! The adversary is static and rushing: it picks corrupted values only once
//! every honest value of the phase is fixed, and it may sign for any node it
//! corrupted.

use std::collections::{BTreeMap, BTreeSet};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::codec::digest;
use crate::crypto::{assemble_qc, QuorumVote};
use crate::protocol::{cluster_proposal, fallback_proposal, sign_value, AggregatorRound, Ctx};
use crate::types::{
    Digest, FallbackVote, InstanceKey, NodeId, Phase, Price, SmrTransaction, VPropMsg, ValueMsg, VoteMsg,
};

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ByzantineStrategy {
    /// Sends nothing.
    #[default]
    Silent,
    /// Reports truth plus uniform noise on `[-half_width, half_width]`.
    RandomValue { half_width: u64 },
    /// Reports `H_max + offset` (or `H_min + offset` for negative offsets).
    ExtremeValue { offset: i64 },
    /// Reports `H_max + d`; as aggregator, proposes a cluster of the largest
    /// honest value padded with corrupted values `d` above it.
    ClusterPoison,
    /// Reports `H_max + d` to some aggregators and `H_min - d` to others; as
    /// aggregator, proposes both a high and a low poisoned cluster.
    Equivocate,
    /// Honest node; as aggregator, gathers certificates but never posts.
    WithholdPost,
    /// Votes for fallback at round start; as aggregator, never proposes a
    /// cluster and posts FTPOST as soon as it holds a quorum.
    StallFallback,
}

impl ByzantineStrategy {
    pub fn name(&self) -> &'static str {
        match self {
            ByzantineStrategy::Silent => "silent",
            ByzantineStrategy::RandomValue { .. } => "random_value",
            ByzantineStrategy::ExtremeValue { .. } => "extreme_value",
            ByzantineStrategy::ClusterPoison => "cluster_poison",
            ByzantineStrategy::Equivocate => "equivocate",
            ByzantineStrategy::WithholdPost => "withhold_post",
            ByzantineStrategy::StallFallback => "stall_fallback",
        }
    }

    /// One instance of each strategy, for exhaustive test sweeps.
    pub fn catalog(d: u64) -> Vec<ByzantineStrategy> {
        vec![
            ByzantineStrategy::Silent,
            ByzantineStrategy::RandomValue { half_width: 4 * d.max(1) },
            ByzantineStrategy::ExtremeValue {
                offset: 1_000_000_000,
            },
            ByzantineStrategy::ExtremeValue {
                offset: -(d as i64),
            },
            ByzantineStrategy::ClusterPoison,
            ByzantineStrategy::Equivocate,
            ByzantineStrategy::WithholdPost,
            ByzantineStrategy::StallFallback,
        ]
    }

    pub fn votes(&self) -> bool {
        !matches!(self, ByzantineStrategy::Silent)
    }
}

/// Honest values of one phase, as seen by the rushing adversary.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct HonestView {
    pub count: usize,
    pub min: Price,
    pub max: Price,
    pub truth: Price,
}

/// The VALUE a corrupted node reports to the `agg_index`-th aggregator.
pub fn byzantine_value(
    strategy: &ByzantineStrategy,
    view: &HonestView,
    d: u64,
    agg_index: usize,
    rng: &mut impl Rng,
) -> Option<Price> {
    let d = i64::try_from(d).unwrap_or(i64::MAX);
    Some(match strategy {
        ByzantineStrategy::Silent => return None,
        ByzantineStrategy::RandomValue { half_width } => {
            let w = i64::try_from(*half_width).unwrap_or(i64::MAX);
            view.truth.saturating_offset(if w == 0 { 0 } else { rng.gen_range(-w..=w) })
        }
        ByzantineStrategy::ExtremeValue { offset } if *offset >= 0 => view.max.saturating_offset(*offset),
        ByzantineStrategy::ExtremeValue { offset } => view.min.saturating_offset(*offset),
        ByzantineStrategy::ClusterPoison => view.max.saturating_offset(d),
        ByzantineStrategy::Equivocate if agg_index % 2 == 0 => view.max.saturating_offset(d),
        ByzantineStrategy::Equivocate => view.min.saturating_offset(-d),
        ByzantineStrategy::WithholdPost | ByzantineStrategy::StallFallback => view.truth,
    })
}

/// What an aggregator asks the network to do.
#[derive(Clone, Debug)]
pub enum AggOut {
    Propose(VPropMsg),
    Post(SmrTransaction),
}

#[derive(Clone, Debug)]
struct VoteBox {
    proposal: VPropMsg,
    votes: BTreeMap<NodeId, VoteMsg>,
    posted: bool,
}

/// A corrupted aggregator for one instance.
pub struct ByzAggregator {
    strategy: ByzantineStrategy,
    inner: AggregatorRound,
    key: InstanceKey,
    id: NodeId,
    corrupted: BTreeSet<NodeId>,
    honest_clan: BTreeMap<NodeId, ValueMsg>,
    honest_fallback: BTreeMap<NodeId, ValueMsg>,
    rush: BTreeMap<Phase, HonestView>,
    crafted: BTreeSet<Phase>,
    boxes: BTreeMap<Digest, VoteBox>,
}

impl ByzAggregator {
    pub fn new(ctx: &Ctx, id: NodeId, key: InstanceKey, strategy: ByzantineStrategy, corrupted: BTreeSet<NodeId>) -> Self {
        let mut inner = AggregatorRound::new(id, key);
        if strategy == ByzantineStrategy::StallFallback {
            // does not wait for its own timer
            inner.on_timer(ctx);
        }
        ByzAggregator {
            strategy,
            inner,
            key,
            id,
            corrupted,
            honest_clan: BTreeMap::new(),
            honest_fallback: BTreeMap::new(),
            rush: BTreeMap::new(),
            crafted: BTreeSet::new(),
            boxes: BTreeMap::new(),
        }
    }

    fn crafts(&self, phase: Phase) -> bool {
        match (&self.strategy, phase) {
            (ByzantineStrategy::ClusterPoison, _) => true,
            (ByzantineStrategy::Equivocate, Phase::Clan) => true,
            _ => false,
        }
    }

    fn filter(&self, out: Option<AggOut>) -> Option<AggOut> {
        match (out, &self.strategy) {
            (_, ByzantineStrategy::Silent) => None,
            (Some(AggOut::Post(_)), ByzantineStrategy::WithholdPost) => None,
            (o, _) => o,
        }
    }

    pub fn on_value(&mut self, ctx: &Ctx, msg: &ValueMsg) -> Vec<AggOut> {
        if self.strategy == ByzantineStrategy::Silent || msg.key() != self.key {
            return Vec::new();
        }
        let honest = !self.corrupted.contains(&msg.sender);
        if honest {
            let store = match msg.phase {
                Phase::Clan => &mut self.honest_clan,
                Phase::Fallback => &mut self.honest_fallback,
            };
            store.entry(msg.sender).or_insert_with(|| msg.clone());
        }
        let skip_inner = self.crafts(msg.phase)
            || (msg.phase == Phase::Clan && self.strategy == ByzantineStrategy::StallFallback);
        let mut out = Vec::new();
        if !skip_inner {
            let o = self.inner.on_value(ctx, msg).map(AggOut::Propose);
            out.extend(self.filter(o));
        }
        out.extend(self.try_craft(ctx, msg.phase));
        out
    }

    /// Every honest value of `phase` is now fixed.
    pub fn on_rush(&mut self, ctx: &Ctx, phase: Phase, view: HonestView) -> Vec<AggOut> {
        if self.strategy == ByzantineStrategy::Silent {
            return Vec::new();
        }
        self.rush.insert(phase, view);
        self.try_craft(ctx, phase)
    }

    fn try_craft(&mut self, ctx: &Ctx, phase: Phase) -> Vec<AggOut> {
        if !self.crafts(phase) || self.crafted.contains(&phase) {
            return Vec::new();
        }
        let Some(view) = self.rush.get(&phase).copied() else {
            return Vec::new();
        };
        let received = match phase {
            Phase::Clan => &self.honest_clan,
            Phase::Fallback => &self.honest_fallback,
        };
        // wait for every honest value so the most damaging one is known
        if received.len() < view.count || received.is_empty() {
            return Vec::new();
        }
        let props = match phase {
            Phase::Clan => self.craft_clusters(ctx),
            Phase::Fallback => self.craft_fallback(ctx),
        };
        if props.is_empty() {
            return Vec::new();
        }
        self.crafted.insert(phase);
        props
            .into_iter()
            .map(|p| {
                self.boxes.insert(
                    digest(&p),
                    VoteBox {
                        proposal: p.clone(),
                        votes: BTreeMap::new(),
                        posted: false,
                    },
                );
                AggOut::Propose(p)
            })
            .collect()
    }

    fn forge(&self, ctx: &Ctx, eligible: impl Fn(NodeId) -> bool, phase: Phase, value: Price, n: usize) -> Vec<ValueMsg> {
        self.corrupted
            .iter()
            .copied()
            .filter(|c| eligible(*c))
            .take(n)
            .filter_map(|c| sign_value(ctx, c, self.key, phase, value).ok())
            .collect()
    }

    fn craft_clusters(&self, ctx: &Ctx) -> Vec<VPropMsg> {
        let cfg = &ctx.config;
        let d = cfg.clan.d.as_offset();
        let quorum = cfg.cluster_quorum();
        let mut honest: Vec<&ValueMsg> = self.honest_clan.values().collect();
        honest.sort_by_key(|m| (m.value, m.sender));
        let mut props = Vec::new();

        let mut make = |anchor: Price, poison: Price, lo: Price, hi: Price| {
            let mut members: Vec<ValueMsg> = honest
                .iter()
                .filter(|m| lo <= m.value && m.value <= hi)
                .map(|m| (*m).clone())
                .collect();
            let need = quorum.saturating_sub(members.len()).max(1);
            members.extend(self.forge(ctx, |n| cfg.in_clan(n), Phase::Clan, poison, need.max(cfg.clan.f_c)));
            if members.len() >= quorum && members.iter().any(|m| m.value == anchor) {
                if let Ok(p) = cluster_proposal(ctx, self.id, self.key, members) {
                    props.push(p);
                }
            }
        };

        let hmax = honest.last().map(|m| m.value);
        let hmin = honest.first().map(|m| m.value);
        if let Some(hmax) = hmax {
            let poison = hmax.saturating_offset(d);
            make(hmax, poison, hmax, poison);
        }
        if self.strategy == ByzantineStrategy::Equivocate {
            if let Some(hmin) = hmin {
                let poison = hmin.saturating_offset(-d);
                make(hmin, poison, poison, hmin);
            }
        }
        props
    }

    /// A valid fallback proposal biased upwards: every corrupted value plus
    /// the largest honest values.
    fn craft_fallback(&self, ctx: &Ctx) -> Vec<VPropMsg> {
        let cfg = &ctx.config;
        let quorum = cfg.fallback_quorum();
        let mut honest: Vec<&ValueMsg> = self.honest_fallback.values().collect();
        honest.sort_by_key(|m| (std::cmp::Reverse(m.value), m.sender));
        let Some(top) = honest.first().map(|m| m.value) else {
            return Vec::new();
        };
        let poison = top.saturating_offset(cfg.clan.d.as_offset());
        let mut members = self.forge(ctx, |n| cfg.in_tribe(n), Phase::Fallback, poison, cfg.tribe.f_t);
        let fill = quorum.saturating_sub(members.len());
        members.extend(honest.into_iter().take(fill).cloned());
        if members.len() < quorum {
            return Vec::new();
        }
        fallback_proposal(ctx, self.id, self.key, members).into_iter().collect()
    }

    pub fn on_vote(&mut self, ctx: &Ctx, vote: &VoteMsg) -> Vec<AggOut> {
        if self.strategy == ByzantineStrategy::Silent || vote.instance() != self.key {
            return Vec::new();
        }
        if let Some(b) = self.boxes.get_mut(&vote.digest) {
            let phase = b.proposal.payload.phase();
            let cfg = &ctx.config;
            let (eligible, threshold) = match phase {
                Phase::Clan => (cfg.in_clan(vote.voter), cfg.cluster_quorum()),
                Phase::Fallback => (cfg.in_tribe(vote.voter), cfg.fallback_quorum()),
            };
            if !eligible || b.posted {
                return Vec::new();
            }
            b.votes.entry(vote.voter).or_insert_with(|| vote.clone());
            if b.votes.len() < threshold {
                return Vec::new();
            }
            let votes: Vec<VoteMsg> = b.votes.values().cloned().collect();
            let Ok(qc) = assemble_qc(&votes, threshold, ctx.scheme.as_ref()) else {
                return Vec::new();
            };
            b.posted = true;
            let tx = SmrTransaction::VPost {
                proposal: b.proposal.clone(),
                qc,
            };
            return self.filter(Some(AggOut::Post(tx))).into_iter().collect();
        }
        let out = self.inner.on_vote(ctx, vote).map(AggOut::Post);
        self.filter(out).into_iter().collect()
    }

    pub fn on_fallback_vote(&mut self, ctx: &Ctx, vote: &FallbackVote) -> Vec<AggOut> {
        let out = self.inner.on_fallback_vote(ctx, vote).map(AggOut::Post);
        self.filter(out).into_iter().collect()
    }

    pub fn on_timer(&mut self, ctx: &Ctx) -> Vec<AggOut> {
        let out = self.inner.on_timer(ctx).map(AggOut::Post);
        self.filter(out).into_iter().collect()
    }
}
