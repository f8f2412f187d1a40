use std::collections::BTreeMap;

use super::{cluster_proposal, fallback_proposal, find_coherent_cluster, Ctx};
use crate::codec::{digest, Signable};
use crate::crypto::{assemble_qc, QuorumVote};
use crate::types::{Digest, FallbackVote, InstanceKey, NodeId, Phase, SmrTransaction, VPropMsg, ValueMsg, VoteMsg};

#[derive(Clone, Debug)]
struct Outstanding {
    proposal: VPropMsg,
    digest: Digest,
    votes: BTreeMap<NodeId, VoteMsg>,
    posted: bool,
}

/// One honest aggregator's view of one instance.
#[derive(Clone, Debug)]
pub struct AggregatorRound {
    id: NodeId,
    key: InstanceKey,
    clan_obs: BTreeMap<NodeId, ValueMsg>,
    /// Fallback values in arrival order, one per sender.
    fallback_obs: Vec<ValueMsg>,
    cluster: Option<Outstanding>,
    fallback: Option<Outstanding>,
    fallback_votes: BTreeMap<NodeId, FallbackVote>,
    timer_expired: bool,
    ft_posted: bool,
    done: bool,
}

impl AggregatorRound {
    pub fn new(id: NodeId, key: InstanceKey) -> Self {
        AggregatorRound {
            id,
            key,
            clan_obs: BTreeMap::new(),
            fallback_obs: Vec::new(),
            cluster: None,
            fallback: None,
            fallback_votes: BTreeMap::new(),
            timer_expired: false,
            ft_posted: false,
            done: false,
        }
    }

    pub fn id(&self) -> NodeId {
        self.id
    }

    /// Proposals this aggregator has made, cluster first.
    pub fn proposals(&self) -> impl Iterator<Item = &VPropMsg> {
        self.cluster.iter().chain(self.fallback.iter()).map(|o| &o.proposal)
    }

    /// Records a VALUE; returns a proposal the first time one can be made
    /// for its phase.
    pub fn on_value(&mut self, ctx: &Ctx, msg: &ValueMsg) -> Option<VPropMsg> {
        if self.done || msg.key() != self.key {
            return None;
        }
        let cfg = &ctx.config;
        let eligible = match msg.phase {
            Phase::Clan => cfg.in_clan(msg.sender),
            Phase::Fallback => cfg.in_tribe(msg.sender),
        };
        if !eligible || !ctx.scheme.verify(msg.sender, &msg.signing_bytes(), &msg.signature) {
            return None;
        }
        match msg.phase {
            Phase::Clan => {
                if self.clan_obs.contains_key(&msg.sender) {
                    return None;
                }
                self.clan_obs.insert(msg.sender, msg.clone());
                if self.cluster.is_some() {
                    return None;
                }
                let cc = find_coherent_cluster(&self.clan_obs, cfg.clan.f_c, cfg.clan.d)?;
                let prop = cluster_proposal(ctx, self.id, self.key, cc.members().to_vec()).ok()?;
                Some(self.record(Phase::Clan, prop))
            }
            Phase::Fallback => {
                if self.fallback.is_some() || self.fallback_obs.iter().any(|m| m.sender == msg.sender) {
                    return None;
                }
                self.fallback_obs.push(msg.clone());
                if self.fallback_obs.len() < cfg.fallback_quorum() {
                    return None;
                }
                let prop = fallback_proposal(ctx, self.id, self.key, self.fallback_obs.clone()).ok()?;
                Some(self.record(Phase::Fallback, prop))
            }
        }
    }

    fn record(&mut self, phase: Phase, proposal: VPropMsg) -> VPropMsg {
        let out = Outstanding {
            digest: digest(&proposal),
            proposal: proposal.clone(),
            votes: BTreeMap::new(),
            posted: false,
        };
        match phase {
            Phase::Clan => self.cluster = Some(out),
            Phase::Fallback => self.fallback = Some(out),
        }
        proposal
    }

    /// Collects a vote for one of this aggregator's proposals; returns the
    /// VPOST once a quorum forms.
    pub fn on_vote(&mut self, ctx: &Ctx, vote: &VoteMsg) -> Option<SmrTransaction> {
        if self.done || vote.instance() != self.key {
            return None;
        }
        let cfg = &ctx.config;
        let (slot, eligible, threshold) = match (&self.cluster, &self.fallback) {
            (Some(c), _) if c.digest == vote.digest => (&mut self.cluster, cfg.in_clan(vote.voter), cfg.cluster_quorum()),
            (_, Some(f)) if f.digest == vote.digest => {
                (&mut self.fallback, cfg.in_tribe(vote.voter), cfg.fallback_quorum())
            }
            _ => return None,
        };
        let out = slot.as_mut()?;
        if !eligible || out.posted || out.votes.contains_key(&vote.voter) {
            return None;
        }
        out.votes.insert(vote.voter, vote.clone());
        if out.votes.len() < threshold {
            return None;
        }
        let votes: Vec<VoteMsg> = out.votes.values().cloned().collect();
        // invalid signatures are dropped here, so keep waiting if too few remain
        let qc = assemble_qc(&votes, threshold, ctx.scheme.as_ref()).ok()?;
        out.posted = true;
        Some(SmrTransaction::VPost {
            proposal: out.proposal.clone(),
            qc,
        })
    }

    pub fn on_fallback_vote(&mut self, ctx: &Ctx, vote: &FallbackVote) -> Option<SmrTransaction> {
        if self.done || vote.key() != self.key || !ctx.config.in_clan(vote.voter) {
            return None;
        }
        self.fallback_votes.entry(vote.voter).or_insert_with(|| vote.clone());
        self.try_ftpost(ctx)
    }

    /// This aggregator's own `T_fallback` expired.
    pub fn on_timer(&mut self, ctx: &Ctx) -> Option<SmrTransaction> {
        self.timer_expired = true;
        self.try_ftpost(ctx)
    }

    fn try_ftpost(&mut self, ctx: &Ctx) -> Option<SmrTransaction> {
        let threshold = ctx.config.cluster_quorum();
        if self.done || self.ft_posted || !self.timer_expired || self.fallback_votes.len() < threshold {
            return None;
        }
        let votes: Vec<FallbackVote> = self.fallback_votes.values().cloned().collect();
        let qc = assemble_qc(&votes, threshold, ctx.scheme.as_ref()).ok()?;
        self.ft_posted = true;
        Some(SmrTransaction::FtPost {
            round: self.key.round,
            variable: self.key.variable,
            qc,
        })
    }

    /// Observes the log: a VPOST ends the instance, an FTPOST makes a
    /// second FTPOST pointless.
    pub fn on_witness(&mut self, tx: &SmrTransaction) {
        if tx.key() != self.key {
            return;
        }
        match tx {
            SmrTransaction::VPost { .. } => self.done = true,
            SmrTransaction::FtPost { .. } => self.ft_posted = true,
        }
    }

    pub fn is_done(&self) -> bool {
        self.done
    }
}
