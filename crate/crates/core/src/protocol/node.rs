use std::collections::BTreeSet;

use serde::Serialize;

use super::{sign_value, validate_vprop, Ctx, Via};
use crate::codec::{digest, fallback_digest};
use crate::crypto::{sign_fallback_vote, sign_vote, verify_qc};
use crate::types::{
    Digest, FallbackVote, InstanceKey, NodeId, Phase, Price, SmrTransaction, VPropMsg, ValueMsg, VoteMsg,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(tag = "phase", rename_all = "snake_case")]
pub enum NodePhase {
    Idle,
    AwaitingProposal,
    VotedFallback,
    SwitchedToFallback,
    Concluded { value: Price, via: Via },
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum WitnessOutcome {
    /// Not for this instance, already concluded, or a repeat FTPOST.
    Ignored,
    Concluded { value: Price, via: Via },
    /// First FTPOST: the node should gather fresh data for the fallback.
    SwitchToFallback,
    /// The transaction failed re-validation and was skipped.
    Flagged(String),
}

/// One honest node's view of one instance.
#[derive(Clone, Debug)]
pub struct NodeRound {
    id: NodeId,
    key: InstanceKey,
    clan_value: Option<Price>,
    fallback_value: Option<Price>,
    voted_fallback: bool,
    switched: bool,
    concluded: Option<(Price, Via)>,
    voted: BTreeSet<Digest>,
    flags: Vec<String>,
}

impl NodeRound {
    pub fn new(id: NodeId, key: InstanceKey) -> Self {
        NodeRound {
            id,
            key,
            clan_value: None,
            fallback_value: None,
            voted_fallback: false,
            switched: false,
            concluded: None,
            voted: BTreeSet::new(),
            flags: Vec::new(),
        }
    }

    pub fn id(&self) -> NodeId {
        self.id
    }

    pub fn key(&self) -> InstanceKey {
        self.key
    }

    pub fn phase(&self) -> NodePhase {
        if let Some((value, via)) = self.concluded {
            NodePhase::Concluded { value, via }
        } else if self.switched {
            NodePhase::SwitchedToFallback
        } else if self.voted_fallback {
            NodePhase::VotedFallback
        } else if self.clan_value.is_some() {
            NodePhase::AwaitingProposal
        } else {
            NodePhase::Idle
        }
    }

    pub fn decision(&self) -> Option<(Price, Via)> {
        self.concluded
    }

    pub fn is_concluded(&self) -> bool {
        self.concluded.is_some()
    }

    pub fn has_switched(&self) -> bool {
        self.switched
    }

    /// The median this node submitted for `phase`, if any.
    pub fn submitted(&self, phase: Phase) -> Option<Price> {
        match phase {
            Phase::Clan => self.clan_value,
            Phase::Fallback => self.fallback_value,
        }
    }

    pub fn flags(&self) -> &[String] {
        &self.flags
    }

    /// Signs this node's median for `phase`; `None` once concluded or when
    /// the node has no part in that phase.
    pub fn submit_value(&mut self, ctx: &Ctx, phase: Phase, median: Price) -> Option<ValueMsg> {
        if self.concluded.is_some() {
            return None;
        }
        let slot = match phase {
            Phase::Clan if ctx.config.in_clan(self.id) => &mut self.clan_value,
            Phase::Fallback if self.switched && ctx.config.in_tribe(self.id) => &mut self.fallback_value,
            _ => return None,
        };
        if slot.is_some() {
            return None;
        }
        *slot = Some(median);
        sign_value(ctx, self.id, self.key, phase, median).ok()
    }

    /// Votes for every distinct valid proposal until the round concludes.
    pub fn on_vprop(&mut self, ctx: &Ctx, prop: &VPropMsg) -> Option<VoteMsg> {
        if self.concluded.is_some() || prop.key() != self.key {
            return None;
        }
        let eligible = match prop.payload.phase() {
            Phase::Clan => ctx.config.in_clan(self.id),
            Phase::Fallback => ctx.config.in_tribe(self.id),
        };
        if !eligible {
            return None;
        }
        let d = digest(prop);
        if self.voted.contains(&d) || validate_vprop(ctx, prop).is_err() {
            return None;
        }
        self.voted.insert(d);
        sign_vote(ctx.scheme.as_ref(), self.id, d, self.key).ok()
    }

    /// `T_fallback` expired before the round concluded.
    pub fn on_fallback_timeout(&mut self, ctx: &Ctx) -> Option<FallbackVote> {
        if self.concluded.is_some() || self.voted_fallback || self.switched || !ctx.config.in_clan(self.id) {
            return None;
        }
        self.voted_fallback = true;
        sign_fallback_vote(ctx.scheme.as_ref(), self.id, self.key).ok()
    }

    /// Consumes a transaction delivered by the SMR, in log order.
    pub fn witness(&mut self, ctx: &Ctx, tx: &SmrTransaction) -> WitnessOutcome {
        if tx.key() != self.key || self.concluded.is_some() {
            return WitnessOutcome::Ignored;
        }
        let cfg = &ctx.config;
        match tx {
            SmrTransaction::VPost { proposal, qc } => {
                let (eligible, threshold) = match proposal.payload.phase() {
                    Phase::Clan => (&cfg.clan.clan, cfg.cluster_quorum()),
                    Phase::Fallback => (&cfg.tribe.tribe, cfg.fallback_quorum()),
                };
                if let Err(why) = validate_vprop(ctx, proposal) {
                    return self.flag(format!("VPOST proposal invalid: {why}"));
                }
                if !qc.signers_within(|s| eligible.contains(&s))
                    || !verify_qc(qc, &digest(proposal), threshold, ctx.scheme.as_ref())
                {
                    return self.flag("VPOST certificate invalid".into());
                }
                let value = proposal.payload.proposed_value();
                let via = Via::from(proposal.payload.phase());
                self.concluded = Some((value, via));
                WitnessOutcome::Concluded { value, via }
            }
            SmrTransaction::FtPost { qc, .. } => {
                if !qc.signers_within(|s| cfg.in_clan(s))
                    || !verify_qc(qc, &fallback_digest(self.key), cfg.cluster_quorum(), ctx.scheme.as_ref())
                {
                    return self.flag("FTPOST certificate invalid".into());
                }
                if self.switched {
                    WitnessOutcome::Ignored
                } else {
                    self.switched = true;
                    WitnessOutcome::SwitchToFallback
                }
            }
        }
    }

    fn flag(&mut self, why: String) -> WitnessOutcome {
        self.flags.push(why.clone());
        WitnessOutcome::Flagged(why)
    }
}
