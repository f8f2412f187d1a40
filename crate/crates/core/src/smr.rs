//! Simulated state machine replication: one totally ordered log, observed by
//! every node through its own asynchronous delivery cursor.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use serde::Serialize;
use thiserror::Error;

use crate::codec::{digest, fallback_digest, Signable};
use crate::crypto::{verify_qc, SignatureScheme};
use crate::types::{Digest, NodeId, Phase, SimTime, SmrTransaction};

/// Membership and thresholds the log checks certificates against.
#[derive(Clone, Debug)]
pub struct SmrRules {
    pub clan: BTreeSet<NodeId>,
    pub tribe: BTreeSet<NodeId>,
    pub aggregators: BTreeSet<NodeId>,
    pub f_c: usize,
    pub f_t: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Error, Serialize)]
pub enum SmrReject {
    #[error("proposer {0} is not an aggregator")]
    NotAggregator(NodeId),
    #[error("proposal signature does not verify")]
    BadProposalSignature,
    #[error("certificate digest does not match the certified statement")]
    DigestMismatch,
    #[error("certificate signer outside the eligible set")]
    ForeignSigner,
    #[error("certificate fails verification at threshold {0}")]
    InvalidQc(usize),
}

#[derive(Clone, Debug, Serialize)]
pub struct SmrEntry {
    pub seq: u64,
    pub tx: SmrTransaction,
    pub posted_at: SimTime,
    pub poster: NodeId,
    pub digest: Digest,
}

#[derive(Clone, Debug, Default)]
struct Cursor {
    next: usize,
    /// Due time per entry, nondecreasing so delivery stays in log order.
    due: Vec<SimTime>,
}

pub struct SmrLog {
    rules: SmrRules,
    scheme: Arc<dyn SignatureScheme>,
    entries: Vec<SmrEntry>,
    cursors: BTreeMap<NodeId, Cursor>,
}

impl SmrLog {
    pub fn new(rules: SmrRules, scheme: Arc<dyn SignatureScheme>, observers: impl IntoIterator<Item = NodeId>) -> Self {
        SmrLog {
            rules,
            scheme,
            entries: Vec::new(),
            cursors: observers.into_iter().map(|n| (n, Cursor::default())).collect(),
        }
    }

    pub fn rules(&self) -> &SmrRules {
        &self.rules
    }

    /// The on-chain `Verify` predicate.
    pub fn validate(&self, tx: &SmrTransaction) -> Result<(), SmrReject> {
        let rules = &self.rules;
        let scheme = self.scheme.as_ref();
        match tx {
            SmrTransaction::VPost { proposal, qc } => {
                if !rules.aggregators.contains(&proposal.aggregator) {
                    return Err(SmrReject::NotAggregator(proposal.aggregator));
                }
                if !scheme.verify(proposal.aggregator, &proposal.signing_bytes(), &proposal.signature) {
                    return Err(SmrReject::BadProposalSignature);
                }
                if qc.digest != digest(proposal) {
                    return Err(SmrReject::DigestMismatch);
                }
                let (eligible, threshold) = match proposal.payload.phase() {
                    Phase::Clan => (&rules.clan, rules.f_c + 1),
                    Phase::Fallback => (&rules.tribe, 2 * rules.f_t + 1),
                };
                if !qc.signers_within(|s| eligible.contains(&s)) {
                    return Err(SmrReject::ForeignSigner);
                }
                if !verify_qc(qc, &qc.digest, threshold, scheme) {
                    return Err(SmrReject::InvalidQc(threshold));
                }
            }
            SmrTransaction::FtPost { qc, .. } => {
                if qc.digest != fallback_digest(tx.key()) {
                    return Err(SmrReject::DigestMismatch);
                }
                if !qc.signers_within(|s| rules.clan.contains(&s)) {
                    return Err(SmrReject::ForeignSigner);
                }
                let threshold = rules.f_c + 1;
                if !verify_qc(qc, &qc.digest, threshold, scheme) {
                    return Err(SmrReject::InvalidQc(threshold));
                }
            }
        }
        Ok(())
    }

    /// Appends a valid transaction at `at` and schedules its delivery to
    /// every observer `delay(observer)` later, never ahead of earlier entries.
    ///
    /// Identical transactions are appended again; consumers keep the first.
    pub fn post(
        &mut self,
        tx: SmrTransaction,
        poster: NodeId,
        at: SimTime,
        mut delay: impl FnMut(NodeId) -> SimTime,
    ) -> Result<u64, SmrReject> {
        self.validate(&tx)?;
        let seq = self.entries.len() as u64;
        for (observer, cursor) in self.cursors.iter_mut() {
            let floor = cursor.due.last().copied().unwrap_or(0);
            cursor.due.push(floor.max(at.saturating_add(delay(*observer))));
        }
        let d = digest(&tx);
        self.entries.push(SmrEntry {
            seq,
            tx,
            posted_at: at,
            poster,
            digest: d,
        });
        Ok(seq)
    }

    /// Next entry for `observer` if it is due by `now`.
    pub fn deliver_next(&mut self, observer: NodeId, now: SimTime) -> Option<&SmrEntry> {
        let cursor = self.cursors.get_mut(&observer)?;
        let idx = cursor.next;
        if idx < self.entries.len() && cursor.due[idx] <= now {
            cursor.next += 1;
            Some(&self.entries[idx])
        } else {
            None
        }
    }

    /// When the observer's next undelivered entry becomes due.
    pub fn next_due(&self, observer: NodeId) -> Option<SimTime> {
        let cursor = self.cursors.get(&observer)?;
        cursor.due.get(cursor.next).copied()
    }

    /// The prefix already delivered to `observer`.
    pub fn delivered(&self, observer: NodeId) -> &[SmrEntry] {
        let n = self.cursors.get(&observer).map_or(0, |c| c.next);
        &self.entries[..n]
    }

    pub fn entries(&self) -> &[SmrEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// One JSON object per entry: seq, kind, round, variable, digest, poster.
    pub fn audit_jsonl(&self) -> String {
        let mut out = String::new();
        for e in &self.entries {
            let key = e.tx.key();
            let line = serde_json::json!({
                "seq": e.seq,
                "kind": e.tx.kind_name(),
                "round": key.round,
                "variable": key.variable,
                "digest": e.digest,
                "poster": e.poster,
                "posted_at_us": e.posted_at,
            });
            out.push_str(&line.to_string());
            out.push('\n');
        }
        out
    }
}
