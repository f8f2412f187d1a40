use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::Serialize;

use crate::protocol::Via;
use crate::smr::SmrReject;
use crate::types::{NodeId, Price, RoundId, SimTime, VariableId};

/// Message kinds as counted by the simulator.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
pub enum MsgKind {
    #[serde(rename = "FEED")]
    Feed,
    #[serde(rename = "VALUE")]
    Value,
    #[serde(rename = "VPROP")]
    VProp,
    #[serde(rename = "VOTEVP")]
    VoteVp,
    #[serde(rename = "VOTEFT")]
    VoteFt,
    #[serde(rename = "VPOST")]
    VPost,
    #[serde(rename = "FTPOST")]
    FtPost,
}

impl MsgKind {
    pub const ALL: [MsgKind; 7] = [
        MsgKind::Feed,
        MsgKind::Value,
        MsgKind::VProp,
        MsgKind::VoteVp,
        MsgKind::VoteFt,
        MsgKind::VPost,
        MsgKind::FtPost,
    ];

    pub fn name(self) -> &'static str {
        match self {
            MsgKind::Feed => "FEED",
            MsgKind::Value => "VALUE",
            MsgKind::VProp => "VPROP",
            MsgKind::VoteVp => "VOTEVP",
            MsgKind::VoteFt => "VOTEFT",
            MsgKind::VPost => "VPOST",
            MsgKind::FtPost => "FTPOST",
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
pub struct KindCount {
    pub messages: u64,
    pub bytes: u64,
}

/// Sent messages and bytes per kind, split by sub-protocol.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize)]
pub struct Counters {
    pub clan: BTreeMap<MsgKind, KindCount>,
    pub fallback: BTreeMap<MsgKind, KindCount>,
}

impl Counters {
    pub fn add(&mut self, fallback: bool, kind: MsgKind, bytes: usize) {
        let map = if fallback { &mut self.fallback } else { &mut self.clan };
        let c = map.entry(kind).or_default();
        c.messages += 1;
        c.bytes += bytes as u64;
    }

    pub fn total_messages(&self) -> u64 {
        self.clan.values().chain(self.fallback.values()).map(|c| c.messages).sum()
    }

    pub fn total_bytes(&self) -> u64 {
        self.clan.values().chain(self.fallback.values()).map(|c| c.bytes).sum()
    }

    pub fn clan_messages(&self) -> u64 {
        self.clan.values().map(|c| c.messages).sum()
    }

    pub fn kind(&self, fallback: bool, kind: MsgKind) -> KindCount {
        let map = if fallback { &self.fallback } else { &self.clan };
        map.get(&kind).copied().unwrap_or_default()
    }
}

/// Outcome of one `(round, variable)` instance.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct Decision {
    pub round: RoundId,
    pub variable: VariableId,
    /// The agreed value, when every honest node concluded identically.
    pub s: Option<Price>,
    pub via: Option<Via>,
    pub smr_seq: Option<u64>,
    pub honest_min: Option<Price>,
    pub honest_max: Option<Price>,
    /// Half-even mean of the honest values of the committing phase.
    pub ideal: Option<Price>,
    pub error: Option<u64>,
    /// `(H_max - H_min) + d`.
    pub error_bound: Option<u64>,
    pub fallback_triggered: bool,
    pub concluded: usize,
    pub honest_nodes: usize,
    pub agreement: bool,
    pub validity_ok: bool,
    pub error_bound_ok: bool,
    pub concluded_at: Option<SimTime>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct Preconditions {
    pub honest_aggregator: bool,
    pub clan_majority: bool,
    pub tribe_supermajority: bool,
    /// Honest source weight per node exceeds the faulty weight.
    pub sources_ok: bool,
}

impl Preconditions {
    pub fn all(&self) -> bool {
        self.honest_aggregator && self.clan_majority && self.tribe_supermajority && self.sources_ok
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct Rejected {
    pub at: SimTime,
    pub poster: NodeId,
    pub kind: &'static str,
    pub reason: SmrReject,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct RunReport {
    pub scenario: String,
    pub seed: u64,
    pub preconditions: Preconditions,
    pub byzantine: Vec<NodeId>,
    pub decisions: Vec<Decision>,
    pub counters: Counters,
    pub smr_entries: usize,
    pub smr_rejections: Vec<Rejected>,
    /// Honest nodes that re-validated a log entry and refused it.
    pub witness_flags: Vec<String>,
    /// Feeds where the median guarantee did not hold.
    pub feed_diagnostics: Vec<String>,
    pub agreement_violations: usize,
    pub validity_violations: usize,
    pub error_bound_violations: usize,
    pub unconcluded: usize,
    pub causality_violations: usize,
    pub honest_sends: u64,
    pub honest_deliveries: u64,
    pub events: u64,
    pub budget_exhausted: bool,
    pub end_time: SimTime,
    pub trace_digest: String,
}

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_INVARIANT: i32 = 3;
pub const EXIT_LIVENESS: i32 = 4;

impl RunReport {
    pub fn invariant_violations(&self) -> usize {
        self.agreement_violations
            + self.validity_violations
            + self.error_bound_violations
            + self.causality_violations
            + usize::from(!self.budget_exhausted && self.honest_sends != self.honest_deliveries)
    }

    pub fn liveness_ok(&self) -> bool {
        self.unconcluded == 0 && !self.budget_exhausted
    }

    pub fn exit_code(&self) -> i32 {
        if self.invariant_violations() > 0 {
            EXIT_INVARIANT
        } else if !self.liveness_ok() {
            EXIT_LIVENESS
        } else {
            EXIT_OK
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn decisions_jsonl(&self) -> String {
        let mut out = String::new();
        for d in &self.decisions {
            out.push_str(&serde_json::to_string(d).expect("decision serializes"));
            out.push('\n');
        }
        out
    }

    /// `phase,kind,messages,bytes` rows.
    pub fn metrics_csv(&self) -> String {
        let mut out = String::from("phase,kind,messages,bytes\n");
        for (phase, map) in [("clan", &self.counters.clan), ("fallback", &self.counters.fallback)] {
            for (k, c) in map {
                let _ = writeln!(out, "{phase},{},{},{}", k.name(), c.messages, c.bytes);
            }
        }
        out
    }

    pub fn count_via(&self, via: Via) -> usize {
        self.decisions.iter().filter(|d| d.via == Some(via)).count()
    }

    pub fn max_error(&self) -> Option<u64> {
        self.decisions.iter().filter_map(|d| d.error).max()
    }
}
