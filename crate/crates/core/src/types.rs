//! Domain vocabulary: prices, identifiers, protocol messages and clusters.
//!
//! Every message type here is an immutable value. Byte-level layout lives in
//! [`crate::codec`]; this module only fixes the fields and their invariants.

use std::cmp::Ordering;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::crypto::QuorumCertificate;
use crate::error::PriceParseError;

/// Simulated time in integer microseconds.
pub type SimTime = u64;

/// Number of micro-units in one unit of the quote currency.
pub const MICROS_PER_UNIT: i64 = 1_000_000;

/// An observed value in micro-units (10^-6) of the quote currency.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Price(i64);

impl Price {
    pub const ZERO: Price = Price(0);

    pub const fn from_micros(micros: i64) -> Self {
        Price(micros)
    }

    pub const fn micros(self) -> i64 {
        self.0
    }

    /// L1 distance in micro-units. Exact for the whole `i64` range.
    pub fn distance(self, other: Price) -> u64 {
        self.0.abs_diff(other.0)
    }

    pub fn checked_add(self, delta: i64) -> Option<Price> {
        self.0.checked_add(delta).map(Price)
    }

    /// Adds a delta, clamping at the representable range.
    pub fn saturating_offset(self, delta: i64) -> Price {
        Price(self.0.saturating_add(delta))
    }

    /// Parses a plain decimal string ("19605.50", "-3", "0.000001") exactly.
    ///
    /// More than six fractional digits are accepted only when the excess
    /// digits are zero, so no value is ever rounded silently.
    pub fn from_decimal_str(s: &str) -> Result<Price, PriceParseError> {
        let raw = s.trim();
        let err = |reason: &str| PriceParseError {
            input: s.to_string(),
            reason: reason.to_string(),
        };
        let (negative, body) = match raw.as_bytes().first() {
            Some(b'-') => (true, &raw[1..]),
            Some(b'+') => (false, &raw[1..]),
            Some(_) => (false, raw),
            None => return Err(err("empty")),
        };
        let (int_part, frac_part) = match body.split_once('.') {
            Some((i, f)) => (i, f),
            None => (body, ""),
        };
        if int_part.is_empty() && frac_part.is_empty() {
            return Err(err("no digits"));
        }
        if !int_part.bytes().all(|b| b.is_ascii_digit()) || !frac_part.bytes().all(|b| b.is_ascii_digit()) {
            return Err(err("invalid character"));
        }
        let (kept, excess) = frac_part.split_at(frac_part.len().min(6));
        if excess.bytes().any(|b| b != b'0') {
            return Err(err("more than 6 significant fractional digits"));
        }
        let mut micros: i128 = 0;
        for b in int_part.bytes() {
            micros = micros * 10 + i128::from(b - b'0');
            if micros > i128::from(i64::MAX) {
                return Err(err("out of range"));
            }
        }
        let mut frac: i128 = 0;
        for b in kept.bytes() {
            frac = frac * 10 + i128::from(b - b'0');
        }
        for _ in kept.len()..6 {
            frac *= 10;
        }
        let total = micros * i128::from(MICROS_PER_UNIT) + frac;
        let signed = if negative { -total } else { total };
        i64::try_from(signed).map(Price).map_err(|_| err("out of range"))
    }
}

impl fmt::Display for Price {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let sign = if self.0 < 0 { "-" } else { "" };
        let abs = self.0.unsigned_abs();
        let unit = MICROS_PER_UNIT as u64;
        write!(f, "{sign}{}.{:06}", abs / unit, abs % unit)
    }
}

impl FromStr for Price {
    type Err = PriceParseError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Price::from_decimal_str(s)
    }
}

/// Maximum L1 gap (micro-units) under which two observations agree.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct AgreementDistance(u64);

impl AgreementDistance {
    pub const fn from_micros(micros: u64) -> Self {
        AgreementDistance(micros)
    }

    pub const fn micros(self) -> u64 {
        self.0
    }

    /// The distance as a signed offset, saturating at `i64::MAX`.
    pub fn as_offset(self) -> i64 {
        i64::try_from(self.0).unwrap_or(i64::MAX)
    }
}

/// Returns true when `|a - b| <= d`.
pub fn l1_agree(a: Price, b: Price, d: AgreementDistance) -> bool {
    a.distance(b) <= d.micros()
}

macro_rules! id_type {
    ($(#[$meta:meta])* $name:ident, $inner:ty, $prefix:literal) => {
        $(#[$meta])*
        #[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
        #[serde(transparent)]
        pub struct $name(pub $inner);

        impl $name {
            pub const fn get(self) -> $inner {
                self.0
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                write!(f, concat!($prefix, "{}"), self.0)
            }
        }
    };
}

id_type!(
    /// Oracle node identity, unique within a tribe.
    NodeId, u16, "p"
);
id_type!(
    /// Data source identity.
    DataSourceId, u16, "ds"
);
id_type!(
    /// Protocol round; strictly increasing per variable.
    RoundId, u64, "r"
);
id_type!(
    /// The variable (price pair, sensor, ...) being agreed on.
    VariableId, u32, "tau"
);

/// One protocol instance: a round of one variable.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct InstanceKey {
    pub round: RoundId,
    pub variable: VariableId,
}

impl InstanceKey {
    pub const fn new(round: RoundId, variable: VariableId) -> Self {
        InstanceKey { round, variable }
    }
}

impl fmt::Display for InstanceKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}", self.round, self.variable)
    }
}

/// A single reading `o(p_i, ds_j, tau)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Observation {
    pub node: NodeId,
    pub source: DataSourceId,
    pub variable: VariableId,
    pub value: Price,
}

macro_rules! byte32 {
    ($(#[$meta:meta])* $name:ident) => {
        $(#[$meta])*
        #[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
        pub struct $name(pub [u8; 32]);

        impl $name {
            pub const ZERO: $name = $name([0u8; 32]);

            pub fn as_bytes(&self) -> &[u8; 32] {
                &self.0
            }
        }

        impl fmt::Debug for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                write!(f, concat!(stringify!($name), "({})"), &hex::encode(self.0)[..16])
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(&hex::encode(self.0))
            }
        }

        impl Serialize for $name {
            fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
                s.serialize_str(&hex::encode(self.0))
            }
        }

        impl<'de> Deserialize<'de> for $name {
            fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
                let s = String::deserialize(d)?;
                let mut out = [0u8; 32];
                hex::decode_to_slice(&s, &mut out).map_err(serde::de::Error::custom)?;
                Ok($name(out))
            }
        }
    };
}

byte32!(
    /// 32-byte message digest.
    Digest
);
byte32!(
    /// 32-byte signature produced by a [`crate::crypto::SignatureScheme`].
    Signature
);

/// Which sub-protocol a VALUE message belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    /// Clan-level coherent-cluster agreement.
    Clan,
    /// Tribe-level median fallback.
    Fallback,
}

/// `VALUE(median, r)_i`: a node's signed median for one instance.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ValueMsg {
    pub sender: NodeId,
    pub round: RoundId,
    pub variable: VariableId,
    pub phase: Phase,
    pub value: Price,
    pub signature: Signature,
}

impl ValueMsg {
    pub fn key(&self) -> InstanceKey {
        InstanceKey::new(self.round, self.variable)
    }

    fn cluster_order(&self, other: &Self) -> Ordering {
        (self.value, self.sender).cmp(&(other.value, other.sender))
    }
}

/// Signed VALUE messages whose values lie within the agreement distance.
///
/// Members are always kept sorted ascending by `(value, sender)`. The
/// constructor does not check the span; validators do that against the
/// distance they are configured with.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CoherentCluster {
    members: Vec<ValueMsg>,
}

impl CoherentCluster {
    pub fn new(mut members: Vec<ValueMsg>) -> Self {
        members.sort_by(ValueMsg::cluster_order);
        CoherentCluster { members }
    }

    pub fn members(&self) -> &[ValueMsg] {
        &self.members
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn min(&self) -> Option<Price> {
        self.members.first().map(|m| m.value)
    }

    pub fn max(&self) -> Option<Price> {
        self.members.last().map(|m| m.value)
    }

    /// `max - min` in micro-units; zero for an empty cluster.
    pub fn span(&self) -> u64 {
        match (self.min(), self.max()) {
            (Some(lo), Some(hi)) => hi.distance(lo),
            _ => 0,
        }
    }

    pub fn values(&self) -> impl Iterator<Item = Price> + '_ {
        self.members.iter().map(|m| m.value)
    }
}

/// Sorts an observation list into canonical (sender) order.
pub fn sort_observations(observations: &mut [ValueMsg]) {
    observations.sort_by(|a, b| (a.sender, a.value).cmp(&(b.sender, b.value)));
}

/// What an aggregator proposes as the instance's value.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ProposalPayload {
    /// Coherent cluster and its arithmetic mean.
    Cluster { cluster: CoherentCluster, mean: Price },
    /// Tribe observations (sorted by sender) and their lower median.
    Fallback { observations: Vec<ValueMsg>, median: Price },
}

impl ProposalPayload {
    pub fn fallback(mut observations: Vec<ValueMsg>, median: Price) -> Self {
        sort_observations(&mut observations);
        ProposalPayload::Fallback { observations, median }
    }

    /// The value this proposal would commit.
    pub fn proposed_value(&self) -> Price {
        match self {
            ProposalPayload::Cluster { mean, .. } => *mean,
            ProposalPayload::Fallback { median, .. } => *median,
        }
    }

    pub fn phase(&self) -> Phase {
        match self {
            ProposalPayload::Cluster { .. } => Phase::Clan,
            ProposalPayload::Fallback { .. } => Phase::Fallback,
        }
    }

    pub fn messages(&self) -> &[ValueMsg] {
        match self {
            ProposalPayload::Cluster { cluster, .. } => cluster.members(),
            ProposalPayload::Fallback { observations, .. } => observations,
        }
    }
}

/// `VPROP(CC, mu, r)_i` or `VPROP(O, median(O), r)_i`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct VPropMsg {
    pub aggregator: NodeId,
    pub round: RoundId,
    pub variable: VariableId,
    pub payload: ProposalPayload,
    pub signature: Signature,
}

impl VPropMsg {
    pub fn key(&self) -> InstanceKey {
        InstanceKey::new(self.round, self.variable)
    }
}

/// `VOTEVP`: approval of a proposal identified by its digest.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct VoteMsg {
    pub voter: NodeId,
    pub digest: Digest,
    pub round: RoundId,
    pub variable: VariableId,
    pub signature: Signature,
}

/// `VOTEFT(fallback, r)_i`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FallbackVote {
    pub voter: NodeId,
    pub round: RoundId,
    pub variable: VariableId,
    pub signature: Signature,
}

impl FallbackVote {
    pub fn key(&self) -> InstanceKey {
        InstanceKey::new(self.round, self.variable)
    }
}

/// Point-to-point protocol message.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ProtocolMessage {
    Value(ValueMsg),
    VProp(VPropMsg),
    Vote(VoteMsg),
    FallbackVote(FallbackVote),
}

impl ProtocolMessage {
    pub fn key(&self) -> InstanceKey {
        match self {
            ProtocolMessage::Value(m) => m.key(),
            ProtocolMessage::VProp(m) => m.key(),
            ProtocolMessage::Vote(m) => InstanceKey::new(m.round, m.variable),
            ProtocolMessage::FallbackVote(m) => m.key(),
        }
    }
}

/// A transaction posted to the SMR service.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SmrTransaction {
    /// `VPOST`: a proposal with the quorum certificate approving it.
    VPost { proposal: VPropMsg, qc: QuorumCertificate },
    /// `FTPOST`: certificate that the clan voted to fall back.
    FtPost {
        round: RoundId,
        variable: VariableId,
        qc: QuorumCertificate,
    },
}

impl SmrTransaction {
    pub fn key(&self) -> InstanceKey {
        match self {
            SmrTransaction::VPost { proposal, .. } => proposal.key(),
            SmrTransaction::FtPost { round, variable, .. } => InstanceKey::new(*round, *variable),
        }
    }

    pub fn kind_name(&self) -> &'static str {
        match self {
            SmrTransaction::VPost { .. } => "VPOST",
            SmrTransaction::FtPost { .. } => "FTPOST",
        }
    }

    pub fn qc(&self) -> &QuorumCertificate {
        match self {
            SmrTransaction::VPost { qc, .. } | SmrTransaction::FtPost { qc, .. } => qc,
        }
    }
}
