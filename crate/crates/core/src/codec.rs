//! Canonical byte serialization.
//!
//! Layout rules, used for both signing and hashing:
//!
//! * fields are written in declaration order;
//! * integers are fixed-width big-endian (`i64` prices in two's complement);
//! * every message starts with a one-byte kind tag (see [`tag`]);
//! * lists carry a `u32` length prefix; cluster members are ordered by
//!   `(value, sender)`, observation lists by `sender`;
//! * a signed message is its signing bytes followed by the 32-byte signature.
//!
//! Vote signatures do not cover the vote encoding itself. They cover the
//! quorum statement `0x07 || digest`, which is what a quorum certificate
//! stores, so a certificate can be checked from `(digest, signers,
//! signatures)` alone. A fallback vote's digest is the hash of
//! `0x04 || round || variable`.
//!
//! The byte-by-byte table is in `docs/wire-format.md`.

use sha2::{Digest as _, Sha256};

use crate::crypto::QuorumCertificate;
use crate::error::CodecError;
use crate::types::{
    sort_observations, CoherentCluster, DataSourceId, Digest, FallbackVote, InstanceKey, NodeId, Phase, Price,
    ProposalPayload, ProtocolMessage, RoundId, Signature, SmrTransaction, VPropMsg, ValueMsg, VariableId, VoteMsg,
};

pub mod tag {
    pub const VALUE: u8 = 0x01;
    pub const VPROP: u8 = 0x02;
    pub const VOTE_VP: u8 = 0x03;
    pub const VOTE_FT: u8 = 0x04;
    pub const VPOST: u8 = 0x05;
    pub const FTPOST: u8 = 0x06;
    pub const QC_STATEMENT: u8 = 0x07;
    pub const FEED: u8 = 0x08;

    pub const PHASE_CLAN: u8 = 0x00;
    pub const PHASE_FALLBACK: u8 = 0x01;
    pub const PAYLOAD_CLUSTER: u8 = 0x01;
    pub const PAYLOAD_FALLBACK: u8 = 0x02;
}

/// Byte length of a signature in the simulated scheme.
pub const SIGNATURE_LEN: usize = 32;
/// Byte length of a digest.
pub const DIGEST_LEN: usize = 32;

/// Cursor over canonical bytes.
pub struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    pub fn new(bytes: &'a [u8]) -> Self {
        Reader { bytes, pos: 0 }
    }

    pub fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8], CodecError> {
        if self.remaining() < n {
            return Err(CodecError::Truncated(self.pos));
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N], CodecError> {
        let mut out = [0u8; N];
        out.copy_from_slice(self.take(N)?);
        Ok(out)
    }

    pub fn u8(&mut self) -> Result<u8, CodecError> {
        Ok(self.take(1)?[0])
    }

    pub fn u16(&mut self) -> Result<u16, CodecError> {
        Ok(u16::from_be_bytes(self.array()?))
    }

    pub fn u32(&mut self) -> Result<u32, CodecError> {
        Ok(u32::from_be_bytes(self.array()?))
    }

    pub fn u64(&mut self) -> Result<u64, CodecError> {
        Ok(u64::from_be_bytes(self.array()?))
    }

    pub fn i64(&mut self) -> Result<i64, CodecError> {
        Ok(i64::from_be_bytes(self.array()?))
    }

    pub fn bytes32(&mut self) -> Result<[u8; 32], CodecError> {
        self.array()
    }

    fn expect_tag(&mut self, what: &'static str, expected: u8) -> Result<(), CodecError> {
        let tag = self.u8()?;
        if tag == expected {
            Ok(())
        } else {
            Err(CodecError::UnknownTag { what, tag })
        }
    }

    /// Reads a list length, rejecting lengths that cannot fit in the input.
    fn list_len(&mut self, min_item_len: usize) -> Result<usize, CodecError> {
        let len = self.u32()?;
        if (len as usize).saturating_mul(min_item_len) > self.remaining() {
            return Err(CodecError::BadLength(len));
        }
        Ok(len as usize)
    }
}

/// Deterministic encoding shared by every process and run.
pub trait Canonical: Sized {
    fn encode(&self, out: &mut Vec<u8>);

    fn decode(r: &mut Reader<'_>) -> Result<Self, CodecError>;

    fn to_canonical_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(64);
        self.encode(&mut out);
        out
    }

    fn from_canonical_bytes(bytes: &[u8]) -> Result<Self, CodecError> {
        let mut r = Reader::new(bytes);
        let value = Self::decode(&mut r)?;
        match r.remaining() {
            0 => Ok(value),
            n => Err(CodecError::TrailingBytes(n)),
        }
    }

    fn encoded_len(&self) -> usize {
        self.to_canonical_bytes().len()
    }
}

/// Produces the bytes a message's signature covers.
pub trait Signable {
    fn signing_bytes(&self) -> Vec<u8>;
}

fn put_u16(out: &mut Vec<u8>, v: u16) {
    out.extend_from_slice(&v.to_be_bytes());
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_be_bytes());
}

fn put_u64(out: &mut Vec<u8>, v: u64) {
    out.extend_from_slice(&v.to_be_bytes());
}

fn put_i64(out: &mut Vec<u8>, v: i64) {
    out.extend_from_slice(&v.to_be_bytes());
}

fn put_len(out: &mut Vec<u8>, len: usize) {
    put_u32(out, u32::try_from(len).expect("list longer than u32::MAX"));
}

fn phase_byte(phase: Phase) -> u8 {
    match phase {
        Phase::Clan => tag::PHASE_CLAN,
        Phase::Fallback => tag::PHASE_FALLBACK,
    }
}

fn read_phase(r: &mut Reader<'_>) -> Result<Phase, CodecError> {
    match r.u8()? {
        tag::PHASE_CLAN => Ok(Phase::Clan),
        tag::PHASE_FALLBACK => Ok(Phase::Fallback),
        other => Err(CodecError::UnknownTag { what: "phase", tag: other }),
    }
}

/// Signing bytes of a VALUE message, without constructing one.
pub fn value_signing_bytes(sender: NodeId, key: InstanceKey, phase: Phase, value: Price) -> Vec<u8> {
    let mut out = Vec::with_capacity(24);
    out.push(tag::VALUE);
    put_u16(&mut out, sender.0);
    put_u64(&mut out, key.round.0);
    put_u32(&mut out, key.variable.0);
    out.push(phase_byte(phase));
    put_i64(&mut out, value.micros());
    out
}

impl Signable for ValueMsg {
    fn signing_bytes(&self) -> Vec<u8> {
        value_signing_bytes(self.sender, self.key(), self.phase, self.value)
    }
}

impl Canonical for ValueMsg {
    fn encode(&self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.signing_bytes());
        out.extend_from_slice(&self.signature.0);
    }

    fn decode(r: &mut Reader<'_>) -> Result<Self, CodecError> {
        r.expect_tag("VALUE", tag::VALUE)?;
        Ok(ValueMsg {
            sender: NodeId(r.u16()?),
            round: RoundId(r.u64()?),
            variable: VariableId(r.u32()?),
            phase: read_phase(r)?,
            value: Price::from_micros(r.i64()?),
            signature: Signature(r.bytes32()?),
        })
    }
}

const VALUE_MSG_LEN: usize = 24 + SIGNATURE_LEN;

fn encode_payload(payload: &ProposalPayload, out: &mut Vec<u8>) {
    match payload {
        ProposalPayload::Cluster { cluster, mean } => {
            out.push(tag::PAYLOAD_CLUSTER);
            put_len(out, cluster.len());
            // CoherentCluster keeps its members sorted by (value, sender).
            for m in cluster.members() {
                m.encode(out);
            }
            put_i64(out, mean.micros());
        }
        ProposalPayload::Fallback { observations, median } => {
            out.push(tag::PAYLOAD_FALLBACK);
            put_len(out, observations.len());
            let mut sorted = observations.clone();
            sort_observations(&mut sorted);
            for m in &sorted {
                m.encode(out);
            }
            put_i64(out, median.micros());
        }
    }
}

fn decode_payload(r: &mut Reader<'_>) -> Result<ProposalPayload, CodecError> {
    let kind = r.u8()?;
    let read_members = |r: &mut Reader<'_>| -> Result<Vec<ValueMsg>, CodecError> {
        let len = r.list_len(VALUE_MSG_LEN)?;
        (0..len).map(|_| ValueMsg::decode(r)).collect()
    };
    match kind {
        tag::PAYLOAD_CLUSTER => {
            let members = read_members(r)?;
            let mean = Price::from_micros(r.i64()?);
            Ok(ProposalPayload::Cluster {
                cluster: CoherentCluster::new(members),
                mean,
            })
        }
        tag::PAYLOAD_FALLBACK => {
            let members = read_members(r)?;
            let median = Price::from_micros(r.i64()?);
            Ok(ProposalPayload::fallback(members, median))
        }
        other => Err(CodecError::UnknownTag { what: "payload", tag: other }),
    }
}

/// Signing bytes of a VPROP from its parts.
pub fn vprop_signing_bytes(aggregator: NodeId, key: InstanceKey, payload: &ProposalPayload) -> Vec<u8> {
    let mut out = Vec::with_capacity(64 + payload.messages().len() * VALUE_MSG_LEN);
    out.push(tag::VPROP);
    put_u16(&mut out, aggregator.0);
    put_u64(&mut out, key.round.0);
    put_u32(&mut out, key.variable.0);
    encode_payload(payload, &mut out);
    out
}

impl Signable for VPropMsg {
    fn signing_bytes(&self) -> Vec<u8> {
        vprop_signing_bytes(self.aggregator, self.key(), &self.payload)
    }
}

impl Canonical for VPropMsg {
    fn encode(&self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.signing_bytes());
        out.extend_from_slice(&self.signature.0);
    }

    fn decode(r: &mut Reader<'_>) -> Result<Self, CodecError> {
        r.expect_tag("VPROP", tag::VPROP)?;
        Ok(VPropMsg {
            aggregator: NodeId(r.u16()?),
            round: RoundId(r.u64()?),
            variable: VariableId(r.u32()?),
            payload: decode_payload(r)?,
            signature: Signature(r.bytes32()?),
        })
    }
}

/// The statement every quorum vote signs: `0x07 || digest`.
pub fn qc_statement(digest: &Digest) -> Vec<u8> {
    let mut out = Vec::with_capacity(1 + DIGEST_LEN);
    out.push(tag::QC_STATEMENT);
    out.extend_from_slice(&digest.0);
    out
}

/// Digest that fallback votes for an instance certify.
pub fn fallback_digest(key: InstanceKey) -> Digest {
    let mut stmt = Vec::with_capacity(13);
    stmt.push(tag::VOTE_FT);
    put_u64(&mut stmt, key.round.0);
    put_u32(&mut stmt, key.variable.0);
    sha256(&stmt)
}

impl Signable for VoteMsg {
    fn signing_bytes(&self) -> Vec<u8> {
        qc_statement(&self.digest)
    }
}

impl Canonical for VoteMsg {
    fn encode(&self, out: &mut Vec<u8>) {
        out.push(tag::VOTE_VP);
        put_u16(out, self.voter.0);
        out.extend_from_slice(&self.digest.0);
        put_u64(out, self.round.0);
        put_u32(out, self.variable.0);
        out.extend_from_slice(&self.signature.0);
    }

    fn decode(r: &mut Reader<'_>) -> Result<Self, CodecError> {
        r.expect_tag("VOTEVP", tag::VOTE_VP)?;
        Ok(VoteMsg {
            voter: NodeId(r.u16()?),
            digest: Digest(r.bytes32()?),
            round: RoundId(r.u64()?),
            variable: VariableId(r.u32()?),
            signature: Signature(r.bytes32()?),
        })
    }
}

impl Signable for FallbackVote {
    fn signing_bytes(&self) -> Vec<u8> {
        qc_statement(&fallback_digest(self.key()))
    }
}

impl Canonical for FallbackVote {
    fn encode(&self, out: &mut Vec<u8>) {
        out.push(tag::VOTE_FT);
        put_u16(out, self.voter.0);
        put_u64(out, self.round.0);
        put_u32(out, self.variable.0);
        out.extend_from_slice(&self.signature.0);
    }

    fn decode(r: &mut Reader<'_>) -> Result<Self, CodecError> {
        r.expect_tag("VOTEFT", tag::VOTE_FT)?;
        Ok(FallbackVote {
            voter: NodeId(r.u16()?),
            round: RoundId(r.u64()?),
            variable: VariableId(r.u32()?),
            signature: Signature(r.bytes32()?),
        })
    }
}

impl Canonical for QuorumCertificate {
    fn encode(&self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.digest.0);
        put_len(out, self.signers.len());
        for s in &self.signers {
            put_u16(out, s.0);
        }
        put_len(out, self.signatures.len());
        for sig in &self.signatures {
            out.extend_from_slice(&sig.0);
        }
    }

    fn decode(r: &mut Reader<'_>) -> Result<Self, CodecError> {
        let digest = Digest(r.bytes32()?);
        let n = r.list_len(2)?;
        let signers = (0..n).map(|_| r.u16().map(NodeId)).collect::<Result<Vec<_>, _>>()?;
        let m = r.list_len(SIGNATURE_LEN)?;
        let signatures = (0..m)
            .map(|_| r.bytes32().map(Signature))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(QuorumCertificate {
            digest,
            signers,
            signatures,
        })
    }
}

impl Canonical for SmrTransaction {
    fn encode(&self, out: &mut Vec<u8>) {
        match self {
            SmrTransaction::VPost { proposal, qc } => {
                out.push(tag::VPOST);
                proposal.encode(out);
                qc.encode(out);
            }
            SmrTransaction::FtPost { round, variable, qc } => {
                out.push(tag::FTPOST);
                put_u64(out, round.0);
                put_u32(out, variable.0);
                qc.encode(out);
            }
        }
    }

    fn decode(r: &mut Reader<'_>) -> Result<Self, CodecError> {
        match r.u8()? {
            tag::VPOST => Ok(SmrTransaction::VPost {
                proposal: VPropMsg::decode(r)?,
                qc: QuorumCertificate::decode(r)?,
            }),
            tag::FTPOST => Ok(SmrTransaction::FtPost {
                round: RoundId(r.u64()?),
                variable: VariableId(r.u32()?),
                qc: QuorumCertificate::decode(r)?,
            }),
            other => Err(CodecError::UnknownTag { what: "SMR transaction", tag: other }),
        }
    }
}

impl Canonical for ProtocolMessage {
    fn encode(&self, out: &mut Vec<u8>) {
        match self {
            ProtocolMessage::Value(m) => m.encode(out),
            ProtocolMessage::VProp(m) => m.encode(out),
            ProtocolMessage::Vote(m) => m.encode(out),
            ProtocolMessage::FallbackVote(m) => m.encode(out),
        }
    }

    fn decode(r: &mut Reader<'_>) -> Result<Self, CodecError> {
        // Peek the tag without consuming it; each message decoder checks it.
        let tag = *r.bytes.get(r.pos).ok_or(CodecError::Truncated(r.pos))?;
        match tag {
            tag::VALUE => ValueMsg::decode(r).map(ProtocolMessage::Value),
            tag::VPROP => VPropMsg::decode(r).map(ProtocolMessage::VProp),
            tag::VOTE_VP => VoteMsg::decode(r).map(ProtocolMessage::Vote),
            tag::VOTE_FT => FallbackVote::decode(r).map(ProtocolMessage::FallbackVote),
            other => Err(CodecError::UnknownTag { what: "message", tag: other }),
        }
    }
}

/// Wire image of one data-source response: `0x08 || source || variable || price`.
pub fn feed_response_bytes(source: DataSourceId, variable: VariableId, value: Price) -> Vec<u8> {
    let mut out = Vec::with_capacity(15);
    out.push(tag::FEED);
    put_u16(&mut out, source.0);
    put_u32(&mut out, variable.0);
    put_i64(&mut out, value.micros());
    out
}

/// Hash function used for message digests.
pub trait MessageHasher {
    fn hash(&self, bytes: &[u8]) -> Digest;
}

/// SHA-256, the default digest.
#[derive(Clone, Copy, Debug, Default)]
pub struct Sha256Hasher;

impl MessageHasher for Sha256Hasher {
    fn hash(&self, bytes: &[u8]) -> Digest {
        sha256(bytes)
    }
}

pub fn sha256(bytes: &[u8]) -> Digest {
    let out = Sha256::digest(bytes);
    let mut d = [0u8; 32];
    d.copy_from_slice(&out);
    Digest(d)
}

/// Digest of a message's canonical serialization under `hasher`.
pub fn digest_with<T: Canonical>(hasher: &dyn MessageHasher, message: &T) -> Digest {
    hasher.hash(&message.to_canonical_bytes())
}

/// Digest under the default hash.
pub fn digest<T: Canonical>(message: &T) -> Digest {
    digest_with(&Sha256Hasher, message)
}
