//! Signatures and quorum certificates.
//!
//! A certificate is a multisignature list: the signer set in ascending
//! order, each paired with its signature over [`qc_statement`]. Protocol code
//! only talks to [`SignatureScheme`], so a real scheme can replace the
//! simulated MAC without touching it.

use std::collections::BTreeMap;

use hmac::{Hmac, KeyInit, Mac};
use serde::{Deserialize, Serialize};
use sha2::Sha256;

use crate::codec::{fallback_digest, qc_statement, sha256};
use crate::error::CryptoError;
use crate::types::{Digest, FallbackVote, InstanceKey, NodeId, RoundId, Signature, VariableId, VoteMsg};

pub trait SignatureScheme: Send + Sync {
    fn sign(&self, node: NodeId, payload: &[u8]) -> Result<Signature, CryptoError>;

    fn verify(&self, node: NodeId, payload: &[u8], signature: &Signature) -> bool;
}

/// Keyed-MAC scheme with one secret per node, derived from a scenario seed.
///
/// Anyone holding the registry can sign for any node, so this is only sound
/// inside a closed simulation where adversary code is handed nothing but its
/// own nodes' identities.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SimulatedScheme {
    keys: BTreeMap<NodeId, KeyMaterial>,
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
struct KeyMaterial(#[serde(with = "hex_key")] [u8; 32]);

mod hex_key {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(k: &[u8; 32], s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&hex::encode(k))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<[u8; 32], D::Error> {
        let s = String::deserialize(d)?;
        let mut out = [0u8; 32];
        hex::decode_to_slice(s, &mut out).map_err(serde::de::Error::custom)?;
        Ok(out)
    }
}

impl SimulatedScheme {
    pub fn generate(nodes: impl IntoIterator<Item = NodeId>, seed: u64) -> Self {
        let keys = nodes
            .into_iter()
            .map(|node| {
                let mut material = b"dora-sim-key".to_vec();
                material.extend_from_slice(&seed.to_be_bytes());
                material.extend_from_slice(&node.0.to_be_bytes());
                (node, KeyMaterial(sha256(&material).0))
            })
            .collect();
        SimulatedScheme { keys }
    }

    pub fn nodes(&self) -> impl Iterator<Item = NodeId> + '_ {
        self.keys.keys().copied()
    }

    /// Registry dump for debugging. Contains secrets.
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("registry serializes")
    }

    fn mac(key: &KeyMaterial, payload: &[u8]) -> Hmac<Sha256> {
        let mut mac = <Hmac<Sha256> as KeyInit>::new_from_slice(&key.0).expect("HMAC accepts any key length");
        mac.update(payload);
        mac
    }
}

impl SignatureScheme for SimulatedScheme {
    fn sign(&self, node: NodeId, payload: &[u8]) -> Result<Signature, CryptoError> {
        let key = self.keys.get(&node).ok_or(CryptoError::UnknownNode(node))?;
        let tag = Self::mac(key, payload).finalize().into_bytes();
        let mut out = [0u8; 32];
        out.copy_from_slice(&tag);
        Ok(Signature(out))
    }

    fn verify(&self, node: NodeId, payload: &[u8], signature: &Signature) -> bool {
        match self.keys.get(&node) {
            Some(key) => Self::mac(key, payload).verify_slice(&signature.0).is_ok(),
            None => false,
        }
    }
}

/// Threshold-many signatures from distinct signers over one digest.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct QuorumCertificate {
    pub digest: Digest,
    /// Ascending, pairwise distinct.
    pub signers: Vec<NodeId>,
    /// `signatures[i]` belongs to `signers[i]`.
    pub signatures: Vec<Signature>,
}

impl QuorumCertificate {
    pub fn len(&self) -> usize {
        self.signers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.signers.is_empty()
    }

    /// True when every signer satisfies `eligible`.
    pub fn signers_within(&self, eligible: impl Fn(NodeId) -> bool) -> bool {
        self.signers.iter().all(|s| eligible(*s))
    }
}

/// A vote that can be aggregated into a certificate.
pub trait QuorumVote {
    fn voter(&self) -> NodeId;
    fn digest(&self) -> Digest;
    fn instance(&self) -> InstanceKey;
    fn signature(&self) -> &Signature;
}

impl QuorumVote for VoteMsg {
    fn voter(&self) -> NodeId {
        self.voter
    }

    fn digest(&self) -> Digest {
        self.digest
    }

    fn instance(&self) -> InstanceKey {
        InstanceKey::new(self.round, self.variable)
    }

    fn signature(&self) -> &Signature {
        &self.signature
    }
}

impl QuorumVote for FallbackVote {
    fn voter(&self) -> NodeId {
        self.voter
    }

    fn digest(&self) -> Digest {
        fallback_digest(self.key())
    }

    fn instance(&self) -> InstanceKey {
        self.key()
    }

    fn signature(&self) -> &Signature {
        &self.signature
    }
}

/// Signs a proposal approval.
pub fn sign_vote(
    scheme: &dyn SignatureScheme,
    voter: NodeId,
    digest: Digest,
    key: InstanceKey,
) -> Result<VoteMsg, CryptoError> {
    Ok(VoteMsg {
        voter,
        digest,
        round: key.round,
        variable: key.variable,
        signature: scheme.sign(voter, &qc_statement(&digest))?,
    })
}

/// Signs a fallback vote.
pub fn sign_fallback_vote(
    scheme: &dyn SignatureScheme,
    voter: NodeId,
    key: InstanceKey,
) -> Result<FallbackVote, CryptoError> {
    Ok(FallbackVote {
        voter,
        round: key.round,
        variable: key.variable,
        signature: scheme.sign(voter, &qc_statement(&fallback_digest(key)))?,
    })
}

/// Builds a certificate from `votes`.
///
/// Invalid signatures are skipped and repeated voters count once. With more
/// than `threshold` valid voters the certificate keeps the `threshold`
/// lowest node ids, so the result is deterministic.
pub fn assemble_qc<V: QuorumVote>(
    votes: &[V],
    threshold: usize,
    scheme: &dyn SignatureScheme,
) -> Result<QuorumCertificate, CryptoError> {
    let Some(first) = votes.first() else {
        return Err(CryptoError::InsufficientQuorum { have: 0, need: threshold });
    };
    let digest = first.digest();
    let instance = first.instance();
    if votes.iter().any(|v| v.digest() != digest || v.instance() != instance) {
        return Err(CryptoError::MixedVotes);
    }
    let statement = qc_statement(&digest);
    let mut valid: BTreeMap<NodeId, Signature> = BTreeMap::new();
    for v in votes {
        if !valid.contains_key(&v.voter()) && scheme.verify(v.voter(), &statement, v.signature()) {
            valid.insert(v.voter(), *v.signature());
        }
    }
    if valid.len() < threshold {
        return Err(CryptoError::InsufficientQuorum {
            have: valid.len(),
            need: threshold,
        });
    }
    let (signers, signatures) = valid.into_iter().take(threshold).unzip();
    Ok(QuorumCertificate {
        digest,
        signers,
        signatures,
    })
}

/// Checks a certificate against the digest it should certify.
pub fn verify_qc(
    qc: &QuorumCertificate,
    expected_digest: &Digest,
    threshold: usize,
    scheme: &dyn SignatureScheme,
) -> bool {
    if qc.digest != *expected_digest || qc.signers.len() != qc.signatures.len() || qc.signers.len() < threshold {
        return false;
    }
    if !qc.signers.windows(2).all(|w| w[0] < w[1]) {
        return false;
    }
    let statement = qc_statement(&qc.digest);
    qc.signers
        .iter()
        .zip(&qc.signatures)
        .all(|(s, sig)| scheme.verify(*s, &statement, sig))
}

/// Convenience for building instance keys in tests and tools.
pub fn instance(round: u64, variable: u32) -> InstanceKey {
    InstanceKey::new(RoundId(round), VariableId(variable))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn scheme(n: u16) -> SimulatedScheme {
        SimulatedScheme::generate((0..n).map(NodeId), 7)
    }

    fn votes(s: &SimulatedScheme, voters: &[u16], digest: Digest) -> Vec<VoteMsg> {
        voters
            .iter()
            .map(|&v| sign_vote(s, NodeId(v), digest, instance(1, 0)).unwrap())
            .collect()
    }

    #[test]
    fn sign_verify_and_tamper() {
        let s = scheme(4);
        let sig = s.sign(NodeId(1), b"payload").unwrap();
        assert!(s.verify(NodeId(1), b"payload", &sig));
        assert!(!s.verify(NodeId(1), b"paylobd", &sig));
        assert!(matches!(s.sign(NodeId(9), b"x"), Err(CryptoError::UnknownNode(NodeId(9)))));
        assert!(!s.verify(NodeId(9), b"payload", &sig));
    }

    #[test]
    fn signatures_do_not_verify_under_other_keys() {
        let s = scheme(4);
        for signer in 0..4 {
            let sig = s.sign(NodeId(signer), b"m").unwrap();
            for verifier in 0..4 {
                assert_eq!(s.verify(NodeId(verifier), b"m", &sig), signer == verifier);
            }
        }
    }

    #[test]
    fn assemble_exact_threshold() {
        let s = scheme(5);
        let d = Digest([3; 32]);
        let qc = assemble_qc(&votes(&s, &[2, 0, 1], d), 3, &s).unwrap();
        assert_eq!(qc.signers, vec![NodeId(0), NodeId(1), NodeId(2)]);
        assert!(verify_qc(&qc, &d, 3, &s));
    }

    #[test]
    fn duplicate_voters_collapse() {
        let s = scheme(5);
        let d = Digest([3; 32]);
        let err = assemble_qc(&votes(&s, &[1, 1, 2], d), 3, &s).unwrap_err();
        assert_eq!(err, CryptoError::InsufficientQuorum { have: 2, need: 3 });
    }

    #[test]
    fn pruning_keeps_lowest_ids() {
        let s = scheme(5);
        let d = Digest([3; 32]);
        let qc = assemble_qc(&votes(&s, &[4, 3, 2, 1, 0], d), 3, &s).unwrap();
        assert_eq!(qc.signers, vec![NodeId(0), NodeId(1), NodeId(2)]);
    }

    #[test]
    fn forged_votes_are_skipped() {
        let s = scheme(5);
        let d = Digest([3; 32]);
        let mut vs = votes(&s, &[0, 1, 2], d);
        vs[1].signature = Signature([0xAB; 32]);
        assert!(assemble_qc(&vs, 3, &s).is_err());
        assert_eq!(assemble_qc(&vs, 2, &s).unwrap().signers, vec![NodeId(0), NodeId(2)]);
    }

    #[test]
    fn mixed_votes_rejected() {
        let s = scheme(3);
        let mut vs = votes(&s, &[0, 1], Digest([1; 32]));
        vs.extend(votes(&s, &[2], Digest([2; 32])));
        assert_eq!(assemble_qc(&vs, 2, &s).unwrap_err(), CryptoError::MixedVotes);
    }

    #[test]
    fn verify_rejects_mutations() {
        let s = scheme(5);
        let d = Digest([9; 32]);
        let qc = assemble_qc(&votes(&s, &[0, 1, 2], d), 3, &s).unwrap();
        assert!(!verify_qc(&qc, &d, 4, &s));
        assert!(!verify_qc(&qc, &Digest([8; 32]), 3, &s));

        // a signature swapped for another node's
        let mut swapped = qc.clone();
        swapped.signatures[1] = s.sign(NodeId(3), &qc_statement(&d)).unwrap();
        assert!(!verify_qc(&swapped, &d, 3, &s));

        let mut unsorted = qc.clone();
        unsorted.signers.swap(0, 1);
        unsorted.signatures.swap(0, 1);
        assert!(!verify_qc(&unsorted, &d, 3, &s));

        let mut short = qc.clone();
        short.signers.pop();
        short.signatures.pop();
        assert!(!verify_qc(&short, &d, 3, &s));

        let mut repeated = qc;
        repeated.signers[1] = NodeId(0);
        repeated.signatures[1] = repeated.signatures[0];
        assert!(!verify_qc(&repeated, &d, 3, &s));
    }

    #[test]
    fn fallback_votes_certify_their_instance() {
        let s = scheme(3);
        let key = instance(4, 1);
        let vs: Vec<_> = (0..3).map(|v| sign_fallback_vote(&s, NodeId(v), key).unwrap()).collect();
        let qc = assemble_qc(&vs, 2, &s).unwrap();
        assert!(verify_qc(&qc, &fallback_digest(key), 2, &s));
        assert!(!verify_qc(&qc, &fallback_digest(instance(5, 1)), 2, &s));
    }

    /// Without the keys of `threshold` nodes no certificate can pass: every
    /// way of filling the missing slots with signatures from the wrong key or
    /// from the adversary's own keys is rejected.
    #[test]
    fn exhaustive_forgery_fails_on_small_instance() {
        let s = scheme(4);
        let d = Digest([5; 32]);
        let statement = qc_statement(&d);
        // adversary controls node 3 only
        let own = s.sign(NodeId(3), &statement).unwrap();
        let candidates = [own, Signature::ZERO, s.sign(NodeId(3), b"other").unwrap()];
        let threshold = 2;
        for a in 0..4u16 {
            for b in (a + 1)..4 {
                for sa in &candidates {
                    for sb in &candidates {
                        let qc = QuorumCertificate {
                            digest: d,
                            signers: vec![NodeId(a), NodeId(b)],
                            signatures: vec![*sa, *sb],
                        };
                        assert!(!verify_qc(&qc, &d, threshold, &s), "forged {a},{b}");
                    }
                }
            }
        }
    }

    proptest! {
        #[test]
        fn assembled_certificates_verify(voters in prop::collection::vec(0u16..12, 1..20), threshold in 1usize..8) {
            let s = scheme(12);
            let d = Digest([1; 32]);
            let vs = votes(&s, &voters, d);
            let distinct = voters.iter().collect::<std::collections::BTreeSet<_>>().len();
            match assemble_qc(&vs, threshold, &s) {
                Ok(qc) => {
                    prop_assert!(distinct >= threshold);
                    prop_assert_eq!(qc.len(), threshold);
                    prop_assert!(verify_qc(&qc, &d, threshold, &s));
                }
                Err(e) => {
                    prop_assert!(distinct < threshold);
                    prop_assert_eq!(e, CryptoError::InsufficientQuorum { have: distinct, need: threshold });
                }
            }
        }
    }
}
