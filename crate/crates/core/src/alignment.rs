// SPDX-License-Identifier: Apache-2.0

//! Encrypted entity alignment: Diffie–Hellman commutative-cipher private set
//! intersection over the quadratic-residue subgroup of a safe-prime group.
//!
//! Each side hashes its ids into the subgroup and raises them to a private
//! exponent. Exponentiation commutes, so an id held by both parties maps to
//! the same doubly blinded element no matter who blinded first, while an id
//! held by one side stays a random-looking group element to the other.
//!
//! Message flow, all on round 0 as `psi-blinded-batch`:
//!
//! 1. A → B: `H(a)^α` for A's ids, in A's order
//! 2. B → A: `H(a)^αβ`, same order
//! 3. B → A: `H(b)^β` for B's ids, in B's order
//! 4. A → B: `H(b)^βα`, same order
//!
//! Afterwards both hold the doubly blinded lists in both orders and compute
//! the same index pairs.

use std::collections::{HashMap, HashSet};

use num_bigint::BigUint;
use num_traits::{One, Zero};
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::codec::{DecodeError, Reader, Writer};
use crate::data::{DatasetPartition, EntityId};
use crate::he::arith;
use crate::seed::derive_seed;
use crate::transport::{self, Bus, MessageEnvelope, Party, PartyId, PayloadKind, Transcript};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum AlignmentError {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("invalid dataset: {0}")]
    InvalidDataset(String),
    #[error("protocol error: {0}")]
    Protocol(String),
    #[error(transparent)]
    Decode(#[from] DecodeError),
}

const RFC3526_MODP_2048: &str = "\
    FFFFFFFFFFFFFFFFC90FDAA22168C234C4C6628B80DC1CD1\
    29024E088A67CC74020BBEA63B139B22514A08798E3404DD\
    EF9519B3CD3A431B302B0A6DF25F14374FE1356D6D51C245\
    E485B576625E7EC6F44C42E9A637ED6B0BFF5CB6F406B7ED\
    EE386BFB5A899FA5AE9F24117C4B1FE649286651ECE45B3D\
    C2007CB8A163BF0598DA48361C55D39A69163FA8FD24CF5F\
    83655D23DCA3AD961C62F356208552BB9ED529077096966D\
    670C354E4ABC9804F1746C08CA18217C32905E462E36CE3B\
    E39E772C180E86039B2783A2EC07A28FB5C55DF06F4C52C9\
    DE2BCBF6955817183995497CEA956AE515D2261898FA0510\
    15728E5A8AACAA68FFFFFFFFFFFFFFFF";

/// 2^255 + 0x2ff7f: the first safe prime above 2^255 + 24691.
const TEST_SAFE_PRIME_256: &str =
    "800000000000000000000000000000000000000000000000000000000002ff7f";

/// A safe prime `p = 2q + 1`; blinding happens in the order-`q` subgroup of
/// quadratic residues.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GroupParams {
    prime: BigUint,
    order: BigUint,
}

impl GroupParams {
    /// Verifies that `prime` is a safe prime.
    pub fn new(prime: BigUint) -> Result<Self, AlignmentError> {
        let mut rng = ChaCha20Rng::seed_from_u64(0);
        if prime.bits() < 16 || !arith::is_probable_prime(&prime, &mut rng) {
            return Err(AlignmentError::InvalidParameter("group modulus is not prime".into()));
        }
        let order = (&prime - 1u32) >> 1u32;
        if !arith::is_probable_prime(&order, &mut rng) {
            return Err(AlignmentError::InvalidParameter(
                "group modulus is not a safe prime".into(),
            ));
        }
        Ok(Self { prime, order })
    }

    fn from_hex_unchecked(hex: &str) -> Self {
        let prime = BigUint::parse_bytes(hex.as_bytes(), 16).expect("valid hex constant");
        let order = (&prime - 1u32) >> 1u32;
        Self { prime, order }
    }

    /// RFC 3526 group 14. The default.
    pub fn modp_2048() -> Self {
        Self::from_hex_unchecked(RFC3526_MODP_2048)
    }

    /// 256-bit safe prime for fast tests.
    pub fn test_256() -> Self {
        Self::from_hex_unchecked(TEST_SAFE_PRIME_256)
    }

    pub fn prime(&self) -> &BigUint {
        &self.prime
    }

    /// Order of the quadratic-residue subgroup, `(p - 1) / 2`.
    pub fn subgroup_order(&self) -> &BigUint {
        &self.order
    }

    fn random_secret(&self, rng: &mut ChaCha20Rng) -> BigUint {
        arith::random_range(&BigUint::from(2u32), &self.order, rng)
    }
}

/// Deterministic map from an id into the quadratic-residue subgroup: expand
/// SHA-256 past the modulus width, reduce, and square.
pub fn hash_to_group(id: &EntityId, group: &GroupParams) -> BigUint {
    let width = (group.prime.bits() as usize + 128).div_ceil(8);
    for attempt in 0u32.. {
        let mut wide = Vec::with_capacity(width + 32);
        let mut block = 0u32;
        while wide.len() < width {
            let digest = Sha256::new()
                .chain_update(b"fedbench-psi-hash-to-group")
                .chain_update(attempt.to_be_bytes())
                .chain_update(block.to_be_bytes())
                .chain_update((id.as_bytes().len() as u64).to_be_bytes())
                .chain_update(id.as_bytes())
                .finalize();
            wide.extend_from_slice(&digest);
            block += 1;
        }
        wide.truncate(width);
        let h = BigUint::from_bytes_be(&wide) % &group.prime;
        if h.is_zero() {
            continue;
        }
        let element = (&h * &h) % &group.prime;
        if !element.is_one() {
            return element;
        }
    }
    unreachable!("hash_to_group found no element")
}

/// `element^secret mod p`, for `1 ≤ secret < q`.
pub fn blind(
    element: &BigUint,
    secret: &BigUint,
    group: &GroupParams,
) -> Result<BigUint, AlignmentError> {
    if secret.is_zero() || secret >= &group.order {
        return Err(AlignmentError::InvalidParameter(
            "blinding exponent must lie in [1, q)".into(),
        ));
    }
    if element.is_zero() || element >= &group.prime {
        return Err(AlignmentError::InvalidParameter(
            "element is not in the multiplicative group".into(),
        ));
    }
    Ok(element.modpow(secret, &group.prime))
}

/// A group element in flight, tagged with who blinded it and how many times.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BlindedId {
    pub value: BigUint,
    pub owner: PartyId,
    pub blind_count: u8,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct AlignmentResult {
    /// `(row in A, row in B)`, sorted by A's row.
    pub pairs: Vec<(usize, usize)>,
    pub common_count: usize,
}

impl AlignmentResult {
    fn from_doubles(double_a: &[BigUint], double_b: &[BigUint]) -> Self {
        let index_b: HashMap<&BigUint, usize> =
            double_b.iter().enumerate().map(|(j, v)| (v, j)).collect();
        let pairs: Vec<(usize, usize)> = double_a
            .iter()
            .enumerate()
            .filter_map(|(i, v)| index_b.get(v).map(|&j| (i, j)))
            .collect();
        Self {
            common_count: pairs.len(),
            pairs,
        }
    }

    /// Both partitions restricted to the common ids, rows in matching order.
    pub fn apply(
        &self,
        a: &DatasetPartition,
        b: &DatasetPartition,
    ) -> (DatasetPartition, DatasetPartition) {
        let rows_a: Vec<usize> = self.pairs.iter().map(|p| p.0).collect();
        let rows_b: Vec<usize> = self.pairs.iter().map(|p| p.1).collect();
        (a.select_rows(&rows_a), b.select_rows(&rows_b))
    }
}

fn encode_elements(items: &[BlindedId]) -> Vec<u8> {
    let mut w = Writer::new();
    w.put_count(items.len());
    for item in items {
        w.put_biguint(&item.value);
    }
    w.into_bytes()
}

fn decode_elements(
    bytes: &[u8],
    group: &GroupParams,
    owner: PartyId,
    blind_count: u8,
) -> Result<Vec<BlindedId>, AlignmentError> {
    let mut r = Reader::new(bytes);
    let count = r.get_count(5)?;
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let at = r.position();
        let value = r.get_biguint()?;
        if value.is_zero() || value >= group.prime {
            return Err(DecodeError::new(at, "element outside the group").into());
        }
        out.push(BlindedId {
            value,
            owner,
            blind_count,
        });
    }
    r.finish()?;
    Ok(out)
}

fn check_unique(ids: &[EntityId]) -> Result<(), AlignmentError> {
    let mut seen = HashSet::with_capacity(ids.len());
    for id in ids {
        if id.as_bytes().is_empty() {
            return Err(AlignmentError::InvalidDataset("empty entity id".into()));
        }
        if !seen.insert(id) {
            return Err(AlignmentError::InvalidDataset(format!("duplicate entity id {id}")));
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum PsiPhase {
    Idle,
    AwaitDoubledOwn,
    AwaitPeerSingles,
    Done,
}

/// One side of the two-party intersection. `PartyId::A` initiates.
#[derive(Debug)]
pub struct PsiParty {
    id: PartyId,
    peer: PartyId,
    ids: Vec<EntityId>,
    group: GroupParams,
    secret: BigUint,
    phase: PsiPhase,
    own_doubled: Option<Vec<BigUint>>,
    peer_doubled: Option<Vec<BigUint>>,
    result: Option<AlignmentResult>,
}

impl PsiParty {
    pub fn new(
        id: PartyId,
        peer: PartyId,
        ids: Vec<EntityId>,
        group: GroupParams,
        seed: u64,
    ) -> Result<Self, AlignmentError> {
        check_unique(&ids)?;
        let mut rng = ChaCha20Rng::seed_from_u64(derive_seed(seed, &format!("psi-secret-{id}")));
        let secret = group.random_secret(&mut rng);
        Ok(Self {
            id,
            peer,
            ids,
            group,
            secret,
            phase: PsiPhase::Idle,
            own_doubled: None,
            peer_doubled: None,
            result: None,
        })
    }

    fn initiator(&self) -> bool {
        self.id == PartyId::A
    }

    pub fn result(&self) -> Option<&AlignmentResult> {
        self.result.as_ref()
    }

    fn single_blinded(&self) -> Result<Vec<BlindedId>, AlignmentError> {
        self.ids
            .iter()
            .map(|id| {
                Ok(BlindedId {
                    value: blind(&hash_to_group(id, &self.group), &self.secret, &self.group)?,
                    owner: self.id,
                    blind_count: 1,
                })
            })
            .collect()
    }

    fn reblind(&self, items: &[BlindedId]) -> Result<Vec<BlindedId>, AlignmentError> {
        items
            .iter()
            .map(|item| {
                Ok(BlindedId {
                    value: blind(&item.value, &self.secret, &self.group)?,
                    owner: item.owner,
                    blind_count: item.blind_count + 1,
                })
            })
            .collect()
    }

    fn envelope(&self, step: u32, items: &[BlindedId]) -> MessageEnvelope {
        MessageEnvelope::new(
            0,
            step,
            self.id,
            self.peer,
            PayloadKind::PsiBlindedBatch,
            encode_elements(items),
        )
    }

    fn finish(&mut self) {
        let own = self.own_doubled.as_deref().unwrap_or_default();
        let peer = self.peer_doubled.as_deref().unwrap_or_default();
        let result = if self.initiator() {
            AlignmentResult::from_doubles(own, peer)
        } else {
            AlignmentResult::from_doubles(peer, own)
        };
        self.result = Some(result);
        self.phase = PsiPhase::Done;
    }

    fn on_message(&mut self, msg: &MessageEnvelope) -> Result<Vec<MessageEnvelope>, AlignmentError> {
        if msg.kind != PayloadKind::PsiBlindedBatch || msg.sender != self.peer {
            return Err(AlignmentError::Protocol(format!(
                "unexpected {} from {}",
                msg.kind, msg.sender
            )));
        }
        let unexpected = || AlignmentError::Protocol(format!("unexpected step {} in phase", msg.step));
        match (self.initiator(), msg.step, self.phase) {
            // Responder: blind A's batch again, then publish our own singles.
            (false, 1, PsiPhase::Idle) => {
                let incoming = decode_elements(&msg.payload, &self.group, self.peer, 1)?;
                let doubled = self.reblind(&incoming)?;
                self.peer_doubled = Some(doubled.iter().map(|b| b.value.clone()).collect());
                let singles = self.single_blinded()?;
                self.phase = PsiPhase::AwaitDoubledOwn;
                Ok(vec![self.envelope(2, &doubled), self.envelope(3, &singles)])
            }
            (false, 4, PsiPhase::AwaitDoubledOwn) => {
                let doubled = decode_elements(&msg.payload, &self.group, self.id, 2)?;
                if doubled.len() != self.ids.len() {
                    return Err(AlignmentError::Protocol("doubled batch has wrong length".into()));
                }
                self.own_doubled = Some(doubled.into_iter().map(|b| b.value).collect());
                self.finish();
                Ok(vec![])
            }
            (true, 2, PsiPhase::AwaitDoubledOwn) => {
                let doubled = decode_elements(&msg.payload, &self.group, self.id, 2)?;
                if doubled.len() != self.ids.len() {
                    return Err(AlignmentError::Protocol("doubled batch has wrong length".into()));
                }
                self.own_doubled = Some(doubled.into_iter().map(|b| b.value).collect());
                self.phase = PsiPhase::AwaitPeerSingles;
                Ok(vec![])
            }
            (true, 3, PsiPhase::AwaitPeerSingles) => {
                let incoming = decode_elements(&msg.payload, &self.group, self.peer, 1)?;
                let doubled = self.reblind(&incoming)?;
                self.peer_doubled = Some(doubled.iter().map(|b| b.value.clone()).collect());
                self.finish();
                Ok(vec![self.envelope(4, &doubled)])
            }
            _ => Err(unexpected()),
        }
    }
}

impl Party for PsiParty {
    fn id(&self) -> PartyId {
        self.id
    }

    fn start(&mut self) -> crate::Result<Vec<MessageEnvelope>> {
        if !self.initiator() {
            return Ok(vec![]);
        }
        let singles = self.single_blinded()?;
        self.phase = PsiPhase::AwaitDoubledOwn;
        Ok(vec![self.envelope(1, &singles)])
    }

    fn handle(&mut self, msg: &MessageEnvelope) -> crate::Result<Vec<MessageEnvelope>> {
        Ok(self.on_message(msg)?)
    }

    fn is_terminal(&self) -> bool {
        self.phase == PsiPhase::Done
    }

    fn phase(&self) -> String {
        format!("{:?}", self.phase)
    }
}

/// Runs the intersection between A's and B's ids over a fresh bus.
pub fn align(
    ids_a: &[EntityId],
    ids_b: &[EntityId],
    seed: u64,
    group: &GroupParams,
) -> crate::Result<(AlignmentResult, Transcript)> {
    let mut a = PsiParty::new(PartyId::A, PartyId::B, ids_a.to_vec(), group.clone(), seed)?;
    let mut b = PsiParty::new(PartyId::B, PartyId::A, ids_b.to_vec(), group.clone(), seed)?;
    let transcript = transport::run_protocol(&mut [&mut a, &mut b], Bus::new(seed), 16)?;
    let result_a = a.result.take().expect("A finished");
    let result_b = b.result.take().expect("B finished");
    if result_a != result_b {
        return Err(AlignmentError::Protocol("parties disagree on the intersection".into()).into());
    }
    Ok((result_a, transcript))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::seq::SliceRandom;

    fn ids(names: &[&str]) -> Vec<EntityId> {
        names.iter().map(|s| EntityId::from(*s)).collect()
    }

    fn matched(ids_a: &[EntityId], result: &AlignmentResult) -> Vec<EntityId> {
        result.pairs.iter().map(|&(i, _)| ids_a[i].clone()).collect()
    }

    #[test]
    fn constants_are_safe_primes() {
        for g in [GroupParams::test_256(), GroupParams::modp_2048()] {
            assert_eq!(GroupParams::new(g.prime().clone()).unwrap(), g);
        }
        assert_eq!(GroupParams::test_256().prime().bits(), 256);
        assert_eq!(GroupParams::modp_2048().prime().bits(), 2048);
        assert!(GroupParams::new(BigUint::from(13u32 * 17)).is_err());
        // 29 is prime but 14 is not.
        assert!(GroupParams::new(BigUint::from(65537u32)).is_err());
    }

    #[test]
    fn hashing_is_deterministic_and_lands_in_subgroup() {
        let g = GroupParams::test_256();
        let u1 = hash_to_group(&"u1".into(), &g);
        assert_eq!(u1, hash_to_group(&"u1".into(), &g));
        assert_ne!(u1, hash_to_group(&"u2".into(), &g));
        for name in ["u1", "u2", "alice", "x"] {
            let e = hash_to_group(&name.into(), &g);
            assert!(e.modpow(g.subgroup_order(), g.prime()).is_one());
        }
    }

    #[test]
    fn blinding_laws() {
        let g = GroupParams::test_256();
        let e = hash_to_group(&"u1".into(), &g);
        assert_eq!(blind(&e, &BigUint::one(), &g).unwrap(), e);
        assert_eq!(
            blind(&BigUint::one(), &BigUint::from(12345u32), &g).unwrap(),
            BigUint::one()
        );
        assert!(blind(&e, &BigUint::zero(), &g).is_err());
        assert!(blind(&e, g.subgroup_order(), &g).is_err());

        let mut rng = ChaCha20Rng::seed_from_u64(3);
        for i in 0..100 {
            let e = hash_to_group(&EntityId::from(format!("id-{i}")), &g);
            let a = g.random_secret(&mut rng);
            let b = g.random_secret(&mut rng);
            let ab = blind(&blind(&e, &a, &g).unwrap(), &b, &g).unwrap();
            let ba = blind(&blind(&e, &b, &g).unwrap(), &a, &g).unwrap();
            assert_eq!(ab, ba);
        }
    }

    #[test]
    fn small_intersection() {
        let a = ids(&["u1", "u2", "u3"]);
        let b = ids(&["u2", "u3", "u4"]);
        let (result, _) = align(&a, &b, 1, &GroupParams::test_256()).unwrap();
        assert_eq!(result.common_count, 2);
        assert_eq!(result.pairs, vec![(1, 0), (2, 1)]);
        assert_eq!(matched(&a, &result), ids(&["u2", "u3"]));
    }

    #[test]
    fn empty_side() {
        let (result, transcript) = align(&[], &ids(&["u1"]), 1, &GroupParams::test_256()).unwrap();
        assert_eq!(result.common_count, 0);
        assert_eq!(transcript.len(), 4);
    }

    #[test]
    fn duplicates_are_rejected() {
        let err = align(&ids(&["u1", "u1"]), &ids(&["u1"]), 1, &GroupParams::test_256());
        assert!(matches!(
            err,
            Err(crate::Error::Alignment(AlignmentError::InvalidDataset(_)))
        ));
    }

    #[test]
    fn matches_hash_set_oracle_and_is_order_invariant() {
        let g = GroupParams::test_256();
        let mut rng = ChaCha20Rng::seed_from_u64(11);
        let common: Vec<EntityId> = (0..50).map(|i| format!("common-{i:04}").into()).collect();
        let mut a: Vec<EntityId> = common.clone();
        a.extend((0..150).map(|i| EntityId::from(format!("only-a-{i:04}"))));
        let mut b: Vec<EntityId> = common.clone();
        b.extend((0..150).map(|i| EntityId::from(format!("only-b-{i:04}"))));
        a.shuffle(&mut rng);
        b.shuffle(&mut rng);

        let oracle: HashSet<&EntityId> = a.iter().collect::<HashSet<_>>()
            .intersection(&b.iter().collect())
            .copied()
            .collect();
        let (result, transcript) = align(&a, &b, 5, &g).unwrap();
        let got: HashSet<&EntityId> = result.pairs.iter().map(|&(i, _)| &a[i]).collect();
        assert_eq!(got, oracle);
        for &(i, j) in &result.pairs {
            assert_eq!(a[i], b[j]);
        }
        assert!(result.pairs.windows(2).all(|w| w[0].0 < w[1].0));

        let mut b2 = b.clone();
        b2.shuffle(&mut rng);
        let (result2, _) = align(&a, &b2, 5, &g).unwrap();
        let got2: HashSet<&EntityId> = result2.pairs.iter().map(|&(i, _)| &a[i]).collect();
        assert_eq!(got2, oracle);

        let (_, again) = align(&a, &b, 5, &g).unwrap();
        assert_eq!(again.to_bytes(), transcript.to_bytes());
    }

    #[test]
    fn transcript_carries_no_raw_ids() {
        let g = GroupParams::test_256();
        let a: Vec<EntityId> = (0..30).map(|i| format!("alice-{i:05}").into()).collect();
        let b: Vec<EntityId> = (20..60).map(|i| format!("alice-{i:05}").into()).collect();
        let (_, transcript) = align(&a, &b, 9, &g).unwrap();
        let bytes = transcript.to_bytes();
        for id in a.iter().chain(&b) {
            assert!(
                !bytes.windows(id.as_bytes().len()).any(|w| w == id.as_bytes()),
                "{id} leaked"
            );
        }
        assert!(transcript
            .records()
            .iter()
            .all(|r| r.kind == PayloadKind::PsiBlindedBatch));
    }

    #[test]
    fn apply_reorders_both_sides() {
        use crate::data::Matrix;
        let a = DatasetPartition::new(
            ids(&["x", "y", "z"]),
            Matrix::from_rows(&[[1.0], [2.0], [3.0]]),
            None,
            vec!["a0".into()],
        )
        .unwrap();
        let b = DatasetPartition::new(
            ids(&["z", "w", "x"]),
            Matrix::from_rows(&[[30.0], [0.0], [10.0]]),
            Some(vec![3.0, 0.0, 1.0]),
            vec!["b0".into()],
        )
        .unwrap();
        let (result, _) = align(a.ids(), b.ids(), 2, &GroupParams::test_256()).unwrap();
        let (a2, b2) = result.apply(&a, &b);
        assert_eq!(a2.ids(), b2.ids());
        assert_eq!(a2.ids(), ids(&["x", "z"]).as_slice());
        assert_eq!(b2.labels().unwrap(), &[1.0, 3.0]);
    }
}
