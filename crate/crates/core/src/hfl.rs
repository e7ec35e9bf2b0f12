// SPDX-License-Identifier: Apache-2.0

//! Horizontal federated learning: clients with the same feature schema and
//! disjoint samples train one linear model through a server.
//!
//! Each round a client computes an update at the current global model, masks
//! it, and sends it to the server. The server combines the round's updates
//! weighted by sample count and broadcasts the aggregate; every client applies
//! the same aggregate and so holds the same model. The local objective is
//! `(1/n)Σ(θ·x - y)² + (λ/2)‖θ‖²`, so weighting by sample count makes the
//! aggregate of full-batch gradients the pooled gradient.
//!
//! The client's loss at the global model rides along as one extra coordinate,
//! so the aggregate also carries the pooled loss and all clients reach the same
//! stopping decision.

use std::collections::HashSet;

use num_bigint::BigInt;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, Normal};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::codec::{decode_f64s, encode_f64s, Reader, Writer};
use crate::data::{dot, DatasetPartition, Matrix};
use crate::he::{self, decode_ciphertexts, encode_ciphertexts, Ciphertext, PrivateKey, PublicKey};
use crate::seed::derive_seed;
use crate::transport::{
    self, Bus, MessageEnvelope, Party, PartyId, PayloadKind, Transcript, TransportError,
};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum HflError {
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("federation schema violation: {0}")]
    Schema(String),
    #[error("no client holds any data")]
    NoClients,
    #[error("protocol error: {0}")]
    Protocol(String),
}

/// How a client hides its update from the server.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum MaskScheme {
    /// Paillier encryption under a key shared by clients only.
    Homomorphic,
    /// Fixed-point ring elements with pairwise-cancelling masks.
    Pairwise,
    /// Additive `N(0, σ²)` noise per coordinate.
    GaussianNoise { sigma: f64 },
    None,
}

impl MaskScheme {
    fn tag(self) -> u8 {
        match self {
            MaskScheme::Homomorphic => 0,
            MaskScheme::Pairwise => 1,
            MaskScheme::GaussianNoise { .. } => 2,
            MaskScheme::None => 3,
        }
    }

    /// Parses a command-line scheme name: `he`, `pairwise`, `dp` or `none`.
    pub fn parse(name: &str, sigma: f64) -> Result<Self, HflError> {
        match name {
            "he" | "homomorphic" => Ok(MaskScheme::Homomorphic),
            "pairwise" => Ok(MaskScheme::Pairwise),
            "dp" | "gaussian" => Ok(MaskScheme::GaussianNoise { sigma }),
            "none" => Ok(MaskScheme::None),
            other => Err(HflError::InvalidConfig(format!("unknown mask scheme {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UpdateMode {
    /// One full-batch gradient per round; the global model steps by `-η·ḡ`.
    Gradient,
    /// Local minibatch descent; the global model moves by the mean delta.
    ModelDelta { epochs: u32, batch_size: usize },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HflConfig {
    pub scheme: MaskScheme,
    pub mode: UpdateMode,
    pub learning_rate: f64,
    pub reg_lambda: f64,
    pub max_rounds: u32,
    pub loss_tolerance: f64,
    /// Paillier modulus size for the homomorphic scheme.
    pub key_bits: u32,
    pub fixed_point_exponent: i32,
}

impl Default for HflConfig {
    fn default() -> Self {
        Self {
            scheme: MaskScheme::None,
            mode: UpdateMode::Gradient,
            learning_rate: 0.1,
            reg_lambda: 0.0,
            max_rounds: 50,
            loss_tolerance: 1e-12,
            key_bits: 1024,
            fixed_point_exponent: he::DEFAULT_EXPONENT,
        }
    }
}

impl HflConfig {
    pub fn validate(&self) -> Result<(), HflError> {
        let bad = |m: &str| Err(HflError::InvalidConfig(m.into()));
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return bad("learning_rate must be finite and nonnegative");
        }
        if !(self.reg_lambda.is_finite() && self.reg_lambda >= 0.0) {
            return bad("reg_lambda must be finite and nonnegative");
        }
        if self.max_rounds < 1 {
            return bad("max_rounds must be at least 1");
        }
        if !(self.loss_tolerance.is_finite() && self.loss_tolerance > 0.0) {
            return bad("loss_tolerance must be positive");
        }
        if let UpdateMode::ModelDelta { epochs, batch_size } = self.mode {
            if epochs < 1 || batch_size < 1 {
                return bad("epochs and batch_size must be at least 1");
            }
        }
        if let MaskScheme::GaussianNoise { sigma } = self.scheme {
            if !(sigma.is_finite() && sigma >= 0.0) {
                return bad("noise sigma must be finite and nonnegative");
            }
        }
        Ok(())
    }
}

/// Mean squared error plus the ridge term.
pub fn local_loss(data: &DatasetPartition, model: &[f64], reg_lambda: f64) -> f64 {
    let y = data.labels().unwrap_or_default();
    let n = data.len().max(1) as f64;
    let sse: f64 = (0..data.len())
        .map(|i| {
            let r = dot(data.features().row(i), model) - y[i];
            r * r
        })
        .sum();
    sse / n + 0.5 * reg_lambda * model.iter().map(|t| t * t).sum::<f64>()
}

fn batch_gradient(x: &Matrix, y: &[f64], rows: &[usize], model: &[f64], reg_lambda: f64) -> Vec<f64> {
    let mut g = vec![0.0; model.len()];
    for &i in rows {
        let row = x.row(i);
        let r = dot(row, model) - y[i];
        for (gj, xj) in g.iter_mut().zip(row) {
            *gj += r * xj;
        }
    }
    let scale = 2.0 / rows.len() as f64;
    g.iter()
        .zip(model)
        .map(|(gj, t)| scale * gj + reg_lambda * t)
        .collect()
}

/// Exact gradient of [`local_loss`] at `model`.
pub fn local_gradient(data: &DatasetPartition, model: &[f64], reg_lambda: f64) -> Vec<f64> {
    let rows: Vec<usize> = (0..data.len()).collect();
    batch_gradient(data.features(), data.labels().unwrap_or_default(), &rows, model, reg_lambda)
}

/// The client's update at `global`: a gradient, or the model delta after
/// local minibatch descent.
pub fn client_local_update(
    data: &DatasetPartition,
    global: &[f64],
    mode: UpdateMode,
    learning_rate: f64,
    reg_lambda: f64,
    rng: &mut ChaCha20Rng,
) -> Vec<f64> {
    match mode {
        UpdateMode::Gradient => local_gradient(data, global, reg_lambda),
        UpdateMode::ModelDelta { epochs, batch_size } => {
            let y = data.labels().unwrap_or_default();
            let mut model = global.to_vec();
            let mut order: Vec<usize> = (0..data.len()).collect();
            for _ in 0..epochs {
                order.shuffle(rng);
                for batch in order.chunks(batch_size) {
                    let g = batch_gradient(data.features(), y, batch, &model, reg_lambda);
                    for (t, gj) in model.iter_mut().zip(&g) {
                        *t -= learning_rate * gj;
                    }
                }
            }
            model.iter().zip(global).map(|(m, g)| m - g).collect()
        }
    }
}

/// Bits after the binary point in the pairwise ring encoding.
pub const RING_FRACTION_BITS: i32 = 48;

pub fn ring_encode(x: f64) -> u128 {
    ((x * 2f64.powi(RING_FRACTION_BITS)).round() as i128) as u128
}

pub fn ring_decode(v: u128) -> f64 {
    (v as i128) as f64 / 2f64.powi(RING_FRACTION_BITS)
}

/// The mask shared by clients `i < j` for `round`, one ring element per
/// coordinate. Derived from `pair_secret`, which the server never sees.
pub fn pair_mask(pair_secret: u64, i: u16, j: u16, round: u32, dim: usize) -> Vec<u128> {
    let digest = Sha256::new()
        .chain_update(b"fedbench-pair-mask")
        .chain_update(pair_secret.to_be_bytes())
        .chain_update(i.to_be_bytes())
        .chain_update(j.to_be_bytes())
        .chain_update(round.to_be_bytes())
        .finalize();
    let mut rng = ChaCha20Rng::from_seed(digest.into());
    (0..dim).map(|_| rng.random()).collect()
}

/// Update payload as it travels to the server.
#[derive(Debug, Clone, PartialEq)]
pub enum UpdatePayload {
    Cipher(Vec<Ciphertext>),
    Ring(Vec<u128>),
    Real(Vec<f64>),
}

impl UpdatePayload {
    fn len(&self) -> usize {
        match self {
            UpdatePayload::Cipher(v) => v.len(),
            UpdatePayload::Ring(v) => v.len(),
            UpdatePayload::Real(v) => v.len(),
        }
    }

    fn write(&self, w: &mut Writer) {
        match self {
            UpdatePayload::Cipher(v) => {
                w.put_raw(&encode_ciphertexts(v));
            }
            UpdatePayload::Ring(v) => {
                w.put_count(v.len());
                for x in v {
                    w.put_u128(*x);
                }
            }
            UpdatePayload::Real(v) => {
                w.put_raw(&encode_f64s(v));
            }
        }
    }

    fn read(tag: u8, rest: &[u8], offset: usize) -> crate::Result<Self> {
        let decode = |e: crate::codec::DecodeError| {
            TransportError::from(crate::codec::DecodeError::new(e.offset + offset, e.reason))
        };
        match tag {
            0 => Ok(UpdatePayload::Cipher(decode_ciphertexts(rest).map_err(decode)?)),
            1 => {
                let mut r = Reader::new(rest);
                let n = r.get_count(16).map_err(decode)?;
                let v = (0..n).map(|_| r.get_u128()).collect::<Result<_, _>>().map_err(decode)?;
                r.finish().map_err(decode)?;
                Ok(UpdatePayload::Ring(v))
            }
            2 | 3 => Ok(UpdatePayload::Real(decode_f64s(rest).map_err(decode)?)),
            other => Err(HflError::Protocol(format!("unknown scheme tag {other}")).into()),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MaskedUpdate {
    pub scheme_tag: u8,
    pub round: u32,
    pub client: PartyId,
    pub sample_count: u64,
    pub payload: UpdatePayload,
}

impl MaskedUpdate {
    fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::new();
        w.put_u8(self.scheme_tag).put_u64(self.sample_count);
        self.payload.write(&mut w);
        w.into_bytes()
    }

    fn from_envelope(msg: &MessageEnvelope) -> crate::Result<Self> {
        let mut r = Reader::new(&msg.payload);
        let tag = r.get_u8().map_err(TransportError::from)?;
        let sample_count = r.get_u64().map_err(TransportError::from)?;
        let at = r.position();
        Ok(Self {
            scheme_tag: tag,
            round: msg.round,
            client: msg.sender,
            sample_count,
            payload: UpdatePayload::read(tag, &msg.payload[at..], at)?,
        })
    }
}

/// What the server broadcasts: the weighted combination of one round's
/// updates. Ciphertext and ring sums are weighted by sample count and still
/// need dividing by `total`; real payloads are already averaged.
#[derive(Debug, Clone, PartialEq)]
pub struct Aggregate {
    pub scheme_tag: u8,
    pub total: u64,
    pub payload: UpdatePayload,
}

impl Aggregate {
    fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::new();
        w.put_u8(self.scheme_tag).put_u64(self.total);
        self.payload.write(&mut w);
        w.into_bytes()
    }

    fn from_bytes(bytes: &[u8]) -> crate::Result<Self> {
        let mut r = Reader::new(bytes);
        let tag = r.get_u8().map_err(TransportError::from)?;
        let total = r.get_u64().map_err(TransportError::from)?;
        let at = r.position();
        Ok(Self {
            scheme_tag: tag,
            total,
            payload: UpdatePayload::read(tag, &bytes[at..], at)?,
        })
    }
}

fn hfl_protocol(msg: impl Into<String>) -> crate::Error {
    HflError::Protocol(msg.into()).into()
}

/// Combines one round's updates. `pk` is required for ciphertext payloads.
pub fn server_aggregate(updates: &[MaskedUpdate], pk: Option<&PublicKey>) -> crate::Result<Aggregate> {
    let first = updates.first().ok_or_else(|| hfl_protocol("no updates to aggregate"))?;
    for u in updates {
        if u.scheme_tag != first.scheme_tag || u.round != first.round {
            return Err(hfl_protocol(format!(
                "update from {} has scheme {} round {}, expected scheme {} round {}",
                u.client, u.scheme_tag, u.round, first.scheme_tag, first.round
            )));
        }
        if u.payload.len() != first.payload.len() || u.sample_count == 0 {
            return Err(hfl_protocol(format!("malformed update from {}", u.client)));
        }
    }
    let total: u64 = updates.iter().map(|u| u.sample_count).sum();
    let dim = first.payload.len();
    let payload = match &first.payload {
        UpdatePayload::Cipher(_) => {
            let pk = pk.ok_or_else(|| hfl_protocol("server needs the public key"))?;
            let mut acc: Vec<Option<Ciphertext>> = vec![None; dim];
            for u in updates {
                let UpdatePayload::Cipher(cts) = &u.payload else {
                    return Err(hfl_protocol("mixed payload types"));
                };
                let weight = BigInt::from(u.sample_count);
                for (slot, c) in acc.iter_mut().zip(cts) {
                    let weighted = pk.mul_int(c, &weight)?;
                    *slot = Some(match slot.take() {
                        None => weighted,
                        Some(prev) => pk.add_cipher(&prev, &weighted)?,
                    });
                }
            }
            UpdatePayload::Cipher(acc.into_iter().map(|c| c.expect("nonempty")).collect())
        }
        UpdatePayload::Ring(_) => {
            let mut acc = vec![0u128; dim];
            for u in updates {
                let UpdatePayload::Ring(v) = &u.payload else {
                    return Err(hfl_protocol("mixed payload types"));
                };
                for (a, x) in acc.iter_mut().zip(v) {
                    *a = a.wrapping_add(*x);
                }
            }
            UpdatePayload::Ring(acc)
        }
        UpdatePayload::Real(_) => {
            let mut acc = vec![0.0; dim];
            for u in updates {
                let UpdatePayload::Real(v) = &u.payload else {
                    return Err(hfl_protocol("mixed payload types"));
                };
                let w = u.sample_count as f64 / total as f64;
                for (a, x) in acc.iter_mut().zip(v) {
                    *a += w * x;
                }
            }
            UpdatePayload::Real(acc)
        }
    };
    Ok(Aggregate {
        scheme_tag: first.scheme_tag,
        total,
        payload,
    })
}

/// Per-round record kept by every client.
#[derive(Debug, Clone, PartialEq)]
pub struct RoundMetrics {
    pub round: u32,
    /// Pooled loss at the model the round started from.
    pub loss: f64,
    /// Global model after the round.
    pub model: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum ClientPhase {
    AwaitBroadcast,
    Done,
}

#[derive(Debug)]
pub struct HflClient {
    id: PartyId,
    /// Position in the fixed client order; drives the pairwise mask signs.
    slot: u16,
    peers: u16,
    data: DatasetPartition,
    model: Vec<f64>,
    cfg: HflConfig,
    keys: Option<(PublicKey, PrivateKey)>,
    pair_secret: u64,
    rng: ChaCha20Rng,
    round: u32,
    phase: ClientPhase,
    history: Vec<RoundMetrics>,
}

impl HflClient {
    pub fn id(&self) -> PartyId {
        self.id
    }

    pub fn model(&self) -> &[f64] {
        &self.model
    }

    pub fn history(&self) -> &[RoundMetrics] {
        &self.history
    }

    pub fn data(&self) -> &DatasetPartition {
        &self.data
    }

    /// The loss at the current model followed by the local update.
    fn raw_update(&mut self) -> Vec<f64> {
        let mut out = vec![local_loss(&self.data, &self.model, self.cfg.reg_lambda)];
        out.extend(client_local_update(
            &self.data,
            &self.model,
            self.cfg.mode,
            self.cfg.learning_rate,
            self.cfg.reg_lambda,
            &mut self.rng,
        ));
        out
    }

    /// Masks `update` per the configured scheme.
    pub fn mask_update(&mut self, update: &[f64], round: u32) -> crate::Result<MaskedUpdate> {
        let n = self.data.len() as u64;
        let payload = match self.cfg.scheme {
            MaskScheme::None => UpdatePayload::Real(update.to_vec()),
            MaskScheme::GaussianNoise { sigma } => {
                let noise = Normal::new(0.0, sigma)
                    .map_err(|e| HflError::InvalidConfig(e.to_string()))?;
                UpdatePayload::Real(update.iter().map(|u| u + noise.sample(&mut self.rng)).collect())
            }
            MaskScheme::Homomorphic => {
                let (pk, _) = self
                    .keys
                    .as_ref()
                    .ok_or_else(|| hfl_protocol("client has no encryption key"))?;
                let e = self.cfg.fixed_point_exponent;
                UpdatePayload::Cipher(
                    update
                        .iter()
                        .map(|&u| pk.encrypt_f64(u, e, &mut self.rng))
                        .collect::<Result<_, _>>()?,
                )
            }
            MaskScheme::Pairwise => {
                let mut v: Vec<u128> = update.iter().map(|&u| ring_encode(n as f64 * u)).collect();
                for other in 0..self.peers {
                    if other == self.slot {
                        continue;
                    }
                    let (lo, hi) = (self.slot.min(other), self.slot.max(other));
                    let mask = pair_mask(self.pair_secret, lo, hi, round, v.len());
                    for (x, m) in v.iter_mut().zip(mask) {
                        *x = if self.slot == lo {
                            x.wrapping_add(m)
                        } else {
                            x.wrapping_sub(m)
                        };
                    }
                }
                UpdatePayload::Ring(v)
            }
        };
        Ok(MaskedUpdate {
            scheme_tag: self.cfg.scheme.tag(),
            round,
            client: self.id,
            sample_count: n,
            payload,
        })
    }

    /// Turns a broadcast into the averaged update vector.
    pub fn unmask_aggregate(&self, agg: &Aggregate) -> crate::Result<Vec<f64>> {
        if agg.scheme_tag != self.cfg.scheme.tag() || agg.total == 0 {
            return Err(hfl_protocol("broadcast does not match the configured scheme"));
        }
        let total = agg.total as f64;
        Ok(match &agg.payload {
            UpdatePayload::Real(v) => v.clone(),
            UpdatePayload::Ring(v) => v.iter().map(|&x| ring_decode(x) / total).collect(),
            UpdatePayload::Cipher(cts) => {
                let (_, sk) = self
                    .keys
                    .as_ref()
                    .ok_or_else(|| hfl_protocol("client has no decryption key"))?;
                cts.iter()
                    .map(|c| Ok(sk.decrypt_f64(c)? / total))
                    .collect::<crate::Result<_>>()?
            }
        })
    }

    /// Applies an averaged update and records the round.
    pub fn client_apply(&mut self, averaged: &[f64], round: u32) -> crate::Result<()> {
        if averaged.len() != self.model.len() + 1 {
            return Err(hfl_protocol("aggregate has the wrong dimension"));
        }
        let (loss, update) = (averaged[0], &averaged[1..]);
        match self.cfg.mode {
            UpdateMode::Gradient => {
                for (t, g) in self.model.iter_mut().zip(update) {
                    *t -= self.cfg.learning_rate * g;
                }
            }
            UpdateMode::ModelDelta { .. } => {
                for (t, d) in self.model.iter_mut().zip(update) {
                    *t += d;
                }
            }
        }
        self.history.push(RoundMetrics {
            round,
            loss,
            model: self.model.clone(),
        });
        Ok(())
    }

    fn should_stop(&self) -> bool {
        if self.round >= self.cfg.max_rounds {
            return true;
        }
        match self.history.as_slice() {
            [.., prev, last] => {
                (last.loss - prev.loss).abs() < self.cfg.loss_tolerance * prev.loss.abs().max(1.0)
            }
            _ => false,
        }
    }

    fn send_update(&mut self) -> crate::Result<Vec<MessageEnvelope>> {
        let update = self.raw_update();
        let masked = self.mask_update(&update, self.round)?;
        Ok(vec![MessageEnvelope::new(
            self.round,
            1,
            self.id,
            PartyId::SERVER,
            PayloadKind::HflMaskedUpdate,
            masked.to_bytes(),
        )])
    }
}

impl Party for HflClient {
    fn id(&self) -> PartyId {
        self.id
    }

    fn start(&mut self) -> crate::Result<Vec<MessageEnvelope>> {
        self.send_update()
    }

    fn handle(&mut self, msg: &MessageEnvelope) -> crate::Result<Vec<MessageEnvelope>> {
        if self.phase != ClientPhase::AwaitBroadcast
            || msg.kind != PayloadKind::HflBroadcast
            || msg.sender != PartyId::SERVER
            || msg.round != self.round
        {
            return Err(hfl_protocol(format!(
                "{} got unexpected {} for round {}",
                self.id, msg.kind, msg.round
            )));
        }
        let agg = Aggregate::from_bytes(&msg.payload)?;
        let averaged = self.unmask_aggregate(&agg)?;
        self.client_apply(&averaged, self.round)?;
        let stop = self.should_stop();
        self.round += 1;
        if stop {
            // Declines the next round.
            self.phase = ClientPhase::Done;
            Ok(vec![MessageEnvelope::new(
                self.round,
                3,
                self.id,
                PartyId::SERVER,
                PayloadKind::HflStop,
                vec![],
            )])
        } else {
            self.send_update()
        }
    }

    fn is_terminal(&self) -> bool {
        self.phase == ClientPhase::Done
    }

    fn phase(&self) -> String {
        format!("{:?}@{}", self.phase, self.round)
    }
}

/// The aggregation server. Under the homomorphic scheme it holds only the
/// public key and never sees a plaintext update.
#[derive(Debug)]
pub struct HflServer {
    clients: Vec<PartyId>,
    public_key: Option<PublicKey>,
    round: u32,
    buffer: Vec<MaskedUpdate>,
    stopped: HashSet<PartyId>,
    done: bool,
    broadcasts: Vec<Aggregate>,
}

impl HflServer {
    pub fn public_key(&self) -> Option<&PublicKey> {
        self.public_key.as_ref()
    }

    /// Every aggregate this server has broadcast, in round order.
    pub fn broadcasts(&self) -> &[Aggregate] {
        &self.broadcasts
    }
}

impl Party for HflServer {
    fn id(&self) -> PartyId {
        PartyId::SERVER
    }

    fn handle(&mut self, msg: &MessageEnvelope) -> crate::Result<Vec<MessageEnvelope>> {
        if self.done || !self.clients.contains(&msg.sender) || msg.round != self.round {
            return Err(hfl_protocol(format!("server got unexpected {} from {}", msg.kind, msg.sender)));
        }
        let seen = self.buffer.iter().any(|u| u.client == msg.sender) || self.stopped.contains(&msg.sender);
        if seen {
            return Err(hfl_protocol(format!("{} sent twice in round {}", msg.sender, msg.round)));
        }
        match msg.kind {
            PayloadKind::HflMaskedUpdate => self.buffer.push(MaskedUpdate::from_envelope(msg)?),
            PayloadKind::HflStop => {
                self.stopped.insert(msg.sender);
            }
            other => return Err(hfl_protocol(format!("server got unexpected {other}"))),
        }
        if self.buffer.len() + self.stopped.len() < self.clients.len() {
            return Ok(vec![]);
        }
        if self.stopped.len() == self.clients.len() {
            self.done = true;
            return Ok(vec![]);
        }
        if !self.stopped.is_empty() {
            return Err(hfl_protocol("clients disagree on stopping"));
        }
        let updates = std::mem::take(&mut self.buffer);
        let agg = server_aggregate(&updates, self.public_key.as_ref())?;
        let bytes = agg.to_bytes();
        self.broadcasts.push(agg);
        let out = self
            .clients
            .iter()
            .map(|&c| {
                MessageEnvelope::new(self.round, 2, PartyId::SERVER, c, PayloadKind::HflBroadcast, bytes.clone())
            })
            .collect();
        self.round += 1;
        Ok(out)
    }

    fn is_terminal(&self) -> bool {
        self.done
    }

    fn phase(&self) -> String {
        format!(
            "round {} with {} updates and {} stops of {}",
            self.round,
            self.buffer.len(),
            self.stopped.len(),
            self.clients.len()
        )
    }
}

/// Checks that partitions share one schema and have pairwise-disjoint ids.
pub fn check_federation(parts: &[DatasetPartition]) -> Result<(), HflError> {
    let Some(first) = parts.first() else {
        return Err(HflError::NoClients);
    };
    let mut seen = HashSet::new();
    for (k, p) in parts.iter().enumerate() {
        if p.feature_names() != first.feature_names() {
            return Err(HflError::Schema(format!(
                "client {k} has features {:?}, expected {:?}",
                p.feature_names(),
                first.feature_names()
            )));
        }
        if p.labels().is_none() {
            return Err(HflError::Schema(format!("client {k} holds no labels")));
        }
        for id in p.ids() {
            if !seen.insert(id) {
                return Err(HflError::Schema(format!("sample {id} appears at more than one client")));
            }
        }
    }
    Ok(())
}

/// Clients plus server, ready to run.
#[derive(Debug)]
pub struct Federation {
    pub clients: Vec<HflClient>,
    pub server: HflServer,
    /// Indices of input partitions that held no samples and sat out.
    pub skipped: Vec<usize>,
}

impl Federation {
    pub fn new(parts: &[DatasetPartition], cfg: &HflConfig, seed: u64) -> crate::Result<Self> {
        cfg.validate()?;
        check_federation(parts)?;
        if parts.len() > PartyId::MAX_INSTANCE as usize + 1 {
            return Err(HflError::InvalidConfig("too many clients".into()).into());
        }
        let skipped: Vec<usize> = (0..parts.len()).filter(|&k| parts[k].is_empty()).collect();
        let active: Vec<usize> = (0..parts.len()).filter(|&k| !parts[k].is_empty()).collect();
        if active.is_empty() {
            return Err(HflError::NoClients.into());
        }
        let keys = match cfg.scheme {
            MaskScheme::Homomorphic => Some(he::keygen(cfg.key_bits, derive_seed(seed, "hfl-keygen"))?),
            _ => None,
        };
        let pair_secret = derive_seed(seed, "hfl-pair-secret");
        let dim = parts[active[0]].n_features();
        let clients = active
            .iter()
            .enumerate()
            .map(|(slot, &k)| {
                let id = PartyId::client(k as u16);
                HflClient {
                    id,
                    slot: slot as u16,
                    peers: active.len() as u16,
                    data: parts[k].clone(),
                    model: vec![0.0; dim],
                    cfg: *cfg,
                    keys: keys.clone(),
                    pair_secret,
                    rng: ChaCha20Rng::seed_from_u64(derive_seed(seed, &format!("hfl-{id}"))),
                    round: 1,
                    phase: ClientPhase::AwaitBroadcast,
                    history: Vec::new(),
                }
            })
            .collect::<Vec<_>>();
        let server = HflServer {
            clients: clients.iter().map(|c| c.id).collect(),
            public_key: keys.map(|(pk, _)| pk),
            round: 1,
            buffer: Vec::new(),
            stopped: HashSet::new(),
            done: false,
            broadcasts: Vec::new(),
        };
        Ok(Self {
            clients,
            server,
            skipped,
        })
    }

    /// Runs rounds until the stopping rule fires.
    pub fn run(&mut self, seed: u64) -> crate::Result<Transcript> {
        let budget = (self.clients.len() * 3 + 4) * self.clients[0].cfg.max_rounds as usize + 16;
        let mut parties: Vec<&mut dyn Party> = Vec::with_capacity(self.clients.len() + 1);
        parties.push(&mut self.server);
        for c in &mut self.clients {
            parties.push(c);
        }
        transport::run_protocol(&mut parties, Bus::new(seed), budget)
    }

    /// The shared model (every client holds the same one).
    pub fn global_model(&self) -> &[f64] {
        self.clients[0].model()
    }

    pub fn history(&self) -> &[RoundMetrics] {
        self.clients[0].history()
    }
}

#[derive(Debug)]
pub struct HflOutcome {
    pub federation: Federation,
    pub transcript: Transcript,
}

impl HflOutcome {
    pub fn global_model(&self) -> &[f64] {
        self.federation.global_model()
    }

    pub fn history(&self) -> &[RoundMetrics] {
        self.federation.history()
    }

    pub fn rounds(&self) -> usize {
        self.history().len()
    }
}

pub fn train_rounds(parts: &[DatasetPartition], cfg: &HflConfig, seed: u64) -> crate::Result<HflOutcome> {
    let mut federation = Federation::new(parts, cfg, seed)?;
    let transcript = federation.run(seed)?;
    Ok(HflOutcome {
        federation,
        transcript,
    })
}
