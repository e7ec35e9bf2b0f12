// SPDX-License-Identifier: Apache-2.0

//! Three-party vertical federated linear regression.
//!
//! Party A holds features `x^A`, party B holds features `x^B` and labels `y`
//! for the same aligned samples, and coordinator C holds the Paillier key.
//! One training round:
//!
//! 1. C distributes its public key (first round only).
//! 2. A sends `[[u^A]]` and `[[L_A]]` to B. B forms `[[d]] = [[u^A]] + [[u^B - y]]`
//!    and the total loss `[[L]]`, sends `[[d]]` to A and `[[L]]` to C.
//! 3. A and B each send `Σ[[d_i]]x_i + [[λΘ]] + [[R]]` to C. C decrypts the
//!    loss and the masked gradients and returns the latter, then broadcasts
//!    whether to stop.
//! 4. A and B remove their masks and step `Θ ← Θ - η·g`.
//!
//! The gradients are those of `½Σd_i² + (λ/2)‖Θ‖²`; the reported loss is
//! `Σd_i² + (λ/2)‖Θ‖²`. Inference sends plaintext partial scores to C.

use std::collections::HashMap;

use num_bigint::{BigInt, BigUint};
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::codec::{decode_f64s, encode_f64s, Reader, Writer};
use crate::data::{DatasetPartition, EntityId};
use crate::he::{
    self, arith, batch_exponent, decode_ciphertexts, decode_numbers, encode_ciphertexts,
    encode_numbers, scaled_to_f64, Ciphertext, EncodedNumber, PrivateKey, PublicKey,
};
use crate::seed::derive_seed;
use crate::transport::{self, Bus, MessageEnvelope, Party, PartyId, PayloadKind, Transcript};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum VflError {
    #[error("invalid hyperparameters: {0}")]
    InvalidHyperparams(String),
    #[error("invalid dataset: {0}")]
    InvalidDataset(String),
    #[error("safety guard refused to start: {0}")]
    SafetyGuard(String),
    #[error("protocol error: {0}")]
    Protocol(String),
    #[error("{party} holds no record for a requested entity")]
    MissingEntity { party: PartyId },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Hyperparams {
    pub learning_rate: f64,
    pub reg_lambda: f64,
    pub max_iters: u32,
    pub loss_tolerance: f64,
    /// Base-16 exponent at which ciphertext values are encoded.
    pub fixed_point_exponent: i32,
}

impl Default for Hyperparams {
    fn default() -> Self {
        Self {
            learning_rate: 0.05,
            reg_lambda: 0.1,
            max_iters: 200,
            loss_tolerance: 1e-9,
            fixed_point_exponent: he::DEFAULT_EXPONENT,
        }
    }
}

impl Hyperparams {
    pub fn validate(&self) -> Result<(), VflError> {
        let bad = |m: &str| Err(VflError::InvalidHyperparams(m.into()));
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return bad("learning_rate must be finite and nonnegative");
        }
        if !(self.reg_lambda.is_finite() && self.reg_lambda >= 0.0) {
            return bad("reg_lambda must be finite and nonnegative");
        }
        if self.max_iters < 1 {
            return bad("max_iters must be at least 1");
        }
        if !(self.loss_tolerance.is_finite() && self.loss_tolerance > 0.0) {
            return bad("loss_tolerance must be positive");
        }
        if self.fixed_point_exponent > 0 {
            return bad("fixed_point_exponent must not be positive");
        }
        Ok(())
    }

    /// Coordinator's stopping rule after recording `current`.
    pub fn should_stop(&self, round: u32, previous: Option<f64>, current: f64) -> bool {
        if round >= self.max_iters {
            return true;
        }
        previous.is_some_and(|prev| {
            (current - prev).abs() < self.loss_tolerance * prev.abs().max(1.0)
        })
    }
}

/// Refuses datasets whose shape would let the coordinator solve for raw
/// inputs: no more samples than features, or a feature column with a single
/// nonzero entry.
pub fn safety_guard(data: &DatasetPartition) -> Result<(), VflError> {
    let (rows, cols) = (data.len(), data.n_features());
    if rows <= cols {
        return Err(VflError::SafetyGuard(format!(
            "{rows} samples for {cols} features leaves the system underdetermined"
        )));
    }
    for (j, name) in data.feature_names().iter().enumerate() {
        if data.features().column(j).filter(|&v| v != 0.0).count() == 1 {
            return Err(VflError::SafetyGuard(format!(
                "feature {name} has exactly one nonzero entry"
            )));
        }
    }
    Ok(())
}

fn protocol(msg: impl Into<String>) -> crate::Error {
    VflError::Protocol(msg.into()).into()
}

fn unexpected(party: PartyId, phase: &str, msg: &MessageEnvelope) -> crate::Error {
    protocol(format!(
        "{party} got {} from {} for round {} while in {phase}",
        msg.kind, msg.sender, msg.round
    ))
}

fn encrypt_all(
    pk: &PublicKey,
    values: &[f64],
    exponent: i32,
    rng: &mut ChaCha20Rng,
) -> crate::Result<Vec<Ciphertext>> {
    Ok(values
        .iter()
        .map(|&v| pk.encrypt_f64(v, exponent, rng))
        .collect::<Result<_, _>>()?)
}

fn encode_all(pk: &PublicKey, values: &[f64], exponent: i32) -> crate::Result<Vec<EncodedNumber>> {
    Ok(values
        .iter()
        .map(|&v| pk.encode(v, exponent))
        .collect::<Result<_, _>>()?)
}

#[derive(Debug)]
struct KeyState {
    pk: PublicKey,
    /// Feature columns encoded as plaintext multipliers, one exponent per column.
    columns: Vec<Vec<EncodedNumber>>,
}

#[derive(Debug)]
struct PendingMask {
    round: u32,
    values: Vec<BigInt>,
}

/// State shared by A and B: local features, local parameters and the mask
/// for the gradient currently out for decryption.
#[derive(Debug)]
struct Learner {
    id: PartyId,
    data: DatasetPartition,
    index: HashMap<EntityId, usize>,
    theta: Vec<f64>,
    hp: Hyperparams,
    rng: ChaCha20Rng,
    key: Option<KeyState>,
    mask: Option<PendingMask>,
    zero_mask: bool,
    gradients: Vec<Vec<f64>>,
}

impl Learner {
    fn new(id: PartyId, data: DatasetPartition, hp: Hyperparams, seed: u64) -> Self {
        let index = row_index(&data);
        Self {
            id,
            theta: vec![0.0; data.n_features()],
            index,
            data,
            hp,
            rng: ChaCha20Rng::seed_from_u64(derive_seed(seed, &format!("vfl-{id}"))),
            key: None,
            mask: None,
            zero_mask: false,
            gradients: Vec::new(),
        }
    }

    fn install_key(&mut self, pk: PublicKey) -> crate::Result<()> {
        let floor = self.hp.fixed_point_exponent;
        let columns = (0..self.data.n_features())
            .map(|j| {
                let col: Vec<f64> = self.data.features().column(j).collect();
                encode_all(&pk, &col, batch_exponent(col.iter().copied(), floor))
            })
            .collect::<crate::Result<_>>()?;
        self.key = Some(KeyState { pk, columns });
        Ok(())
    }

    fn key(&self) -> crate::Result<&KeyState> {
        self.key
            .as_ref()
            .ok_or_else(|| protocol(format!("{} has not received the public key", self.id)))
    }

    fn scores(&self) -> Vec<f64> {
        self.data.features().mul_vec(&self.theta)
    }

    fn regularizer(&self) -> f64 {
        0.5 * self.hp.reg_lambda * self.theta.iter().map(|t| t * t).sum::<f64>()
    }

    fn sample_mask(&mut self, pk: &PublicKey) -> BigInt {
        if self.zero_mask {
            return BigInt::default();
        }
        let bound: BigUint = pk.modulus() / 6u32;
        let width = &bound * 2u32 + 1u32;
        BigInt::from(arith::random_below(&width, &mut self.rng)) - BigInt::from(bound)
    }

    /// `Σ[[d_i]]x_i + [[λΘ]] + [[R]]` per coordinate; remembers `R`.
    fn masked_gradient(&mut self, d: &[Ciphertext], round: u32) -> crate::Result<Vec<Ciphertext>> {
        if d.len() != self.data.len() {
            return Err(protocol(format!(
                "{} got {} residuals for {} samples",
                self.id,
                d.len(),
                self.data.len()
            )));
        }
        let key = self.key.take().ok_or_else(|| {
            protocol(format!("{} has not received the public key", self.id))
        })?;
        let result = self.masked_gradient_with(&key, d, round);
        self.key = Some(key);
        result
    }

    fn masked_gradient_with(
        &mut self,
        key: &KeyState,
        d: &[Ciphertext],
        round: u32,
    ) -> crate::Result<Vec<Ciphertext>> {
        let pk = &key.pk;
        let mut out = Vec::with_capacity(self.theta.len());
        let mut masks = Vec::with_capacity(self.theta.len());
        for (j, column) in key.columns.iter().enumerate() {
            let g = pk.dot(d, column)?;
            let reg = pk.encode(self.hp.reg_lambda * self.theta[j], g.exponent())?;
            let r = self.sample_mask(pk);
            let mask = pk.encode_int(&r, g.exponent())?;
            let g = pk.add_cipher(&g, &pk.encrypt(&reg, &mut self.rng)?)?;
            out.push(pk.add_cipher(&g, &pk.encrypt(&mask, &mut self.rng)?)?);
            masks.push(r);
        }
        self.mask = Some(PendingMask {
            round,
            values: masks,
        });
        Ok(out)
    }

    /// Removes the mask from C's reply and takes one gradient step. Returns
    /// the unmasked gradient.
    fn apply_reply(&mut self, reply: &[EncodedNumber], round: u32) -> crate::Result<Vec<f64>> {
        let mask = self
            .mask
            .take()
            .ok_or_else(|| protocol(format!("{} has no outstanding mask", self.id)))?;
        if mask.round != round || reply.len() != mask.values.len() {
            return Err(protocol(format!(
                "{} reply for round {round} with {} entries does not match mask for round {}",
                self.id,
                reply.len(),
                mask.round
            )));
        }
        let pk = &self.key()?.pk;
        let mut grad = Vec::with_capacity(reply.len());
        for (value, r) in reply.iter().zip(&mask.values) {
            let unmasked = pk.signed_mantissa(value)? - r;
            grad.push(scaled_to_f64(&unmasked, value.exponent()));
        }
        for (t, g) in self.theta.iter_mut().zip(&grad) {
            *t -= self.hp.learning_rate * g;
        }
        self.gradients.push(grad.clone());
        Ok(grad)
    }

    fn set_theta(&mut self, theta: Vec<f64>) -> crate::Result<()> {
        if theta.len() != self.data.n_features() || theta.iter().any(|t| !t.is_finite()) {
            return Err(VflError::InvalidHyperparams(format!(
                "{} needs {} finite starting coefficients",
                self.id,
                self.data.n_features()
            ))
            .into());
        }
        self.theta = theta;
        Ok(())
    }

    fn serve(&mut self, data: DatasetPartition) -> crate::Result<()> {
        if data.feature_names() != self.data.feature_names() {
            return Err(VflError::InvalidDataset(format!(
                "{} cannot serve records with a different feature schema",
                self.id
            ))
            .into());
        }
        self.index = row_index(&data);
        self.data = data;
        Ok(())
    }

    fn predict_share(&self, msg: &MessageEnvelope) -> crate::Result<MessageEnvelope> {
        let ids = decode_ids(&msg.payload)?;
        let mut shares = Vec::with_capacity(ids.len());
        for id in &ids {
            let &row = self
                .index
                .get(id)
                .ok_or(VflError::MissingEntity { party: self.id })?;
            shares.push(crate::data::dot(self.data.features().row(row), &self.theta));
        }
        Ok(MessageEnvelope::new(
            msg.round,
            2,
            self.id,
            msg.sender,
            PayloadKind::VflPredictShare,
            encode_f64s(&shares),
        ))
    }
}

fn row_index(data: &DatasetPartition) -> HashMap<EntityId, usize> {
    data.ids().iter().enumerate().map(|(i, id)| (id.clone(), i)).collect()
}

fn decode_key(msg: &MessageEnvelope) -> crate::Result<PublicKey> {
    Ok(PublicKey::from_bytes(&msg.payload).map_err(crate::he::HeError::from)?)
}

fn stop_flag(msg: &MessageEnvelope) -> crate::Result<bool> {
    match msg.payload.as_slice() {
        [0] => Ok(false),
        [1] => Ok(true),
        _ => Err(protocol("malformed stop flag")),
    }
}

fn encode_ids(ids: &[EntityId]) -> Vec<u8> {
    let mut w = Writer::new();
    w.put_count(ids.len());
    for id in ids {
        w.put_bytes(id.as_bytes());
    }
    w.into_bytes()
}

fn decode_ids(bytes: &[u8]) -> crate::Result<Vec<EntityId>> {
    let mut r = Reader::new(bytes);
    let count = r.get_count(4).map_err(crate::transport::TransportError::from)?;
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let raw = r.get_bytes().map_err(crate::transport::TransportError::from)?;
        out.push(EntityId::new(raw));
    }
    r.finish().map_err(crate::transport::TransportError::from)?;
    Ok(out)
}

fn ciphertexts(msg: &MessageEnvelope) -> crate::Result<Vec<Ciphertext>> {
    Ok(decode_ciphertexts(&msg.payload).map_err(crate::he::HeError::from)?)
}

fn ciphertext(msg: &MessageEnvelope) -> crate::Result<Ciphertext> {
    Ok(Ciphertext::from_bytes(&msg.payload).map_err(crate::he::HeError::from)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum PhaseA {
    AwaitKey,
    AwaitD,
    AwaitReply,
    AwaitStop,
    Done,
}

/// Party A: features only.
#[derive(Debug)]
pub struct PartyA {
    learner: Learner,
    phase: PhaseA,
    round: u32,
}

impl PartyA {
    pub fn new(data: DatasetPartition, hp: Hyperparams, seed: u64) -> crate::Result<Self> {
        if data.labels().is_some() {
            return Err(VflError::InvalidDataset("party A must not hold labels".into()).into());
        }
        hp.validate()?;
        Ok(Self {
            learner: Learner::new(PartyId::A, data, hp, seed),
            phase: PhaseA::AwaitKey,
            round: 1,
        })
    }

    /// Replaces the gradient masks with zero, exposing raw gradients to C.
    pub fn with_zero_mask(mut self) -> Self {
        self.learner.zero_mask = true;
        self
    }

    /// Starts training from `theta` instead of zero.
    pub fn with_theta(mut self, theta: Vec<f64>) -> crate::Result<Self> {
        self.learner.set_theta(theta)?;
        Ok(self)
    }

    pub fn theta(&self) -> &[f64] {
        &self.learner.theta
    }

    pub fn data(&self) -> &DatasetPartition {
        &self.learner.data
    }

    /// Replaces the records answered at inference time, for example with a
    /// holdout set. The trained coefficients are kept.
    pub fn serve(&mut self, data: DatasetPartition) -> crate::Result<()> {
        if !self.is_terminal() {
            return Err(protocol("records can be replaced only after training"));
        }
        self.learner.serve(data)
    }

    /// Unmasked gradients, one entry per completed round.
    pub fn gradient_history(&self) -> &[Vec<f64>] {
        &self.learner.gradients
    }

    pub fn install_key(&mut self, pk: PublicKey) -> crate::Result<()> {
        self.learner.install_key(pk)
    }

    /// `[[u_i^A]]` per sample and `[[L_A]]` with `L_A = Σ(u_i^A)² + (λ/2)‖Θ_A‖²`.
    pub fn step2(&mut self) -> crate::Result<(Vec<Ciphertext>, Ciphertext)> {
        let e0 = self.learner.hp.fixed_point_exponent;
        let u = self.learner.scores();
        let loss = u.iter().map(|v| v * v).sum::<f64>() + self.learner.regularizer();
        let key = self.learner.key()?;
        let pk = key.pk.clone();
        let u_enc = encrypt_all(&pk, &u, e0, &mut self.learner.rng)?;
        let loss_enc = pk.encrypt_f64(loss, e0, &mut self.learner.rng)?;
        Ok((u_enc, loss_enc))
    }

    /// Masked `[[∂L/∂Θ_A]] = Σ[[d_i]]x_i^A + [[λΘ_A]] + [[R_A]]`.
    pub fn step3(&mut self, d: &[Ciphertext]) -> crate::Result<Vec<Ciphertext>> {
        self.learner.masked_gradient(d, self.round)
    }

    /// Unmasks C's reply and updates `Θ_A`.
    pub fn step4(&mut self, reply: &[EncodedNumber]) -> crate::Result<Vec<f64>> {
        self.learner.apply_reply(reply, self.round)
    }

    fn send_step2(&mut self) -> crate::Result<Vec<MessageEnvelope>> {
        let (u, loss) = self.step2()?;
        self.phase = PhaseA::AwaitD;
        Ok(vec![
            MessageEnvelope::new(
                self.round,
                2,
                PartyId::A,
                PartyId::B,
                PayloadKind::VflUaBatch,
                encode_ciphertexts(&u),
            ),
            MessageEnvelope::new(
                self.round,
                2,
                PartyId::A,
                PartyId::B,
                PayloadKind::VflLossA,
                loss.to_bytes(),
            ),
        ])
    }
}

impl Party for PartyA {
    fn id(&self) -> PartyId {
        PartyId::A
    }

    fn handle(&mut self, msg: &MessageEnvelope) -> crate::Result<Vec<MessageEnvelope>> {
        let current = msg.round == self.round;
        match (self.phase, msg.kind) {
            (PhaseA::AwaitKey, PayloadKind::PkDistribution) if msg.sender == PartyId::C => {
                self.install_key(decode_key(msg)?)?;
                self.send_step2()
            }
            (PhaseA::AwaitD, PayloadKind::VflDBatch) if current && msg.sender == PartyId::B => {
                let grad = self.step3(&ciphertexts(msg)?)?;
                self.phase = PhaseA::AwaitReply;
                Ok(vec![MessageEnvelope::new(
                    self.round,
                    3,
                    PartyId::A,
                    PartyId::C,
                    PayloadKind::VflMaskedGrad,
                    encode_ciphertexts(&grad),
                )])
            }
            (PhaseA::AwaitReply, PayloadKind::VflGradReply)
                if current && msg.sender == PartyId::C =>
            {
                let reply = decode_numbers(&msg.payload).map_err(he::HeError::from)?;
                self.step4(&reply)?;
                self.phase = PhaseA::AwaitStop;
                Ok(vec![])
            }
            (PhaseA::AwaitStop, PayloadKind::VflStop) if current && msg.sender == PartyId::C => {
                if stop_flag(msg)? {
                    self.phase = PhaseA::Done;
                    Ok(vec![])
                } else {
                    self.round += 1;
                    self.send_step2()
                }
            }
            (PhaseA::Done, PayloadKind::VflPredictRequest) => {
                Ok(vec![self.learner.predict_share(msg)?])
            }
            _ => Err(unexpected(PartyId::A, &self.phase(), msg)),
        }
    }

    fn is_terminal(&self) -> bool {
        self.phase == PhaseA::Done
    }

    fn phase(&self) -> String {
        format!("{:?}@{}", self.phase, self.round)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum PhaseB {
    AwaitKey,
    AwaitShares,
    AwaitReply,
    AwaitStop,
    Done,
}

/// Party B: features and labels.
#[derive(Debug)]
pub struct PartyB {
    learner: Learner,
    labels: Vec<f64>,
    phase: PhaseB,
    round: u32,
    u_a: Option<Vec<Ciphertext>>,
    loss_a: Option<Ciphertext>,
}

impl PartyB {
    pub fn new(data: DatasetPartition, hp: Hyperparams, seed: u64) -> crate::Result<Self> {
        let labels = data
            .labels()
            .ok_or_else(|| VflError::InvalidDataset("party B must hold labels".into()))?
            .to_vec();
        hp.validate()?;
        Ok(Self {
            learner: Learner::new(PartyId::B, data, hp, seed),
            labels,
            phase: PhaseB::AwaitKey,
            round: 1,
            u_a: None,
            loss_a: None,
        })
    }

    pub fn with_zero_mask(mut self) -> Self {
        self.learner.zero_mask = true;
        self
    }

    /// Starts training from `theta` instead of zero.
    pub fn with_theta(mut self, theta: Vec<f64>) -> crate::Result<Self> {
        self.learner.set_theta(theta)?;
        Ok(self)
    }

    pub fn theta(&self) -> &[f64] {
        &self.learner.theta
    }

    pub fn data(&self) -> &DatasetPartition {
        &self.learner.data
    }

    /// Replaces the records answered at inference time, for example with a
    /// holdout set. The trained coefficients are kept.
    pub fn serve(&mut self, data: DatasetPartition) -> crate::Result<()> {
        if !self.is_terminal() {
            return Err(protocol("records can be replaced only after training"));
        }
        self.learner.serve(data)
    }

    pub fn gradient_history(&self) -> &[Vec<f64>] {
        &self.learner.gradients
    }

    pub fn install_key(&mut self, pk: PublicKey) -> crate::Result<()> {
        self.learner.install_key(pk)
    }

    /// Returns `[[d]]` for A and `[[L]]` for C, where
    /// `L = L_A + L_B + 2Σ[[u_i^A]](u_i^B - y_i)`.
    pub fn step2(
        &mut self,
        u_a: &[Ciphertext],
        loss_a: &Ciphertext,
    ) -> crate::Result<(Vec<Ciphertext>, Ciphertext)> {
        if u_a.len() != self.labels.len() {
            return Err(protocol(format!(
                "B got {} scores for {} samples",
                u_a.len(),
                self.labels.len()
            )));
        }
        let e0 = self.learner.hp.fixed_point_exponent;
        let residual: Vec<f64> = self
            .learner
            .scores()
            .iter()
            .zip(&self.labels)
            .map(|(u, y)| u - y)
            .collect();
        let loss_b = residual.iter().map(|r| r * r).sum::<f64>() + self.learner.regularizer();
        let pk = self.learner.key()?.pk.clone();
        let rng = &mut self.learner.rng;

        let r_enc = encrypt_all(&pk, &residual, e0, rng)?;
        let d = u_a
            .iter()
            .zip(&r_enc)
            .map(|(a, b)| pk.add_cipher(a, b))
            .collect::<Result<Vec<_>, _>>()?;

        let twice: Vec<f64> = residual.iter().map(|r| 2.0 * r).collect();
        let scalars = encode_all(&pk, &twice, batch_exponent(twice.iter().copied(), e0))?;
        let cross = if u_a.is_empty() {
            pk.encrypt_f64(0.0, e0, rng)?
        } else {
            pk.dot(u_a, &scalars)?
        };
        let loss_b = pk.encrypt_f64(loss_b, cross.exponent(), rng)?;
        let total = pk.add_cipher(&pk.add_cipher(&cross, loss_a)?, &loss_b)?;
        Ok((d, total))
    }

    /// Masked `[[∂L/∂Θ_B]] = Σ[[d_i]]x_i^B + [[λΘ_B]] + [[R_B]]`.
    pub fn step3(&mut self, d: &[Ciphertext]) -> crate::Result<Vec<Ciphertext>> {
        self.learner.masked_gradient(d, self.round)
    }

    pub fn step4(&mut self, reply: &[EncodedNumber]) -> crate::Result<Vec<f64>> {
        self.learner.apply_reply(reply, self.round)
    }

    fn try_step2(&mut self) -> crate::Result<Vec<MessageEnvelope>> {
        if self.u_a.is_none() || self.loss_a.is_none() {
            return Ok(vec![]);
        }
        let u_a = self.u_a.take().expect("checked");
        let loss_a = self.loss_a.take().expect("checked");
        let (d, total) = self.step2(&u_a, &loss_a)?;
        let grad = self.step3(&d)?;
        self.phase = PhaseB::AwaitReply;
        let r = self.round;
        Ok(vec![
            MessageEnvelope::new(
                r,
                2,
                PartyId::B,
                PartyId::A,
                PayloadKind::VflDBatch,
                encode_ciphertexts(&d),
            ),
            MessageEnvelope::new(
                r,
                2,
                PartyId::B,
                PartyId::C,
                PayloadKind::VflLossTotal,
                total.to_bytes(),
            ),
            MessageEnvelope::new(
                r,
                3,
                PartyId::B,
                PartyId::C,
                PayloadKind::VflMaskedGrad,
                encode_ciphertexts(&grad),
            ),
        ])
    }
}

impl Party for PartyB {
    fn id(&self) -> PartyId {
        PartyId::B
    }

    fn handle(&mut self, msg: &MessageEnvelope) -> crate::Result<Vec<MessageEnvelope>> {
        let current = msg.round == self.round;
        match (self.phase, msg.kind) {
            (PhaseB::AwaitKey, PayloadKind::PkDistribution) if msg.sender == PartyId::C => {
                self.install_key(decode_key(msg)?)?;
                self.phase = PhaseB::AwaitShares;
                Ok(vec![])
            }
            (PhaseB::AwaitShares, PayloadKind::VflUaBatch)
                if current && msg.sender == PartyId::A && self.u_a.is_none() =>
            {
                self.u_a = Some(ciphertexts(msg)?);
                self.try_step2()
            }
            (PhaseB::AwaitShares, PayloadKind::VflLossA)
                if current && msg.sender == PartyId::A && self.loss_a.is_none() =>
            {
                self.loss_a = Some(ciphertext(msg)?);
                self.try_step2()
            }
            (PhaseB::AwaitReply, PayloadKind::VflGradReply)
                if current && msg.sender == PartyId::C =>
            {
                let reply = decode_numbers(&msg.payload).map_err(he::HeError::from)?;
                self.step4(&reply)?;
                self.phase = PhaseB::AwaitStop;
                Ok(vec![])
            }
            (PhaseB::AwaitStop, PayloadKind::VflStop) if current && msg.sender == PartyId::C => {
                if stop_flag(msg)? {
                    self.phase = PhaseB::Done;
                } else {
                    self.round += 1;
                    self.phase = PhaseB::AwaitShares;
                }
                Ok(vec![])
            }
            (PhaseB::Done, PayloadKind::VflPredictRequest) => {
                Ok(vec![self.learner.predict_share(msg)?])
            }
            _ => Err(unexpected(PartyId::B, &self.phase(), msg)),
        }
    }

    fn is_terminal(&self) -> bool {
        self.phase == PhaseB::Done
    }

    fn phase(&self) -> String {
        format!("{:?}@{}", self.phase, self.round)
    }
}

/// Coordinator C: key holder, loss bookkeeping and stopping decision.
#[derive(Debug)]
pub struct Coordinator {
    pk: PublicKey,
    sk: PrivateKey,
    hp: Hyperparams,
    round: u32,
    loss_history: Vec<f64>,
    loss: Option<Ciphertext>,
    grad_a: Option<Vec<Ciphertext>>,
    grad_b: Option<Vec<Ciphertext>>,
    done: bool,
}

impl Coordinator {
    pub fn new(hp: Hyperparams, key_bits: u32, seed: u64) -> crate::Result<Self> {
        hp.validate()?;
        let (pk, sk) = he::keygen(key_bits, derive_seed(seed, "vfl-keygen"))?;
        Ok(Self::with_keypair(hp, pk, sk))
    }

    pub fn with_keypair(hp: Hyperparams, pk: PublicKey, sk: PrivateKey) -> Self {
        Self {
            pk,
            sk,
            hp,
            round: 1,
            loss_history: Vec::new(),
            loss: None,
            grad_a: None,
            grad_b: None,
            done: false,
        }
    }

    pub fn public_key(&self) -> &PublicKey {
        &self.pk
    }

    pub fn private_key(&self) -> &PrivateKey {
        &self.sk
    }

    /// Decrypted loss, one entry per completed round.
    pub fn loss_history(&self) -> &[f64] {
        &self.loss_history
    }

    /// Decrypts the round's loss and masked gradients. Returns the replies
    /// for A and B and the stop decision.
    pub fn step3(
        &mut self,
        loss: &Ciphertext,
        grad_a: &[Ciphertext],
        grad_b: &[Ciphertext],
    ) -> crate::Result<(Vec<EncodedNumber>, Vec<EncodedNumber>, bool)> {
        let value = self.sk.decrypt_f64(loss)?;
        let previous = self.loss_history.last().copied();
        self.loss_history.push(value);
        let decrypt = |cts: &[Ciphertext]| -> crate::Result<Vec<EncodedNumber>> {
            Ok(cts
                .iter()
                .map(|c| self.sk.decrypt(c))
                .collect::<Result<_, _>>()?)
        };
        let reply_a = decrypt(grad_a)?;
        let reply_b = decrypt(grad_b)?;
        Ok((reply_a, reply_b, self.hp.should_stop(self.round, previous, value)))
    }

    fn try_step3(&mut self) -> crate::Result<Vec<MessageEnvelope>> {
        if self.loss.is_none() || self.grad_a.is_none() || self.grad_b.is_none() {
            return Ok(vec![]);
        }
        let loss = self.loss.take().expect("checked");
        let grad_a = self.grad_a.take().expect("checked");
        let grad_b = self.grad_b.take().expect("checked");
        let (reply_a, reply_b, stop) = self.step3(&loss, &grad_a, &grad_b)?;
        let r = self.round;
        let flag = vec![u8::from(stop)];
        let c = PartyId::C;
        let out = vec![
            MessageEnvelope::new(r, 3, c, PartyId::A, PayloadKind::VflGradReply, encode_numbers(&reply_a)),
            MessageEnvelope::new(r, 3, c, PartyId::B, PayloadKind::VflGradReply, encode_numbers(&reply_b)),
            MessageEnvelope::new(r, 3, c, PartyId::A, PayloadKind::VflStop, flag.clone()),
            MessageEnvelope::new(r, 3, c, PartyId::B, PayloadKind::VflStop, flag),
        ];
        if stop {
            self.done = true;
        } else {
            self.round += 1;
        }
        Ok(out)
    }
}

impl Party for Coordinator {
    fn id(&self) -> PartyId {
        PartyId::C
    }

    fn start(&mut self) -> crate::Result<Vec<MessageEnvelope>> {
        let key = self.pk.to_bytes();
        Ok([PartyId::A, PartyId::B]
            .into_iter()
            .map(|to| MessageEnvelope::new(0, 1, PartyId::C, to, PayloadKind::PkDistribution, key.clone()))
            .collect())
    }

    fn handle(&mut self, msg: &MessageEnvelope) -> crate::Result<Vec<MessageEnvelope>> {
        if self.done || msg.round != self.round {
            return Err(unexpected(PartyId::C, &self.phase(), msg));
        }
        match (msg.kind, msg.sender) {
            (PayloadKind::VflLossTotal, PartyId::B) if self.loss.is_none() => {
                self.loss = Some(ciphertext(msg)?);
            }
            (PayloadKind::VflMaskedGrad, PartyId::A) if self.grad_a.is_none() => {
                self.grad_a = Some(ciphertexts(msg)?);
            }
            (PayloadKind::VflMaskedGrad, PartyId::B) if self.grad_b.is_none() => {
                self.grad_b = Some(ciphertexts(msg)?);
            }
            _ => return Err(unexpected(PartyId::C, &self.phase(), msg)),
        }
        self.try_step3()
    }

    fn is_terminal(&self) -> bool {
        self.done
    }

    fn phase(&self) -> String {
        let got = |b: bool| if b { "+" } else { "-" };
        format!(
            "round {} loss{} gradA{} gradB{}",
            self.round,
            got(self.loss.is_some()),
            got(self.grad_a.is_some()),
            got(self.grad_b.is_some())
        )
    }
}

/// Builds the three parties for a training run without starting it.
pub fn parties(
    data_a: &DatasetPartition,
    data_b: &DatasetPartition,
    hp: &Hyperparams,
    key_bits: u32,
    seed: u64,
) -> crate::Result<(PartyA, PartyB, Coordinator)> {
    hp.validate()?;
    if data_a.ids() != data_b.ids() {
        return Err(VflError::InvalidDataset(
            "party datasets are not aligned to the same sample order".into(),
        )
        .into());
    }
    safety_guard(data_a)?;
    safety_guard(data_b)?;
    Ok((
        PartyA::new(data_a.clone(), *hp, seed)?,
        PartyB::new(data_b.clone(), *hp, seed)?,
        Coordinator::new(*hp, key_bits, seed)?,
    ))
}

/// Upper bound on delivered messages for a run of `max_iters` rounds.
fn step_budget(hp: &Hyperparams) -> usize {
    12 * hp.max_iters as usize + 16
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub party_a: PartyA,
    pub party_b: PartyB,
    pub coordinator: Coordinator,
    pub transcript: Transcript,
}

impl TrainOutcome {
    pub fn theta_a(&self) -> &[f64] {
        self.party_a.theta()
    }

    pub fn theta_b(&self) -> &[f64] {
        self.party_b.theta()
    }

    pub fn loss_history(&self) -> &[f64] {
        self.coordinator.loss_history()
    }

    pub fn rounds(&self) -> usize {
        self.loss_history().len()
    }
}

/// Trains on aligned partitions. A holds no labels; B holds the labels.
pub fn train(
    data_a: &DatasetPartition,
    data_b: &DatasetPartition,
    hp: &Hyperparams,
    key_bits: u32,
    seed: u64,
) -> crate::Result<TrainOutcome> {
    let (mut a, mut b, mut c) = parties(data_a, data_b, hp, key_bits, seed)?;
    let transcript = transport::run_protocol(&mut [&mut a, &mut b, &mut c], Bus::new(seed), step_budget(hp))?;
    Ok(TrainOutcome {
        party_a: a,
        party_b: b,
        coordinator: c,
        transcript,
    })
}

/// C's side of inference: asks A and B for partial scores and adds them.
#[derive(Debug)]
struct Inquirer {
    ids: Vec<EntityId>,
    share_a: Option<Vec<f64>>,
    share_b: Option<Vec<f64>>,
}

impl Party for Inquirer {
    fn id(&self) -> PartyId {
        PartyId::C
    }

    fn start(&mut self) -> crate::Result<Vec<MessageEnvelope>> {
        let payload = encode_ids(&self.ids);
        Ok([PartyId::A, PartyId::B]
            .into_iter()
            .map(|to| {
                MessageEnvelope::new(0, 1, PartyId::C, to, PayloadKind::VflPredictRequest, payload.clone())
            })
            .collect())
    }

    fn handle(&mut self, msg: &MessageEnvelope) -> crate::Result<Vec<MessageEnvelope>> {
        let slot = match (msg.kind, msg.sender) {
            (PayloadKind::VflPredictShare, PartyId::A) => &mut self.share_a,
            (PayloadKind::VflPredictShare, PartyId::B) => &mut self.share_b,
            _ => return Err(unexpected(PartyId::C, "inference", msg)),
        };
        let shares = decode_f64s(&msg.payload).map_err(crate::transport::TransportError::from)?;
        if shares.len() != self.ids.len() || slot.is_some() {
            return Err(protocol(format!("bad prediction share from {}", msg.sender)));
        }
        *slot = Some(shares);
        Ok(vec![])
    }

    fn is_terminal(&self) -> bool {
        self.share_a.is_some() && self.share_b.is_some()
    }

    fn phase(&self) -> String {
        "inference".into()
    }
}

/// Inference on trained parties: `u_i^A + u_i^B` per requested id.
pub fn predict(
    ids: &[EntityId],
    party_a: &mut PartyA,
    party_b: &mut PartyB,
    seed: u64,
) -> crate::Result<(Vec<f64>, Transcript)> {
    if !party_a.is_terminal() || !party_b.is_terminal() {
        return Err(protocol("inference requires finished training"));
    }
    let mut inquirer = Inquirer {
        ids: ids.to_vec(),
        share_a: None,
        share_b: None,
    };
    let transcript =
        transport::run_protocol(&mut [&mut inquirer, party_a, party_b], Bus::new(seed), 8)?;
    let (a, b) = (inquirer.share_a.expect("terminal"), inquirer.share_b.expect("terminal"));
    Ok((a.iter().zip(&b).map(|(x, y)| x + y).collect(), transcript))
}
