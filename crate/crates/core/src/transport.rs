// SPDX-License-Identifier: Apache-2.0

//! Typed message envelopes, an in-memory bus that records every message, and
//! a round-robin runner that drives party state machines to completion.
//!
//! Envelope layout (all big-endian):
//!
//! ```text
//! round:u32 | step:u32 | sender:u16 | receiver:u16 | kind:u16 | len:u32 | payload
//! ```
//!
//! A party id packs its role into the top four bits and its instance number
//! into the low twelve.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::fmt;
use std::sync::Mutex;

use thiserror::Error;

use crate::codec::{DecodeError, Reader, Writer};

pub const HEADER_LEN: usize = 18;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TransportError {
    #[error(transparent)]
    Decode(#[from] DecodeError),
    #[error("unknown payload kind id {kind_id:#06x} at byte offset {offset}")]
    UnknownKind { kind_id: u16, offset: usize },
    #[error("unknown party id {raw:#06x} at byte offset {offset}")]
    UnknownParty { raw: u16, offset: usize },
    #[error("receiver {0} is not registered on the bus")]
    Unregistered(PartyId),
    #[error("party {party} emitted a message claiming sender {claimed}")]
    SenderMismatch { party: PartyId, claimed: PartyId },
    #[error("protocol stalled with no messages in flight; phases: {}", fmt_phases(.phases))]
    Deadlock { phases: Vec<(PartyId, String)> },
    #[error("step budget of {max_steps} exhausted; phases: {}", fmt_phases(.phases))]
    StepLimit {
        max_steps: usize,
        phases: Vec<(PartyId, String)>,
    },
    #[error("replay diverged at transcript record {index}: {reason}")]
    ReplayDiverged { index: usize, reason: String },
    #[error("malformed transcript dump at line {line}: {reason}")]
    BadDump { line: usize, reason: String },
}

fn fmt_phases(phases: &[(PartyId, String)]) -> String {
    phases
        .iter()
        .map(|(id, phase)| format!("{id}={phase}"))
        .collect::<Vec<_>>()
        .join(", ")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Role {
    A,
    B,
    Coordinator,
    Server,
    Client,
}

impl Role {
    fn code(self) -> u16 {
        match self {
            Role::A => 1,
            Role::B => 2,
            Role::Coordinator => 3,
            Role::Server => 4,
            Role::Client => 5,
        }
    }

    fn from_code(code: u16) -> Option<Self> {
        Some(match code {
            1 => Role::A,
            2 => Role::B,
            3 => Role::Coordinator,
            4 => Role::Server,
            5 => Role::Client,
            _ => return None,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct PartyId {
    pub role: Role,
    pub instance: u16,
}

impl PartyId {
    pub const MAX_INSTANCE: u16 = 0x0FFF;
    pub const A: PartyId = PartyId::new(Role::A, 0);
    pub const B: PartyId = PartyId::new(Role::B, 0);
    pub const C: PartyId = PartyId::new(Role::Coordinator, 0);
    pub const SERVER: PartyId = PartyId::new(Role::Server, 0);

    pub const fn new(role: Role, instance: u16) -> Self {
        Self { role, instance }
    }

    pub fn client(k: u16) -> Self {
        assert!(k <= Self::MAX_INSTANCE, "client index {k} out of range");
        Self::new(Role::Client, k)
    }

    pub fn to_wire(self) -> u16 {
        (self.role.code() << 12) | (self.instance & Self::MAX_INSTANCE)
    }

    pub fn from_wire(raw: u16) -> Option<Self> {
        Role::from_code(raw >> 12).map(|role| Self::new(role, raw & Self::MAX_INSTANCE))
    }
}

impl fmt::Display for PartyId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.role {
            Role::A => write!(f, "A"),
            Role::B => write!(f, "B"),
            Role::Coordinator => write!(f, "C"),
            Role::Server => write!(f, "server"),
            Role::Client => write!(f, "client-{}", self.instance),
        }
    }
}

macro_rules! payload_kinds {
    ($($variant:ident = $id:literal => $name:literal,)*) => {
        /// Every message type carried by the bus.
        #[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
        pub enum PayloadKind {
            $($variant,)*
        }

        impl PayloadKind {
            pub const ALL: &'static [PayloadKind] = &[$(PayloadKind::$variant,)*];

            pub fn id(self) -> u16 {
                match self {
                    $(PayloadKind::$variant => $id,)*
                }
            }

            pub fn from_id(id: u16) -> Option<Self> {
                match id {
                    $($id => Some(PayloadKind::$variant),)*
                    _ => None,
                }
            }

            pub fn name(self) -> &'static str {
                match self {
                    $(PayloadKind::$variant => $name,)*
                }
            }
        }
    };
}

payload_kinds! {
    PkDistribution = 1 => "pk-distribution",
    PsiBlindedBatch = 2 => "psi-blinded-batch",
    VflUaBatch = 3 => "vfl-uA-batch",
    VflLossA = 4 => "vfl-lossA",
    VflDBatch = 5 => "vfl-d-batch",
    VflLossTotal = 6 => "vfl-loss-total",
    VflMaskedGrad = 7 => "vfl-masked-grad",
    VflGradReply = 8 => "vfl-grad-reply",
    VflStop = 9 => "vfl-stop",
    VflPredictRequest = 10 => "vfl-predict-request",
    VflPredictShare = 11 => "vfl-predict-share",
    HflMaskedUpdate = 12 => "hfl-masked-update",
    HflBroadcast = 13 => "hfl-broadcast",
    HflStop = 14 => "hfl-stop",
}

impl fmt::Display for PayloadKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct MessageEnvelope {
    pub round: u32,
    pub step: u32,
    pub sender: PartyId,
    pub receiver: PartyId,
    pub kind: PayloadKind,
    pub payload: Vec<u8>,
}

impl MessageEnvelope {
    pub fn new(
        round: u32,
        step: u32,
        sender: PartyId,
        receiver: PartyId,
        kind: PayloadKind,
        payload: Vec<u8>,
    ) -> Self {
        Self {
            round,
            step,
            sender,
            receiver,
            kind,
            payload,
        }
    }

    pub fn encoded_len(&self) -> usize {
        HEADER_LEN + self.payload.len()
    }

    pub fn serialize(&self) -> Vec<u8> {
        let mut w = Writer::with_capacity(self.encoded_len());
        w.put_u32(self.round)
            .put_u32(self.step)
            .put_u16(self.sender.to_wire())
            .put_u16(self.receiver.to_wire())
            .put_u16(self.kind.id())
            .put_bytes(&self.payload);
        w.into_bytes()
    }

    pub fn deserialize(bytes: &[u8]) -> Result<Self, TransportError> {
        let mut r = Reader::new(bytes);
        let env = Self::read(&mut r)?;
        r.finish()?;
        Ok(env)
    }

    fn read(r: &mut Reader<'_>) -> Result<Self, TransportError> {
        let round = r.get_u32()?;
        let step = r.get_u32()?;
        let party = |r: &mut Reader<'_>| -> Result<PartyId, TransportError> {
            let offset = r.position();
            let raw = r.get_u16()?;
            PartyId::from_wire(raw).ok_or(TransportError::UnknownParty { raw, offset })
        };
        let sender = party(r)?;
        let receiver = party(r)?;
        let offset = r.position();
        let kind_id = r.get_u16()?;
        let kind =
            PayloadKind::from_id(kind_id).ok_or(TransportError::UnknownKind { kind_id, offset })?;
        let payload = r.get_bytes()?.to_vec();
        Ok(Self {
            round,
            step,
            sender,
            receiver,
            kind,
            payload,
        })
    }
}

/// Append-only record of every message sent on a bus, in send order.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Transcript {
    pub seed: u64,
    records: Vec<MessageEnvelope>,
}

impl Transcript {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            records: Vec::new(),
        }
    }

    pub fn push(&mut self, env: MessageEnvelope) {
        self.records.push(env);
    }

    /// Appends every record of `other`, keeping this transcript's seed.
    pub fn extend(&mut self, other: Transcript) {
        self.records.extend(other.records);
    }

    pub fn records(&self) -> &[MessageEnvelope] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Serialized size of each record.
    pub fn sizes(&self) -> Vec<usize> {
        self.records.iter().map(MessageEnvelope::encoded_len).collect()
    }

    pub fn bytes_on_wire(&self) -> u64 {
        self.records.iter().map(|r| r.encoded_len() as u64).sum()
    }

    /// Concatenated envelope serializations.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.bytes_on_wire() as usize);
        for r in &self.records {
            out.extend_from_slice(&r.serialize());
        }
        out
    }

    /// One line per record: `<index> <hex envelope>`.
    pub fn dump(&self) -> String {
        let mut out = String::new();
        for (i, r) in self.records.iter().enumerate() {
            out.push_str(&i.to_string());
            out.push(' ');
            out.push_str(&hex::encode(r.serialize()));
            out.push('\n');
        }
        out
    }

    pub fn parse_dump(text: &str, seed: u64) -> Result<Self, TransportError> {
        let mut transcript = Transcript::new(seed);
        for (line_no, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let bad = |reason: String| TransportError::BadDump {
                line: line_no + 1,
                reason,
            };
            let (index, body) = line
                .split_once(' ')
                .ok_or_else(|| bad("missing separator".into()))?;
            let index: usize = index.parse().map_err(|e| bad(format!("bad index: {e}")))?;
            if index != transcript.len() {
                return Err(bad(format!("expected index {}, found {index}", transcript.len())));
            }
            let bytes = hex::decode(body.trim()).map_err(|e| bad(format!("bad hex: {e}")))?;
            transcript.push(MessageEnvelope::deserialize(&bytes)?);
        }
        Ok(transcript)
    }
}

#[derive(Debug, Default)]
struct BusInner {
    queues: BTreeMap<PartyId, VecDeque<MessageEnvelope>>,
    transcript: Transcript,
}

/// In-memory message bus. Queues are per receiver and hold messages in send
/// order, which gives FIFO delivery per (sender, receiver) pair.
#[derive(Debug)]
pub struct Bus {
    registered: BTreeSet<PartyId>,
    inner: Mutex<BusInner>,
}

impl Bus {
    pub fn new(seed: u64) -> Self {
        Self {
            registered: BTreeSet::new(),
            inner: Mutex::new(BusInner {
                queues: BTreeMap::new(),
                transcript: Transcript::new(seed),
            }),
        }
    }

    pub fn register(&mut self, id: PartyId) {
        self.registered.insert(id);
    }

    pub fn is_registered(&self, id: PartyId) -> bool {
        self.registered.contains(&id)
    }

    fn lock(&self) -> std::sync::MutexGuard<'_, BusInner> {
        self.inner.lock().unwrap_or_else(|e| e.into_inner())
    }

    pub fn send(&self, env: MessageEnvelope) -> Result<(), TransportError> {
        if !self.registered.contains(&env.receiver) {
            return Err(TransportError::Unregistered(env.receiver));
        }
        let mut inner = self.lock();
        inner.transcript.push(env.clone());
        inner.queues.entry(env.receiver).or_default().push_back(env);
        Ok(())
    }

    /// Drains every message queued for `receiver`.
    pub fn deliver(&self, receiver: PartyId) -> Result<Vec<MessageEnvelope>, TransportError> {
        if !self.registered.contains(&receiver) {
            return Err(TransportError::Unregistered(receiver));
        }
        let mut inner = self.lock();
        Ok(inner
            .queues
            .get_mut(&receiver)
            .map(|q| q.drain(..).collect())
            .unwrap_or_default())
    }

    pub fn pending(&self) -> usize {
        self.lock().queues.values().map(VecDeque::len).sum()
    }

    pub fn transcript(&self) -> Transcript {
        self.lock().transcript.clone()
    }

    pub fn into_transcript(self) -> Transcript {
        self.inner
            .into_inner()
            .unwrap_or_else(|e| e.into_inner())
            .transcript
    }
}

/// A protocol participant: a deterministic state machine whose only inputs
/// are its construction-time state (including RNG seeds) and the messages it
/// receives.
pub trait Party {
    fn id(&self) -> PartyId;

    /// Messages emitted before anything is received.
    fn start(&mut self) -> crate::Result<Vec<MessageEnvelope>> {
        Ok(Vec::new())
    }

    fn handle(&mut self, msg: &MessageEnvelope) -> crate::Result<Vec<MessageEnvelope>>;

    fn is_terminal(&self) -> bool;

    /// Human-readable protocol phase, used in deadlock diagnoses.
    fn phase(&self) -> String;
}

fn phases(parties: &[&mut dyn Party]) -> Vec<(PartyId, String)> {
    parties.iter().map(|p| (p.id(), p.phase())).collect()
}

fn check_sender(party: PartyId, out: &[MessageEnvelope]) -> Result<(), TransportError> {
    match out.iter().find(|m| m.sender != party) {
        Some(m) => Err(TransportError::SenderMismatch {
            party,
            claimed: m.sender,
        }),
        None => Ok(()),
    }
}

/// Runs `parties` to completion over `bus`, single-threaded round-robin.
///
/// Each pass visits parties in slice order and hands each one every message
/// currently queued for it. A step is one delivered message. The run ends once
/// every party is terminal and nothing is in flight.
pub fn run_protocol(
    parties: &mut [&mut dyn Party],
    mut bus: Bus,
    max_steps: usize,
) -> crate::Result<Transcript> {
    for p in parties.iter() {
        bus.register(p.id());
    }
    for p in parties.iter_mut() {
        let out = p.start()?;
        check_sender(p.id(), &out)?;
        for m in out {
            bus.send(m)?;
        }
    }

    let mut steps = 0usize;
    loop {
        if bus.pending() == 0 && parties.iter().all(|p| p.is_terminal()) {
            break;
        }
        let mut progressed = false;
        for i in 0..parties.len() {
            let id = parties[i].id();
            for msg in bus.deliver(id)? {
                if steps == max_steps {
                    return Err(TransportError::StepLimit {
                        max_steps,
                        phases: phases(parties),
                    }
                    .into());
                }
                steps += 1;
                progressed = true;
                let out = parties[i].handle(&msg)?;
                check_sender(id, &out)?;
                for m in out {
                    bus.send(m)?;
                }
            }
        }
        if !progressed {
            return Err(TransportError::Deadlock {
                phases: phases(parties),
            }
            .into());
        }
    }
    Ok(bus.into_transcript())
}

/// Feeds a recorded transcript into fresh parties and checks that every
/// message they emit matches the recording byte for byte.
pub fn replay(parties: &mut [&mut dyn Party], transcript: &Transcript) -> crate::Result<()> {
    let index: BTreeMap<PartyId, usize> = parties
        .iter()
        .enumerate()
        .map(|(i, p)| (p.id(), i))
        .collect();
    let mut expected: BTreeMap<PartyId, VecDeque<(usize, &MessageEnvelope)>> = BTreeMap::new();
    for (i, r) in transcript.records().iter().enumerate() {
        expected.entry(r.sender).or_default().push_back((i, r));
    }

    let mut check = |party: PartyId, out: Vec<MessageEnvelope>| -> Result<(), TransportError> {
        let queue = expected.entry(party).or_default();
        for m in out {
            match queue.pop_front() {
                Some((_, recorded)) if *recorded == m => {}
                Some((i, _)) => {
                    return Err(TransportError::ReplayDiverged {
                        index: i,
                        reason: format!("{party} emitted a different {} message", m.kind),
                    })
                }
                None => {
                    return Err(TransportError::ReplayDiverged {
                        index: transcript.len(),
                        reason: format!("{party} emitted an unrecorded {} message", m.kind),
                    })
                }
            }
        }
        Ok(())
    };

    for p in parties.iter_mut() {
        let out = p.start()?;
        check(p.id(), out)?;
    }
    for (i, msg) in transcript.records().iter().enumerate() {
        let Some(&slot) = index.get(&msg.receiver) else {
            return Err(TransportError::ReplayDiverged {
                index: i,
                reason: format!("no party for receiver {}", msg.receiver),
            }
            .into());
        };
        let out = parties[slot].handle(msg)?;
        check(msg.receiver, out)?;
    }
    if let Some((i, m)) = expected.values().find_map(|q| q.front()) {
        return Err(TransportError::ReplayDiverged {
            index: *i,
            reason: format!("{} never emitted the recorded {} message", m.sender, m.kind),
        }
        .into());
    }
    Ok(())
}
