//! Deterministic total-order reliable broadcast connecting member engines,
//! with scriptable Dolev-Yao adversary actions and partition modeling.
//!
//! One single-threaded event loop: every enqueued frame gets a global
//! sequence number, adversary rules run against the queue head, and the frame
//! is then delivered to every attached, non-partitioned, non-crashed engine
//! in attach order (including the sender, which ignores its own frames).

use std::collections::VecDeque;

use serde::Serialize;
use thiserror::Error;

use crate::engine::{Disposition, MemberState};
use crate::wire::MsgType;

pub type MemberId = usize;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum SimError {
    #[error("engine for {0} is already attached")]
    DuplicateAttach(String),
    #[error("unknown member id {0}")]
    UnknownMember(MemberId),
    #[error("step limit exceeded after {0} deliveries (livelock)")]
    StepLimitExceeded(usize),
    #[error("bad adversary script: {0}")]
    BadScript(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Origin {
    Member(MemberId),
    Adversary,
}

/// One scripted Dolev-Yao capability. Replay and tamper may only reference
/// sequence numbers that have already been observed (enqueued).
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum AdversaryAction {
    /// Drop the pending event with this sequence number.
    DropSeq(u64),
    /// Drop the next `count` events whose message type matches.
    DropType { msg_type: u8, count: u32 },
    /// XOR one byte of a pending event's payload.
    Tamper { seq: u64, offset: usize, mask: u8 },
    /// Re-enqueue a copy of an already-observed event.
    Replay(u64),
    /// Enqueue attacker-chosen bytes.
    Inject(Vec<u8>),
    /// Split the bus into disjoint member sets (every member must appear).
    Partition(Vec<Vec<MemberId>>),
    /// Remove the partition.
    Heal,
}

#[derive(Debug, Clone, Serialize)]
pub struct DeliveryRecord {
    pub seq: u64,
    pub origin: Origin,
    pub msg_type: Option<String>,
    pub size: usize,
    pub dropped: bool,
    /// (identity, disposition) per engine the event was offered to.
    pub dispositions: Vec<(String, Disposition)>,
    /// Raw frame, kept for report derivation; not part of the emitted log.
    #[serde(skip)]
    pub payload: Vec<u8>,
}

struct Slot {
    engine: MemberState,
    crashed: bool,
}

struct Queued {
    seq: u64,
    origin: Origin,
    payload: Vec<u8>,
}

pub struct Bus {
    slots: Vec<Slot>,
    queue: VecDeque<Queued>,
    next_seq: u64,
    /// Every observed payload by sequence number, for replay.
    history: Vec<(u64, Vec<u8>)>,
    log: Vec<DeliveryRecord>,
    partitions: Option<Vec<Vec<MemberId>>>,
    drop_seqs: Vec<u64>,
    drop_types: Vec<(u8, u32)>,
}

impl Default for Bus {
    fn default() -> Self {
        Bus::new()
    }
}

impl Bus {
    pub fn new() -> Bus {
        Bus {
            slots: Vec::new(),
            queue: VecDeque::new(),
            next_seq: 1,
            history: Vec::new(),
            log: Vec::new(),
            partitions: None,
            drop_seqs: Vec::new(),
            drop_types: Vec::new(),
        }
    }

    pub fn attach(&mut self, engine: MemberState) -> Result<MemberId, SimError> {
        if self
            .slots
            .iter()
            .any(|s| s.engine.identity() == engine.identity())
        {
            return Err(SimError::DuplicateAttach(engine.identity().to_string()));
        }
        self.slots.push(Slot {
            engine,
            crashed: false,
        });
        Ok(self.slots.len() - 1)
    }

    pub fn member_ids(&self) -> Vec<MemberId> {
        (0..self.slots.len()).collect()
    }

    pub fn engine(&self, id: MemberId) -> Result<&MemberState, SimError> {
        self.slots
            .get(id)
            .map(|s| &s.engine)
            .ok_or(SimError::UnknownMember(id))
    }

    pub fn engine_mut(&mut self, id: MemberId) -> Result<&mut MemberState, SimError> {
        self.slots
            .get_mut(id)
            .map(|s| &mut s.engine)
            .ok_or(SimError::UnknownMember(id))
    }

    pub fn id_of(&self, identity: &str) -> Option<MemberId> {
        self.slots
            .iter()
            .position(|s| s.engine.identity() == identity)
    }

    pub fn crash(&mut self, id: MemberId) -> Result<(), SimError> {
        self.slots
            .get_mut(id)
            .map(|s| s.crashed = true)
            .ok_or(SimError::UnknownMember(id))
    }

    pub fn is_crashed(&self, id: MemberId) -> bool {
        self.slots.get(id).map(|s| s.crashed).unwrap_or(true)
    }

    pub fn log(&self) -> &[DeliveryRecord] {
        &self.log
    }

    pub fn take_log(&mut self) -> Vec<DeliveryRecord> {
        std::mem::take(&mut self.log)
    }

    /// Enqueue a frame; it is delivered (in order) during `step`.
    pub fn broadcast(&mut self, origin: Origin, payload: Vec<u8>) {
        let seq = self.next_seq;
        self.next_seq += 1;
        self.history.push((seq, payload.clone()));
        self.queue.push_back(Queued {
            seq,
            origin,
            payload,
        });
    }

    pub fn apply_adversary(&mut self, action: AdversaryAction) -> Result<(), SimError> {
        match action {
            AdversaryAction::DropSeq(seq) => self.drop_seqs.push(seq),
            AdversaryAction::DropType { msg_type, count } => {
                self.drop_types.push((msg_type, count))
            }
            AdversaryAction::Tamper { seq, offset, mask } => {
                if seq >= self.next_seq {
                    return Err(SimError::BadScript(format!("tamper: seq {seq} not observed")));
                }
                let item = self
                    .queue
                    .iter_mut()
                    .find(|q| q.seq == seq)
                    .ok_or_else(|| {
                        SimError::BadScript(format!("tamper: seq {seq} no longer pending"))
                    })?;
                if offset >= item.payload.len() {
                    return Err(SimError::BadScript(format!(
                        "tamper: offset {offset} out of range"
                    )));
                }
                item.payload[offset] ^= mask;
            }
            AdversaryAction::Replay(seq) => {
                let payload = self
                    .history
                    .iter()
                    .find(|(s, _)| *s == seq)
                    .map(|(_, p)| p.clone())
                    .ok_or_else(|| {
                        SimError::BadScript(format!("replay: seq {seq} not observed"))
                    })?;
                self.broadcast(Origin::Adversary, payload);
            }
            AdversaryAction::Inject(bytes) => self.broadcast(Origin::Adversary, bytes),
            AdversaryAction::Partition(sets) => {
                let mut seen = vec![false; self.slots.len()];
                for set in &sets {
                    for &id in set {
                        if id >= self.slots.len() {
                            return Err(SimError::BadScript(format!("partition: unknown {id}")));
                        }
                        if seen[id] {
                            return Err(SimError::BadScript(format!(
                                "partition: member {id} appears twice"
                            )));
                        }
                        seen[id] = true;
                    }
                }
                if seen.iter().any(|s| !s) {
                    return Err(SimError::BadScript(
                        "partition: every member must appear in a set".to_string(),
                    ));
                }
                self.partitions = Some(sets);
            }
            AdversaryAction::Heal => self.partitions = None,
        }
        Ok(())
    }

    fn same_partition(&self, origin: Origin, member: MemberId) -> bool {
        let Some(sets) = &self.partitions else {
            return true;
        };
        match origin {
            // the attacker taps the physical bus everywhere
            Origin::Adversary => true,
            Origin::Member(o) => sets
                .iter()
                .any(|set| set.contains(&o) && set.contains(&member)),
        }
    }

    fn should_drop(&mut self, item: &Queued) -> bool {
        if let Some(pos) = self.drop_seqs.iter().position(|&s| s == item.seq) {
            self.drop_seqs.remove(pos);
            return true;
        }
        let msg_type = item.payload.get(3).copied();
        if let Some(t) = msg_type {
            for rule in self.drop_types.iter_mut() {
                if rule.0 == t && rule.1 > 0 {
                    rule.1 -= 1;
                    return true;
                }
            }
        }
        false
    }

    /// Deliver the queue head to all reachable engines and enqueue their
    /// responses. Returns `None` when the queue is empty.
    pub fn step(&mut self) -> Option<&DeliveryRecord> {
        let item = self.queue.pop_front()?;
        let msg_type = item
            .payload
            .get(3)
            .and_then(|&t| MsgType::from_code(t))
            .map(|t| t.name().to_string());

        if self.should_drop(&item) {
            self.log.push(DeliveryRecord {
                seq: item.seq,
                origin: item.origin,
                msg_type,
                size: item.payload.len(),
                dropped: true,
                dispositions: Vec::new(),
                payload: item.payload,
            });
            return self.log.last();
        }

        let mut dispositions = Vec::new();
        let mut responses: Vec<(MemberId, Vec<u8>)> = Vec::new();
        for id in 0..self.slots.len() {
            if self.slots[id].crashed || !self.same_partition(item.origin, id) {
                continue;
            }
            let outcome = self.slots[id].engine.deliver(&item.payload);
            dispositions.push((
                self.slots[id].engine.identity().to_string(),
                outcome.disposition,
            ));
            for resp in outcome.responses {
                responses.push((id, resp));
            }
        }
        for (id, resp) in responses {
            self.broadcast(Origin::Member(id), resp);
        }

        self.log.push(DeliveryRecord {
            seq: item.seq,
            origin: item.origin,
            msg_type,
            size: item.payload.len(),
            dropped: false,
            dispositions,
            payload: item.payload,
        });
        self.log.last()
    }

    pub fn is_quiescent(&self) -> bool {
        self.queue.is_empty()
    }

    /// Run until the queue drains; errors out at `max_steps` deliveries.
    pub fn run_until_quiescent(&mut self, max_steps: usize) -> Result<usize, SimError> {
        let mut steps = 0;
        while !self.queue.is_empty() {
            if steps >= max_steps {
                return Err(SimError::StepLimitExceeded(steps));
            }
            self.step();
            steps += 1;
        }
        Ok(steps)
    }

    /// Offer a tick to every live engine in attach order; eviction responses
    /// are enqueued.
    pub fn tick_all(&mut self) {
        let mut responses: Vec<(MemberId, Vec<u8>)> = Vec::new();
        for id in 0..self.slots.len() {
            if self.slots[id].crashed {
                continue;
            }
            if let Some(bytes) = self.slots[id].engine.tick() {
                responses.push((id, bytes));
            }
        }
        for (id, resp) in responses {
            self.broadcast(Origin::Member(id), resp);
        }
    }

    /// (identity, epoch, epoch key, tree fingerprint) of every live member,
    /// for convergence checks.
    pub fn member_views(&self) -> Vec<(String, u64, Vec<u8>, String)> {
        self.slots
            .iter()
            .filter(|s| !s.crashed && s.engine.is_member())
            .filter_map(|s| {
                let r = s.engine.inspect();
                Some((
                    r.identity.clone(),
                    r.epoch?,
                    r.epoch_key.clone()?,
                    r.tree_fingerprint.clone()?,
                ))
            })
            .collect()
    }

    /// All live members agree on (epoch, key, public tree)?
    pub fn converged(&self) -> bool {
        let views = self.member_views();
        match views.first() {
            None => true,
            Some((_, epoch, key, fp)) => views
                .iter()
                .all(|(_, e, k, f)| e == epoch && k == key && f == fp),
        }
    }
}
