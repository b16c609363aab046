//! The mobile cloud controller.
//!
//! [`Controller`] is a pure state machine: it consumes PDUs tagged with the
//! peer they came from plus a millisecond clock, and returns the PDUs to send.
//! [`server`] runs it over real connections; [`bbu`] and [`compute`] are the
//! two resource managers it drives.
//!
//! Each Offload_Req opens a transaction that allocates bandwidth, then
//! compute, then answers Offload_Accept followed by Offload_Start. Any refusal
//! or expired deadline reverses the acquired allocations newest-first and
//! answers Offload_Denied with the failure code in the ack field.

pub mod bbu;
pub mod compute;
pub mod server;

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;

use crate::pdu::{codes, Label, Pdu, PduType, ACK_DATA, ACK_OK};
use crate::sim::VmId;
use crate::transport::{Endpoint, CLONE_PORT};

/// Connection identity of one UE as seen by the controller.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ClientId(pub u64);

impl fmt::Display for ClientId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "ue{}", self.0)
    }
}

/// Unique among non-terminal transactions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct TransactionId {
    pub client: ClientId,
    pub request_id: u32,
}

impl fmt::Display for TransactionId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.client, self.request_id)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum TxnState {
    Init,
    AllocComm,
    AllocCompute,
    Ready,
    Executing,
    Done,
    Failed,
}

impl TxnState {
    pub fn as_str(self) -> &'static str {
        match self {
            TxnState::Init => "INIT",
            TxnState::AllocComm => "ALLOC_COMM",
            TxnState::AllocCompute => "ALLOC_COMPUTE",
            TxnState::Ready => "READY",
            TxnState::Executing => "EXECUTING",
            TxnState::Done => "DONE",
            TxnState::Failed => "FAILED",
        }
    }

    pub fn is_terminal(self) -> bool {
        matches!(self, TxnState::Done | TxnState::Failed)
    }
}

impl fmt::Display for TxnState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// One acquired allocation, in acquisition order.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LedgerEntry {
    Bandwidth { units: u32 },
    /// `created` is true when the transaction created the clone rather than
    /// resizing the client's existing one.
    Compute { vm: VmId, created: bool },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Transaction {
    id: TransactionId,
    key: String,
    state: TxnState,
    ledger: Vec<LedgerEntry>,
    reversed: Vec<LedgerEntry>,
    deadline_ms: u64,
    failure: Option<u32>,
    clone_address: Option<String>,
    request: Pdu,
}

impl Transaction {
    pub fn id(&self) -> TransactionId {
        self.id
    }

    /// Correlation key carried in the `user_data` binding of every management
    /// PDU issued for this transaction.
    pub fn key(&self) -> &str {
        &self.key
    }

    pub fn state(&self) -> TxnState {
        self.state
    }

    pub fn ledger(&self) -> &[LedgerEntry] {
        &self.ledger
    }

    /// Entries undone by rollback, in the order they were reversed.
    pub fn reversed(&self) -> &[LedgerEntry] {
        &self.reversed
    }

    pub fn deadline_ms(&self) -> u64 {
        self.deadline_ms
    }

    /// Code sent in Offload_Denied, or the cause of a silent rollback.
    pub fn failure_code(&self) -> Option<u32> {
        self.failure
    }

    pub fn clone_address(&self) -> Option<&str> {
        self.clone_address.as_deref()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Peer {
    Ue(ClientId),
    Bbu,
    Cloud,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Outgoing {
    pub to: Peer,
    pub pdu: Pdu,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StateChange {
    pub t_ms: u64,
    pub txn: TransactionId,
    pub from: TxnState,
    pub to: TxnState,
}

impl fmt::Display for StateChange {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} {} {}->{}", self.t_ms, self.txn, self.from, self.to)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ControllerConfig {
    /// Deadline for each management sub-transaction.
    pub request_timeout_ms: u64,
    /// Deadline for FIN after Offload_Start.
    pub session_timeout_ms: u64,
    /// Advertised in Offload_Start as `vm-N@host:port`.
    pub clone_endpoint: Endpoint,
    /// Used when an Offload_Req carries no `bandwidth_units` binding.
    pub default_bandwidth_units: u32,
}

impl Default for ControllerConfig {
    fn default() -> Self {
        ControllerConfig {
            request_timeout_ms: 5000,
            session_timeout_ms: 60_000,
            clone_endpoint: Endpoint::localhost(CLONE_PORT),
            default_bandwidth_units: 1,
        }
    }
}

/// Result of [`Controller::supervise_timeouts`].
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Expiry {
    /// Ordered by deadline, then id.
    pub expired: Vec<TransactionId>,
    pub outgoing: Vec<Outgoing>,
}

/// Resource bindings forwarded from Offload_Req to Manage_Compute.
const SPEC_LABELS: [Label; 3] = [Label::Vcpu, Label::RamMb, Label::DiskGb];

#[derive(Debug)]
pub struct Controller {
    config: ControllerConfig,
    txns: BTreeMap<TransactionId, Transaction>,
    history: Vec<Transaction>,
    /// Outstanding allocation requests by management request id.
    pending: HashMap<u32, (TransactionId, Peer)>,
    /// Release/rollback requests whose acks are awaited but carry no decision.
    detached: HashSet<u32>,
    clones: HashMap<ClientId, VmId>,
    next_mgmt_id: u32,
    next_serial: u64,
    state_log: Vec<StateChange>,
}

impl Controller {
    pub fn new(config: ControllerConfig) -> Self {
        Controller {
            config,
            txns: BTreeMap::new(),
            history: Vec::new(),
            pending: HashMap::new(),
            detached: HashSet::new(),
            clones: HashMap::new(),
            next_mgmt_id: 1,
            next_serial: 0,
            state_log: Vec::new(),
        }
    }

    pub fn config(&self) -> &ControllerConfig {
        &self.config
    }

    /// The latest transaction under `id`.
    pub fn transaction(&self, id: TransactionId) -> Option<&Transaction> {
        self.txns.get(&id)
    }

    /// Every transaction ever opened, superseded ones first.
    pub fn transactions(&self) -> impl Iterator<Item = &Transaction> {
        self.history.iter().chain(self.txns.values())
    }

    pub fn state_log(&self) -> &[StateChange] {
        &self.state_log
    }

    pub fn clone_of(&self, client: ClientId) -> Option<VmId> {
        self.clones.get(&client).copied()
    }

    /// No open transaction and no management request awaiting an answer.
    pub fn is_quiescent(&self) -> bool {
        self.pending.is_empty()
            && self.detached.is_empty()
            && self.txns.values().all(|t| t.state.is_terminal())
    }

    /// Entry point for every inbound PDU.
    pub fn handle(&mut self, from: Peer, pdu: Pdu, now_ms: u64) -> Vec<Outgoing> {
        match from {
            Peer::Ue(client) => self.handle_ue(client, pdu, now_ms),
            Peer::Bbu => self.handle_bbu_reply(pdu, now_ms),
            Peer::Cloud => self.handle_compute_reply(pdu, now_ms),
        }
    }

    fn handle_ue(&mut self, client: ClientId, pdu: Pdu, now_ms: u64) -> Vec<Outgoing> {
        if pdu.ack != ACK_DATA {
            return Vec::new();
        }
        match pdu.pdu_type {
            PduType::OffloadReq => self.handle_offload_req(client, pdu, now_ms),
            PduType::OffloadFin => self.handle_offload_fin(client, pdu, now_ms),
            other => vec![Outgoing {
                to: Peer::Ue(client),
                pdu: Pdu::new(other, pdu.request_id).with_ack(codes::UNSUPPORTED),
            }],
        }
    }

    /// Opens a transaction and issues the bandwidth allocation.
    pub fn handle_offload_req(&mut self, client: ClientId, req: Pdu, now_ms: u64) -> Vec<Outgoing> {
        let id = TransactionId {
            client,
            request_id: req.request_id,
        };
        let deny = |code| Outgoing {
            to: Peer::Ue(client),
            pdu: Pdu::new(PduType::OffloadDenied, req.request_id).with_ack(code),
        };
        if req.pdu_type != PduType::OffloadReq || req.ack != ACK_DATA {
            return vec![deny(codes::UNSUPPORTED)];
        }
        if let Some(existing) = self.txns.get(&id) {
            if !existing.state.is_terminal() {
                return vec![deny(codes::DUPLICATE)];
            }
            let old = self.txns.remove(&id).expect("present");
            self.history.push(old);
        }
        let units = match req.get_str(Label::BandwidthUnits) {
            None => self.config.default_bandwidth_units,
            Some(s) => match s.trim().parse::<u32>() {
                Ok(u) => u,
                Err(_) => return vec![deny(codes::UNSUPPORTED)],
            },
        };
        self.next_serial += 1;
        let key = format!("{id}#{}", self.next_serial);
        self.txns.insert(
            id,
            Transaction {
                id,
                key: key.clone(),
                state: TxnState::Init,
                ledger: Vec::new(),
                reversed: Vec::new(),
                deadline_ms: now_ms + self.config.request_timeout_ms,
                failure: None,
                clone_address: None,
                request: req,
            },
        );
        let mid = self.mgmt_id();
        self.pending.insert(mid, (id, Peer::Bbu));
        self.transition(id, TxnState::AllocComm, now_ms);
        vec![Outgoing {
            to: Peer::Bbu,
            pdu: Pdu::new(PduType::ManageBbu, mid)
                .with_label(Label::Code, "allocate")
                .with_label(Label::BandwidthUnits, units.to_string())
                .with_label(Label::UserData, key),
        }]
    }

    fn handle_bbu_reply(&mut self, pdu: Pdu, now_ms: u64) -> Vec<Outgoing> {
        if self.detached.remove(&pdu.request_id) {
            return Vec::new();
        }
        let Some((id, Peer::Bbu)) = self.pending.get(&pdu.request_id).copied() else {
            return Vec::new();
        };
        self.pending.remove(&pdu.request_id);
        if pdu.ack != ACK_OK {
            return self.fail(id, codes::BBU_FAILURE, now_ms);
        }
        let units = pdu
            .get_str(Label::BandwidthUnits)
            .and_then(|s| s.parse().ok())
            .unwrap_or(self.config.default_bandwidth_units);
        let mid = self.mgmt_id();
        let clone = self.clones.get(&id.client).copied();
        let txn = self.txns.get_mut(&id).expect("pending transaction exists");
        txn.ledger.push(LedgerEntry::Bandwidth { units });
        txn.deadline_ms = now_ms + self.config.request_timeout_ms;
        let mut cmd = Pdu::new(PduType::ManageCompute, mid)
            .with_label(Label::Code, "allocate")
            .with_label(Label::UserData, txn.key.clone());
        if let Some(vm) = clone {
            cmd = cmd.with_label(Label::CloneAddress, vm.to_string());
        }
        for label in SPEC_LABELS {
            if let Some(v) = txn.request.get(label) {
                cmd = cmd.with_label(label, v.to_vec());
            }
        }
        self.pending.insert(mid, (id, Peer::Cloud));
        self.transition(id, TxnState::AllocCompute, now_ms);
        vec![Outgoing {
            to: Peer::Cloud,
            pdu: cmd,
        }]
    }

    fn handle_compute_reply(&mut self, pdu: Pdu, now_ms: u64) -> Vec<Outgoing> {
        if self.detached.remove(&pdu.request_id) {
            return Vec::new();
        }
        let Some((id, Peer::Cloud)) = self.pending.get(&pdu.request_id).copied() else {
            return Vec::new();
        };
        self.pending.remove(&pdu.request_id);
        if pdu.ack != ACK_OK {
            let code = match pdu.ack {
                codes::UNSUPPORTED | codes::CAPACITY => pdu.ack,
                _ => codes::COMPUTE_FAILURE,
            };
            return self.fail(id, code, now_ms);
        }
        let Some(vm) = pdu
            .get_str(Label::CloneAddress)
            .and_then(|s| s.parse::<VmId>().ok())
        else {
            return self.fail(id, codes::COMPUTE_FAILURE, now_ms);
        };
        let created = self.clones.insert(id.client, vm).is_none();
        let address = format!("{vm}@{}", self.config.clone_endpoint);
        let txn = self.txns.get_mut(&id).expect("pending transaction exists");
        txn.ledger.push(LedgerEntry::Compute { vm, created });
        txn.clone_address = Some(address.clone());
        self.transition(id, TxnState::Ready, now_ms);
        let to = Peer::Ue(id.client);
        let out = vec![
            Outgoing {
                to,
                pdu: Pdu::new(PduType::OffloadAccept, id.request_id),
            },
            Outgoing {
                to,
                pdu: Pdu::new(PduType::OffloadStart, id.request_id)
                    .with_label(Label::CloneAddress, address),
            },
        ];
        self.txns.get_mut(&id).expect("present").deadline_ms =
            now_ms + self.config.session_timeout_ms;
        self.transition(id, TxnState::Executing, now_ms);
        out
    }

    /// Closes a started session: releases bandwidth and keeps the clone.
    pub fn handle_offload_fin(&mut self, client: ClientId, fin: Pdu, now_ms: u64) -> Vec<Outgoing> {
        let id = TransactionId {
            client,
            request_id: fin.request_id,
        };
        let reply = |ack| Outgoing {
            to: Peer::Ue(client),
            pdu: Pdu::new(PduType::OffloadFin, fin.request_id).with_ack(ack),
        };
        let open = self
            .txns
            .get(&id)
            .is_some_and(|t| matches!(t.state, TxnState::Ready | TxnState::Executing));
        if !open {
            return vec![reply(codes::DUPLICATE)];
        }
        let mut out = self.complete(id, now_ms);
        out.push(reply(ACK_OK));
        out
    }

    /// Rolls back and denies every transaction whose deadline has passed.
    /// Sessions that already received Offload_Start are rolled back without a
    /// second answer.
    pub fn supervise_timeouts(&mut self, now_ms: u64) -> Expiry {
        let mut due: Vec<(u64, TransactionId)> = self
            .txns
            .values()
            .filter(|t| !t.state.is_terminal() && t.deadline_ms <= now_ms)
            .map(|t| (t.deadline_ms, t.id))
            .collect();
        due.sort();
        let mut expiry = Expiry::default();
        for (_, id) in due {
            let started = matches!(self.txns[&id].state, TxnState::Ready | TxnState::Executing);
            let out = if started {
                self.txns.get_mut(&id).expect("present").failure = Some(codes::TIMEOUT);
                self.rollback(id, now_ms)
            } else {
                self.fail(id, codes::TIMEOUT, now_ms)
            };
            expiry.outgoing.extend(out);
            expiry.expired.push(id);
        }
        expiry
    }

    /// The UE's controller connection closed. Started sessions end cleanly;
    /// transactions still allocating are rolled back.
    pub fn on_client_closed(&mut self, client: ClientId, now_ms: u64) -> Vec<Outgoing> {
        let ids: Vec<TransactionId> = self
            .txns
            .range(
                TransactionId {
                    client,
                    request_id: 0,
                }..=TransactionId {
                    client,
                    request_id: u32::MAX,
                },
            )
            .filter(|(_, t)| !t.state.is_terminal())
            .map(|(id, _)| *id)
            .collect();
        let mut out = Vec::new();
        for id in ids {
            match self.txns[&id].state {
                TxnState::Ready | TxnState::Executing => out.extend(self.complete(id, now_ms)),
                _ => out.extend(self.rollback(id, now_ms)),
            }
        }
        out
    }

    /// Reverses the ledger newest-first, including an allocation still in
    /// flight, and marks the transaction FAILED.
    pub fn rollback(&mut self, id: TransactionId, now_ms: u64) -> Vec<Outgoing> {
        let Some(txn) = self.txns.get(&id) else {
            return Vec::new();
        };
        if txn.state.is_terminal() {
            return Vec::new();
        }
        let key = txn.key.clone();
        let mut out = Vec::new();
        let in_flight: Vec<(u32, Peer)> = self
            .pending
            .iter()
            .filter(|(_, (t, _))| *t == id)
            .map(|(mid, (_, peer))| (*mid, *peer))
            .collect();
        for (mid, peer) in in_flight {
            self.pending.remove(&mid);
            out.push(match peer {
                Peer::Cloud => self.compute_rollback(&key),
                _ => self.bbu_release(&key),
            });
        }
        let entries: Vec<LedgerEntry> = {
            let txn = self.txns.get_mut(&id).expect("present");
            txn.ledger.drain(..).rev().collect()
        };
        for entry in &entries {
            match *entry {
                LedgerEntry::Bandwidth { .. } => out.push(self.bbu_release(&key)),
                LedgerEntry::Compute { vm, created } => {
                    if created && self.clones.get(&id.client) == Some(&vm) {
                        self.clones.remove(&id.client);
                    }
                    out.push(self.compute_rollback(&key));
                }
            }
        }
        self.txns
            .get_mut(&id)
            .expect("present")
            .reversed
            .extend(entries);
        self.transition(id, TxnState::Failed, now_ms);
        out
    }

    fn fail(&mut self, id: TransactionId, code: u32, now_ms: u64) -> Vec<Outgoing> {
        if let Some(txn) = self.txns.get_mut(&id) {
            txn.failure = Some(code);
        }
        let mut out = self.rollback(id, now_ms);
        out.push(Outgoing {
            to: Peer::Ue(id.client),
            pdu: Pdu::new(PduType::OffloadDenied, id.request_id).with_ack(code),
        });
        out
    }

    fn complete(&mut self, id: TransactionId, now_ms: u64) -> Vec<Outgoing> {
        let key = self.txns[&id].key.clone();
        let holds_bandwidth = self.txns[&id]
            .ledger
            .iter()
            .any(|e| matches!(e, LedgerEntry::Bandwidth { .. }));
        let holds_compute = self.txns[&id]
            .ledger
            .iter()
            .any(|e| matches!(e, LedgerEntry::Compute { .. }));
        let mut out = Vec::new();
        if holds_bandwidth {
            out.push(self.bbu_release(&key));
        }
        if holds_compute {
            out.push(self.compute_command(&key, "commit"));
        }
        self.transition(id, TxnState::Done, now_ms);
        out
    }

    fn bbu_release(&mut self, key: &str) -> Outgoing {
        let mid = self.mgmt_id();
        self.detached.insert(mid);
        Outgoing {
            to: Peer::Bbu,
            pdu: Pdu::new(PduType::ManageBbu, mid)
                .with_label(Label::Code, "release")
                .with_label(Label::UserData, key),
        }
    }

    fn compute_rollback(&mut self, key: &str) -> Outgoing {
        self.compute_command(key, "rollback")
    }

    fn compute_command(&mut self, key: &str, verb: &str) -> Outgoing {
        let mid = self.mgmt_id();
        self.detached.insert(mid);
        Outgoing {
            to: Peer::Cloud,
            pdu: Pdu::new(PduType::ManageCompute, mid)
                .with_label(Label::Code, verb)
                .with_label(Label::UserData, key),
        }
    }

    fn mgmt_id(&mut self) -> u32 {
        let id = self.next_mgmt_id;
        self.next_mgmt_id = self.next_mgmt_id.wrapping_add(1).max(1);
        id
    }

    fn transition(&mut self, id: TransactionId, to: TxnState, now_ms: u64) {
        let txn = self.txns.get_mut(&id).expect("transition on known transaction");
        let from = txn.state;
        txn.state = to;
        self.state_log.push(StateChange {
            t_ms: now_ms,
            txn: id,
            from,
            to,
        });
    }
}
