//! The controller driven synchronously against the real BBU and compute
//! managers, with per-channel FIFO delivery under a randomized schedule.

use std::collections::{BTreeMap, VecDeque};

use proptest::prelude::*;
use uop::controller::bbu::{BbuConfig, BbuManager};
use uop::controller::compute::{Balance, ComputeConfig, ComputeManager};
use uop::controller::{ClientId, Controller, ControllerConfig, Peer, TransactionId, TxnState};
use uop::pdu::{codes, ACK_DATA, ACK_OK};
use uop::sim::{CloudConfig, Resources, VmSpec};
use uop::{Label, Pdu, PduType};

const REQUEST_TIMEOUT_MS: u64 = 100;
const SESSION_TIMEOUT_MS: u64 = 1_000;

struct Pump {
    ctrl: Controller,
    bbu: BbuManager,
    compute: ComputeManager,
    to_bbu: VecDeque<Pdu>,
    from_bbu: VecDeque<Pdu>,
    to_cloud: VecDeque<Pdu>,
    from_cloud: VecDeque<Pdu>,
    inbox: BTreeMap<ClientId, Vec<Pdu>>,
    now_ms: u64,
}

#[derive(Debug, Clone, Copy, Default)]
struct Faults {
    bbu_failure: f64,
    bbu_drop: f64,
    compute_failure: f64,
}

impl Pump {
    fn new(faults: Faults, seed: u64) -> Self {
        Pump {
            ctrl: Controller::new(ControllerConfig {
                request_timeout_ms: REQUEST_TIMEOUT_MS,
                session_timeout_ms: SESSION_TIMEOUT_MS,
                ..ControllerConfig::default()
            }),
            bbu: BbuManager::new(BbuConfig {
                capacity: 6,
                failure_rate: faults.bbu_failure,
                drop_rate: faults.bbu_drop,
                seed,
            }),
            compute: ComputeManager::new(ComputeConfig {
                cloud: CloudConfig {
                    capacity: Resources::new(8, 12, 40),
                    rng_seed: seed,
                    ..CloudConfig::default()
                },
                failure_rate: faults.compute_failure,
                seed: seed ^ 0x5eed,
                ..ComputeConfig::default()
            })
            .unwrap(),
            to_bbu: VecDeque::new(),
            from_bbu: VecDeque::new(),
            to_cloud: VecDeque::new(),
            from_cloud: VecDeque::new(),
            inbox: BTreeMap::new(),
            now_ms: 0,
        }
    }

    fn route(&mut self, out: Vec<uop::controller::Outgoing>) {
        for o in out {
            match o.to {
                Peer::Bbu => self.to_bbu.push_back(o.pdu),
                Peer::Cloud => self.to_cloud.push_back(o.pdu),
                Peer::Ue(c) => self.inbox.entry(c).or_default().push(o.pdu),
            }
        }
    }

    fn from_ue(&mut self, client: ClientId, pdu: Pdu) {
        let out = self.ctrl.handle(Peer::Ue(client), pdu, self.now_ms);
        self.route(out);
    }

    /// Delivers the head of channel `ch`; false when it was empty.
    fn deliver(&mut self, ch: usize) -> bool {
        match ch % 4 {
            0 => match self.to_bbu.pop_front() {
                Some(p) => {
                    if let Some(reply) = self.bbu.handle_manage_bbu(&p) {
                        self.from_bbu.push_back(reply);
                    }
                }
                None => return false,
            },
            1 => match self.to_cloud.pop_front() {
                Some(p) => {
                    let reply = self.compute.handle_manage_compute(&p);
                    self.from_cloud.push_back(reply);
                }
                None => return false,
            },
            2 => match self.from_bbu.pop_front() {
                Some(p) => {
                    let out = self.ctrl.handle(Peer::Bbu, p, self.now_ms);
                    self.route(out);
                }
                None => return false,
            },
            _ => match self.from_cloud.pop_front() {
                Some(p) => {
                    let out = self.ctrl.handle(Peer::Cloud, p, self.now_ms);
                    self.route(out);
                }
                None => return false,
            },
        }
        true
    }

    fn tick(&mut self, dt_ms: u64) {
        self.now_ms += dt_ms;
        let expiry = self.ctrl.supervise_timeouts(self.now_ms);
        self.route(expiry.outgoing);
    }

    fn drain(&mut self) {
        while (0..4).any(|ch| self.deliver(ch)) {}
    }

    /// Delivers everything and lets every deadline pass.
    fn settle(&mut self) {
        self.drain();
        self.tick(SESSION_TIMEOUT_MS + REQUEST_TIMEOUT_MS);
        self.drain();
    }

    fn snapshot(&self) -> (u32, Resources, Vec<(u64, VmSpec)>) {
        let sim = self.compute.sim();
        let mut vms: Vec<(u64, VmSpec)> = sim.live_vms().map(|v| (v.id.0, v.spec)).collect();
        vms.sort_by_key(|v| v.0);
        (self.bbu.available(), sim.pool().available(), vms)
    }
}

fn offload_req(id: u32, spec: VmSpec) -> Pdu {
    Pdu::new(PduType::OffloadReq, id)
        .with_label(Label::BandwidthUnits, "1")
        .with_label(Label::Vcpu, spec.vcpus.to_string())
        .with_label(Label::RamMb, (spec.ram_gb * 1024).to_string())
        .with_label(Label::DiskGb, spec.disk_gb.to_string())
}

fn txn(client: u64, request_id: u32) -> TransactionId {
    TransactionId {
        client: ClientId(client),
        request_id,
    }
}

fn assert_reversed(pump: &Pump, id: TransactionId) {
    let t = pump.ctrl.transaction(id).unwrap();
    assert_eq!(t.state(), TxnState::Failed);
    assert!(t.ledger().is_empty());
    assert_eq!(pump.bbu.balance(t.key()), 0);
    assert!(pump.compute.balance(t.key()).is_zero());
}

#[test]
fn compute_failure_after_bbu_success_returns_bandwidth() {
    let mut pump = Pump::new(
        Faults {
            compute_failure: 1.0,
            ..Faults::default()
        },
        1,
    );
    let before = pump.snapshot();
    pump.from_ue(ClientId(1), offload_req(1, VmSpec::new(1, 1, 1)));
    pump.drain();
    let answers = &pump.inbox[&ClientId(1)];
    assert_eq!(answers.len(), 1);
    assert_eq!(answers[0].pdu_type, PduType::OffloadDenied);
    assert_eq!(answers[0].ack, codes::COMPUTE_FAILURE);
    assert_reversed(&pump, txn(1, 1));
    assert_eq!(pump.snapshot(), before);
    assert_eq!(pump.compute.sim().live_vms().count(), 0);
}

#[test]
fn session_expiry_reverses_both_allocations() {
    let mut pump = Pump::new(Faults::default(), 2);
    let before = pump.snapshot();
    pump.from_ue(ClientId(1), offload_req(1, VmSpec::new(2, 2, 2)));
    pump.drain();
    let types: Vec<PduType> = pump.inbox[&ClientId(1)].iter().map(|p| p.pdu_type).collect();
    assert_eq!(types, [PduType::OffloadAccept, PduType::OffloadStart]);
    assert_ne!(pump.snapshot(), before);
    pump.tick(SESSION_TIMEOUT_MS);
    pump.drain();
    assert_reversed(&pump, txn(1, 1));
    assert_eq!(pump.ctrl.transaction(txn(1, 1)).unwrap().failure_code(), Some(codes::TIMEOUT));
    assert_eq!(pump.snapshot(), before);
    // The session already had its answer; expiry adds none.
    assert_eq!(pump.inbox[&ClientId(1)].len(), 2);
    // A late FIN finds nothing to close.
    pump.from_ue(ClientId(1), Pdu::new(PduType::OffloadFin, 1));
    assert_eq!(pump.inbox[&ClientId(1)][2].ack, codes::DUPLICATE);
}

#[test]
fn dropped_bbu_allocation_times_out() {
    let mut pump = Pump::new(
        Faults {
            bbu_drop: 1.0,
            ..Faults::default()
        },
        3,
    );
    let before = pump.snapshot();
    pump.from_ue(ClientId(1), offload_req(1, VmSpec::new(1, 1, 1)));
    pump.drain();
    assert!(pump.inbox.is_empty());
    pump.tick(REQUEST_TIMEOUT_MS - 1);
    assert!(pump.inbox.is_empty());
    pump.tick(1);
    pump.drain();
    let answers = &pump.inbox[&ClientId(1)];
    assert_eq!(answers.len(), 1);
    assert_eq!((answers[0].pdu_type, answers[0].ack), (PduType::OffloadDenied, codes::TIMEOUT));
    assert_reversed(&pump, txn(1, 1));
    assert_eq!(pump.snapshot(), before);
}

#[test]
fn late_compute_reply_after_timeout_is_reversed() {
    let mut pump = Pump::new(Faults::default(), 4);
    let before = pump.snapshot();
    pump.from_ue(ClientId(1), offload_req(1, VmSpec::new(1, 1, 1)));
    // BBU answers; the compute request is queued but not yet served.
    pump.deliver(0);
    pump.deliver(2);
    assert_eq!(pump.to_cloud.len(), 1);
    pump.tick(REQUEST_TIMEOUT_MS);
    assert_eq!(pump.inbox[&ClientId(1)][0].ack, codes::TIMEOUT);
    // The allocation lands after the rollback was issued and is undone by it.
    pump.drain();
    assert_reversed(&pump, txn(1, 1));
    assert_eq!(pump.snapshot(), before);
    assert_eq!(pump.inbox[&ClientId(1)].len(), 1);
}

#[test]
fn closing_mid_allocation_rolls_back_and_closing_a_session_completes_it() {
    let mut pump = Pump::new(Faults::default(), 5);
    let before = pump.snapshot();
    pump.from_ue(ClientId(1), offload_req(1, VmSpec::new(1, 1, 1)));
    pump.deliver(0);
    let out = pump.ctrl.on_client_closed(ClientId(1), pump.now_ms);
    pump.route(out);
    pump.drain();
    assert_reversed(&pump, txn(1, 1));
    assert_eq!(pump.snapshot(), before);

    pump.from_ue(ClientId(2), offload_req(1, VmSpec::new(1, 1, 1)));
    pump.drain();
    let out = pump.ctrl.on_client_closed(ClientId(2), pump.now_ms);
    pump.route(out);
    pump.drain();
    assert_eq!(pump.ctrl.transaction(txn(2, 1)).unwrap().state(), TxnState::Done);
    assert_eq!(pump.bbu.available(), pump.bbu.capacity());
    // The warm clone survives.
    assert!(pump.ctrl.clone_of(ClientId(2)).is_some());
}

#[test]
fn bbu_capacity_exhaustion_is_a_bbu_failure() {
    let mut pump = Pump::new(Faults::default(), 6);
    for c in 1..=7 {
        pump.from_ue(ClientId(c), offload_req(1, VmSpec::new(1, 1, 1)));
    }
    pump.drain();
    let denied: Vec<u32> = pump
        .inbox
        .values()
        .flatten()
        .filter(|p| p.pdu_type == PduType::OffloadDenied)
        .map(|p| p.ack)
        .collect();
    // Seven requests against six units of bandwidth.
    assert!(denied.contains(&codes::BBU_FAILURE), "{denied:?}");
    assert!(pump.bbu.available() <= pump.bbu.capacity());
}

// ---------------------------------------------------------------------------
// Randomized schedules

#[derive(Debug, Clone)]
enum Step {
    Request { client: usize, spec: VmSpec },
    Finish { client: usize },
    Deliver(usize),
    Tick(u64),
}

fn arb_step(clients: usize) -> impl Strategy<Value = Step> {
    let spec = (1u32..4, 1u32..4, 1u32..4).prop_map(|(c, r, d)| VmSpec::new(c, r, d));
    prop_oneof![
        2 => (0..clients, spec).prop_map(|(client, spec)| Step::Request { client, spec }),
        1 => (0..clients).prop_map(|client| Step::Finish { client }),
        6 => (0usize..4).prop_map(Step::Deliver),
        1 => (1u64..150).prop_map(Step::Tick),
    ]
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Ue {
    Idle,
    Waiting(u32),
    Started(u32),
    Finishing(u32),
}

fn run_schedule(faults: Faults, seed: u64, steps: &[Step], clients: usize) -> Result<(), TestCaseError> {
    let mut pump = Pump::new(faults, seed);
    let capacity = (pump.bbu.available(), pump.compute.sim().pool().available());
    let mut ues = vec![Ue::Idle; clients];
    let mut next_id = vec![1u32; clients];
    let mut read = vec![0usize; clients];
    let mut requests: Vec<(ClientId, PduType, u32)> = Vec::new();

    let observe = |pump: &Pump, ues: &mut [Ue], read: &mut [usize]| {
        for (i, ue) in ues.iter_mut().enumerate() {
            let Some(inbox) = pump.inbox.get(&ClientId(i as u64 + 1)) else { continue };
            for p in &inbox[read[i]..] {
                *ue = match (*ue, p.pdu_type) {
                    (Ue::Waiting(id), PduType::OffloadStart) if p.request_id == id => Ue::Started(id),
                    (Ue::Waiting(id), PduType::OffloadDenied) if p.request_id == id => Ue::Idle,
                    (Ue::Finishing(id), PduType::OffloadFin) if p.request_id == id => Ue::Idle,
                    (state, _) => state,
                };
            }
            read[i] = inbox.len();
        }
    };

    for step in steps {
        match *step {
            Step::Request { client, spec } => {
                if ues[client] == Ue::Idle {
                    let id = next_id[client];
                    next_id[client] += 1;
                    ues[client] = Ue::Waiting(id);
                    requests.push((ClientId(client as u64 + 1), PduType::OffloadReq, id));
                    pump.from_ue(ClientId(client as u64 + 1), offload_req(id, spec));
                }
            }
            Step::Finish { client } => {
                if let Ue::Started(id) = ues[client] {
                    ues[client] = Ue::Finishing(id);
                    requests.push((ClientId(client as u64 + 1), PduType::OffloadFin, id));
                    pump.from_ue(ClientId(client as u64 + 1), Pdu::new(PduType::OffloadFin, id));
                }
            }
            Step::Deliver(ch) => {
                pump.deliver(ch);
            }
            Step::Tick(dt) => pump.tick(dt),
        }
        observe(&pump, &mut ues, &mut read);
        prop_assert!(pump.bbu.available() <= pump.bbu.capacity());
    }
    pump.settle();

    prop_assert!(pump.ctrl.is_quiescent());
    // Exactly one terminal answer per request.
    for &(client, kind, id) in &requests {
        let answers = pump.inbox.get(&client).map_or(0, |inbox| {
            inbox
                .iter()
                .filter(|p| p.request_id == id)
                .filter(|p| match kind {
                    PduType::OffloadReq => matches!(p.pdu_type, PduType::OffloadStart | PduType::OffloadDenied),
                    _ => p.pdu_type == PduType::OffloadFin,
                })
                .count()
        });
        prop_assert_eq!(answers, 1, "{} {} {}", client, kind, id);
    }
    for p in pump.inbox.values().flatten() {
        prop_assert!(p.ack != ACK_DATA || matches!(p.pdu_type, PduType::OffloadAccept | PduType::OffloadStart));
        if p.pdu_type == PduType::OffloadStart {
            prop_assert!(p.get_str(Label::CloneAddress).is_some());
        }
    }
    // Every transaction terminal; failures fully reversed.
    for t in pump.ctrl.transactions() {
        prop_assert!(t.state().is_terminal(), "{} {:?}", t.id(), t.state());
        if t.state() == TxnState::Failed {
            prop_assert!(t.ledger().is_empty());
            prop_assert!(pump.compute.balance(t.key()).is_zero(), "{}", t.key());
        }
        prop_assert_eq!(pump.bbu.balance(t.key()), 0);
    }
    // All bandwidth is back; compute holds exactly the warm clones.
    prop_assert_eq!(pump.bbu.available(), capacity.0);
    let sim = pump.compute.sim();
    let committed = sim.committed();
    let total = pump.compute.total_balance();
    prop_assert_eq!(
        total,
        Balance {
            vcpus: committed.vcpus as i64,
            ram_gb: committed.ram_gb as i64,
            disk_gb: committed.disk_gb as i64,
        }
    );
    prop_assert_eq!(sim.pool().available().add(&committed), capacity.1);
    let clones: Vec<_> = (1..=clients as u64).filter_map(|c| pump.ctrl.clone_of(ClientId(c))).collect();
    prop_assert_eq!(sim.live_vms().count(), clones.len());
    for vm in clones {
        prop_assert!(sim.vm(vm).is_some_and(|v| v.status != uop::sim::VmStatus::Deleted));
    }
    Ok(())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(300))]

    #[test]
    fn healthy_schedules_stay_atomic(seed: u64, steps in prop::collection::vec(arb_step(4), 1..120)) {
        run_schedule(Faults::default(), seed, &steps, 4)?;
    }

    #[test]
    fn faulty_schedules_stay_atomic(
        seed: u64,
        steps in prop::collection::vec(arb_step(4), 1..120),
        bbu_failure in 0.0f64..0.3,
        bbu_drop in 0.0f64..0.3,
        compute_failure in 0.0f64..0.3,
    ) {
        run_schedule(Faults { bbu_failure, bbu_drop, compute_failure }, seed, &steps, 4)?;
    }
}

#[test]
fn failed_transactions_restore_the_pre_transaction_snapshot() {
    // Sequential transactions, so each one can be diffed in isolation.
    let mut pump = Pump::new(
        Faults {
            bbu_failure: 0.2,
            bbu_drop: 0.2,
            compute_failure: 0.2,
        },
        77,
    );
    let mut failures = 0;
    for id in 1..=60u32 {
        let client = ClientId(u64::from(id % 3) + 1);
        let before = pump.snapshot();
        let spec = VmSpec::new(id % 3 + 1, id % 2 + 1, id % 4 + 1);
        pump.from_ue(client, offload_req(id, spec));
        pump.drain();
        pump.tick(REQUEST_TIMEOUT_MS);
        pump.drain();
        let t = pump.ctrl.transaction(TransactionId { client, request_id: id }).unwrap();
        match t.state() {
            TxnState::Failed => {
                failures += 1;
                assert_eq!(pump.snapshot(), before, "txn {id}");
            }
            TxnState::Executing => {
                pump.from_ue(client, Pdu::new(PduType::OffloadFin, id));
                pump.drain();
                let fin = pump.inbox[&client].last().unwrap();
                assert_eq!((fin.pdu_type, fin.ack), (PduType::OffloadFin, ACK_OK));
            }
            other => panic!("txn {id} left in {other:?}"),
        }
    }
    assert!(failures > 5, "{failures} failures");
}
