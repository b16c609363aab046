//! Cloud backend: applies Manage_Compute commands to the simulated cloud.

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::pdu::{codes, Label, Pdu, PduType, ACK_OK};
use crate::scaling::Mode;
use crate::sim::{CloudConfig, CloudSim, Resources, SimError, VmId, VmSpec};

#[derive(Debug, Clone, PartialEq)]
pub struct ComputeConfig {
    pub cloud: CloudConfig,
    /// Spec of a newly created clone when the request names none.
    pub default_spec: VmSpec,
    /// Probability that an allocation fails with ack = 3.
    pub failure_rate: f64,
    pub seed: u64,
}

impl Default for ComputeConfig {
    fn default() -> Self {
        ComputeConfig {
            cloud: CloudConfig::default(),
            default_spec: VmSpec::new(1, 1, 1),
            failure_rate: 0.0,
            seed: 2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Undo {
    Created(VmId),
    /// Previous spec, and the shrink held back from the pool until commit.
    Resized(VmId, VmSpec, Resources),
    Nothing,
}

/// Signed resource change attributed to one correlation key.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Balance {
    pub vcpus: i64,
    pub ram_gb: i64,
    pub disk_gb: i64,
}

impl Balance {
    fn from_diff(after: &Resources, before: &Resources) -> Self {
        Balance {
            vcpus: after.vcpus as i64 - before.vcpus as i64,
            ram_gb: after.ram_gb as i64 - before.ram_gb as i64,
            disk_gb: after.disk_gb as i64 - before.disk_gb as i64,
        }
    }

    fn add(&mut self, other: Balance) {
        self.vcpus += other.vcpus;
        self.ram_gb += other.ram_gb;
        self.disk_gb += other.disk_gb;
    }

    pub fn is_zero(&self) -> bool {
        *self == Balance::default()
    }
}

#[derive(Debug)]
pub struct ComputeManager {
    sim: CloudSim,
    default_spec: VmSpec,
    failure_rate: f64,
    rng: ChaCha8Rng,
    undo: HashMap<String, Undo>,
    balance: HashMap<String, Balance>,
}

fn parse_field(pdu: &Pdu, label: Label) -> Result<Option<u32>, String> {
    match pdu.get_str(label) {
        None => Ok(None),
        Some(s) => s
            .trim()
            .parse::<u32>()
            .map(Some)
            .map_err(|_| format!("{} is not a count: {s:?}", label.as_str())),
    }
}

fn requested_spec(pdu: &Pdu, base: VmSpec) -> Result<VmSpec, String> {
    let mut spec = base;
    if let Some(v) = parse_field(pdu, Label::Vcpu)? {
        spec.vcpus = v;
    }
    if let Some(mb) = parse_field(pdu, Label::RamMb)? {
        if mb % 1024 != 0 {
            return Err(format!("ram_mb {mb} is not a whole number of GB"));
        }
        spec.ram_gb = mb / 1024;
    }
    if let Some(gb) = parse_field(pdu, Label::DiskGb)? {
        spec.disk_gb = gb;
    }
    Ok(spec)
}

fn sim_error_code(e: &SimError) -> u32 {
    match e {
        SimError::InsufficientCapacity { .. } => codes::CAPACITY,
        SimError::UnsupportedOperation(_)
        | SimError::InvalidDelta { .. }
        | SimError::InvalidSpec(_) => codes::UNSUPPORTED,
        _ => codes::COMPUTE_FAILURE,
    }
}

impl ComputeManager {
    pub fn new(config: ComputeConfig) -> Result<Self, SimError> {
        Ok(ComputeManager {
            sim: CloudSim::new(config.cloud)?,
            default_spec: config.default_spec,
            failure_rate: config.failure_rate,
            rng: ChaCha8Rng::seed_from_u64(config.seed),
            undo: HashMap::new(),
            balance: HashMap::new(),
        })
    }

    pub fn sim(&self) -> &CloudSim {
        &self.sim
    }

    pub fn sim_mut(&mut self) -> &mut CloudSim {
        &mut self.sim
    }

    /// Net resources held on behalf of `key` (zero after a rollback).
    pub fn balance(&self, key: &str) -> Balance {
        self.balance.get(key).copied().unwrap_or_default()
    }

    /// Sum of every key's balance.
    pub fn total_balance(&self) -> Balance {
        let mut total = Balance::default();
        for b in self.balance.values() {
            total.add(*b);
        }
        total
    }

    fn credit_key(&mut self, key: &str, delta: Balance) {
        self.balance.entry(key.to_string()).or_default().add(delta);
    }

    /// Answers one Manage_Compute command.
    ///
    /// Verbs (the `code` binding):
    /// - `allocate` (default): without `clone_address`, create a VM; with it,
    ///   resize that VM to the requested `vcpu`/`ram_mb`/`disk_gb` values.
    ///   Unit deltas scale continuously, larger deltas non-continuously.
    ///   Resources freed by a shrink stay held until the key commits.
    /// - `rollback`: undo whatever the `user_data` key did. Always acked.
    /// - `commit`: make the key's change permanent. Always acked.
    /// - `terminate`: delete the VM named by `clone_address`.
    ///
    /// The ack=1 reply carries `clone_address`, the resulting spec and the
    /// sampled delay in seconds as `user_data`.
    pub fn handle_manage_compute(&mut self, pdu: &Pdu) -> Pdu {
        let reply = Pdu::new(PduType::ManageCompute, pdu.request_id);
        if pdu.pdu_type != PduType::ManageCompute || pdu.ack != 0 {
            return reply.with_ack(codes::UNSUPPORTED);
        }
        let key = pdu.get_str(Label::UserData).unwrap_or("").to_string();
        let verb = pdu.get_str(Label::Code).unwrap_or("allocate");
        let result = match verb {
            "allocate" => self.allocate(pdu, &key),
            "rollback" => {
                self.rollback(&key);
                return reply.with_ack(ACK_OK);
            }
            "commit" => {
                self.commit(&key);
                return reply.with_ack(ACK_OK);
            }
            "terminate" => self.terminate(pdu),
            other => Err((codes::UNSUPPORTED, format!("unknown verb {other:?}"))),
        };
        match result {
            Ok((vm, delay)) => {
                let spec = self.sim.vm(vm).map(|v| v.spec).unwrap_or_default();
                reply
                    .with_ack(ACK_OK)
                    .with_label(Label::CloneAddress, vm.to_string())
                    .with_label(Label::Vcpu, spec.vcpus.to_string())
                    .with_label(Label::RamMb, (spec.ram_gb * 1024).to_string())
                    .with_label(Label::DiskGb, spec.disk_gb.to_string())
                    .with_label(Label::UserData, format!("{delay:.4}"))
            }
            Err((code, message)) => reply
                .with_ack(code)
                .with_label(Label::ErrorMessage, message),
        }
    }

    fn allocate(&mut self, pdu: &Pdu, key: &str) -> Result<(VmId, f64), (u32, String)> {
        if self.failure_rate > 0.0 && self.rng.random_bool(self.failure_rate) {
            return Err((codes::COMPUTE_FAILURE, "injected compute failure".into()));
        }
        let target_vm = match pdu.get_str(Label::CloneAddress) {
            None => None,
            Some(s) => Some(
                s.parse::<VmId>()
                    .map_err(|e| (codes::COMPUTE_FAILURE, e.to_string()))?,
            ),
        };
        let sim_err = |e: SimError| (sim_error_code(&e), e.to_string());
        match target_vm {
            None => {
                let spec = requested_spec(pdu, self.default_spec)
                    .map_err(|m| (codes::UNSUPPORTED, m))?;
                let (vm, delay) = self.sim.create_vm(spec).map_err(sim_err)?;
                self.sim.run_until_idle();
                self.undo.insert(key.to_string(), Undo::Created(vm));
                self.credit_key(key, Balance::from_diff(&spec, &Resources::default()));
                Ok((vm, delay))
            }
            Some(vm) => {
                let current = self
                    .sim
                    .vm(vm)
                    .ok_or_else(|| (codes::COMPUTE_FAILURE, format!("unknown VM {vm}")))?
                    .spec;
                let target =
                    requested_spec(pdu, current).map_err(|m| (codes::UNSUPPORTED, m))?;
                if target == current {
                    self.undo.insert(key.to_string(), Undo::Nothing);
                    return Ok((vm, 0.0));
                }
                let unit_steps = [
                    (current.vcpus, target.vcpus),
                    (current.ram_gb, target.ram_gb),
                    (current.disk_gb, target.disk_gb),
                ]
                .iter()
                .all(|(a, b)| a == b || a.abs_diff(*b) == 1);
                let mode = if unit_steps {
                    Mode::Continuous
                } else {
                    Mode::NonContinuous
                };
                let delay = self.sim.resize_vm(vm, target, mode).map_err(sim_err)?;
                self.sim.run_until_idle();
                // Freed resources stay out of the pool so a rollback can restore.
                let shrink = current.saturating_sub(&target);
                self.sim
                    .hold(shrink)
                    .expect("shrink was credited by the completed resize");
                self.undo
                    .insert(key.to_string(), Undo::Resized(vm, current, shrink));
                self.credit_key(key, Balance::from_diff(&target.add(&shrink), &current));
                Ok((vm, delay))
            }
        }
    }

    fn rollback(&mut self, key: &str) {
        let Some(undo) = self.undo.remove(key) else {
            return;
        };
        match undo {
            Undo::Created(vm) => {
                if let Some(spec) = self.sim.vm(vm).map(|v| v.spec) {
                    let _ = self.sim.terminate_vm(vm);
                    self.credit_key(key, Balance::from_diff(&Resources::default(), &spec));
                }
            }
            Undo::Resized(vm, previous, shrink) => {
                self.sim.release_hold(shrink);
                self.credit_key(key, Balance::from_diff(&Resources::default(), &shrink));
                if let Some(spec) = self.sim.vm(vm).map(|v| v.spec) {
                    self.sim.restore_spec(vm, previous);
                    self.credit_key(key, Balance::from_diff(&previous, &spec));
                }
            }
            Undo::Nothing => {}
        }
    }

    /// Makes the key's change permanent: forgets its undo record and returns
    /// any held shrink to the pool.
    fn commit(&mut self, key: &str) {
        if let Some(Undo::Resized(_, _, shrink)) = self.undo.remove(key) {
            self.sim.release_hold(shrink);
            self.credit_key(key, Balance::from_diff(&Resources::default(), &shrink));
        }
    }

    fn terminate(&mut self, pdu: &Pdu) -> Result<(VmId, f64), (u32, String)> {
        let vm = pdu
            .get_str(Label::CloneAddress)
            .ok_or((codes::COMPUTE_FAILURE, "terminate needs clone_address".to_string()))?
            .parse::<VmId>()
            .map_err(|e| (codes::COMPUTE_FAILURE, e.to_string()))?;
        self.sim
            .terminate_vm(vm)
            .map_err(|e| (codes::COMPUTE_FAILURE, e.to_string()))?;
        Ok((vm, 0.0))
    }
}
