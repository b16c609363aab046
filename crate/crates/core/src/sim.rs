//! Deterministic discrete-event model of a small cloud.
//!
//! VM creation and vertical resize latencies are drawn from the scaling
//! models plus truncated Gaussian noise. Time is virtual: commands are issued
//! at the current clock and complete when [`CloudSim::advance`] moves the
//! clock past their completion time.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BinaryHeap};
use std::fmt;
use std::io::Write;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

use crate::scaling::{
    builtin_model, predict_delay, DelaySample, Direction, Mode, ModelError, ResourceKind,
    ScalingScenario,
};

/// RAM limit of a single host in GB.
pub const DEFAULT_HOST_RAM_GB: u32 = 18;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SimError {
    #[error("insufficient capacity: requested {requested}, available {available}")]
    InsufficientCapacity {
        requested: Resources,
        available: Resources,
    },
    #[error("unsupported operation: {0}")]
    UnsupportedOperation(String),
    #[error("invalid delta: continuous scaling changes a resource by exactly one unit, got {kind:?} {from}->{to}")]
    InvalidDelta {
        kind: ResourceKind,
        from: u32,
        to: u32,
    },
    #[error("invalid VM spec {0}")]
    InvalidSpec(String),
    #[error("unknown VM {0}")]
    UnknownVm(VmId),
    #[error("VM {vm} is {status:?}, expected Active")]
    NotActive { vm: VmId, status: VmStatus },
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// A bundle of resource amounts (vCPUs, RAM GB, disk GB).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Hash)]
pub struct Resources {
    pub vcpus: u32,
    pub ram_gb: u32,
    pub disk_gb: u32,
}

impl Resources {
    pub const fn new(vcpus: u32, ram_gb: u32, disk_gb: u32) -> Self {
        Resources {
            vcpus,
            ram_gb,
            disk_gb,
        }
    }

    pub fn get(&self, kind: ResourceKind) -> u32 {
        match kind {
            ResourceKind::Cpu => self.vcpus,
            ResourceKind::Ram => self.ram_gb,
            ResourceKind::Disk => self.disk_gb,
        }
    }

    pub fn fits_in(&self, other: &Resources) -> bool {
        self.vcpus <= other.vcpus && self.ram_gb <= other.ram_gb && self.disk_gb <= other.disk_gb
    }

    pub fn saturating_sub(&self, other: &Resources) -> Resources {
        Resources::new(
            self.vcpus.saturating_sub(other.vcpus),
            self.ram_gb.saturating_sub(other.ram_gb),
            self.disk_gb.saturating_sub(other.disk_gb),
        )
    }

    pub fn add(&self, other: &Resources) -> Resources {
        Resources::new(
            self.vcpus + other.vcpus,
            self.ram_gb + other.ram_gb,
            self.disk_gb + other.disk_gb,
        )
    }
}

impl fmt::Display for Resources {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{}vcpu/{}GB ram/{}GB disk",
            self.vcpus, self.ram_gb, self.disk_gb
        )
    }
}

/// Size of a VM. At least one unit of every resource.
pub type VmSpec = Resources;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct VmId(pub u64);

impl fmt::Display for VmId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "vm-{}", self.0)
    }
}

impl std::str::FromStr for VmId {
    type Err = SimError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        s.strip_prefix("vm-")
            .and_then(|n| n.parse().ok())
            .map(VmId)
            .ok_or_else(|| SimError::InvalidSpec(format!("bad vm id {s:?}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VmStatus {
    Building,
    Active,
    Resizing,
    Deleted,
}

#[derive(Debug, Clone, PartialEq)]
pub struct VmState {
    pub id: VmId,
    pub spec: VmSpec,
    pub status: VmStatus,
    pub created_at: f64,
    pub updated_at: f64,
    /// Target of an in-flight resize.
    pub pending: Option<VmSpec>,
    /// Extra resources debited for an in-flight upsize.
    reserved: Resources,
    /// No command on this VM starts before this virtual time.
    ready_at: f64,
    pending_event: Option<u64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CloudConfig {
    pub capacity: Resources,
    pub host_ram_gb: u32,
    /// Standard deviation of the Gaussian delay noise, seconds.
    pub noise_sigma: f64,
    /// VM start delay with no other VMs running, seconds.
    pub start_base: f64,
    /// Extra start delay per live VM, seconds.
    pub start_slope: f64,
    /// Virtual pause after each command before the next one on the same VM.
    pub cooldown: f64,
    pub rng_seed: u64,
}

impl Default for CloudConfig {
    fn default() -> Self {
        CloudConfig {
            capacity: Resources::new(64, 256, 2000),
            host_ram_gb: DEFAULT_HOST_RAM_GB,
            noise_sigma: 1.0,
            start_base: 30.0,
            start_slope: 0.5,
            cooldown: 5.0,
            rng_seed: 1,
        }
    }
}

impl CloudConfig {
    fn validate(&self) -> Result<(), SimError> {
        let values = [
            self.noise_sigma,
            self.start_base,
            self.start_slope,
            self.cooldown,
        ];
        if values.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(SimError::InvalidSpec(
                "cloud config values must be finite and non-negative".into(),
            ));
        }
        Ok(())
    }
}

/// Free resources of the global pool.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ResourcePool {
    capacity: Resources,
    available: Resources,
}

impl ResourcePool {
    pub fn new(capacity: Resources) -> Self {
        ResourcePool {
            capacity,
            available: capacity,
        }
    }

    pub fn capacity(&self) -> Resources {
        self.capacity
    }

    pub fn available(&self) -> Resources {
        self.available
    }

    pub fn debit(&mut self, amount: &Resources) -> Result<(), SimError> {
        if !amount.fits_in(&self.available) {
            return Err(SimError::InsufficientCapacity {
                requested: *amount,
                available: self.available,
            });
        }
        self.available = self.available.saturating_sub(amount);
        Ok(())
    }

    pub fn credit(&mut self, amount: &Resources) {
        let after = self.available.add(amount);
        debug_assert!(after.fits_in(&self.capacity), "pool over-credited");
        self.available = Resources::new(
            after.vcpus.min(self.capacity.vcpus),
            after.ram_gb.min(self.capacity.ram_gb),
            after.disk_gb.min(self.capacity.disk_gb),
        );
    }
}

/// One resource change inside a resize.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ResizeStep {
    pub scenario: ScalingScenario,
    pub from: u32,
    pub to: u32,
    /// Model input: pre-step size for continuous steps, |delta| otherwise.
    pub x: f64,
    pub delay: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub enum EventKind {
    VmActive,
    ResizeDone { spec: VmSpec },
}

/// A finalized event.
#[derive(Debug, Clone, PartialEq)]
pub struct Event {
    pub time: f64,
    pub vm: VmId,
    pub kind: EventKind,
}

/// One line of the exported trace.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceRecord {
    pub time: f64,
    pub event: &'static str,
    pub vm: VmId,
    pub detail: String,
}

struct Scheduled {
    time: f64,
    seq: u64,
    vm: VmId,
    kind: EventKind,
}

impl PartialEq for Scheduled {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}
impl Eq for Scheduled {}
impl PartialOrd for Scheduled {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for Scheduled {
    // Reversed: BinaryHeap is a max-heap and we want the earliest first.
    fn cmp(&self, other: &Self) -> Ordering {
        other
            .time
            .total_cmp(&self.time)
            .then(other.seq.cmp(&self.seq))
    }
}

pub struct CloudSim {
    config: CloudConfig,
    pool: ResourcePool,
    vms: BTreeMap<VmId, VmState>,
    queue: BinaryHeap<Scheduled>,
    now: f64,
    seq: u64,
    next_vm: u64,
    rng: ChaCha8Rng,
    noise: Option<Normal<f64>>,
    trace: Vec<TraceRecord>,
    delays: Vec<(ScalingScenario, DelaySample)>,
    /// Pool resources set aside by callers, outside any VM.
    held: Resources,
}

impl fmt::Debug for CloudSim {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("CloudSim")
            .field("now", &self.now)
            .field("pool", &self.pool)
            .field("vms", &self.vms.len())
            .finish()
    }
}

impl CloudSim {
    pub fn new(config: CloudConfig) -> Result<Self, SimError> {
        config.validate()?;
        let noise = if config.noise_sigma > 0.0 {
            Some(Normal::new(0.0, config.noise_sigma).expect("validated sigma"))
        } else {
            None
        };
        Ok(CloudSim {
            pool: ResourcePool::new(config.capacity),
            rng: ChaCha8Rng::seed_from_u64(config.rng_seed),
            noise,
            config,
            vms: BTreeMap::new(),
            queue: BinaryHeap::new(),
            now: 0.0,
            seq: 0,
            next_vm: 1,
            trace: Vec::new(),
            delays: Vec::new(),
            held: Resources::default(),
        })
    }

    pub fn config(&self) -> &CloudConfig {
        &self.config
    }

    pub fn now(&self) -> f64 {
        self.now
    }

    pub fn pool(&self) -> &ResourcePool {
        &self.pool
    }

    pub fn vm(&self, id: VmId) -> Option<&VmState> {
        self.vms.get(&id).filter(|vm| vm.status != VmStatus::Deleted)
    }

    /// All VMs that are not deleted.
    pub fn live_vms(&self) -> impl Iterator<Item = &VmState> {
        self.vms.values().filter(|vm| vm.status != VmStatus::Deleted)
    }

    pub fn trace(&self) -> &[TraceRecord] {
        &self.trace
    }

    /// Every sampled resize delay with the scenario that produced it.
    pub fn delay_log(&self) -> &[(ScalingScenario, DelaySample)] {
        &self.delays
    }

    pub fn is_idle(&self) -> bool {
        self.queue.is_empty()
    }

    /// Sum of live VM specs, in-flight upsize reservations and holds.
    pub fn committed(&self) -> Resources {
        self.live_vms()
            .fold(self.held, |acc, vm| acc.add(&vm.spec).add(&vm.reserved))
    }

    pub fn held(&self) -> Resources {
        self.held
    }

    /// Debits `amount` from the pool without assigning it to a VM.
    pub fn hold(&mut self, amount: Resources) -> Result<(), SimError> {
        self.pool.debit(&amount)?;
        self.held = self.held.add(&amount);
        Ok(())
    }

    /// Credits back part of what [`CloudSim::hold`] set aside. Amounts beyond
    /// the current holding are ignored.
    pub fn release_hold(&mut self, amount: Resources) {
        let amount = Resources::new(
            amount.vcpus.min(self.held.vcpus),
            amount.ram_gb.min(self.held.ram_gb),
            amount.disk_gb.min(self.held.disk_gb),
        );
        self.held = self.held.saturating_sub(&amount);
        self.pool.credit(&amount);
    }

    fn validate_spec(&self, spec: &VmSpec) -> Result<(), SimError> {
        if spec.vcpus < 1 || spec.ram_gb < 1 || spec.disk_gb < 1 {
            return Err(SimError::InvalidSpec(format!(
                "{spec}: every resource must be at least 1"
            )));
        }
        if spec.ram_gb > self.config.host_ram_gb {
            return Err(SimError::InvalidSpec(format!(
                "{spec}: RAM exceeds the {} GB host limit",
                self.config.host_ram_gb
            )));
        }
        Ok(())
    }

    fn sample_noise(&mut self) -> f64 {
        match &self.noise {
            Some(normal) => normal.sample(&mut self.rng),
            None => 0.0,
        }
    }

    fn schedule(&mut self, time: f64, vm: VmId, kind: EventKind) -> u64 {
        let seq = self.seq;
        self.seq += 1;
        self.queue.push(Scheduled {
            time,
            seq,
            vm,
            kind,
        });
        seq
    }

    fn record(&mut self, time: f64, event: &'static str, vm: VmId, detail: String) {
        self.trace.push(TraceRecord {
            time,
            event,
            vm,
            detail,
        });
    }

    /// Starts a VM. Returns its id and the sampled start delay.
    pub fn create_vm(&mut self, spec: VmSpec) -> Result<(VmId, f64), SimError> {
        self.validate_spec(&spec)?;
        self.pool.debit(&spec)?;
        let population = self.live_vms().count() as f64;
        let mean = self.config.start_base + self.config.start_slope * population;
        let delay = (mean + self.sample_noise()).max(0.0);

        let id = VmId(self.next_vm);
        self.next_vm += 1;
        let done_at = self.now + delay;
        let event = self.schedule(done_at, id, EventKind::VmActive);
        self.vms.insert(
            id,
            VmState {
                id,
                spec,
                status: VmStatus::Building,
                created_at: self.now,
                updated_at: self.now,
                pending: None,
                reserved: Resources::default(),
                ready_at: done_at + self.config.cooldown,
                pending_event: Some(event),
            },
        );
        self.record(self.now, "create", id, format!("{spec} delay={delay:.4}"));
        Ok((id, delay))
    }

    /// Plans the per-resource steps of a resize without touching state.
    pub fn plan_resize(
        &self,
        id: VmId,
        target: VmSpec,
        mode: Mode,
    ) -> Result<Vec<(ScalingScenario, u32, u32, f64)>, SimError> {
        let vm = self.vm(id).ok_or(SimError::UnknownVm(id))?;
        self.validate_spec(&target)?;
        let current = vm.spec;
        if target.disk_gb < current.disk_gb {
            return Err(SimError::UnsupportedOperation(
                "disk downscaling is not supported".into(),
            ));
        }
        let mut steps = Vec::new();
        for kind in [ResourceKind::Cpu, ResourceKind::Ram, ResourceKind::Disk] {
            let (from, to) = (current.get(kind), target.get(kind));
            if from == to {
                continue;
            }
            let direction = if to > from {
                Direction::Up
            } else {
                Direction::Down
            };
            let delta = from.abs_diff(to);
            let x = match mode {
                Mode::Continuous if delta != 1 => {
                    return Err(SimError::InvalidDelta { kind, from, to })
                }
                Mode::Continuous => from as f64,
                Mode::NonContinuous => delta as f64,
            };
            steps.push((ScalingScenario::new(kind, direction, mode), from, to, x));
        }
        Ok(steps)
    }

    /// Resizes an active VM. Each changed resource is one sequential step;
    /// the returned delay is the sum of the step delays.
    pub fn resize_vm(&mut self, id: VmId, target: VmSpec, mode: Mode) -> Result<f64, SimError> {
        Ok(self
            .resize_vm_steps(id, target, mode)?
            .iter()
            .map(|s| s.delay)
            .sum())
    }

    pub fn resize_vm_steps(
        &mut self,
        id: VmId,
        target: VmSpec,
        mode: Mode,
    ) -> Result<Vec<ResizeStep>, SimError> {
        let plan = self.plan_resize(id, target, mode)?;
        let vm = &self.vms[&id];
        if vm.status != VmStatus::Active {
            return Err(SimError::NotActive {
                vm: id,
                status: vm.status,
            });
        }
        let current = vm.spec;
        let growth = target.saturating_sub(&current);
        self.pool.debit(&growth)?;

        let mut steps = Vec::with_capacity(plan.len());
        for (scenario, from, to, x) in plan {
            let model = builtin_model(scenario)?;
            let delay = (predict_delay(&model, x) + self.sample_noise()).max(0.0);
            self.delays.push((scenario, DelaySample { x, t: delay }));
            steps.push(ResizeStep {
                scenario,
                from,
                to,
                x,
                delay,
            });
        }
        let total: f64 = steps.iter().map(|s| s.delay).sum();
        let vm = &self.vms[&id];
        let start = self.now.max(vm.ready_at);
        let done_at = start + total;
        let event = self.schedule(done_at, id, EventKind::ResizeDone { spec: target });
        let cooldown = self.config.cooldown;
        let now = self.now;
        let vm = self.vms.get_mut(&id).expect("checked above");
        vm.status = VmStatus::Resizing;
        vm.pending = Some(target);
        vm.reserved = growth;
        vm.updated_at = now;
        vm.ready_at = done_at + cooldown;
        vm.pending_event = Some(event);
        for s in &steps {
            self.record(
                now,
                "resize",
                id,
                format!(
                    "{} {}->{} x={} delay={:.4}",
                    s.scenario, s.from, s.to, s.x, s.delay
                ),
            );
        }
        Ok(steps)
    }

    /// Deletes a VM, cancelling any in-flight command, and credits its
    /// pre-resize spec (and any upsize reservation) back to the pool.
    pub fn terminate_vm(&mut self, id: VmId) -> Result<(), SimError> {
        let now = self.now;
        let vm = self
            .vms
            .get_mut(&id)
            .filter(|vm| vm.status != VmStatus::Deleted)
            .ok_or(SimError::UnknownVm(id))?;
        let credit = vm.spec.add(&vm.reserved);
        let cancelled = vm.status == VmStatus::Resizing;
        vm.status = VmStatus::Deleted;
        vm.pending = None;
        vm.reserved = Resources::default();
        vm.pending_event = None;
        vm.updated_at = now;
        self.pool.credit(&credit);
        let detail = if cancelled {
            "resize cancelled".to_string()
        } else {
            String::new()
        };
        self.record(now, "terminate", id, detail);
        Ok(())
    }

    /// Puts a VM back to `spec` immediately, cancelling any in-flight resize.
    /// Accounting-only reversal used by transaction rollback; it bypasses the
    /// resize rules (including the disk restriction) and never fails. A
    /// deleted or unknown VM is ignored.
    pub fn restore_spec(&mut self, id: VmId, spec: VmSpec) {
        let now = self.now;
        let Some(vm) = self
            .vms
            .get_mut(&id)
            .filter(|vm| vm.status != VmStatus::Deleted)
        else {
            return;
        };
        let held = vm.spec.add(&vm.reserved);
        vm.spec = spec;
        vm.reserved = Resources::default();
        vm.pending = None;
        if vm.status == VmStatus::Resizing {
            vm.status = VmStatus::Active;
            vm.pending_event = None;
        }
        vm.updated_at = now;
        self.pool.credit(&held);
        // Restoring a previously held spec always fits: it was debited before.
        self.pool
            .debit(&spec)
            .expect("restored spec was previously debited");
        self.record(now, "restore", id, format!("{spec}"));
    }

    /// Moves the clock forward by `dt` seconds and finalizes every event due
    /// by then, in timestamp order with ties in insertion order.
    pub fn advance(&mut self, dt: f64) -> Vec<Event> {
        self.advance_to(self.now + dt.max(0.0))
    }

    pub fn advance_to(&mut self, time: f64) -> Vec<Event> {
        let mut done = Vec::new();
        while let Some(next) = self.queue.peek() {
            if next.time > time {
                break;
            }
            let ev = self.queue.pop().expect("peeked");
            if let Some(event) = self.finalize(ev) {
                done.push(event);
            }
        }
        self.now = self.now.max(time);
        done
    }

    /// Advances until no events remain.
    pub fn run_until_idle(&mut self) -> Vec<Event> {
        let mut done = Vec::new();
        while let Some(next) = self.queue.peek() {
            let t = next.time;
            done.extend(self.advance_to(t));
        }
        done
    }

    fn finalize(&mut self, ev: Scheduled) -> Option<Event> {
        let vm = self.vms.get_mut(&ev.vm)?;
        if vm.pending_event != Some(ev.seq) {
            return None;
        }
        vm.pending_event = None;
        vm.updated_at = ev.time;
        let record = match &ev.kind {
            EventKind::VmActive => {
                vm.status = VmStatus::Active;
                ("active", String::new())
            }
            EventKind::ResizeDone { spec } => {
                let shrink = vm.spec.saturating_sub(spec);
                vm.spec = *spec;
                vm.reserved = Resources::default();
                vm.pending = None;
                vm.status = VmStatus::Active;
                self.pool.credit(&shrink);
                ("resized", format!("{spec}"))
            }
        };
        self.now = self.now.max(ev.time);
        self.record(ev.time, record.0, ev.vm, record.1);
        Some(Event {
            time: ev.time,
            vm: ev.vm,
            kind: ev.kind,
        })
    }

    /// Writes the trace as CSV `t_virtual,event,vm_id,detail`.
    pub fn write_trace_csv(&self, writer: impl Write) -> Result<(), ModelError> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["t_virtual", "event", "vm_id", "detail"])?;
        for r in &self.trace {
            w.write_record([
                format!("{:.4}", r.time),
                r.event.to_string(),
                r.vm.to_string(),
                r.detail.clone(),
            ])?;
        }
        w.flush().map_err(|e| ModelError::Io(e.to_string()))
    }

    /// Delay samples recorded for one scenario, in `x,t_seconds` form.
    pub fn samples_for(&self, scenario: ScalingScenario) -> Vec<DelaySample> {
        self.delays
            .iter()
            .filter(|(s, _)| *s == scenario)
            .map(|(_, d)| *d)
            .collect()
    }
}
