//! End-to-end runs: BBU stub, cloud backend, controller, clone and a set of
//! concurrent UE clients wired over one [`Network`], followed by an audit of
//! the resulting state and wire trace.
//!
//! Configuration is line-oriented `key = value` text with `[section]`
//! headers; `#` starts a comment.
//!
//! ```text
//! [scenario]
//! transport = loopback        # or tcp
//! clients = 8
//! transactions_per_client = 10
//! tasks_per_transaction = 1
//! task_mix = fib              # or mixed
//! timeout_ms = 5000           # controller deadline per sub-transaction
//! seed = 1
//! port_base = 7077            # controller; clone, bbu, cloud follow
//!
//! [injections]
//! bbu_failure_rate = 0.1
//! bbu_drop_rate = 0.05
//! compute_failure_rate = 0.1
//! ```
//!
//! The full key list is in [`ScenarioConfig::parse`].

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex, MutexGuard};
use std::thread;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::controller::bbu::{BbuConfig, BbuManager};
use crate::controller::compute::{ComputeConfig, ComputeManager};
use crate::controller::server::{spawn_bbu, spawn_compute, ControllerServer};
use crate::controller::{ControllerConfig, TxnState};
use crate::endpoints::client::{ClientError, OffloadManifest, UeClient};
use crate::endpoints::clone::spawn_clone;
use crate::endpoints::tasks::{clone_execute, TaskDescriptor};
use crate::pdu::{codes, PduType, ACK_DATA};
use crate::sim::{CloudConfig, Resources, SimError, VmSpec};
use crate::trace::{WireEvent, WireTrace};
use crate::transport::{Endpoint, Network, TransportError, CONTROLLER_PORT};

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("config line {line}: {message}")]
    Config { line: usize, message: String },
    #[error("invalid scenario: {0}")]
    Invalid(String),
    #[error(transparent)]
    Transport(#[from] TransportError),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TransportMode {
    Loopback,
    Tcp,
}

/// Which tasks the clients offload.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TaskMix {
    /// `fib` only.
    Fib,
    /// Rotates through `fib`, `matmul_n`, `fail_always` and an unknown task.
    Mixed,
}

/// Failure probabilities applied by the resource managers.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct Injections {
    pub bbu_failure_rate: f64,
    pub bbu_drop_rate: f64,
    pub compute_failure_rate: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioConfig {
    pub transport: TransportMode,
    pub clients: usize,
    pub transactions_per_client: usize,
    pub tasks_per_transaction: usize,
    pub task_mix: TaskMix,
    pub timeout_ms: u64,
    /// Defaults to twice `timeout_ms` plus one second, so that the
    /// controller's timeout answer arrives first.
    pub client_timeout_ms: Option<u64>,
    pub session_timeout_ms: u64,
    pub seed: u64,
    pub port_base: u16,
    pub injections: Injections,
    pub cloud: CloudConfig,
    pub bbu_capacity: u32,
    pub bandwidth_units: u32,
    /// Ask for a random vCPU count in 1..=4 per transaction, so that later
    /// transactions resize the clone created by the first.
    pub vary_spec: bool,
    pub controller_trace: Option<PathBuf>,
    pub wire_trace: Option<PathBuf>,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        ScenarioConfig {
            transport: TransportMode::Loopback,
            clients: 1,
            transactions_per_client: 1,
            tasks_per_transaction: 1,
            task_mix: TaskMix::Fib,
            timeout_ms: 5000,
            client_timeout_ms: None,
            session_timeout_ms: 60_000,
            seed: 1,
            port_base: CONTROLLER_PORT,
            injections: Injections::default(),
            cloud: CloudConfig::default(),
            bbu_capacity: 100,
            bandwidth_units: 1,
            vary_spec: false,
            controller_trace: None,
            wire_trace: None,
        }
    }
}

fn parse_value<T: std::str::FromStr>(line: usize, key: &str, value: &str) -> Result<T, ScenarioError> {
    value.parse().map_err(|_| ScenarioError::Config {
        line,
        message: format!("bad value {value:?} for {key}"),
    })
}

impl ScenarioConfig {
    pub fn load(path: &Path) -> Result<Self, ScenarioError> {
        Self::parse(&fs::read_to_string(path)?)
    }

    /// Parses the config text. Keys by section:
    ///
    /// - `[scenario]`: `transport`, `clients`, `transactions_per_client`,
    ///   `tasks_per_transaction`, `task_mix`, `timeout_ms`,
    ///   `client_timeout_ms`, `session_timeout_ms`, `seed`, `port_base`
    /// - `[injections]`: `bbu_failure_rate`, `bbu_drop_rate`,
    ///   `compute_failure_rate`
    /// - `[cloud]`: `vcpus`, `ram_gb`, `disk_gb`, `host_ram_gb`,
    ///   `noise_sigma`, `start_base_s`, `start_slope_s`, `cooldown_s`, `seed`
    /// - `[bbu]`: `capacity`
    /// - `[request]`: `bandwidth_units`, `vary_spec`
    /// - `[output]`: `controller_trace`, `wire_trace`
    pub fn parse(text: &str) -> Result<Self, ScenarioError> {
        let mut cfg = ScenarioConfig::default();
        let mut section = String::from("scenario");
        for (idx, raw) in text.lines().enumerate() {
            let line = idx + 1;
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            if let Some(name) = content.strip_prefix('[').and_then(|s| s.strip_suffix(']')) {
                section = name.trim().to_string();
                continue;
            }
            let (key, value) = content.split_once('=').ok_or_else(|| ScenarioError::Config {
                line,
                message: format!("expected key = value, got {content:?}"),
            })?;
            let (k, value) = (key.trim(), value.trim());
            let bad_value = || ScenarioError::Config {
                line,
                message: format!("bad value {value:?} for {k}"),
            };
            match (section.as_str(), k) {
                ("scenario", "transport") => {
                    cfg.transport = match value {
                        "loopback" => TransportMode::Loopback,
                        "tcp" => TransportMode::Tcp,
                        _ => return Err(bad_value()),
                    }
                }
                ("scenario", "clients") => cfg.clients = parse_value(line, k, value)?,
                ("scenario", "transactions_per_client") => {
                    cfg.transactions_per_client = parse_value(line, k, value)?
                }
                ("scenario", "tasks_per_transaction") => {
                    cfg.tasks_per_transaction = parse_value(line, k, value)?
                }
                ("scenario", "task_mix") => {
                    cfg.task_mix = match value {
                        "fib" => TaskMix::Fib,
                        "mixed" => TaskMix::Mixed,
                        _ => return Err(bad_value()),
                    }
                }
                ("scenario", "timeout_ms") => cfg.timeout_ms = parse_value(line, k, value)?,
                ("scenario", "client_timeout_ms") => {
                    cfg.client_timeout_ms = Some(parse_value(line, k, value)?)
                }
                ("scenario", "session_timeout_ms") => {
                    cfg.session_timeout_ms = parse_value(line, k, value)?
                }
                ("scenario", "seed") => cfg.seed = parse_value(line, k, value)?,
                ("scenario", "port_base") => cfg.port_base = parse_value(line, k, value)?,
                ("injections", "bbu_failure_rate") => {
                    cfg.injections.bbu_failure_rate = parse_value(line, k, value)?
                }
                ("injections", "bbu_drop_rate") => {
                    cfg.injections.bbu_drop_rate = parse_value(line, k, value)?
                }
                ("injections", "compute_failure_rate") => {
                    cfg.injections.compute_failure_rate = parse_value(line, k, value)?
                }
                ("cloud", "vcpus") => cfg.cloud.capacity.vcpus = parse_value(line, k, value)?,
                ("cloud", "ram_gb") => cfg.cloud.capacity.ram_gb = parse_value(line, k, value)?,
                ("cloud", "disk_gb") => cfg.cloud.capacity.disk_gb = parse_value(line, k, value)?,
                ("cloud", "host_ram_gb") => cfg.cloud.host_ram_gb = parse_value(line, k, value)?,
                ("cloud", "noise_sigma") => cfg.cloud.noise_sigma = parse_value(line, k, value)?,
                ("cloud", "start_base_s") => cfg.cloud.start_base = parse_value(line, k, value)?,
                ("cloud", "start_slope_s") => cfg.cloud.start_slope = parse_value(line, k, value)?,
                ("cloud", "cooldown_s") => cfg.cloud.cooldown = parse_value(line, k, value)?,
                ("cloud", "seed") => cfg.cloud.rng_seed = parse_value(line, k, value)?,
                ("bbu", "capacity") => cfg.bbu_capacity = parse_value(line, k, value)?,
                ("request", "bandwidth_units") => cfg.bandwidth_units = parse_value(line, k, value)?,
                ("request", "vary_spec") => cfg.vary_spec = parse_value(line, k, value)?,
                ("output", "controller_trace") => cfg.controller_trace = Some(value.into()),
                ("output", "wire_trace") => cfg.wire_trace = Some(value.into()),
                _ => {
                    return Err(ScenarioError::Config {
                        line,
                        message: format!("unknown key {k:?} in [{section}]"),
                    })
                }
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), ScenarioError> {
        let invalid = |m: &str| Err(ScenarioError::Invalid(m.to_string()));
        if self.clients == 0 || self.transactions_per_client == 0 || self.tasks_per_transaction == 0
        {
            return invalid("clients, transactions_per_client and tasks_per_transaction must be >= 1");
        }
        let rates = [
            self.injections.bbu_failure_rate,
            self.injections.bbu_drop_rate,
            self.injections.compute_failure_rate,
        ];
        if rates.iter().any(|r| !(0.0..=1.0).contains(r)) {
            return invalid("injection rates must lie in [0, 1]");
        }
        if self.timeout_ms == 0 {
            return invalid("timeout_ms must be >= 1");
        }
        if self.client_timeout() <= self.timeout_ms {
            return invalid("client_timeout_ms must exceed timeout_ms");
        }
        if self.port_base == 0 || self.port_base > u16::MAX - 3 {
            return invalid("port_base must leave room for four ports");
        }
        Ok(())
    }

    pub fn client_timeout(&self) -> u64 {
        self.client_timeout_ms.unwrap_or(2 * self.timeout_ms + 1000)
    }

    fn endpoint(&self, offset: u16) -> Endpoint {
        Endpoint::localhost(self.port_base + offset)
    }
}

/// What one UE saw for one transaction.
#[derive(Debug, Clone, PartialEq)]
pub enum ClientOutcome {
    Completed,
    Denied(u32),
    Error(String),
}

/// Audit of one run. The run passed iff `violations` is empty.
#[derive(Debug, Clone, Default)]
pub struct ScenarioReport {
    pub transactions: usize,
    pub done: usize,
    pub failed: usize,
    /// Offload_Denied codes seen by clients, with counts.
    pub denials: BTreeMap<u32, usize>,
    pub tasks_run: usize,
    pub violations: Vec<String>,
    pub wire: Vec<WireEvent>,
    pub state_log: Vec<String>,
    pub elapsed: Duration,
}

impl ScenarioReport {
    pub fn passed(&self) -> bool {
        self.violations.is_empty()
    }
}

impl fmt::Display for ScenarioReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "transactions={} done={} failed={} tasks={} pdus={} elapsed_ms={}",
            self.transactions,
            self.done,
            self.failed,
            self.tasks_run,
            self.wire.len(),
            self.elapsed.as_millis()
        )?;
        for (code, n) in &self.denials {
            writeln!(f, "denied code={code} count={n}")?;
        }
        if self.passed() {
            write!(f, "all invariants hold")
        } else {
            for v in &self.violations {
                writeln!(f, "VIOLATION {v}")?;
            }
            write!(f, "{} violation(s)", self.violations.len())
        }
    }
}

fn lock<T>(m: &Mutex<T>) -> MutexGuard<'_, T> {
    m.lock().unwrap_or_else(|e| e.into_inner())
}

fn task_for(mix: TaskMix, client: usize, txn: usize, slot: usize) -> TaskDescriptor {
    let n = (client * 7 + txn * 3 + slot) % 60;
    match (mix, (txn + slot) % 4) {
        (TaskMix::Fib, _) | (TaskMix::Mixed, 0) => TaskDescriptor::new("fib", n.to_string()),
        (TaskMix::Mixed, 1) => {
            TaskDescriptor::new("matmul_n", format!("n={} seed={}", 4 + n % 8, client))
        }
        (TaskMix::Mixed, 2) => TaskDescriptor::new("fail_always", ""),
        _ => TaskDescriptor::new("no_such_task", ""),
    }
}

struct ClientRun {
    outcomes: Vec<ClientOutcome>,
    tasks_run: usize,
    wrong_results: Vec<String>,
}

fn run_client(
    net: &Network,
    cfg: &ScenarioConfig,
    index: usize,
    trace: WireTrace,
) -> Result<ClientRun, ClientError> {
    let timeout = Duration::from_millis(cfg.client_timeout());
    let ue = UeClient::connect_with_timeout(net, &cfg.endpoint(0), trace, timeout)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_mul(1000).wrapping_add(index as u64));
    let mut run = ClientRun {
        outcomes: Vec::new(),
        tasks_run: 0,
        wrong_results: Vec::new(),
    };
    for t in 0..cfg.transactions_per_client {
        let manifest = OffloadManifest {
            bandwidth_units: Some(cfg.bandwidth_units),
            vcpus: cfg.vary_spec.then(|| rng.random_range(1..=4)),
            ..OffloadManifest::default()
        };
        let mut session = match ue.request_offload(&manifest) {
            Ok(s) => s,
            Err(ClientError::Denied(code)) => {
                run.outcomes.push(ClientOutcome::Denied(code));
                continue;
            }
            Err(e) => {
                run.outcomes.push(ClientOutcome::Error(e.to_string()));
                continue;
            }
        };
        let step = (|| -> Result<(), ClientError> {
            session.register_app(&["fib"])?;
            let tasks: Vec<TaskDescriptor> = (0..cfg.tasks_per_transaction)
                .map(|slot| task_for(cfg.task_mix, index, t, slot))
                .collect();
            let results = session.offload_task(&tasks)?;
            for (task, got) in tasks.iter().zip(&results) {
                if *got != clone_execute(task) {
                    run.wrong_results
                        .push(format!("{} task {task}: got {got:?}", ue.name()));
                }
            }
            run.tasks_run += tasks.len();
            session.finish()
        })();
        run.outcomes.push(match step {
            Ok(()) => ClientOutcome::Completed,
            Err(e) => ClientOutcome::Error(e.to_string()),
        });
    }
    ue.close();
    Ok(run)
}

/// Boots every actor, runs the clients to completion and audits the result.
pub fn run_scenario(cfg: &ScenarioConfig) -> Result<ScenarioReport, ScenarioError> {
    cfg.validate()?;
    let started = Instant::now();
    let net = match cfg.transport {
        TransportMode::Loopback => Network::loopback(),
        TransportMode::Tcp => Network::Tcp,
    };
    let trace = WireTrace::new();
    let (ctrl_ep, clone_ep, bbu_ep, cloud_ep) =
        (cfg.endpoint(0), cfg.endpoint(1), cfg.endpoint(2), cfg.endpoint(3));

    let bbu = Arc::new(Mutex::new(BbuManager::new(BbuConfig {
        capacity: cfg.bbu_capacity,
        failure_rate: cfg.injections.bbu_failure_rate,
        drop_rate: cfg.injections.bbu_drop_rate,
        seed: cfg.seed ^ 0xB_B0,
    })));
    let compute = Arc::new(Mutex::new(ComputeManager::new(ComputeConfig {
        cloud: cfg.cloud.clone(),
        default_spec: VmSpec::new(1, 1, 1),
        failure_rate: cfg.injections.compute_failure_rate,
        seed: cfg.seed ^ 0xC_0C,
    })?));
    let initial_bbu = lock(&bbu).available();
    let initial_pool = compute_pool(&compute);

    let bbu_server = spawn_bbu(&net, &bbu_ep, bbu.clone(), trace.clone())?;
    let cloud_server = spawn_compute(&net, &cloud_ep, compute.clone(), trace.clone())?;
    let clone_server = spawn_clone(&net, &clone_ep, trace.clone())?;
    let controller = ControllerServer::spawn(
        &net,
        &ctrl_ep,
        &bbu_ep,
        &cloud_ep,
        ControllerConfig {
            request_timeout_ms: cfg.timeout_ms,
            session_timeout_ms: cfg.session_timeout_ms,
            clone_endpoint: clone_ep.clone(),
            default_bandwidth_units: cfg.bandwidth_units,
        },
        trace.clone(),
    )?;

    let runs: Vec<Result<ClientRun, ClientError>> = thread::scope(|s| {
        let handles: Vec<_> = (0..cfg.clients)
            .map(|i| {
                let (net, trace) = (&net, trace.clone());
                s.spawn(move || run_client(net, cfg, i, trace))
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("client thread panicked"))
            .collect()
    });

    let settle = Instant::now() + Duration::from_millis(cfg.timeout_ms + 2000);
    while !controller.inspect(|c| c.is_quiescent()) && Instant::now() < settle {
        thread::sleep(Duration::from_millis(5));
    }

    let mut report = ScenarioReport::default();
    let mut v = Vec::new();
    if !controller.inspect(|c| c.is_quiescent()) {
        v.push("controller did not settle: transactions or management requests outstanding".into());
    }

    let expected_txns = cfg.clients * cfg.transactions_per_client;
    for (i, run) in runs.iter().enumerate() {
        match run {
            Ok(run) => {
                report.tasks_run += run.tasks_run;
                v.extend(run.wrong_results.iter().cloned());
                for o in &run.outcomes {
                    match o {
                        ClientOutcome::Completed => {}
                        ClientOutcome::Denied(code) => {
                            *report.denials.entry(*code).or_default() += 1;
                            if !denial_justified(*code, cfg) {
                                v.push(format!("client {i}: unjustified denial code {code}"));
                            }
                        }
                        ClientOutcome::Error(e) => v.push(format!("client {i}: {e}")),
                    }
                }
            }
            Err(e) => v.push(format!("client {i} could not run: {e}")),
        }
    }

    // Per-transaction atomicity, from the managers' per-key balances.
    controller.inspect(|c| {
        let bbu = lock(&bbu);
        let compute = lock(&compute);
        for txn in c.transactions() {
            report.transactions += 1;
            match txn.state() {
                TxnState::Done => {
                    report.done += 1;
                    if bbu.balance(txn.key()) != 0 {
                        v.push(format!("{}: DONE but bandwidth still held", txn.id()));
                    }
                }
                TxnState::Failed => {
                    report.failed += 1;
                    if bbu.balance(txn.key()) != 0 {
                        v.push(format!("{}: FAILED but bandwidth not returned", txn.id()));
                    }
                    if !compute.balance(txn.key()).is_zero() {
                        v.push(format!("{}: FAILED but compute not rolled back", txn.id()));
                    }
                    if !txn.ledger().is_empty() {
                        v.push(format!("{}: FAILED with unreversed ledger", txn.id()));
                    }
                }
                other => v.push(format!("{}: left in state {other}", txn.id())),
            }
        }
        report.state_log = c.state_log().iter().map(ToString::to_string).collect();
    });
    if report.transactions != expected_txns {
        v.push(format!(
            "controller saw {} transactions, expected {expected_txns}",
            report.transactions
        ));
    }

    // Global conservation.
    if lock(&bbu).available() != initial_bbu {
        v.push(format!(
            "bandwidth pool {} != initial {initial_bbu}",
            lock(&bbu).available()
        ));
    }
    {
        let compute = lock(&compute);
        let pool = compute.sim().pool();
        if pool.available().add(&compute.sim().committed()) != pool.capacity() {
            v.push("compute pool does not balance".into());
        }
        let held = compute.total_balance();
        let committed = compute.sim().committed();
        let as_i64 = |r: Resources| (r.vcpus as i64, r.ram_gb as i64, r.disk_gb as i64);
        if (held.vcpus, held.ram_gb, held.disk_gb) != as_i64(committed) {
            v.push("compute held by transactions differs from committed resources".into());
        }
        if initial_pool != pool.capacity() {
            v.push("compute pool capacity changed".into());
        }
        if compute.sim().held() != Resources::default() {
            v.push("compute still holds resources for settled transactions".into());
        }
    }

    report.wire = trace.events();
    v.extend(audit_wire(&report.wire, cfg));

    controller.shutdown();
    clone_server.shutdown();
    cloud_server.shutdown();
    bbu_server.shutdown();

    if let Some(path) = &cfg.controller_trace {
        fs::write(path, join_lines(&report.state_log))?;
    }
    if let Some(path) = &cfg.wire_trace {
        let lines: Vec<String> = report.wire.iter().map(ToString::to_string).collect();
        fs::write(path, join_lines(&lines))?;
    }
    report.violations = v;
    report.elapsed = started.elapsed();
    Ok(report)
}

fn join_lines(lines: &[String]) -> String {
    let mut s = lines.join("\n");
    s.push('\n');
    s
}

fn compute_pool(compute: &Arc<Mutex<ComputeManager>>) -> Resources {
    lock(compute).sim().pool().capacity()
}

/// Whether an Offload_Denied code is explained by the configuration.
pub fn denial_justified(code: u32, cfg: &ScenarioConfig) -> bool {
    let inj = &cfg.injections;
    match code {
        codes::BBU_FAILURE => {
            inj.bbu_failure_rate > 0.0
                || (cfg.clients as u64 * cfg.bandwidth_units as u64) > cfg.bbu_capacity as u64
        }
        codes::TIMEOUT => inj.bbu_drop_rate > 0.0,
        codes::COMPUTE_FAILURE => inj.compute_failure_rate > 0.0,
        codes::CAPACITY => cfg.vary_spec,
        _ => false,
    }
}

/// Request types, with the answer types that terminate them.
fn terminal_answers(request: PduType) -> Option<&'static [PduType]> {
    Some(match request {
        PduType::OffloadReq => &[PduType::OffloadStart, PduType::OffloadDenied],
        PduType::OffloadFin => &[PduType::OffloadFin],
        PduType::AppRegister => &[PduType::AppRegister],
        PduType::AppRequest => &[PduType::AppResponse],
        PduType::ManageBbu => &[PduType::ManageBbu],
        PduType::ManageCompute => &[PduType::ManageCompute],
        _ => return None,
    })
}

fn is_answer(e: &WireEvent) -> bool {
    match e.pdu_type {
        // Accept, Start, Denied and Response are answers by type.
        PduType::OffloadAccept
        | PduType::OffloadStart
        | PduType::OffloadDenied
        | PduType::AppResponse => true,
        PduType::OffloadReq | PduType::AppData => false,
        _ => e.ack != ACK_DATA,
    }
}

/// Checks the wire trace: every request (ack = 0) is answered exactly once on
/// the reverse path, and every PDU type is one of the eleven defined.
pub fn audit_wire(events: &[WireEvent], cfg: &ScenarioConfig) -> Vec<String> {
    let mut v = Vec::new();
    type Key = (String, String, u32, PduType);
    let mut requests: HashMap<Key, usize> = HashMap::new();
    let mut answers: HashMap<Key, usize> = HashMap::new();
    for e in events {
        if PduType::try_from(e.pdu_type.value()) != Ok(e.pdu_type) {
            v.push(format!("undefined PDU type on the wire: {e}"));
        }
        if is_answer(e) {
            for req in PduType::ALL {
                if terminal_answers(req).is_some_and(|a| a.contains(&e.pdu_type)) {
                    *answers
                        .entry((e.to.clone(), e.from.clone(), e.request_id, req))
                        .or_default() += 1;
                }
            }
        } else if e.ack == ACK_DATA && terminal_answers(e.pdu_type).is_some() {
            *requests
                .entry((e.from.clone(), e.to.clone(), e.request_id, e.pdu_type))
                .or_default() += 1;
        }
    }
    for (key, sent) in &requests {
        let got = answers.get(key).copied().unwrap_or(0);
        // Dropped allocations legitimately go unanswered.
        let may_drop = key.3 == PduType::ManageBbu && cfg.injections.bbu_drop_rate > 0.0;
        if got != *sent && !(may_drop && got < *sent) {
            v.push(format!(
                "{} #{} {}->{}: {sent} request(s), {got} terminal answer(s)",
                key.3, key.2, key.0, key.1
            ));
        }
    }
    for (key, got) in &answers {
        if !requests.contains_key(key) {
            v.push(format!(
                "{} #{} {}->{}: {got} answer(s) without a request",
                key.3, key.2, key.1, key.0
            ));
        }
    }
    v.sort();
    v
}
