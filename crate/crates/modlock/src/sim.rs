//! Deterministic discrete-event simulator: clients, the four managers
//! placed on hardware components, and the message-level protocol between
//! them, all driven from a single (time, sequence) event queue.
//!
//! Determinism: events process in (time, sequence) order with sequence
//! assigned at enqueue; all randomness flows from one seeded generator
//! consumed in event order. Identical (scenario, seed) reproduce every
//! output byte.
//!
//! Message delivery is FIFO per sender-receiver pair. On top of that, the
//! holder component enforces the per-lock causal orderings the protocol
//! needs: a release whose grant epoch has not yet been synchronized by its
//! add waits for the add; finish/abort wait for their promotion; releases
//! arriving during an open pipeline wait for it to close.

use crate::grant::{GrantManager, GrantNotice, NoticeOutcome, NotificationMode, PollResult};
use crate::hardware::{HardwareError, HardwareState, SizingParams};
use crate::history::{History, HistoryEvent, HistoryKind};
use crate::holder::{HolderManager, ReleaseOutcome};
use crate::metrics::MetricsReport;
use crate::mode::{AcquireDecision, ModeManager, ValidationResult};
use crate::planner::{component_residency, enumerate_assignments, requirements, Assignment};
use crate::protocol::{PipelineStep, PipelineTrace};
use crate::scenario::{AssignmentSource, DistributionKind, Scenario};
use crate::types::{AcquireMode, ClientId, ComponentId, GrantCount, LockId, LockMode, ModuleKind, RequestId};
use crate::verifier::QuiescentState;
use crate::waiter::{Selection, SelectOutcome, WaiterEntry, WaiterManager};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use std::cmp::Reverse;
use std::collections::{BTreeMap, BinaryHeap, VecDeque};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("assignment infeasible: {0}")]
    InfeasibleAssignment(HardwareError),
    #[error(transparent)]
    Hardware(#[from] HardwareError),
    #[error("invalid scenario: {0}")]
    Config(String),
    #[error("protocol bug: {0}")]
    Protocol(String),
    #[error("non-quiescent: {0}")]
    NonQuiescent(String),
}

/// Hard cap on processed events; exceeding it means the run is not
/// converging (e.g. a lost wakeup keeping pollers alive forever).
const EVENT_BUDGET: u64 = 200_000_000;

/// One step of a scripted client.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScriptAction {
    Acquire { lock: u32, mode: AcquireMode },
    Release { lock: u32 },
    Wait { ns: u64 },
}

/// A fully scripted client, used to force specific interleavings.
#[derive(Debug, Clone, Default)]
pub struct ClientScript {
    pub actions: Vec<ScriptAction>,
}

/// Maps each lock to the assignment governing it.
#[derive(Debug, Clone)]
pub enum LockRouter {
    Uniform(Assignment),
    HotCold {
        hot_set_size: u32,
        hot: Assignment,
        cold: Assignment,
    },
}

impl LockRouter {
    pub fn assignment_for(&self, lock: LockId) -> &Assignment {
        match self {
            LockRouter::Uniform(a) => a,
            LockRouter::HotCold {
                hot_set_size,
                hot,
                cold,
            } => {
                if lock.0 < *hot_set_size {
                    hot
                } else {
                    cold
                }
            }
        }
    }

    pub fn host(&self, lock: LockId, module: ModuleKind) -> ComponentId {
        self.assignment_for(lock).host(module)
    }

    /// The assignments with the lock-count sizing each governs.
    fn parts(&self, num_locks: u32) -> Vec<(&Assignment, u64)> {
        match self {
            LockRouter::Uniform(a) => vec![(a, num_locks as u64)],
            LockRouter::HotCold {
                hot_set_size,
                hot,
                cold,
            } => vec![
                (hot, *hot_set_size as u64),
                (cold, (num_locks - hot_set_size) as u64),
            ],
        }
    }

    fn module_hosts(&self) -> Vec<ComponentId> {
        let mut hosts = Vec::new();
        let mut push_all = |a: &Assignment| {
            for m in ModuleKind::ALL {
                hosts.push(a.host(m));
            }
        };
        match self {
            LockRouter::Uniform(a) => push_all(a),
            LockRouter::HotCold { hot, cold, .. } => {
                push_all(hot);
                push_all(cold);
            }
        }
        hosts.sort_unstable();
        hosts.dedup();
        hosts
    }
}

#[derive(Debug, Clone)]
enum Payload {
    AcquireReq {
        request: u64,
        client: ClientId,
        lock: LockId,
        mode: AcquireMode,
    },
    DecisionToGrant {
        request: u64,
        client: ClientId,
        lock: LockId,
        outcome: NoticeOutcome,
        epoch: GrantCount,
    },
    GrantDeliver {
        request: u64,
        client: ClientId,
        lock: LockId,
        outcome: NoticeOutcome,
        epoch: GrantCount,
    },
    AddHolder {
        request: u64,
        client: ClientId,
        lock: LockId,
        count: GrantCount,
    },
    EnqueueWaiter {
        request: u64,
        lock: LockId,
        entry: WaiterEntry,
    },
    ReleaseReq {
        pipeline: u64,
        client: ClientId,
        lock: LockId,
        epoch: GrantCount,
    },
    SelectReq {
        pipeline: u64,
        lock: LockId,
        snapshot: GrantCount,
        releaser: ClientId,
    },
    Promote {
        pipeline: u64,
        lock: LockId,
        selection: Selection,
    },
    Validate {
        pipeline: u64,
        lock: LockId,
        new_mode: LockMode,
        snapshot: GrantCount,
        selection: Option<Selection>,
        delivered: u64,
        releaser: ClientId,
    },
    FinishRelease {
        pipeline: u64,
        lock: LockId,
        had_promotion: bool,
    },
    AbortRollback {
        pipeline: u64,
        lock: LockId,
        selection: Selection,
        releaser: ClientId,
    },
    RequeueFront {
        lock: LockId,
        selection: Selection,
    },
    NotifyGranted {
        pipeline: u64,
        request: u64,
        client: ClientId,
        lock: LockId,
        epoch: GrantCount,
    },
}

#[derive(Debug, Clone)]
struct Message {
    src: ComponentId,
    dst: ComponentId,
    packet_due: bool,
    payload: Payload,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum WakeKind {
    StartCycle,
    HoldDone { lock: u32 },
    ScriptStep,
}

#[derive(Debug, Clone)]
enum EventKind {
    Deliver(Message),
    Execute(Message),
    Wake { client: u32, kind: WakeKind },
    PollFire { client: u32 },
    PollService { client: u32, respond_at: u64 },
    PollResult { client: u32, result: PollResult },
}

struct Event {
    time: u64,
    seq: u64,
    kind: EventKind,
}

impl PartialEq for Event {
    fn eq(&self, other: &Self) -> bool {
        self.time == other.time && self.seq == other.seq
    }
}
impl Eq for Event {}
impl PartialOrd for Event {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for Event {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        (self.time, self.seq).cmp(&(other.time, other.seq))
    }
}

struct ClientRuntime {
    id: ClientId,
    scripted: Option<Vec<ScriptAction>>,
    pc: usize,
    pending: Option<PendingAcquire>,
    /// Held locks with their grant epochs.
    held: BTreeMap<u32, GrantCount>,
    poll_interval: u64,
}

#[derive(Debug, Clone, Copy)]
struct PendingAcquire {
    request: u64,
    lock: LockId,
    invoke_time: u64,
}

/// Release-pipeline bookkeeping at the holder component, per lock.
#[derive(Default)]
struct HolderSide {
    /// Open pipeline: (pipeline id, promotion applied yet).
    pipeline: Option<(u64, bool)>,
    /// A removal emptied the holders while a pipeline was already open;
    /// the handoff starts when that pipeline closes. Carries the releaser.
    pending_handoff: Option<ClientId>,
    parked_releases: VecDeque<Message>,
    parked_adds: Vec<Message>,
    /// Promotions whose clients still appear as holders because their
    /// previous release is in flight.
    parked_promotes: Vec<Message>,
    /// Finish/abort messages waiting for their promotion to land.
    parked_finish: Vec<Message>,
}

/// Everything a run produces.
pub struct RunOutput {
    pub metrics: MetricsReport,
    pub ledger: crate::hardware::ResourceLedger,
    pub history: History,
    pub traces: Vec<PipelineTrace>,
    pub quiescent: QuiescentState,
    pub abort_count: u64,
    /// Acquire decisions served per component, topology order.
    pub served_by_component: Vec<u64>,
    /// Per-acquire latency samples (grant observed minus invoke), in
    /// completion order.
    pub acquire_latencies: Vec<u64>,
}

struct ZipfTable {
    cumulative: Vec<f64>,
    total: f64,
}

impl ZipfTable {
    fn new(n: u32, theta: f64) -> Self {
        let mut cumulative = Vec::with_capacity(n as usize);
        let mut total = 0.0;
        for k in 1..=n as u64 {
            total += 1.0 / (k as f64).powf(theta);
            cumulative.push(total);
        }
        Self { cumulative, total }
    }

    fn sample(&self, rng: &mut ChaCha12Rng) -> u32 {
        let u: f64 = rng.gen::<f64>() * self.total;
        self.cumulative.partition_point(|c| *c < u) as u32
    }
}

struct Sim<'a> {
    scenario: &'a Scenario,
    seed: u64,
    hw: HardwareState,
    mode_mgr: ModeManager,
    holder_mgr: HolderManager,
    waiter_mgr: WaiterManager,
    grant_mgr: GrantManager,
    router: LockRouter,
    clients: Vec<ClientRuntime>,
    events: BinaryHeap<Reverse<Event>>,
    seq: u64,
    now: u64,
    rng: ChaCha12Rng,
    zipf: Option<ZipfTable>,
    history: History,
    traces: Vec<PipelineTrace>,
    holder_side: BTreeMap<u32, HolderSide>,
    acquires_issued: u64,
    latencies: Vec<u64>,
    abort_count: u64,
    poll_count: u64,
    served_by: Vec<u64>,
    next_request: u64,
}

/// Run a scenario's synthetic workload.
pub fn run(scenario: &Scenario, seed: u64) -> Result<RunOutput, SimError> {
    run_inner(scenario, seed, None)
}

/// Run scripted clients over a scenario's topology and assignment, ignoring
/// the synthetic workload knobs (clients come from the scripts).
pub fn run_with_scripts(
    scenario: &Scenario,
    scripts: &[ClientScript],
    seed: u64,
) -> Result<RunOutput, SimError> {
    run_inner(scenario, seed, Some(scripts))
}

fn resolve_router(scenario: &Scenario) -> Result<LockRouter, SimError> {
    let sizing = SizingParams {
        num_locks: scenario.workload.num_locks as u64,
        num_clients: scenario.workload.num_clients as u64,
        max_holders: scenario.model.max_holders_per_lock,
        max_waiters: scenario.model.max_waiters_per_lock,
    };
    let router = match &scenario.assignment {
        AssignmentSource::Explicit(a) => LockRouter::Uniform(a.clone()),
        AssignmentSource::HotCold {
            hot_set_size,
            hot,
            cold,
        } => LockRouter::HotCold {
            hot_set_size: *hot_set_size,
            hot: hot.clone(),
            cold: cold.clone(),
        },
        AssignmentSource::Plan => {
            let plans = enumerate_assignments(
                &scenario.topology,
                &requirements(),
                &scenario.model.footprints,
                &sizing,
            );
            let top = plans
                .into_iter()
                .find(|(_, s)| s.feasible)
                .ok_or_else(|| SimError::Config("planner found no feasible assignment".into()))?;
            LockRouter::Uniform(top.0)
        }
    };
    // Eligibility of explicit placements.
    for (assignment, _) in router.parts(scenario.workload.num_locks) {
        for m in ModuleKind::ALL {
            let host = assignment.host(m);
            let profile = scenario
                .topology
                .component(host)
                .map_err(SimError::Hardware)?;
            if !profile.modules_allowed.contains(&m) {
                return Err(SimError::Config(format!(
                    "component '{}' cannot host the {m} manager",
                    profile.name
                )));
            }
        }
    }
    Ok(router)
}

fn run_inner(
    scenario: &Scenario,
    seed: u64,
    scripts: Option<&[ClientScript]>,
) -> Result<RunOutput, SimError> {
    let w = &scenario.workload;
    let router = resolve_router(scenario)?;

    let mut hw = HardwareState::new(scenario.topology.clone());
    for (assignment, locks) in router.parts(w.num_locks) {
        let sizing = SizingParams {
            num_locks: locks,
            num_clients: w.num_clients as u64,
            max_holders: scenario.model.max_holders_per_lock,
            max_waiters: scenario.model.max_waiters_per_lock,
        };
        for (host, bytes) in component_residency(assignment, &scenario.model.footprints, &sizing) {
            let module = ModuleKind::Mode; // attribution detail only
            hw.charge_memory(host, module, bytes)
                .map_err(SimError::InfeasibleAssignment)?;
        }
    }
    hw.set_module_hosts(&router.module_hosts())?;
    hw.finalize_placement();

    let num_locks = w.num_locks as usize;
    let client_homes = scenario.topology.client_components();
    if client_homes.is_empty() {
        return Err(SimError::Config("no component hosts clients".into()));
    }

    let num_clients = scripts.map(|s| s.len()).unwrap_or(w.num_clients as usize);
    let clients: Vec<ClientRuntime> = (0..num_clients)
        .map(|i| ClientRuntime {
            id: ClientId::new(i as u32, client_homes[i % client_homes.len()]),
            scripted: scripts.map(|s| s[i].actions.clone()),
            pc: 0,
            pending: None,
            held: BTreeMap::new(),
            poll_interval: 0,
        })
        .collect();

    let zipf = match w.distribution {
        DistributionKind::Zipfian => Some(ZipfTable::new(w.num_locks, w.theta)),
        DistributionKind::Uniform => None,
    };

    let components = scenario.topology.components.len();
    let mut sim = Sim {
        scenario,
        seed,
        hw,
        mode_mgr: ModeManager::with_validation(num_locks, scenario.model.disable_grant_validation),
        holder_mgr: HolderManager::new(num_locks, scenario.model.holder_tracking),
        waiter_mgr: WaiterManager::new(
            num_locks,
            (scenario.model.max_waiters_per_lock as usize).max(num_clients),
        ),
        grant_mgr: GrantManager::new(),
        router,
        clients,
        events: BinaryHeap::new(),
        seq: 0,
        now: 0,
        rng: ChaCha12Rng::seed_from_u64(seed),
        zipf,
        history: Vec::new(),
        traces: Vec::new(),
        holder_side: BTreeMap::new(),
        acquires_issued: 0,
        latencies: Vec::new(),
        abort_count: 0,
        poll_count: 0,
        served_by: vec![0; components],
        next_request: 0,
    };
    sim.start()?;
    sim.drive()?;
    sim.finish()
}

impl<'a> Sim<'a> {
    fn push(&mut self, time: u64, kind: EventKind) {
        let seq = self.seq;
        self.seq += 1;
        self.events.push(Reverse(Event { time, seq, kind }));
    }

    fn new_request(&mut self) -> u64 {
        let id = self.next_request;
        self.next_request += 1;
        self.traces.push(PipelineTrace::new(RequestId(id)));
        id
    }

    fn trace(&mut self, id: u64, step: PipelineStep, component: ComponentId, time: u64) {
        self.traces[id as usize].push(step, component, time);
    }

    fn record(&mut self, time: u64, client: ClientId, lock: LockId, kind: HistoryKind) {
        self.history.push(HistoryEvent {
            time,
            client,
            lock,
            kind,
        });
    }

    fn send(&mut self, src: ComponentId, dst: ComponentId, payload: Payload, now: u64) -> Result<(), SimError> {
        let client_originated = matches!(
            payload,
            Payload::AcquireReq { .. } | Payload::ReleaseReq { .. }
        );
        let delivery = self.hw.charge_message(src, dst, now, client_originated)?;
        self.push(
            delivery.time,
            EventKind::Deliver(Message {
                src,
                dst,
                packet_due: delivery.packet_due,
                payload,
            }),
        );
        Ok(())
    }

    fn think_jitter(&mut self) -> u64 {
        let t = self.scenario.workload.think_time_ns;
        if t == 0 {
            0
        } else {
            self.rng.gen_range(t / 2..=t + t / 2)
        }
    }

    fn sample_lock(&mut self) -> LockId {
        match &self.zipf {
            Some(table) => LockId(table.sample(&mut self.rng)),
            None => LockId(self.rng.gen_range(0..self.scenario.workload.num_locks)),
        }
    }

    fn sample_mode(&mut self) -> AcquireMode {
        let f = self.scenario.workload.shared_fraction;
        if f > 0.0 && self.rng.gen_bool(f) {
            AcquireMode::Shared
        } else {
            AcquireMode::Exclusive
        }
    }

    fn start(&mut self) -> Result<(), SimError> {
        if self.clients.iter().any(|c| c.scripted.is_some()) {
            for i in 0..self.clients.len() {
                self.push(
                    0,
                    EventKind::Wake {
                        client: i as u32,
                        kind: WakeKind::ScriptStep,
                    },
                );
            }
        } else {
            let stagger_max = self.scenario.workload.think_time_ns.max(1_000);
            for i in 0..self.clients.len() {
                let at = self.rng.gen_range(0..=stagger_max);
                self.push(
                    at,
                    EventKind::Wake {
                        client: i as u32,
                        kind: WakeKind::StartCycle,
                    },
                );
            }
        }
        Ok(())
    }

    fn drive(&mut self) -> Result<(), SimError> {
        let mut processed: u64 = 0;
        while let Some(Reverse(event)) = self.events.pop() {
            processed += 1;
            if processed > EVENT_BUDGET {
                return Err(SimError::NonQuiescent(format!(
                    "event budget exhausted with {} events pending",
                    self.events.len()
                )));
            }
            self.now = event.time;
            match event.kind {
                EventKind::Deliver(msg) => self.on_deliver(msg)?,
                EventKind::Execute(msg) => self.on_execute(msg)?,
                EventKind::Wake { client, kind } => self.on_wake(client as usize, kind)?,
                EventKind::PollFire { client } => self.on_poll_fire(client as usize)?,
                EventKind::PollService { client, respond_at } => {
                    self.on_poll_service(client as usize, respond_at)?
                }
                EventKind::PollResult { client, result } => {
                    self.on_poll_result(client as usize, result)?
                }
            }
        }
        Ok(())
    }

    fn on_deliver(&mut self, msg: Message) -> Result<(), SimError> {
        if msg.src != msg.dst {
            self.hw.mark_received(msg.dst)?;
        }
        if let Payload::GrantDeliver {
            request,
            client,
            lock,
            outcome,
            epoch,
        } = msg.payload
        {
            // Client-side handling costs no manager processing.
            return self.on_grant_deliver(request, client, lock, outcome, epoch);
        }
        let packet = if msg.packet_due {
            self.hw.packet_proc_ns(msg.dst)?
        } else {
            0
        };
        let op = self.hw.effective_proc_cost(msg.dst)?;
        let done = self.hw.charge_processing_cost(msg.dst, self.now, packet + op)?;
        self.push(done, EventKind::Execute(msg));
        Ok(())
    }

    /// Re-inject a parked message as a fresh delivery at the current time.
    /// Reception and packet termination were already accounted on first
    /// delivery; only the op processing repeats.
    fn repark_deliver(&mut self, msg: Message) {
        let mut msg = msg;
        msg.src = msg.dst;
        msg.packet_due = false;
        self.push(self.now, EventKind::Deliver(msg));
    }

    fn on_execute(&mut self, msg: Message) -> Result<(), SimError> {
        let here = msg.dst;
        match msg.payload.clone() {
            Payload::AcquireReq {
                request,
                client,
                lock,
                mode,
            } => {
                let decision = self
                    .mode_mgr
                    .decide_acquire(lock, mode)
                    .map_err(|e| SimError::Protocol(e.to_string()))?;
                let idx = self.hw.idx(here)?;
                self.served_by[idx] += 1;
                self.trace(request, PipelineStep::DecideAtMode, here, self.now);
                let grant_host = self.router.host(lock, ModuleKind::Grant);
                match decision {
                    AcquireDecision::Granted(count) => {
                        self.send(
                            here,
                            grant_host,
                            Payload::DecisionToGrant {
                                request,
                                client,
                                lock,
                                outcome: NoticeOutcome::Granted,
                                epoch: count,
                            },
                            self.now,
                        )?;
                        let holder_host = self.router.host(lock, ModuleKind::Holder);
                        self.send(
                            here,
                            holder_host,
                            Payload::AddHolder {
                                request,
                                client,
                                lock,
                                count,
                            },
                            self.now,
                        )?;
                    }
                    AcquireDecision::Enqueue => {
                        self.send(
                            here,
                            grant_host,
                            Payload::DecisionToGrant {
                                request,
                                client,
                                lock,
                                outcome: NoticeOutcome::Queued,
                                epoch: GrantCount(0),
                            },
                            self.now,
                        )?;
                        let waiter_host = self.router.host(lock, ModuleKind::Waiter);
                        self.send(
                            here,
                            waiter_host,
                            Payload::EnqueueWaiter {
                                request,
                                lock,
                                entry: WaiterEntry {
                                    client,
                                    requested: mode,
                                    request: RequestId(request),
                                    enqueue_time: self.now,
                                },
                            },
                            self.now,
                        )?;
                    }
                }
            }
            Payload::DecisionToGrant {
                request,
                client,
                lock,
                outcome,
                epoch,
            } => {
                self.grant_mgr.record_grant(GrantNotice {
                    request: RequestId(request),
                    client,
                    lock,
                    outcome,
                    epoch,
                });
                self.trace(request, PipelineStep::ReplyViaGrant, here, self.now);
                // The initial decision reply always reaches the client
                // directly (in poll setups this is the request's response).
                self.send(
                    here,
                    client.location,
                    Payload::GrantDeliver {
                        request,
                        client,
                        lock,
                        outcome,
                        epoch,
                    },
                    self.now,
                )?;
            }
            Payload::AddHolder {
                request,
                client,
                lock,
                count,
            } => {
                if self.holder_mgr.is_holder(lock, client).map_err(protocol_err)? == Some(true) {
                    // The client's previous release of this lock is still in
                    // flight; apply the add after it lands.
                    self.holder_side.entry(lock.0).or_default().parked_adds.push(msg);
                    return Ok(());
                }
                self.holder_mgr
                    .add_holders(lock, &[client], count)
                    .map_err(|e| SimError::Protocol(format!("add_holders: {e}")))?;
                self.trace(request, PipelineStep::AddHolder, here, self.now);
                self.retry_parked_releases(lock)?;
            }
            Payload::EnqueueWaiter { request, lock, entry } => {
                self.waiter_mgr.enqueue_waiter(lock, entry).map_err(protocol_err)?;
                self.trace(request, PipelineStep::EnqueueWaiter, here, self.now);
            }
            Payload::ReleaseReq {
                pipeline,
                client,
                lock,
                epoch,
            } => {
                if epoch > self.holder_mgr.committed_snapshot(lock).map_err(protocol_err)? {
                    // The add synchronizing this grant has not arrived yet.
                    self.holder_side
                        .entry(lock.0)
                        .or_default()
                        .parked_releases
                        .push_back(msg);
                    return Ok(());
                }
                let outcome = self
                    .holder_mgr
                    .remove_holder(lock, client)
                    .map_err(protocol_err)?;
                self.record(self.now, client, lock, HistoryKind::ReleaseReturn);
                self.trace(pipeline, PipelineStep::RemoveHolder, here, self.now);
                self.retry_parked_adds(lock, client)?;
                self.retry_parked_promotes(lock);
                if let ReleaseOutcome::LastHolder(snapshot) = outcome {
                    let side = self.holder_side.entry(lock.0).or_default();
                    if side.pipeline.is_some() {
                        // A pipeline is already in flight (this removal took
                        // out a holder granted by a racing acquire); run the
                        // handoff when it closes.
                        side.pending_handoff = Some(client);
                    } else {
                        side.pipeline = Some((pipeline, false));
                        let waiter_host = self.router.host(lock, ModuleKind::Waiter);
                        self.send(
                            here,
                            waiter_host,
                            Payload::SelectReq {
                                pipeline,
                                lock,
                                snapshot,
                                releaser: client,
                            },
                            self.now,
                        )?;
                    }
                }
            }
            Payload::SelectReq {
                pipeline,
                lock,
                snapshot,
                releaser,
            } => {
                let out = self
                    .waiter_mgr
                    .select_waiters(lock, snapshot)
                    .map_err(protocol_err)?;
                self.trace(pipeline, PipelineStep::SelectWaiters, here, self.now);
                let mode_host = self.router.host(lock, ModuleKind::Mode);
                match out {
                    SelectOutcome::Empty { delivered } => {
                        self.send(
                            here,
                            mode_host,
                            Payload::Validate {
                                pipeline,
                                lock,
                                new_mode: LockMode::Free,
                                snapshot,
                                selection: None,
                                delivered,
                                releaser,
                            },
                            self.now,
                        )?;
                    }
                    SelectOutcome::Selected(selection) => {
                        let holder_host = self.router.host(lock, ModuleKind::Holder);
                        self.send(
                            here,
                            holder_host,
                            Payload::Promote {
                                pipeline,
                                lock,
                                selection: selection.clone(),
                            },
                            self.now,
                        )?;
                        self.send(
                            here,
                            mode_host,
                            Payload::Validate {
                                pipeline,
                                lock,
                                new_mode: selection.mode,
                                snapshot,
                                selection: Some(selection),
                                delivered: 0,
                                releaser,
                            },
                            self.now,
                        )?;
                    }
                }
            }
            Payload::Promote {
                pipeline,
                lock,
                selection,
            } => {
                let clients: Vec<ClientId> = selection.selected.iter().map(|e| e.client).collect();
                for c in &clients {
                    if self.holder_mgr.is_holder(lock, *c).map_err(protocol_err)? == Some(true) {
                        // The client's racing grant still lists it as a
                        // holder and its release is in flight; promote once
                        // the release lands (validation will abort anyway).
                        self.holder_side
                            .entry(lock.0)
                            .or_default()
                            .parked_promotes
                            .push(msg);
                        return Ok(());
                    }
                }
                let count = selection.snapshot.incremented_by(selection.selected.len() as u64);
                self.holder_mgr
                    .promote_waiters(lock, &clients, count)
                    .map_err(|e| SimError::Protocol(format!("promote_waiters: {e}")))?;
                self.trace(pipeline, PipelineStep::PromoteHolders, here, self.now);
                let side = self.holder_side.entry(lock.0).or_default();
                if let Some((id, applied)) = side.pipeline.as_mut() {
                    debug_assert_eq!(*id, pipeline);
                    *applied = true;
                }
                let parked = std::mem::take(&mut self.holder_side.entry(lock.0).or_default().parked_finish);
                for m in parked {
                    self.repark_deliver(m);
                }
            }
            Payload::Validate {
                pipeline,
                lock,
                new_mode,
                snapshot,
                selection,
                delivered,
                releaser,
            } => {
                self.trace(pipeline, PipelineStep::ValidateMode, here, self.now);
                let holder_host = self.router.host(lock, ModuleKind::Holder);
                match selection {
                    None => {
                        // Reset guard: an enqueue decided here but not yet
                        // delivered to the waiter manager would be stranded
                        // by a reset; re-select behind it instead.
                        let issued = self.mode_mgr.enqueues_issued(lock).map_err(protocol_err)?;
                        if issued != delivered {
                            let waiter_host = self.router.host(lock, ModuleKind::Waiter);
                            self.send(
                                here,
                                waiter_host,
                                Payload::SelectReq {
                                    pipeline,
                                    lock,
                                    snapshot,
                                    releaser,
                                },
                                self.now,
                            )?;
                            return Ok(());
                        }
                        let v = self
                            .mode_mgr
                            .validate_and_update(lock, new_mode, snapshot, 0)
                            .map_err(protocol_err)?;
                        if v == ValidationResult::Updated {
                            self.trace(pipeline, PipelineStep::ResetToFree, here, self.now);
                        } else {
                            self.abort_count += 1;
                            self.record(self.now, releaser, lock, HistoryKind::Abort);
                        }
                        self.send(
                            here,
                            holder_host,
                            Payload::FinishRelease {
                                pipeline,
                                lock,
                                had_promotion: false,
                            },
                            self.now,
                        )?;
                    }
                    Some(selection) => {
                        let n = selection.selected.len() as u64;
                        let v = self
                            .mode_mgr
                            .validate_and_update(lock, new_mode, snapshot, n)
                            .map_err(protocol_err)?;
                        match v {
                            ValidationResult::Updated => {
                                let epoch = snapshot.incremented_by(n);
                                let grant_host = self.router.host(lock, ModuleKind::Grant);
                                for e in &selection.selected {
                                    self.send(
                                        here,
                                        grant_host,
                                        Payload::NotifyGranted {
                                            pipeline,
                                            request: e.request.0,
                                            client: e.client,
                                            lock,
                                            epoch,
                                        },
                                        self.now,
                                    )?;
                                }
                                self.send(
                                    here,
                                    holder_host,
                                    Payload::FinishRelease {
                                        pipeline,
                                        lock,
                                        had_promotion: true,
                                    },
                                    self.now,
                                )?;
                            }
                            ValidationResult::Aborted => {
                                self.abort_count += 1;
                                self.record(self.now, releaser, lock, HistoryKind::Abort);
                                // The requeue routes through the holder
                                // component so it reaches the waiter manager
                                // before any select from the next pipeline.
                                self.send(
                                    here,
                                    holder_host,
                                    Payload::AbortRollback {
                                        pipeline,
                                        lock,
                                        selection,
                                        releaser,
                                    },
                                    self.now,
                                )?;
                            }
                        }
                    }
                }
            }
            Payload::FinishRelease {
                pipeline,
                lock,
                had_promotion,
            } => {
                let side = self.holder_side.entry(lock.0).or_default();
                let applied = side.pipeline.map(|(_, a)| a).unwrap_or(false);
                if had_promotion && !applied {
                    side.parked_finish.push(msg);
                    return Ok(());
                }
                let _ = pipeline;
                self.holder_mgr.finish_release(lock).map_err(protocol_err)?;
                self.close_pipeline(lock, here, None)?;
            }
            Payload::AbortRollback {
                pipeline,
                lock,
                selection,
                releaser,
            } => {
                let side = self.holder_side.entry(lock.0).or_default();
                let applied = side.pipeline.map(|(_, a)| a).unwrap_or(false);
                if !applied {
                    side.parked_finish.push(msg);
                    return Ok(());
                }
                let clients: Vec<ClientId> = selection.selected.iter().map(|e| e.client).collect();
                self.holder_mgr
                    .rollback_promotion(lock, &clients)
                    .map_err(protocol_err)?;
                self.trace(pipeline, PipelineStep::AbortRollback, here, self.now);
                let waiter_host = self.router.host(lock, ModuleKind::Waiter);
                self.send(
                    here,
                    waiter_host,
                    Payload::RequeueFront { lock, selection },
                    self.now,
                )?;
                self.holder_mgr.finish_release(lock).map_err(protocol_err)?;
                // A racing holder may have come and gone while the
                // provisional promotion inflated the count; with the
                // rollback applied nobody may be left to trigger the next
                // selection, so an empty holder set here needs a handoff.
                self.close_pipeline(lock, here, Some(releaser))?;
            }
            Payload::RequeueFront { lock, selection } => {
                self.waiter_mgr
                    .requeue_front(lock, &selection)
                    .map_err(protocol_err)?;
            }
            Payload::NotifyGranted {
                pipeline,
                request,
                client,
                lock,
                epoch,
            } => {
                self.trace(pipeline, PipelineStep::NotifyGranted, here, self.now);
                self.grant_mgr.record_grant(GrantNotice {
                    request: RequestId(request),
                    client,
                    lock,
                    outcome: NoticeOutcome::Granted,
                    epoch,
                });
                if self.scenario.notification == NotificationMode::Push {
                    self.send(
                        here,
                        client.location,
                        Payload::GrantDeliver {
                            request,
                            client,
                            lock,
                            outcome: NoticeOutcome::Granted,
                            epoch,
                        },
                        self.now,
                    )?;
                }
            }
            Payload::GrantDeliver { .. } => unreachable!("handled at delivery"),
        }
        Ok(())
    }

    fn retry_parked_releases(&mut self, lock: LockId) -> Result<(), SimError> {
        let snapshot = self.holder_mgr.committed_snapshot(lock).map_err(protocol_err)?;
        let side = self.holder_side.entry(lock.0).or_default();
        let mut ready = Vec::new();
        side.parked_releases.retain(|m| {
            if let Payload::ReleaseReq { epoch, .. } = &m.payload {
                if *epoch <= snapshot {
                    ready.push(m.clone());
                    return false;
                }
            }
            true
        });
        for m in ready {
            self.repark_deliver(m);
        }
        Ok(())
    }

    fn retry_parked_adds(&mut self, lock: LockId, released: ClientId) -> Result<(), SimError> {
        let side = self.holder_side.entry(lock.0).or_default();
        let mut ready = Vec::new();
        side.parked_adds.retain(|m| {
            if let Payload::AddHolder { client, .. } = &m.payload {
                if client.id == released.id {
                    ready.push(m.clone());
                    return false;
                }
            }
            true
        });
        for m in ready {
            self.repark_deliver(m);
        }
        Ok(())
    }

    /// Close the current pipeline and either chain the deferred handoff
    /// (holders emptied while it ran, or an abort rolled the last ones
    /// back) or release parked messages.
    fn close_pipeline(
        &mut self,
        lock: LockId,
        here: ComponentId,
        abort_releaser: Option<ClientId>,
    ) -> Result<(), SimError> {
        let side = self.holder_side.entry(lock.0).or_default();
        side.pipeline = None;
        let handoff = side.pending_handoff.take().or(abort_releaser);
        let holders = self.holder_mgr.holder_count(lock).map_err(protocol_err)?;
        if let (Some(releaser), 0) = (handoff, holders) {
            let snapshot = self.holder_mgr.begin_release(lock).map_err(protocol_err)?;
            let pipeline = self.new_request();
            self.trace(pipeline, PipelineStep::RemoveHolder, here, self.now);
            self.holder_side.entry(lock.0).or_default().pipeline = Some((pipeline, false));
            let waiter_host = self.router.host(lock, ModuleKind::Waiter);
            self.send(
                here,
                waiter_host,
                Payload::SelectReq {
                    pipeline,
                    lock,
                    snapshot,
                    releaser,
                },
                self.now,
            )?;
        } else {
            self.unpark_releases(lock);
        }
        Ok(())
    }

    fn retry_parked_promotes(&mut self, lock: LockId) {
        let holder_mgr = &self.holder_mgr;
        let side = self.holder_side.entry(lock.0).or_default();
        let mut ready = Vec::new();
        side.parked_promotes.retain(|m| {
            if let Payload::Promote { selection, .. } = &m.payload {
                let blocked = selection.selected.iter().any(|e| {
                    holder_mgr.is_holder(lock, e.client).ok().flatten() == Some(true)
                });
                if !blocked {
                    ready.push(m.clone());
                    return false;
                }
            }
            true
        });
        for m in ready {
            self.repark_deliver(m);
        }
    }

    fn unpark_releases(&mut self, lock: LockId) {
        let side = self.holder_side.entry(lock.0).or_default();
        let parked: Vec<Message> = side.parked_releases.drain(..).collect();
        for m in parked {
            self.repark_deliver(m);
        }
    }

    // ---- client behavior ----

    fn issue_acquire(&mut self, idx: usize, lock: LockId, mode: AcquireMode) -> Result<(), SimError> {
        let request = self.new_request();
        let client = self.clients[idx].id;
        self.record(self.now, client, lock, HistoryKind::AcquireInvoke(mode));
        self.clients[idx].pending = Some(PendingAcquire {
            request,
            lock,
            invoke_time: self.now,
        });
        let mode_host = self.router.host(lock, ModuleKind::Mode);
        self.send(
            client.location,
            mode_host,
            Payload::AcquireReq {
                request,
                client,
                lock,
                mode,
            },
            self.now,
        )
    }

    fn issue_release(&mut self, idx: usize, lock: LockId) -> Result<(), SimError> {
        let client = self.clients[idx].id;
        let epoch = match self.clients[idx].held.remove(&lock.0) {
            Some(e) => e,
            None => {
                return Err(SimError::Protocol(format!(
                    "client {} releasing lock {} it does not hold",
                    client.id, lock.0
                )))
            }
        };
        self.record(self.now, client, lock, HistoryKind::ReleaseInvoke);
        let pipeline = self.new_request();
        let holder_host = self.router.host(lock, ModuleKind::Holder);
        self.send(
            client.location,
            holder_host,
            Payload::ReleaseReq {
                pipeline,
                client,
                lock,
                epoch,
            },
            self.now,
        )
    }

    fn on_wake(&mut self, idx: usize, kind: WakeKind) -> Result<(), SimError> {
        match kind {
            WakeKind::StartCycle => {
                if self.acquires_issued >= self.scenario.workload.total_ops {
                    return Ok(());
                }
                self.acquires_issued += 1;
                let lock = self.sample_lock();
                let mode = self.sample_mode();
                self.issue_acquire(idx, lock, mode)
            }
            WakeKind::HoldDone { lock } => {
                self.issue_release(idx, LockId(lock))?;
                let think = self.think_jitter();
                self.push(
                    self.now + think,
                    EventKind::Wake {
                        client: idx as u32,
                        kind: WakeKind::StartCycle,
                    },
                );
                Ok(())
            }
            WakeKind::ScriptStep => self.script_step(idx),
        }
    }

    fn script_step(&mut self, idx: usize) -> Result<(), SimError> {
        loop {
            let action = {
                let c = &self.clients[idx];
                let Some(script) = &c.scripted else {
                    return Err(SimError::Protocol("script step on unscripted client".into()));
                };
                match script.get(c.pc) {
                    None => return Ok(()),
                    Some(a) => *a,
                }
            };
            self.clients[idx].pc += 1;
            match action {
                ScriptAction::Wait { ns } => {
                    self.push(
                        self.now + ns,
                        EventKind::Wake {
                            client: idx as u32,
                            kind: WakeKind::ScriptStep,
                        },
                    );
                    return Ok(());
                }
                ScriptAction::Acquire { lock, mode } => {
                    self.acquires_issued += 1;
                    return self.issue_acquire(idx, LockId(lock), mode);
                }
                ScriptAction::Release { lock } => {
                    self.issue_release(idx, LockId(lock))?;
                    // Fire-and-forget: keep interpreting.
                }
            }
        }
    }

    fn on_grant_deliver(
        &mut self,
        request: u64,
        client: ClientId,
        lock: LockId,
        outcome: NoticeOutcome,
        epoch: GrantCount,
    ) -> Result<(), SimError> {
        let idx = client.id as usize;
        match outcome {
            NoticeOutcome::Granted => self.client_granted(idx, request, lock, epoch),
            NoticeOutcome::Queued => {
                if let NotificationMode::Poll { poll_interval, .. } = self.scenario.notification {
                    self.clients[idx].poll_interval = poll_interval;
                    self.push(
                        self.now + poll_interval,
                        EventKind::PollFire { client: idx as u32 },
                    );
                }
                Ok(())
            }
        }
    }

    fn client_granted(
        &mut self,
        idx: usize,
        request: u64,
        lock: LockId,
        epoch: GrantCount,
    ) -> Result<(), SimError> {
        let Some(pending) = self.clients[idx].pending else {
            // A poll can race a push-style duplicate; ignore repeats.
            return Ok(());
        };
        if pending.request != request {
            return Ok(());
        }
        let client = self.clients[idx].id;
        self.record(self.now, client, lock, HistoryKind::AcquireGrantObserved);
        self.latencies.push(self.now - pending.invoke_time);
        self.clients[idx].pending = None;
        self.clients[idx].held.insert(lock.0, epoch);
        if self.clients[idx].scripted.is_some() {
            self.push(
                self.now,
                EventKind::Wake {
                    client: idx as u32,
                    kind: WakeKind::ScriptStep,
                },
            );
        } else {
            let cs = self.scenario.workload.critical_section_ns;
            self.push(
                self.now + cs,
                EventKind::Wake {
                    client: idx as u32,
                    kind: WakeKind::HoldDone { lock: lock.0 },
                },
            );
        }
        Ok(())
    }

    fn on_poll_fire(&mut self, idx: usize) -> Result<(), SimError> {
        let Some(pending) = self.clients[idx].pending else {
            return Ok(()); // granted in the meantime via the direct reply
        };
        self.poll_count += 1;
        let client = self.clients[idx].id;
        let gm_host = self.router.host(pending.lock, ModuleKind::Grant);
        let (service, respond) = self.hw.charge_poll(client.location, gm_host, self.now)?;
        self.push(
            service,
            EventKind::PollService {
                client: idx as u32,
                respond_at: respond,
            },
        );
        Ok(())
    }

    fn on_poll_service(&mut self, idx: usize, respond_at: u64) -> Result<(), SimError> {
        let Some(pending) = self.clients[idx].pending else {
            return Ok(());
        };
        let client = self.clients[idx].id;
        let result = self
            .grant_mgr
            .poll(client, RequestId(pending.request))
            .map_err(protocol_err)?;
        self.push(
            respond_at,
            EventKind::PollResult {
                client: idx as u32,
                result,
            },
        );
        Ok(())
    }

    fn on_poll_result(&mut self, idx: usize, result: PollResult) -> Result<(), SimError> {
        let Some(pending) = self.clients[idx].pending else {
            return Ok(());
        };
        match result {
            PollResult::Granted(epoch) => {
                self.client_granted(idx, pending.request, pending.lock, epoch)
            }
            PollResult::Pending => {
                if let NotificationMode::Poll {
                    backoff_multiplier,
                    max_interval,
                    ..
                } = self.scenario.notification
                {
                    let cur = self.clients[idx].poll_interval.max(1);
                    let next = ((cur as f64 * backoff_multiplier) as u64).min(max_interval);
                    self.clients[idx].poll_interval = next;
                    self.push(
                        self.now + next,
                        EventKind::PollFire { client: idx as u32 },
                    );
                }
                Ok(())
            }
        }
    }

    fn finish(self) -> Result<RunOutput, SimError> {
        // Parked protocol messages at quiescence mean a deferral never
        // resolved.
        for (lock, side) in &self.holder_side {
            if !side.parked_releases.is_empty()
                || !side.parked_adds.is_empty()
                || !side.parked_promotes.is_empty()
                || !side.parked_finish.is_empty()
                || side.pipeline.is_some()
                || side.pending_handoff.is_some()
            {
                return Err(SimError::NonQuiescent(format!(
                    "lock {lock} has parked protocol messages at quiescence"
                )));
            }
        }

        let mut quiescent = QuiescentState::default();
        for lock in 0..self.scenario.workload.num_locks {
            let id = LockId(lock);
            let qlen = self.waiter_mgr.queue_len(id).map_err(protocol_err)?;
            if qlen > 0 {
                quiescent.nonempty_queues.push((id, qlen));
            }
            let entry = self.mode_mgr.read_entry(id).map_err(protocol_err)?;
            let holders = self.holder_mgr.holder_count(id).map_err(protocol_err)?;
            match entry.mode {
                LockMode::Free if holders > 0 => quiescent.free_locks_with_holders.push(id),
                LockMode::Shared | LockMode::Exclusive if holders == 0 => {
                    quiescent.held_locks_without_holders.push(id)
                }
                LockMode::Exclusive if holders > 1 => {
                    quiescent.exclusive_locks_multi_held.push(id)
                }
                _ => {}
            }
        }

        let metrics = MetricsReport::from_run(
            &self.scenario.name,
            self.seed,
            &self.latencies,
            self.now,
            self.abort_count,
            self.poll_count,
            &self.hw.ledger,
            &self.served_by,
        );
        Ok(RunOutput {
            metrics,
            ledger: self.hw.ledger.clone(),
            history: self.history,
            traces: self.traces,
            quiescent,
            abort_count: self.abort_count,
            served_by_component: self.served_by,
            acquire_latencies: self.latencies,
        })
    }
}

fn protocol_err(e: impl std::fmt::Display) -> SimError {
    SimError::Protocol(e.to_string())
}
