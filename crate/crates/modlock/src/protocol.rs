//! Protocol engine: the acquisition and release pipelines across the four
//! managers, including grant-count validation and the abort path.
//!
//! [`LockService`] runs the pipelines synchronously for in-process use; the
//! simulator runs the same step logic asynchronously as messages between
//! components. Both produce [`PipelineTrace`]s whose step sequences must be
//! paths in [`transition_relation`].

use crate::grant::{GrantManager, GrantNotice, NoticeOutcome};
use crate::holder::{HolderError, HolderManager, HolderTracking, ReleaseOutcome};
use crate::mode::{AcquireDecision, ModeError, ModeManager, ValidationResult};
use crate::types::{AcquireMode, ClientId, ComponentId, GrantCount, LockId, LockMode, ModuleKind, RequestId};
use crate::waiter::{SelectOutcome, WaiterEntry, WaiterError, WaiterManager};
use parking_lot::Mutex;
use std::collections::{BTreeMap, BTreeSet};
use std::sync::atomic::{AtomicU64, Ordering};
use thiserror::Error;

/// One step of an acquisition or release pipeline.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum PipelineStep {
    // Acquisition.
    DecideAtMode,
    ReplyViaGrant,
    AddHolder,
    EnqueueWaiter,
    // Release.
    RemoveHolder,
    SelectWaiters,
    PromoteHolders,
    ValidateMode,
    NotifyGranted,
    AbortRollback,
    ResetToFree,
}

/// One executed step with its hosting component and simulated time.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StepRecord {
    pub step: PipelineStep,
    pub component: ComponentId,
    pub time: u64,
}

/// Ordered record of the steps one request's pipeline executed.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PipelineTrace {
    pub request: RequestId,
    pub steps: Vec<StepRecord>,
}

impl PipelineTrace {
    pub fn new(request: RequestId) -> Self {
        Self {
            request,
            steps: Vec::new(),
        }
    }

    pub fn push(&mut self, step: PipelineStep, component: ComponentId, time: u64) {
        self.steps.push(StepRecord {
            step,
            component,
            time,
        });
    }
}

/// Static step graph: which step may follow which inside one pipeline.
///
/// Steps on different components execute concurrently, so branches that
/// the managers issue together may land in either order: the asynchronous
/// AddHolder/EnqueueWaiter can precede or follow the grant reply, and the
/// promotion can precede or follow the validation it feeds. The grant and
/// enqueue branches of one acquire remain mutually exclusive.
/// `ValidateMode -> SelectWaiters` is the retry edge taken when a reset to
/// free detects an enqueue still in flight to the waiter manager.
pub fn transition_relation() -> &'static [(PipelineStep, PipelineStep)] {
    use PipelineStep::*;
    &[
        (DecideAtMode, ReplyViaGrant),
        (DecideAtMode, AddHolder),
        (DecideAtMode, EnqueueWaiter),
        (ReplyViaGrant, AddHolder),
        (ReplyViaGrant, EnqueueWaiter),
        (AddHolder, ReplyViaGrant),
        (EnqueueWaiter, ReplyViaGrant),
        (RemoveHolder, SelectWaiters),
        (SelectWaiters, PromoteHolders),
        (SelectWaiters, ValidateMode),
        (PromoteHolders, ValidateMode),
        (PromoteHolders, NotifyGranted),
        (PromoteHolders, AbortRollback),
        (ValidateMode, PromoteHolders),
        (ValidateMode, NotifyGranted),
        (ValidateMode, ResetToFree),
        (ValidateMode, AbortRollback),
        (ValidateMode, SelectWaiters),
        (NotifyGranted, NotifyGranted),
        (NotifyGranted, PromoteHolders),
    ]
}

/// Steps a pipeline may start with.
pub fn start_steps() -> &'static [PipelineStep] {
    &[PipelineStep::DecideAtMode, PipelineStep::RemoveHolder]
}

/// Whether a trace's step sequence is a path in the transition relation.
pub fn is_legal_trace(trace: &PipelineTrace) -> bool {
    let Some(first) = trace.steps.first() else {
        return false;
    };
    if !start_steps().contains(&first.step) {
        return false;
    }
    let edges = transition_relation();
    trace
        .steps
        .windows(2)
        .all(|w| edges.contains(&(w[0].step, w[1].step)))
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ProtocolError {
    #[error(transparent)]
    Mode(#[from] ModeError),
    #[error(transparent)]
    Holder(#[from] HolderError),
    #[error(transparent)]
    Waiter(#[from] WaiterError),
    #[error("client {client} already has an outstanding request on lock {lock:?}")]
    DuplicateRequest { lock: LockId, client: u32 },
}

/// Result of a synchronous acquire.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AcquireOutcome {
    Granted(GrantCount),
    Queued(RequestId),
}

/// The four managers behind a synchronous acquire/release API.
///
/// Manager operations are serialized per lock; the service itself may be
/// shared across threads. Placement only annotates traces here; it does not
/// add latency (the simulator models that).
pub struct LockService {
    mode: ModeManager,
    holder: HolderManager,
    waiter: WaiterManager,
    grant: GrantManager,
    placement: BTreeMap<ModuleKind, ComponentId>,
    outstanding: Mutex<BTreeSet<(u32, u32)>>,
    next_request: AtomicU64,
    clock: AtomicU64,
}

impl LockService {
    pub fn new(num_locks: usize, max_waiters_per_lock: usize) -> Self {
        let placement = ModuleKind::ALL
            .iter()
            .map(|m| (*m, ComponentId(0)))
            .collect();
        Self::with_parts(
            ModeManager::new(num_locks),
            HolderManager::new(num_locks, HolderTracking::Identity),
            WaiterManager::new(num_locks, max_waiters_per_lock),
            GrantManager::new(),
            placement,
        )
    }

    pub fn with_parts(
        mode: ModeManager,
        holder: HolderManager,
        waiter: WaiterManager,
        grant: GrantManager,
        placement: BTreeMap<ModuleKind, ComponentId>,
    ) -> Self {
        Self {
            mode,
            holder,
            waiter,
            grant,
            placement,
            outstanding: Mutex::new(BTreeSet::new()),
            next_request: AtomicU64::new(0),
            clock: AtomicU64::new(0),
        }
    }

    fn host(&self, module: ModuleKind) -> ComponentId {
        self.placement[&module]
    }

    fn tick(&self) -> u64 {
        self.clock.fetch_add(1, Ordering::Relaxed)
    }

    /// Run the acquisition pipeline for one request.
    pub fn run_acquire(
        &self,
        client: ClientId,
        lock: LockId,
        mode: AcquireMode,
    ) -> Result<(PipelineTrace, AcquireOutcome), ProtocolError> {
        {
            let mut outstanding = self.outstanding.lock();
            if !outstanding.insert((client.id, lock.0)) {
                return Err(ProtocolError::DuplicateRequest {
                    lock,
                    client: client.id,
                });
            }
        }
        let request = RequestId(self.next_request.fetch_add(1, Ordering::Relaxed));
        let mut trace = PipelineTrace::new(request);

        let decision = match self.mode.decide_acquire(lock, mode) {
            Ok(d) => d,
            Err(e) => {
                self.outstanding.lock().remove(&(client.id, lock.0));
                return Err(e.into());
            }
        };
        trace.push(PipelineStep::DecideAtMode, self.host(ModuleKind::Mode), self.tick());

        match decision {
            AcquireDecision::Granted(count) => {
                self.grant.record_grant(GrantNotice {
                    request,
                    client,
                    lock,
                    outcome: NoticeOutcome::Granted,
                    epoch: count,
                });
                trace.push(PipelineStep::ReplyViaGrant, self.host(ModuleKind::Grant), self.tick());
                self.holder.add_holders(lock, &[client], count)?;
                trace.push(PipelineStep::AddHolder, self.host(ModuleKind::Holder), self.tick());
                Ok((trace, AcquireOutcome::Granted(count)))
            }
            AcquireDecision::Enqueue => {
                self.grant.record_grant(GrantNotice {
                    request,
                    client,
                    lock,
                    outcome: NoticeOutcome::Queued,
                    epoch: GrantCount(0),
                });
                trace.push(PipelineStep::ReplyViaGrant, self.host(ModuleKind::Grant), self.tick());
                self.waiter.enqueue_waiter(
                    lock,
                    WaiterEntry {
                        client,
                        requested: mode,
                        request,
                        enqueue_time: self.tick(),
                    },
                )?;
                trace.push(PipelineStep::EnqueueWaiter, self.host(ModuleKind::Waiter), self.tick());
                Ok((trace, AcquireOutcome::Queued(request)))
            }
        }
    }

    /// Run the release pipeline for one holder.
    pub fn run_release(&self, client: ClientId, lock: LockId) -> Result<PipelineTrace, ProtocolError> {
        let request = RequestId(self.next_request.fetch_add(1, Ordering::Relaxed));
        let mut trace = PipelineTrace::new(request);

        let outcome = self.holder.remove_holder(lock, client)?;
        self.outstanding.lock().remove(&(client.id, lock.0));
        trace.push(PipelineStep::RemoveHolder, self.host(ModuleKind::Holder), self.tick());

        let snapshot = match outcome {
            ReleaseOutcome::StillHeld(_) => return Ok(trace),
            ReleaseOutcome::LastHolder(snapshot) => snapshot,
        };

        loop {
            let select = self.waiter.select_waiters(lock, snapshot)?;
            trace.push(PipelineStep::SelectWaiters, self.host(ModuleKind::Waiter), self.tick());
            match select {
                SelectOutcome::Empty { delivered } => {
                    trace.push(PipelineStep::ValidateMode, self.host(ModuleKind::Mode), self.tick());
                    // Reset guard: an enqueue decided at the mode manager but
                    // not yet delivered would be stranded by a reset to free.
                    // Synchronous execution leaves nothing in flight, so this
                    // retry never fires here; the simulator's does.
                    if self.mode.enqueues_issued(lock)? != delivered {
                        continue;
                    }
                    let v = self
                        .mode
                        .validate_and_update(lock, LockMode::Free, snapshot, 0)?;
                    if v == ValidationResult::Updated {
                        trace.push(PipelineStep::ResetToFree, self.host(ModuleKind::Mode), self.tick());
                    }
                    self.holder.finish_release(lock)?;
                    return Ok(trace);
                }
                SelectOutcome::Selected(sel) => {
                    let clients: Vec<ClientId> = sel.selected.iter().map(|e| e.client).collect();
                    let promoted_count = snapshot.incremented_by(sel.selected.len() as u64);
                    self.holder.promote_waiters(lock, &clients, promoted_count)?;
                    trace.push(PipelineStep::PromoteHolders, self.host(ModuleKind::Holder), self.tick());

                    let v = self.mode.validate_and_update(
                        lock,
                        sel.mode,
                        snapshot,
                        sel.selected.len() as u64,
                    )?;
                    trace.push(PipelineStep::ValidateMode, self.host(ModuleKind::Mode), self.tick());

                    match v {
                        ValidationResult::Updated => {
                            for e in &sel.selected {
                                self.grant.record_grant(GrantNotice {
                                    request: e.request,
                                    client: e.client,
                                    lock,
                                    outcome: NoticeOutcome::Granted,
                                    epoch: promoted_count,
                                });
                                trace.push(
                                    PipelineStep::NotifyGranted,
                                    self.host(ModuleKind::Grant),
                                    self.tick(),
                                );
                            }
                            self.holder.finish_release(lock)?;
                        }
                        ValidationResult::Aborted => {
                            self.holder.rollback_promotion(lock, &clients)?;
                            self.waiter.requeue_front(lock, &sel)?;
                            trace.push(
                                PipelineStep::AbortRollback,
                                self.host(ModuleKind::Holder),
                                self.tick(),
                            );
                            self.holder.finish_release(lock)?;
                        }
                    }
                    return Ok(trace);
                }
            }
        }
    }

    pub fn mode_manager(&self) -> &ModeManager {
        &self.mode
    }

    pub fn holder_manager(&self) -> &HolderManager {
        &self.holder
    }

    pub fn waiter_manager(&self) -> &WaiterManager {
        &self.waiter
    }

    pub fn grant_manager(&self) -> &GrantManager {
        &self.grant
    }
}
