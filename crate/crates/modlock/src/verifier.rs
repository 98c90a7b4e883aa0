//! History checking: mutual exclusion, liveness, and bounded
//! linearizability against a sequential reader-writer lock specification.
//!
//! Holding intervals run from the client observing its grant to the client
//! invoking its release. Provisional holders of aborted promotions never
//! observe a grant, so they never enter the checked history.

use crate::history::{History, HistoryKind};
use crate::types::{AcquireMode, LockId};
use std::collections::{BTreeMap, BTreeSet, HashSet};
use thiserror::Error;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum VerifyError {
    #[error("malformed history: {0}")]
    MalformedHistory(String),
    #[error("history has {ops} operations, above the brute-force bound {max}")]
    TooLarge { ops: usize, max: usize },
}

/// The first found pair of overlapping holds involving an exclusive one.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CounterexampleWindow {
    pub lock: LockId,
    pub first_client: u32,
    pub second_client: u32,
    pub overlap_start: u64,
    pub overlap_end: u64,
}

#[derive(Debug, Clone, Copy)]
struct HoldInterval {
    client: u32,
    mode: AcquireMode,
    start: u64,
    end: u64,
}

/// Build per-lock holding intervals from grant-observed/release-invoke
/// pairs. Also validates the per-(client, lock) event cycle.
fn holding_intervals(history: &History) -> Result<BTreeMap<u32, Vec<HoldInterval>>, VerifyError> {
    #[derive(Default)]
    struct Cycle {
        pending_mode: Option<AcquireMode>,
        holding_since: Option<(u64, AcquireMode)>,
    }
    let mut cycles: BTreeMap<(u32, u32), Cycle> = BTreeMap::new();
    let mut intervals: BTreeMap<u32, Vec<HoldInterval>> = BTreeMap::new();

    for e in history {
        let key = (e.client.id, e.lock.0);
        let cycle = cycles.entry(key).or_default();
        match e.kind {
            HistoryKind::AcquireInvoke(mode) => {
                if cycle.pending_mode.is_some() || cycle.holding_since.is_some() {
                    return Err(VerifyError::MalformedHistory(format!(
                        "client {} re-invoked acquire on lock {} mid-cycle",
                        e.client.id, e.lock.0
                    )));
                }
                cycle.pending_mode = Some(mode);
            }
            HistoryKind::AcquireGrantObserved => {
                let Some(mode) = cycle.pending_mode.take() else {
                    return Err(VerifyError::MalformedHistory(format!(
                        "client {} observed a grant on lock {} without invoking",
                        e.client.id, e.lock.0
                    )));
                };
                cycle.holding_since = Some((e.time, mode));
            }
            HistoryKind::ReleaseInvoke => {
                let Some((start, mode)) = cycle.holding_since.take() else {
                    return Err(VerifyError::MalformedHistory(format!(
                        "client {} released lock {} without holding it",
                        e.client.id, e.lock.0
                    )));
                };
                intervals.entry(e.lock.0).or_default().push(HoldInterval {
                    client: e.client.id,
                    mode,
                    start,
                    end: e.time,
                });
            }
            HistoryKind::ReleaseReturn | HistoryKind::Abort => {}
        }
    }

    // A grant still held at the end of the history holds forever.
    for ((client, lock), cycle) in cycles {
        if let Some((start, mode)) = cycle.holding_since {
            intervals.entry(lock).or_default().push(HoldInterval {
                client,
                mode,
                start,
                end: u64::MAX,
            });
        }
    }
    Ok(intervals)
}

/// Exclusion property: no exclusive hold overlaps any other hold of the
/// same lock. Shared holds may overlap freely. Endpoint-touching intervals
/// do not overlap.
pub fn check_mutual_exclusion(
    history: &History,
) -> Result<Result<(), CounterexampleWindow>, VerifyError> {
    let by_lock = holding_intervals(history)?;
    for (lock, mut intervals) in by_lock {
        intervals.sort_by_key(|i| (i.start, i.end));
        // Sweep: track the furthest-reaching earlier interval, overall and
        // exclusive-only.
        let mut max_all: Option<HoldInterval> = None;
        let mut max_excl: Option<HoldInterval> = None;
        for cur in &intervals {
            let conflicting = match cur.mode {
                AcquireMode::Exclusive => max_all.as_ref(),
                AcquireMode::Shared => max_excl.as_ref(),
            };
            if let Some(prev) = conflicting {
                if prev.end > cur.start {
                    return Ok(Err(CounterexampleWindow {
                        lock: LockId(lock),
                        first_client: prev.client,
                        second_client: cur.client,
                        overlap_start: cur.start,
                        overlap_end: prev.end.min(cur.end),
                    }));
                }
            }
            if max_all.as_ref().is_none_or(|p| cur.end > p.end) {
                max_all = Some(*cur);
            }
            if cur.mode == AcquireMode::Exclusive
                && max_excl.as_ref().is_none_or(|p| cur.end > p.end)
            {
                max_excl = Some(*cur);
            }
        }
    }
    Ok(Ok(()))
}

/// What the simulator's final state looked like at quiescence.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct QuiescentState {
    /// Locks whose waiter queues were not empty, with queue lengths.
    pub nonempty_queues: Vec<(LockId, usize)>,
    /// Free-mode locks that still had holders.
    pub free_locks_with_holders: Vec<LockId>,
    /// Held-mode locks with zero holders (a stale mode would starve future
    /// incompatible acquires).
    pub held_locks_without_holders: Vec<LockId>,
    /// Exclusive-mode locks with more than one holder.
    pub exclusive_locks_multi_held: Vec<LockId>,
}

impl QuiescentState {
    pub fn is_consistent(&self) -> bool {
        self.nonempty_queues.is_empty()
            && self.free_locks_with_holders.is_empty()
            && self.held_locks_without_holders.is_empty()
            && self.exclusive_locks_multi_held.is_empty()
    }
}

/// Requests or state left stuck at quiescence.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StuckRequests {
    /// (client, lock) acquires that never observed a grant.
    pub ungranted: Vec<(u32, u32)>,
    pub state: QuiescentState,
}

/// Liveness at quiescence: every acquire was granted, waiter queues
/// drained, and lock modes are consistent with holder counts.
pub fn check_liveness(history: &History, final_state: &QuiescentState) -> Result<(), StuckRequests> {
    let mut pending: BTreeSet<(u32, u32)> = BTreeSet::new();
    for e in history {
        match e.kind {
            HistoryKind::AcquireInvoke(_) => {
                pending.insert((e.client.id, e.lock.0));
            }
            HistoryKind::AcquireGrantObserved => {
                pending.remove(&(e.client.id, e.lock.0));
            }
            _ => {}
        }
    }
    let ungranted: Vec<(u32, u32)> = pending.into_iter().collect();
    if ungranted.is_empty() && final_state.is_consistent() {
        Ok(())
    } else {
        Err(StuckRequests {
            ungranted,
            state: final_state.clone(),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum OpKind {
    Acquire(AcquireMode),
    Release,
}

#[derive(Debug, Clone, Copy)]
struct LockOp {
    client: u32,
    lock: u32,
    kind: OpKind,
    invoke: u64,
    response: u64,
}

/// Flatten a complete history into invoke/response operations.
fn operations(history: &History) -> Result<Vec<LockOp>, VerifyError> {
    #[derive(Default)]
    struct Pending {
        acquire: Option<(u64, AcquireMode)>,
        /// A client may invoke its next cycle's release before an earlier
        /// release's return is processed; returns pair up FIFO.
        releases: std::collections::VecDeque<u64>,
    }
    let mut pending: BTreeMap<(u32, u32), Pending> = BTreeMap::new();
    let mut ops = Vec::new();
    for e in history {
        let key = (e.client.id, e.lock.0);
        let p = pending.entry(key).or_default();
        match e.kind {
            HistoryKind::AcquireInvoke(mode) => {
                p.acquire = Some((e.time, mode));
            }
            HistoryKind::AcquireGrantObserved => {
                let Some((invoke, mode)) = p.acquire.take() else {
                    return Err(VerifyError::MalformedHistory(
                        "grant without matching invoke".into(),
                    ));
                };
                ops.push(LockOp {
                    client: e.client.id,
                    lock: e.lock.0,
                    kind: OpKind::Acquire(mode),
                    invoke,
                    response: e.time,
                });
            }
            HistoryKind::ReleaseInvoke => {
                p.releases.push_back(e.time);
            }
            HistoryKind::ReleaseReturn => {
                let Some(invoke) = p.releases.pop_front() else {
                    return Err(VerifyError::MalformedHistory(
                        "release return without matching invoke".into(),
                    ));
                };
                ops.push(LockOp {
                    client: e.client.id,
                    lock: e.lock.0,
                    kind: OpKind::Release,
                    invoke,
                    response: e.time,
                });
            }
            HistoryKind::Abort => {}
        }
    }
    for (key, p) in pending {
        if p.acquire.is_some() || !p.releases.is_empty() {
            return Err(VerifyError::MalformedHistory(format!(
                "incomplete operation for client {} on lock {}",
                key.0, key.1
            )));
        }
    }
    Ok(ops)
}

/// Sequential reader-writer lock specification used as the linearization
/// reference. Holders are per-client counts: two of a client's shared
/// cycles may be live at once when its earlier release return is slow, and
/// counting (unlike a set) also keeps the state a pure function of the set
/// of applied operations, which the memoization below relies on.
#[derive(Debug, Clone, Default)]
struct RwLockState {
    holders: BTreeMap<u32, BTreeMap<u32, u32>>,
    exclusive: BTreeSet<u32>,
}

impl RwLockState {
    fn apply(&mut self, op: &LockOp) -> bool {
        let holders = self.holders.entry(op.lock).or_default();
        match op.kind {
            OpKind::Acquire(AcquireMode::Exclusive) => {
                if holders.is_empty() {
                    holders.insert(op.client, 1);
                    self.exclusive.insert(op.lock);
                    true
                } else {
                    false
                }
            }
            OpKind::Acquire(AcquireMode::Shared) => {
                if !self.exclusive.contains(&op.lock) {
                    *holders.entry(op.client).or_insert(0) += 1;
                    true
                } else {
                    false
                }
            }
            OpKind::Release => {
                let Some(count) = holders.get_mut(&op.client) else {
                    return false;
                };
                *count -= 1;
                if *count == 0 {
                    holders.remove(&op.client);
                }
                if holders.is_empty() {
                    self.exclusive.remove(&op.lock);
                }
                true
            }
        }
    }
}

/// Default operation bound for the brute-force linearizability search.
pub const DEFAULT_LIN_BOUND: usize = 12;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LinResult {
    /// A witness ordering exists.
    Ok,
    NoWitness,
}

/// Bounded brute-force linearizability check with memoized dead-end masks.
/// Histories above `max_ops` operations are rejected as too large.
pub fn check_linearizable(history: &History, max_ops: usize) -> Result<LinResult, VerifyError> {
    let ops = operations(history)?;
    if ops.len() > max_ops {
        return Err(VerifyError::TooLarge {
            ops: ops.len(),
            max: max_ops,
        });
    }
    if ops.is_empty() {
        return Ok(LinResult::Ok);
    }

    // For the reader-writer spec the state after linearizing a set of
    // operations is a function of the set alone (per client-lock, ops are
    // real-time ordered), so dead ends memoize on the mask.
    fn search(ops: &[LockOp], mask: u64, state: &RwLockState, dead: &mut HashSet<u64>) -> bool {
        if mask == (1u64 << ops.len()) - 1 {
            return true;
        }
        if dead.contains(&mask) {
            return false;
        }
        for (i, op) in ops.iter().enumerate() {
            if mask & (1 << i) != 0 {
                continue;
            }
            // Real-time order: an operation cannot linearize while an
            // unlinearized operation finished strictly before it began.
            let blocked = ops
                .iter()
                .enumerate()
                .any(|(j, other)| j != i && mask & (1 << j) == 0 && other.response < op.invoke);
            if blocked {
                continue;
            }
            let mut next = state.clone();
            if next.apply(op) && search(ops, mask | (1 << i), &next, dead) {
                return true;
            }
        }
        dead.insert(mask);
        false
    }

    let mut dead = HashSet::new();
    if search(&ops, 0, &RwLockState::default(), &mut dead) {
        Ok(LinResult::Ok)
    } else {
        Ok(LinResult::NoWitness)
    }
}
