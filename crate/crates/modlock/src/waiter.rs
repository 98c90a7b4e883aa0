//! Waiter manager: queues blocked requesters and selects the next grantees
//! when a lock is released.
//!
//! The default policy is FIFO with shared-prefix batching: an exclusive head
//! is selected alone, a shared head is selected together with every
//! consecutive shared entry behind it. Selection policies are pluggable.

use crate::types::{AcquireMode, ClientId, ComponentId, GrantCount, LockId, LockMode, RequestId};
use parking_lot::Mutex;
use std::collections::{BTreeSet, VecDeque};
use thiserror::Error;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum WaiterError {
    #[error("unknown lock {0:?}")]
    UnknownLock(LockId),
    #[error("waiter (client {client}, request {request}) already queued on lock {lock:?}")]
    DuplicateWaiter { lock: LockId, client: u32, request: u64 },
    #[error("waiter queue on lock {0:?} is full")]
    QueueFull(LockId),
}

/// One blocked request.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WaiterEntry {
    pub client: ClientId,
    pub requested: AcquireMode,
    pub request: RequestId,
    pub enqueue_time: u64,
}

/// Waiters chosen to receive ownership, all mode-compatible with each other.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Selection {
    pub selected: Vec<WaiterEntry>,
    pub mode: LockMode,
    /// Grant-count snapshot carried unchanged from the triggering release.
    pub snapshot: GrantCount,
}

/// Result of a selection attempt.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum SelectOutcome {
    /// Nothing queued. Carries the total number of waiters ever delivered to
    /// this queue, so the mode manager can tell whether an enqueue is still
    /// in flight before committing a reset to free.
    Empty { delivered: u64 },
    Selected(Selection),
}

/// Waiter-selection strategy over one lock's queue.
pub trait SelectionPolicy: Send + Sync {
    /// Remove and return the next grantees, or leave the queue untouched and
    /// return an empty batch. All returned entries must share a compatible
    /// mode (a single exclusive, or all shared).
    fn select(&self, queue: &mut VecDeque<WaiterEntry>) -> Vec<WaiterEntry>;
}

/// FIFO order with shared-prefix batching.
#[derive(Debug, Default)]
pub struct FifoBatch;

impl SelectionPolicy for FifoBatch {
    fn select(&self, queue: &mut VecDeque<WaiterEntry>) -> Vec<WaiterEntry> {
        match queue.front() {
            None => Vec::new(),
            Some(head) if head.requested == AcquireMode::Exclusive => {
                vec![queue.pop_front().unwrap()]
            }
            Some(_) => {
                let mut batch = Vec::new();
                while matches!(queue.front(), Some(e) if e.requested == AcquireMode::Shared) {
                    batch.push(queue.pop_front().unwrap());
                }
                batch
            }
        }
    }
}

#[derive(Debug, Default)]
struct WaiterSlot {
    entries: VecDeque<WaiterEntry>,
    /// Total entries ever enqueued here (never decremented).
    delivered: u64,
}

/// Per-lock FIFO queues, dense and bounded at construction.
pub struct WaiterManager {
    slots: Vec<Mutex<WaiterSlot>>,
    policy: Box<dyn SelectionPolicy>,
    capacity: usize,
}

impl WaiterManager {
    pub fn new(num_locks: usize, capacity_per_lock: usize) -> Self {
        Self::with_policy(num_locks, capacity_per_lock, Box::new(FifoBatch))
    }

    pub fn with_policy(
        num_locks: usize,
        capacity_per_lock: usize,
        policy: Box<dyn SelectionPolicy>,
    ) -> Self {
        let slots = (0..num_locks).map(|_| Mutex::new(WaiterSlot::default())).collect();
        Self {
            slots,
            policy,
            capacity: capacity_per_lock,
        }
    }

    fn slot(&self, lock: LockId) -> Result<&Mutex<WaiterSlot>, WaiterError> {
        self.slots
            .get(lock.0 as usize)
            .ok_or(WaiterError::UnknownLock(lock))
    }

    /// Append a blocked request at the tail.
    pub fn enqueue_waiter(&self, lock: LockId, entry: WaiterEntry) -> Result<(), WaiterError> {
        let mut slot = self.slot(lock)?.lock();
        if slot
            .entries
            .iter()
            .any(|e| e.client.id == entry.client.id && e.request == entry.request)
        {
            return Err(WaiterError::DuplicateWaiter {
                lock,
                client: entry.client.id,
                request: entry.request.0,
            });
        }
        if slot.entries.len() >= self.capacity {
            return Err(WaiterError::QueueFull(lock));
        }
        slot.entries.push_back(entry);
        slot.delivered += 1;
        Ok(())
    }

    /// Pick the next grantees under the configured policy. Selected entries
    /// leave the queue; the snapshot is echoed into the selection.
    pub fn select_waiters(&self, lock: LockId, snapshot: GrantCount) -> Result<SelectOutcome, WaiterError> {
        let mut slot = self.slot(lock)?.lock();
        let batch = self.policy.select(&mut slot.entries);
        if batch.is_empty() {
            return Ok(SelectOutcome::Empty {
                delivered: slot.delivered,
            });
        }
        let mode = match batch[0].requested {
            AcquireMode::Exclusive => LockMode::Exclusive,
            AcquireMode::Shared => LockMode::Shared,
        };
        Ok(SelectOutcome::Selected(Selection {
            selected: batch,
            mode,
            snapshot,
        }))
    }

    /// Reinsert an aborted selection at the head, preserving its original
    /// relative order so FIFO fairness survives the abort.
    pub fn requeue_front(&self, lock: LockId, selection: &Selection) -> Result<(), WaiterError> {
        let mut slot = self.slot(lock)?.lock();
        for e in &selection.selected {
            if slot
                .entries
                .iter()
                .any(|q| q.client.id == e.client.id && q.request == e.request)
            {
                return Err(WaiterError::DuplicateWaiter {
                    lock,
                    client: e.client.id,
                    request: e.request.0,
                });
            }
        }
        for e in selection.selected.iter().rev() {
            slot.entries.push_front(e.clone());
        }
        Ok(())
    }

    /// Hosting components of the selected clients.
    pub fn waiter_locations(&self, selection: &Selection) -> BTreeSet<ComponentId> {
        selection.selected.iter().map(|e| e.client.location).collect()
    }

    pub fn queue_len(&self, lock: LockId) -> Result<usize, WaiterError> {
        Ok(self.slot(lock)?.lock().entries.len())
    }

    /// Total entries ever enqueued on `lock`.
    pub fn delivered(&self, lock: LockId) -> Result<u64, WaiterError> {
        Ok(self.slot(lock)?.lock().delivered)
    }

    pub fn snapshot_queue(&self, lock: LockId) -> Result<Vec<WaiterEntry>, WaiterError> {
        Ok(self.slot(lock)?.lock().entries.iter().cloned().collect())
    }
}
