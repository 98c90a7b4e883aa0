//! Grant manager: delivers grant/enqueue outcomes to clients.
//!
//! Two delivery styles: push (direct point-to-point messages to waiter
//! locations) and poll (clients repeatedly check recorded outcomes, which is
//! what saturates memory-node communication budgets in disaggregated-memory
//! setups).

use crate::types::{ClientId, ComponentId, GrantCount, LockId, RequestId};
use parking_lot::Mutex;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use thiserror::Error;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum GrantError {
    #[error("unknown component {0:?}")]
    UnknownComponent(ComponentId),
    #[error("unknown request {0:?}")]
    UnknownRequest(RequestId),
}

/// How grant outcomes reach clients.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum NotificationMode {
    Push,
    Poll {
        /// Base interval between checks, simulated nanoseconds.
        poll_interval: u64,
        /// Geometric backoff multiplier, >= 1.
        backoff_multiplier: f64,
        /// Interval cap, simulated nanoseconds.
        max_interval: u64,
    },
}

impl NotificationMode {
    /// Default poll parameters: base 2 us, doubling, capped at 64 us.
    pub fn default_poll() -> Self {
        NotificationMode::Poll {
            poll_interval: 2_000,
            backoff_multiplier: 2.0,
            max_interval: 64_000,
        }
    }
}

/// Terminal state of one request as seen by the grant manager.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NoticeOutcome {
    Granted,
    Queued,
}

/// Outcome message for one request.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GrantNotice {
    pub request: RequestId,
    pub client: ClientId,
    pub lock: LockId,
    pub outcome: NoticeOutcome,
    /// Grant-count value at grant time; releases carry it back so the
    /// holder manager can order a release after its matching add.
    pub epoch: GrantCount,
}

/// Result of polling one request.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PollResult {
    Granted(GrantCount),
    Pending,
}

#[derive(Debug, Clone, Copy)]
struct RecordedOutcome {
    outcome: NoticeOutcome,
    epoch: GrantCount,
}

/// A grant notice addressed to one hardware component.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OutboundNotice {
    pub target: ComponentId,
    pub notice: GrantNotice,
}

#[derive(Debug, Default)]
pub struct GrantManager {
    records: Mutex<BTreeMap<u64, RecordedOutcome>>,
}

impl GrantManager {
    pub fn new() -> Self {
        Self::default()
    }

    /// Push-mode delivery: one point-to-point message per distinct target
    /// component. Targets must exist in `components`.
    pub fn notify(
        &self,
        notice: GrantNotice,
        targets: &[ComponentId],
        components: &[ComponentId],
    ) -> Result<Vec<OutboundNotice>, GrantError> {
        for t in targets {
            if !components.contains(t) {
                return Err(GrantError::UnknownComponent(*t));
            }
        }
        self.record_grant(notice);
        let mut seen = Vec::new();
        let mut out = Vec::new();
        for t in targets {
            if seen.contains(t) {
                continue;
            }
            seen.push(*t);
            out.push(OutboundNotice {
                target: *t,
                notice,
            });
        }
        Ok(out)
    }

    /// Record an outcome for later polls. A terminal Granted is never
    /// downgraded; re-recording is idempotent.
    pub fn record_grant(&self, notice: GrantNotice) {
        let mut records = self.records.lock();
        let entry = records.entry(notice.request.0).or_insert(RecordedOutcome {
            outcome: notice.outcome,
            epoch: notice.epoch,
        });
        if entry.outcome != NoticeOutcome::Granted {
            *entry = RecordedOutcome {
                outcome: notice.outcome,
                epoch: notice.epoch,
            };
        }
    }

    /// Poll-mode check. Each call is charged as one communication operation
    /// at the hosting component by the caller.
    pub fn poll(&self, _client: ClientId, request: RequestId) -> Result<PollResult, GrantError> {
        let records = self.records.lock();
        match records.get(&request.0) {
            None => Err(GrantError::UnknownRequest(request)),
            Some(r) if r.outcome == NoticeOutcome::Granted => Ok(PollResult::Granted(r.epoch)),
            Some(_) => Ok(PollResult::Pending),
        }
    }
}
