//! Timestamped operation history consumed by the verifier.

use crate::types::{AcquireMode, ClientId, LockId};
use std::fmt::Write as _;

/// What happened, from the client's point of view.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HistoryKind {
    AcquireInvoke(AcquireMode),
    /// The client observed its grant (push notice arrived, or a poll
    /// returned granted). Holding starts here for verification purposes.
    AcquireGrantObserved,
    ReleaseInvoke,
    /// The holder manager processed the removal.
    ReleaseReturn,
    /// A release pipeline's validation aborted (grant race detected).
    Abort,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HistoryEvent {
    pub time: u64,
    pub client: ClientId,
    pub lock: LockId,
    pub kind: HistoryKind,
}

pub type History = Vec<HistoryEvent>;

fn kind_str(kind: &HistoryKind) -> &'static str {
    match kind {
        HistoryKind::AcquireInvoke(AcquireMode::Shared) => "acquire_invoke_shared",
        HistoryKind::AcquireInvoke(AcquireMode::Exclusive) => "acquire_invoke_exclusive",
        HistoryKind::AcquireGrantObserved => "grant_observed",
        HistoryKind::ReleaseInvoke => "release_invoke",
        HistoryKind::ReleaseReturn => "release_return",
        HistoryKind::Abort => "abort",
    }
}

/// Line-delimited export: one `time client lock kind` record per line.
pub fn export(history: &History) -> String {
    let mut out = String::new();
    for e in history {
        writeln!(out, "{} {} {} {}", e.time, e.client.id, e.lock.0, kind_str(&e.kind)).unwrap();
    }
    out
}
