//! Shared domain vocabulary used by every other module.

use serde::{Deserialize, Serialize};
use std::fmt;

/// Identifier of a lock, dense in `[0, num_locks)` for a run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct LockId(pub u32);

/// Identifier of a hardware component in a topology.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ComponentId(pub u16);

/// A client together with the hardware component hosting it.
///
/// The location rides along so the grant manager can choose push
/// notification when waiter locations are known.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ClientId {
    pub id: u32,
    pub location: ComponentId,
}

impl ClientId {
    pub fn new(id: u32, location: ComponentId) -> Self {
        Self { id, location }
    }
}

/// The mode a client requests a lock in.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum AcquireMode {
    Shared,
    Exclusive,
}

impl AcquireMode {
    /// The lock mode the lock enters when this request is granted.
    pub fn as_lock_mode(self) -> LockMode {
        match self {
            AcquireMode::Shared => LockMode::Shared,
            AcquireMode::Exclusive => LockMode::Exclusive,
        }
    }
}

/// Current mode of a lock as maintained by the mode manager.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum LockMode {
    Free,
    Shared,
    Exclusive,
}

/// Monotone per-lock counter of grant events.
///
/// Never decreases within a run; equals the total number of grants issued
/// for its lock (direct grants plus promoted waiters).
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default, Serialize, Deserialize)]
pub struct GrantCount(pub u64);

impl GrantCount {
    pub fn incremented_by(self, n: u64) -> Self {
        GrantCount(self.0 + n)
    }
}

impl fmt::Display for GrantCount {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.0.fmt(f)
    }
}

/// Identifier of one acquire operation, unique per run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct RequestId(pub u64);

/// The four lock-manager modules that placement assigns to components.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModuleKind {
    Mode,
    Holder,
    Waiter,
    Grant,
}

impl ModuleKind {
    pub const ALL: [ModuleKind; 4] = [
        ModuleKind::Mode,
        ModuleKind::Holder,
        ModuleKind::Waiter,
        ModuleKind::Grant,
    ];
}

impl fmt::Display for ModuleKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            ModuleKind::Mode => "mode",
            ModuleKind::Holder => "holder",
            ModuleKind::Waiter => "waiter",
            ModuleKind::Grant => "grant",
        };
        f.write_str(s)
    }
}

/// Whether a lock in `current` mode can be granted to a `requested` acquisition.
///
/// True iff the lock is free, or both sides are shared.
pub fn compatible(current: LockMode, requested: AcquireMode) -> bool {
    matches!(
        (current, requested),
        (LockMode::Free, _) | (LockMode::Shared, AcquireMode::Shared)
    )
}
