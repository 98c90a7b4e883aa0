//! Holder manager: tracks lock holders and detects the last-holder-release
//! condition that starts a release pipeline.
//!
//! Supports two storage shapes behind one interface: a full identity set
//! (16 B per holder entry in the hardware model) or a bare counter
//! (8 B per lock). The counter shape cannot detect duplicate-add or
//! double-release bugs; it trusts the caller's sequence.

use crate::types::{ClientId, GrantCount, LockId};
use parking_lot::Mutex;
use std::collections::BTreeSet;
use thiserror::Error;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum HolderError {
    #[error("unknown lock {0:?}")]
    UnknownLock(LockId),
    #[error("client {client} already holds lock {lock:?}")]
    DuplicateHolder { lock: LockId, client: u32 },
    #[error("client {client} does not hold lock {lock:?}")]
    NotHolder { lock: LockId, client: u32 },
    #[error("no release in progress on lock {0:?}")]
    NoReleaseInProgress(LockId),
}

/// How holder state is stored.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum HolderTracking {
    /// Identity set per lock; detects protocol bugs.
    #[default]
    Identity,
    /// Count only, as in atomic-counter lock implementations.
    Counter,
}

/// Result of removing one holder.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReleaseOutcome {
    /// Other holders remain; carries how many.
    StillHeld(u32),
    /// The last holder left; carries the grant-count snapshot the release
    /// pipeline validates against.
    LastHolder(GrantCount),
}

#[derive(Debug, Default)]
struct HolderSlot {
    /// Populated only under identity tracking.
    holders: BTreeSet<u32>,
    holder_count: u32,
    /// Snapshot reported by `LastHolder`. May temporarily run ahead of
    /// `committed_snapshot` while a promotion awaits validation.
    last_grant_snapshot: u64,
    /// Highest count learned from `add_holders` alone, i.e. from grants the
    /// mode manager has definitely committed. Rollback restores this value
    /// so an aborted promotion cannot leave a speculative snapshot behind.
    committed_snapshot: u64,
    release_in_progress: bool,
}

/// Holder records are dense per lock, fixed at construction.
#[derive(Debug)]
pub struct HolderManager {
    slots: Vec<Mutex<HolderSlot>>,
    tracking: HolderTracking,
}

impl HolderManager {
    pub fn new(num_locks: usize, tracking: HolderTracking) -> Self {
        let slots = (0..num_locks).map(|_| Mutex::new(HolderSlot::default())).collect();
        Self { slots, tracking }
    }

    fn slot(&self, lock: LockId) -> Result<&Mutex<HolderSlot>, HolderError> {
        self.slots
            .get(lock.0 as usize)
            .ok_or(HolderError::UnknownLock(lock))
    }

    /// Record newly granted clients as holders and synchronize the grant
    /// counter communicated by the mode manager.
    pub fn add_holders(
        &self,
        lock: LockId,
        clients: &[ClientId],
        grant_count: GrantCount,
    ) -> Result<(), HolderError> {
        let mut slot = self.slot(lock)?.lock();
        if self.tracking == HolderTracking::Identity {
            for c in clients {
                if slot.holders.contains(&c.id) {
                    return Err(HolderError::DuplicateHolder {
                        lock,
                        client: c.id,
                    });
                }
            }
            for c in clients {
                slot.holders.insert(c.id);
            }
        }
        slot.holder_count += clients.len() as u32;
        slot.last_grant_snapshot = slot.last_grant_snapshot.max(grant_count.0);
        slot.committed_snapshot = slot.committed_snapshot.max(grant_count.0);
        Ok(())
    }

    /// Remove one holder. When nobody remains, the release pipeline starts:
    /// the slot is flagged and the grant-count snapshot is handed back for
    /// downstream validation.
    pub fn remove_holder(&self, lock: LockId, client: ClientId) -> Result<ReleaseOutcome, HolderError> {
        let mut slot = self.slot(lock)?.lock();
        if self.tracking == HolderTracking::Identity {
            if !slot.holders.remove(&client.id) {
                return Err(HolderError::NotHolder {
                    lock,
                    client: client.id,
                });
            }
        } else if slot.holder_count == 0 {
            return Err(HolderError::NotHolder {
                lock,
                client: client.id,
            });
        }
        slot.holder_count -= 1;
        if slot.holder_count == 0 {
            slot.release_in_progress = true;
            Ok(ReleaseOutcome::LastHolder(GrantCount(slot.last_grant_snapshot)))
        } else {
            Ok(ReleaseOutcome::StillHeld(slot.holder_count))
        }
    }

    /// Record selected waiters as holders during a release pipeline.
    ///
    /// Holders are added, not replaced: a grant racing the pipeline may
    /// already have inserted a holder that must survive. `grant_count` is
    /// the value the counter takes if the pending validation commits; it is
    /// only folded into the committed snapshot by `finish_release`.
    pub fn promote_waiters(
        &self,
        lock: LockId,
        clients: &[ClientId],
        grant_count: GrantCount,
    ) -> Result<(), HolderError> {
        let mut slot = self.slot(lock)?.lock();
        if !slot.release_in_progress {
            return Err(HolderError::NoReleaseInProgress(lock));
        }
        if self.tracking == HolderTracking::Identity {
            for c in clients {
                if slot.holders.contains(&c.id) {
                    return Err(HolderError::DuplicateHolder {
                        lock,
                        client: c.id,
                    });
                }
            }
            for c in clients {
                slot.holders.insert(c.id);
            }
        }
        slot.holder_count += clients.len() as u32;
        slot.last_grant_snapshot = slot.last_grant_snapshot.max(grant_count.0);
        Ok(())
    }

    /// Undo an aborted promotion, restoring the snapshot to the last value
    /// learned from committed grants.
    pub fn rollback_promotion(&self, lock: LockId, clients: &[ClientId]) -> Result<(), HolderError> {
        let mut slot = self.slot(lock)?.lock();
        if !slot.release_in_progress {
            return Err(HolderError::NoReleaseInProgress(lock));
        }
        if self.tracking == HolderTracking::Identity {
            for c in clients {
                if !slot.holders.contains(&c.id) {
                    return Err(HolderError::NotHolder {
                        lock,
                        client: c.id,
                    });
                }
            }
            for c in clients {
                slot.holders.remove(&c.id);
            }
        }
        slot.holder_count -= clients.len() as u32;
        slot.last_grant_snapshot = slot.committed_snapshot;
        Ok(())
    }

    /// Close the release pipeline, committing whatever snapshot stands.
    pub fn finish_release(&self, lock: LockId) -> Result<(), HolderError> {
        let mut slot = self.slot(lock)?.lock();
        if !slot.release_in_progress {
            return Err(HolderError::NoReleaseInProgress(lock));
        }
        slot.release_in_progress = false;
        slot.committed_snapshot = slot.last_grant_snapshot;
        Ok(())
    }

    /// Reopen a release pipeline for a handoff that was detected while an
    /// earlier pipeline was still in flight. Requires empty holders.
    pub fn begin_release(&self, lock: LockId) -> Result<GrantCount, HolderError> {
        let mut slot = self.slot(lock)?.lock();
        debug_assert_eq!(slot.holder_count, 0);
        slot.release_in_progress = true;
        Ok(GrantCount(slot.last_grant_snapshot))
    }

    pub fn release_in_progress(&self, lock: LockId) -> Result<bool, HolderError> {
        Ok(self.slot(lock)?.lock().release_in_progress)
    }

    pub fn holder_count(&self, lock: LockId) -> Result<u32, HolderError> {
        Ok(self.slot(lock)?.lock().holder_count)
    }

    /// Whether `client` currently holds `lock`. Identity tracking only;
    /// under counter tracking this cannot be answered and returns `None`.
    pub fn is_holder(&self, lock: LockId, client: ClientId) -> Result<Option<bool>, HolderError> {
        let slot = self.slot(lock)?.lock();
        match self.tracking {
            HolderTracking::Identity => Ok(Some(slot.holders.contains(&client.id))),
            HolderTracking::Counter => Ok(None),
        }
    }

    /// Snapshot the grant count currently reported to release pipelines.
    /// May run ahead of `committed_snapshot` while a promotion awaits
    /// validation.
    pub fn grant_snapshot(&self, lock: LockId) -> Result<GrantCount, HolderError> {
        Ok(GrantCount(self.slot(lock)?.lock().last_grant_snapshot))
    }

    /// Highest grant count synchronized by adds alone. A release whose
    /// grant epoch exceeds this has an add still in flight; the reported
    /// snapshot is no substitute, since a speculative promotion can reach
    /// the same value as a racing grant's epoch.
    pub fn committed_snapshot(&self, lock: LockId) -> Result<GrantCount, HolderError> {
        Ok(GrantCount(self.slot(lock)?.lock().committed_snapshot))
    }

    pub fn tracking(&self) -> HolderTracking {
        self.tracking
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::ComponentId;

    fn c(id: u32) -> ClientId {
        ClientId::new(id, ComponentId(0))
    }

    fn hm(n: usize) -> HolderManager {
        HolderManager::new(n, HolderTracking::Identity)
    }

    #[test]
    fn add_single_holder() {
        let h = hm(1);
        h.add_holders(LockId(0), &[c(1)], GrantCount(1)).unwrap();
        assert_eq!(h.holder_count(LockId(0)).unwrap(), 1);
        assert_eq!(h.grant_snapshot(LockId(0)).unwrap(), GrantCount(1));
    }

    #[test]
    fn shared_co_holding() {
        let h = hm(1);
        h.add_holders(LockId(0), &[c(1)], GrantCount(1)).unwrap();
        h.add_holders(LockId(0), &[c(2)], GrantCount(4)).unwrap();
        assert_eq!(h.holder_count(LockId(0)).unwrap(), 2);
        assert_eq!(h.grant_snapshot(LockId(0)).unwrap(), GrantCount(4));
    }

    #[test]
    fn re_add_rejected() {
        let h = hm(1);
        h.add_holders(LockId(0), &[c(1)], GrantCount(1)).unwrap();
        assert_eq!(
            h.add_holders(LockId(0), &[c(1)], GrantCount(2)),
            Err(HolderError::DuplicateHolder {
                lock: LockId(0),
                client: 1
            })
        );
    }

    #[test]
    fn remove_leaves_still_held() {
        let h = hm(1);
        h.add_holders(LockId(0), &[c(1), c(2)], GrantCount(2)).unwrap();
        assert_eq!(
            h.remove_holder(LockId(0), c(1)).unwrap(),
            ReleaseOutcome::StillHeld(1)
        );
    }

    #[test]
    fn last_holder_starts_pipeline_with_snapshot() {
        let h = hm(1);
        h.add_holders(LockId(0), &[c(2)], GrantCount(4)).unwrap();
        assert_eq!(
            h.remove_holder(LockId(0), c(2)).unwrap(),
            ReleaseOutcome::LastHolder(GrantCount(4))
        );
        assert!(h.release_in_progress(LockId(0)).unwrap());
    }

    #[test]
    fn remove_non_holder_rejected() {
        let h = hm(1);
        h.add_holders(LockId(0), &[c(2)], GrantCount(1)).unwrap();
        assert_eq!(
            h.remove_holder(LockId(0), c(9)),
            Err(HolderError::NotHolder {
                lock: LockId(0),
                client: 9
            })
        );
    }

    #[test]
    fn promote_during_release() {
        let h = hm(1);
        h.add_holders(LockId(0), &[c(1)], GrantCount(5)).unwrap();
        h.remove_holder(LockId(0), c(1)).unwrap();
        h.promote_waiters(LockId(0), &[c(3)], GrantCount(6)).unwrap();
        assert_eq!(h.holder_count(LockId(0)).unwrap(), 1);
        assert_eq!(h.grant_snapshot(LockId(0)).unwrap(), GrantCount(6));
    }

    #[test]
    fn batch_shared_promotion() {
        let h = hm(1);
        h.add_holders(LockId(0), &[c(1)], GrantCount(6)).unwrap();
        h.remove_holder(LockId(0), c(1)).unwrap();
        h.promote_waiters(LockId(0), &[c(3), c(4)], GrantCount(8)).unwrap();
        assert_eq!(h.holder_count(LockId(0)).unwrap(), 2);
        assert_eq!(h.is_holder(LockId(0), c(3)).unwrap(), Some(true));
        assert_eq!(h.is_holder(LockId(0), c(4)).unwrap(), Some(true));
    }

    #[test]
    fn promote_without_pipeline_rejected() {
        let h = hm(1);
        assert_eq!(
            h.promote_waiters(LockId(0), &[c(3)], GrantCount(1)),
            Err(HolderError::NoReleaseInProgress(LockId(0)))
        );
    }

    #[test]
    fn rollback_removes_promoted() {
        let h = hm(1);
        h.add_holders(LockId(0), &[c(1)], GrantCount(1)).unwrap();
        h.remove_holder(LockId(0), c(1)).unwrap();
        h.promote_waiters(LockId(0), &[c(3)], GrantCount(2)).unwrap();
        h.rollback_promotion(LockId(0), &[c(3)]).unwrap();
        assert_eq!(h.holder_count(LockId(0)).unwrap(), 0);
    }

    #[test]
    fn rollback_pair() {
        let h = hm(1);
        h.add_holders(LockId(0), &[c(1)], GrantCount(1)).unwrap();
        h.remove_holder(LockId(0), c(1)).unwrap();
        h.promote_waiters(LockId(0), &[c(3), c(4)], GrantCount(3)).unwrap();
        h.rollback_promotion(LockId(0), &[c(3), c(4)]).unwrap();
        assert_eq!(h.holder_count(LockId(0)).unwrap(), 0);
    }

    #[test]
    fn rollback_non_holder_rejected() {
        let h = hm(1);
        h.add_holders(LockId(0), &[c(1)], GrantCount(1)).unwrap();
        h.remove_holder(LockId(0), c(1)).unwrap();
        assert_eq!(
            h.rollback_promotion(LockId(0), &[c(9)]),
            Err(HolderError::NotHolder {
                lock: LockId(0),
                client: 9
            })
        );
    }

    #[test]
    fn rollback_restores_committed_snapshot() {
        let h = hm(1);
        h.add_holders(LockId(0), &[c(1)], GrantCount(5)).unwrap();
        h.remove_holder(LockId(0), c(1)).unwrap();
        // Racing grant lands while the pipeline runs.
        h.add_holders(LockId(0), &[c(7)], GrantCount(6)).unwrap();
        h.promote_waiters(LockId(0), &[c(3)], GrantCount(7)).unwrap();
        assert_eq!(h.grant_snapshot(LockId(0)).unwrap(), GrantCount(7));
        h.rollback_promotion(LockId(0), &[c(3)]).unwrap();
        // Speculative 7 discarded; the racing grant's 6 stands.
        assert_eq!(h.grant_snapshot(LockId(0)).unwrap(), GrantCount(6));
        h.finish_release(LockId(0)).unwrap();
        assert_eq!(h.holder_count(LockId(0)).unwrap(), 1);
        assert_eq!(h.is_holder(LockId(0), c(7)).unwrap(), Some(true));
    }

    #[test]
    fn finish_release_clears_flag_once() {
        let h = hm(1);
        h.add_holders(LockId(0), &[c(1)], GrantCount(1)).unwrap();
        h.remove_holder(LockId(0), c(1)).unwrap();
        h.finish_release(LockId(0)).unwrap();
        assert!(!h.release_in_progress(LockId(0)).unwrap());
        assert_eq!(
            h.finish_release(LockId(0)),
            Err(HolderError::NoReleaseInProgress(LockId(0)))
        );
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        /// Counter-only and identity-set tracking return the same
        /// StillHeld/LastHolder outcomes on identity-valid sequences.
        #[derive(Debug, Clone)]
        enum Step {
            Add(u32),
            Remove(usize),
        }

        fn steps() -> impl Strategy<Value = Vec<Step>> {
            proptest::collection::vec(
                prop_oneof![(0u32..16).prop_map(Step::Add), (0usize..16).prop_map(Step::Remove)],
                0..48,
            )
        }

        proptest! {
            #[test]
            fn counter_mode_equivalence(script in steps()) {
                let ident = HolderManager::new(1, HolderTracking::Identity);
                let cnt = HolderManager::new(1, HolderTracking::Counter);
                let mut held: Vec<u32> = Vec::new();
                let mut next_count = 0u64;
                for step in script {
                    match step {
                        Step::Add(id) => {
                            if held.contains(&id) {
                                continue; // keep the sequence identity-valid
                            }
                            next_count += 1;
                            held.push(id);
                            ident.add_holders(LockId(0), &[c(id)], GrantCount(next_count)).unwrap();
                            cnt.add_holders(LockId(0), &[c(id)], GrantCount(next_count)).unwrap();
                        }
                        Step::Remove(pos) => {
                            if held.is_empty() || ident.release_in_progress(LockId(0)).unwrap() {
                                continue;
                            }
                            let id = held.remove(pos % held.len());
                            let a = ident.remove_holder(LockId(0), c(id)).unwrap();
                            let b = cnt.remove_holder(LockId(0), c(id)).unwrap();
                            prop_assert_eq!(a, b);
                            if let ReleaseOutcome::LastHolder(_) = a {
                                ident.finish_release(LockId(0)).unwrap();
                                cnt.finish_release(LockId(0)).unwrap();
                            }
                        }
                    }
                }
            }
        }
    }
}
