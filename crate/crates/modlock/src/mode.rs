//! Mode manager: per-lock grant decision point and grant-count authority.
//!
//! Holds the per-lock mode and a monotone grant counter. Acquisitions are
//! decided here; release-time mode updates are committed only when the
//! caller's grant-count snapshot still matches, which is what detects grants
//! racing a release.

use crate::types::{compatible, AcquireMode, GrantCount, LockId, LockMode};
use parking_lot::Mutex;
use thiserror::Error;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ModeError {
    #[error("unknown lock {0:?}")]
    UnknownLock(LockId),
}

/// Snapshot of one lock's state in the mode manager.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModeEntry {
    pub lock: LockId,
    pub mode: LockMode,
    pub grant_count: GrantCount,
}

/// Outcome of an acquisition decision.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AcquireDecision {
    /// Lock granted; carries the post-increment counter value.
    Granted(GrantCount),
    /// Incompatible with the current mode; requester must wait.
    Enqueue,
}

/// Outcome of a release-time validated mode update.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ValidationResult {
    Updated,
    Aborted,
}

#[derive(Debug)]
struct ModeSlot {
    mode: LockMode,
    grant_count: u64,
    /// Total Enqueue decisions issued for this lock, ever. Compared against
    /// the waiter manager's delivered count to keep a reset-to-free from
    /// overtaking an enqueue still in flight.
    enqueues_issued: u64,
}

/// Per-lock state is a dense array fixed at construction so the mode
/// manager's memory footprint is measurable by the hardware model.
#[derive(Debug)]
pub struct ModeManager {
    slots: Vec<Mutex<ModeSlot>>,
    validation_disabled: bool,
}

impl ModeManager {
    pub fn new(num_locks: usize) -> Self {
        Self::with_validation(num_locks, false)
    }

    /// `validation_disabled` forces every `validate_and_update` to commit,
    /// bypassing the grant-count check. Exists to demonstrate that grant
    /// counting is load-bearing; never enable it outside experiments.
    pub fn with_validation(num_locks: usize, validation_disabled: bool) -> Self {
        let slots = (0..num_locks)
            .map(|_| {
                Mutex::new(ModeSlot {
                    mode: LockMode::Free,
                    grant_count: 0,
                    enqueues_issued: 0,
                })
            })
            .collect();
        Self {
            slots,
            validation_disabled,
        }
    }

    fn slot(&self, lock: LockId) -> Result<&Mutex<ModeSlot>, ModeError> {
        self.slots
            .get(lock.0 as usize)
            .ok_or(ModeError::UnknownLock(lock))
    }

    /// Decide whether `lock` can be granted in `requested` mode.
    ///
    /// On grant the mode becomes the requested mode and the grant counter is
    /// incremented; otherwise state is unchanged and the requester is told to
    /// enqueue.
    pub fn decide_acquire(
        &self,
        lock: LockId,
        requested: AcquireMode,
    ) -> Result<AcquireDecision, ModeError> {
        let mut slot = self.slot(lock)?.lock();
        if compatible(slot.mode, requested) {
            slot.mode = requested.as_lock_mode();
            slot.grant_count += 1;
            Ok(AcquireDecision::Granted(GrantCount(slot.grant_count)))
        } else {
            slot.enqueues_issued += 1;
            Ok(AcquireDecision::Enqueue)
        }
    }

    /// Commit a release-time mode update if the caller's snapshot still
    /// matches the grant counter.
    ///
    /// `increment_by` is the number of waiters being promoted (zero for a
    /// reset to free). A mismatch means a grant raced the release; the
    /// update is aborted and state left untouched.
    pub fn validate_and_update(
        &self,
        lock: LockId,
        new_mode: LockMode,
        expected_count: GrantCount,
        increment_by: u64,
    ) -> Result<ValidationResult, ModeError> {
        let mut slot = self.slot(lock)?.lock();
        if slot.grant_count == expected_count.0 || self.validation_disabled {
            slot.mode = new_mode;
            slot.grant_count += increment_by;
            Ok(ValidationResult::Updated)
        } else {
            Ok(ValidationResult::Aborted)
        }
    }

    /// Consistent snapshot of one lock's entry.
    pub fn read_entry(&self, lock: LockId) -> Result<ModeEntry, ModeError> {
        let slot = self.slot(lock)?.lock();
        Ok(ModeEntry {
            lock,
            mode: slot.mode,
            grant_count: GrantCount(slot.grant_count),
        })
    }

    /// Total Enqueue decisions issued for `lock`.
    pub fn enqueues_issued(&self, lock: LockId) -> Result<u64, ModeError> {
        Ok(self.slot(lock)?.lock().enqueues_issued)
    }

    pub fn num_locks(&self) -> usize {
        self.slots.len()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mm(n: usize) -> ModeManager {
        ModeManager::new(n)
    }

    #[test]
    fn first_grant_on_free_lock() {
        let m = mm(1);
        let d = m.decide_acquire(LockId(0), AcquireMode::Exclusive).unwrap();
        assert_eq!(d, AcquireDecision::Granted(GrantCount(1)));
        let e = m.read_entry(LockId(0)).unwrap();
        assert_eq!(e.mode, LockMode::Exclusive);
        assert_eq!(e.grant_count, GrantCount(1));
    }

    #[test]
    fn shared_compatibility_increments_counter() {
        let m = mm(1);
        for _ in 0..3 {
            m.decide_acquire(LockId(0), AcquireMode::Shared).unwrap();
        }
        let d = m.decide_acquire(LockId(0), AcquireMode::Shared).unwrap();
        assert_eq!(d, AcquireDecision::Granted(GrantCount(4)));
    }

    #[test]
    fn incompatible_request_defers() {
        let m = mm(1);
        m.decide_acquire(LockId(0), AcquireMode::Exclusive).unwrap();
        let before = m.read_entry(LockId(0)).unwrap();
        let d = m.decide_acquire(LockId(0), AcquireMode::Shared).unwrap();
        assert_eq!(d, AcquireDecision::Enqueue);
        let after = m.read_entry(LockId(0)).unwrap();
        assert_eq!(before.grant_count, after.grant_count);
        assert_eq!(after.mode, LockMode::Exclusive);
    }

    #[test]
    fn matching_counts_commit() {
        let m = mm(1);
        for _ in 0..5 {
            m.decide_acquire(LockId(0), AcquireMode::Shared).unwrap();
        }
        let r = m
            .validate_and_update(LockId(0), LockMode::Exclusive, GrantCount(5), 1)
            .unwrap();
        assert_eq!(r, ValidationResult::Updated);
        let e = m.read_entry(LockId(0)).unwrap();
        assert_eq!(e.grant_count, GrantCount(6));
        assert_eq!(e.mode, LockMode::Exclusive);
    }

    #[test]
    fn mismatched_counts_abort_without_state_change() {
        let m = mm(1);
        for _ in 0..6 {
            m.decide_acquire(LockId(0), AcquireMode::Shared).unwrap();
        }
        let before = m.read_entry(LockId(0)).unwrap();
        let r = m
            .validate_and_update(LockId(0), LockMode::Exclusive, GrantCount(5), 1)
            .unwrap();
        assert_eq!(r, ValidationResult::Aborted);
        assert_eq!(m.read_entry(LockId(0)).unwrap(), before);
    }

    #[test]
    fn reset_to_free_promotes_nobody() {
        let m = mm(1);
        for _ in 0..7 {
            m.decide_acquire(LockId(0), AcquireMode::Shared).unwrap();
        }
        let r = m
            .validate_and_update(LockId(0), LockMode::Free, GrantCount(7), 0)
            .unwrap();
        assert_eq!(r, ValidationResult::Updated);
        let e = m.read_entry(LockId(0)).unwrap();
        assert_eq!(e.mode, LockMode::Free);
        assert_eq!(e.grant_count, GrantCount(7));
    }

    #[test]
    fn fresh_lock_reads_free_zero() {
        let m = mm(2);
        let e = m.read_entry(LockId(0)).unwrap();
        assert_eq!(e.mode, LockMode::Free);
        assert_eq!(e.grant_count, GrantCount(0));
    }

    #[test]
    fn grant_then_reset_keeps_counter() {
        let m = mm(1);
        m.decide_acquire(LockId(0), AcquireMode::Exclusive).unwrap();
        m.validate_and_update(LockId(0), LockMode::Free, GrantCount(1), 0)
            .unwrap();
        let e = m.read_entry(LockId(0)).unwrap();
        assert_eq!(e.mode, LockMode::Free);
        assert_eq!(e.grant_count, GrantCount(1));
    }

    #[test]
    fn unknown_lock_errors() {
        let m = mm(1);
        assert_eq!(
            m.decide_acquire(LockId(9), AcquireMode::Shared),
            Err(ModeError::UnknownLock(LockId(9)))
        );
        assert!(m.read_entry(LockId(1)).is_err());
        assert!(m
            .validate_and_update(LockId(1), LockMode::Free, GrantCount(0), 0)
            .is_err());
    }

    #[test]
    fn decide_agrees_with_compatible_on_all_pairs() {
        use crate::types::compatible;
        let modes = [LockMode::Free, LockMode::Shared, LockMode::Exclusive];
        let reqs = [AcquireMode::Shared, AcquireMode::Exclusive];
        for mode in modes {
            for req in reqs {
                let m = mm(1);
                // Drive the slot into the wanted mode.
                match mode {
                    LockMode::Free => {}
                    LockMode::Shared => {
                        m.decide_acquire(LockId(0), AcquireMode::Shared).unwrap();
                    }
                    LockMode::Exclusive => {
                        m.decide_acquire(LockId(0), AcquireMode::Exclusive).unwrap();
                    }
                }
                let d = m.decide_acquire(LockId(0), req).unwrap();
                let granted = matches!(d, AcquireDecision::Granted(_));
                assert_eq!(granted, compatible(mode, req), "{mode:?} {req:?}");
            }
        }
    }

    #[test]
    fn disabled_validation_always_updates() {
        let m = ModeManager::with_validation(1, true);
        m.decide_acquire(LockId(0), AcquireMode::Shared).unwrap();
        let r = m
            .validate_and_update(LockId(0), LockMode::Exclusive, GrantCount(99), 1)
            .unwrap();
        assert_eq!(r, ValidationResult::Updated);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        #[derive(Debug, Clone)]
        enum Op {
            Acquire(AcquireMode),
            Validate(LockMode, u64, u64),
        }

        fn op_strategy() -> impl Strategy<Value = Op> {
            prop_oneof![
                prop_oneof![Just(AcquireMode::Shared), Just(AcquireMode::Exclusive)]
                    .prop_map(Op::Acquire),
                (
                    prop_oneof![
                        Just(LockMode::Free),
                        Just(LockMode::Shared),
                        Just(LockMode::Exclusive)
                    ],
                    0u64..20,
                    0u64..4
                )
                    .prop_map(|(m, e, i)| Op::Validate(m, e, i)),
            ]
        }

        proptest! {
            /// Counter monotonicity plus grant accounting: the counter never
            /// decreases, and at the end equals grants + promoted waiters.
            #[test]
            fn counter_monotone_and_accounted(ops in proptest::collection::vec(op_strategy(), 0..64)) {
                let m = mm(1);
                let mut prev = 0u64;
                let mut expected = 0u64;
                for op in ops {
                    match op {
                        Op::Acquire(req) => {
                            if let AcquireDecision::Granted(_) =
                                m.decide_acquire(LockId(0), req).unwrap()
                            {
                                expected += 1;
                            }
                        }
                        Op::Validate(mode, e, inc) => {
                            if m.validate_and_update(LockId(0), mode, GrantCount(e), inc).unwrap()
                                == ValidationResult::Updated
                            {
                                expected += inc;
                            }
                        }
                    }
                    let now = m.read_entry(LockId(0)).unwrap().grant_count.0;
                    prop_assert!(now >= prev);
                    prev = now;
                }
                prop_assert_eq!(m.read_entry(LockId(0)).unwrap().grant_count.0, expected);
            }

            /// An aborted validation leaves the entry bit-identical.
            #[test]
            fn abort_purity(grants in 1u64..10, wrong in 0u64..30) {
                let m = mm(1);
                for _ in 0..grants {
                    m.decide_acquire(LockId(0), AcquireMode::Shared).unwrap();
                }
                prop_assume!(wrong != grants);
                let before = m.read_entry(LockId(0)).unwrap();
                let r = m.validate_and_update(LockId(0), LockMode::Free, GrantCount(wrong), 2).unwrap();
                prop_assert_eq!(r, ValidationResult::Aborted);
                prop_assert_eq!(m.read_entry(LockId(0)).unwrap(), before);
            }
        }
    }
}
