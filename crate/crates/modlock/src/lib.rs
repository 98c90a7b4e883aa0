//! Modularized lock management for heterogeneous hardware.
//!
//! A lock manager decomposed into four independent modules — mode, holder,
//! waiter, and grant managers — that can be placed on different simulated
//! hardware components (server CPUs, SmartNICs, programmable switches,
//! compute/memory nodes). A grant-counting protocol preserves the exclusion
//! property across module boundaries, placement heuristics rank assignments,
//! and a deterministic discrete-event simulator with safety/liveness/
//! linearizability checking exercises the whole stack.
//!
//! Entry points:
//! - [`protocol::LockService`] — the four managers behind a synchronous
//!   acquire/release API, for in-process embedding.
//! - [`planner::enumerate_assignments`] — score and rank module placements
//!   over a [`hardware::Topology`].
//! - [`sim::run`] — execute a [`scenario::Scenario`] deterministically and
//!   collect metrics, resource ledgers, and an operation history.
//! - [`verifier`] — mutual-exclusion, liveness, and bounded linearizability
//!   checks over recorded histories.

pub mod grant;
pub mod hardware;
pub mod history;
pub mod holder;
pub mod metrics;
pub mod mode;
pub mod planner;
pub mod protocol;
pub mod scenario;
pub mod sim;
pub mod types;
pub mod verifier;
pub mod waiter;

pub use types::{compatible, AcquireMode, ClientId, ComponentId, GrantCount, LockId, LockMode, RequestId};
