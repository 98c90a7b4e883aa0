//! Cross-scenario behavior: the baselines order the way their stories say
//! they should, and randomized scripted workloads stay safe.

mod common;

use common::race_scenario;
use modlock::scenario::Scenario;
use modlock::sim::{self, ClientScript, ScriptAction};
use modlock::types::AcquireMode;
use modlock::verifier;
use proptest::prelude::*;

fn mn_comm_ops(name: &str, seed: u64) -> (u64, f64) {
    let s = Scenario::builtin(name).unwrap().unwrap();
    let out = sim::run(&s, seed).unwrap();
    let mn = s
        .topology
        .components
        .iter()
        .position(|c| c.name == "mn")
        .unwrap();
    (out.ledger.comm_ops[mn], out.metrics.throughput_ops_per_sec)
}

/// Backoff mitigates but does not eliminate the polling burden: its MN
/// communication load and throughput land between the spinning baseline
/// and the push-notification design.
#[test]
fn backoff_sits_between_baseline_and_modular() {
    let (base_ops, base_tput) = mn_comm_ops("dm_polling_baseline", 1);
    let (backoff_ops, backoff_tput) = mn_comm_ops("dm_polling_backoff", 1);
    let (modular_ops, modular_tput) = mn_comm_ops("dm_modular", 1);
    assert!(backoff_ops < base_ops, "{backoff_ops} !< {base_ops}");
    assert!(modular_ops < backoff_ops, "{modular_ops} !< {backoff_ops}");
    assert!(base_tput < backoff_tput, "{base_tput} !< {backoff_tput}");
    assert!(backoff_tput < modular_tput, "{backoff_tput} !< {modular_tput}");
}

/// Offloading the whole manager onto the SmartNIC blows its per-thread
/// cache: the metadata working set doubles every operation, so the
/// strawman's acquire latency sits above the modular split's even though
/// both enjoy the short client-NIC path.
#[test]
fn monolithic_nic_pays_the_cache_penalty() {
    let modular = Scenario::builtin("smartnic_modular").unwrap().unwrap();
    let strawman = Scenario::builtin("smartnic_monolithic_nic").unwrap().unwrap();
    let out_mod = sim::run(&modular, 1).unwrap();
    let out_straw = sim::run(&strawman, 1).unwrap();
    assert!(out_straw.metrics.acquire_p50_ns > out_mod.metrics.acquire_p50_ns);
    // Both beat the long path to the server CPU on raw latency.
    let mono = Scenario::builtin("smartnic_monolithic_cpu").unwrap().unwrap();
    let out_mono = sim::run(&mono, 1).unwrap();
    assert!(out_straw.metrics.acquire_p50_ns < out_mono.metrics.acquire_p50_ns);
}

/// An exclusive holder cannot be raced: incompatible acquires all queue,
/// so the release pipeline's validation never aborts.
#[test]
fn exclusive_holders_admit_no_grant_race() {
    let scenario = race_scenario();
    for delay in (0..20).map(|i| i * 1_000) {
        let a = ClientScript {
            actions: vec![
                ScriptAction::Acquire { lock: 0, mode: AcquireMode::Exclusive },
                ScriptAction::Wait { ns: 6_000 },
                ScriptAction::Release { lock: 0 },
            ],
        };
        let b = ClientScript {
            actions: vec![
                ScriptAction::Wait { ns: 3_000 },
                ScriptAction::Acquire { lock: 0, mode: AcquireMode::Exclusive },
                ScriptAction::Wait { ns: 2_000 },
                ScriptAction::Release { lock: 0 },
            ],
        };
        let racer = ClientScript {
            actions: vec![
                ScriptAction::Wait { ns: delay },
                ScriptAction::Acquire { lock: 0, mode: AcquireMode::Exclusive },
                ScriptAction::Wait { ns: 1_000 },
                ScriptAction::Release { lock: 0 },
            ],
        };
        let out = sim::run_with_scripts(&scenario, &[a, b, racer], 1).unwrap();
        assert_eq!(out.abort_count, 0, "delay {delay}");
        verifier::check_mutual_exclusion(&out.history).unwrap().unwrap();
        verifier::check_liveness(&out.history, &out.quiescent).unwrap();
    }
}

#[derive(Debug, Clone)]
struct CyclePlan {
    start_delay: u64,
    lock: u32,
    mode: AcquireMode,
    hold: u64,
}

fn arb_cycle() -> impl Strategy<Value = CyclePlan> {
    (
        0u64..30_000,
        0u32..2,
        prop_oneof![Just(AcquireMode::Shared), Just(AcquireMode::Exclusive)],
        0u64..8_000,
    )
        .prop_map(|(start_delay, lock, mode, hold)| CyclePlan {
            start_delay,
            lock,
            mode,
            hold,
        })
}

fn arb_client() -> impl Strategy<Value = Vec<CyclePlan>> {
    proptest::collection::vec(arb_cycle(), 1..3)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    /// Arbitrary well-formed acquire/hold/release scripts over two locks on
    /// the asymmetric-link topology stay exclusive, live, and (being small)
    /// linearizable.
    #[test]
    fn random_scripts_stay_safe(clients in proptest::collection::vec(arb_client(), 2..5)) {
        let scenario = race_scenario();
        let scripts: Vec<ClientScript> = clients
            .iter()
            .map(|cycles| {
                let mut actions = Vec::new();
                for c in cycles {
                    actions.push(ScriptAction::Wait { ns: c.start_delay });
                    actions.push(ScriptAction::Acquire { lock: c.lock, mode: c.mode });
                    actions.push(ScriptAction::Wait { ns: c.hold });
                    actions.push(ScriptAction::Release { lock: c.lock });
                }
                ClientScript { actions }
            })
            .collect();
        let out = sim::run_with_scripts(&scenario, &scripts, 11).unwrap();
        verifier::check_mutual_exclusion(&out.history).unwrap().unwrap();
        verifier::check_liveness(&out.history, &out.quiescent).unwrap();
        let total_ops: usize = clients.iter().map(|c| c.len() * 2).sum();
        if total_ops <= 12 {
            prop_assert_eq!(
                verifier::check_linearizable(&out.history, 12).unwrap(),
                verifier::LinResult::Ok
            );
        }
        prop_assert_eq!(out.ledger.in_flight(), 0);
    }
}
