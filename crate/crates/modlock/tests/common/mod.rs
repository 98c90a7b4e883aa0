//! Shared scenario builders for integration tests.
#![allow(dead_code)] // each test binary uses a subset

use modlock::scenario::Scenario;
use modlock::sim::{ClientScript, ScriptAction};
use modlock::types::AcquireMode;

/// Topology with a 10 us gap between the mode/grant host and the
/// holder/waiter host, so a release pipeline's validation leg stays open
/// long enough for scripted grants to race it.
pub fn race_scenario() -> Scenario {
    let toml = r#"
name = "race_rig"

[notification]
mode = "push"

[workload]
num_clients = 8
num_locks = 4
distribution = "uniform"
shared_fraction = 0.5
critical_section_ns = 500
think_time_ns = 300
total_ops = 4
seed = 1

[[topology.components]]
name = "c"
kind = "compute_node"
proc_cost_per_op_ns = 50
parallelism = 8
memory_capacity_bytes = 1073741824
fast_memory_bytes = 1048576
hosts_clients = true
modules_allowed = []

[[topology.components]]
name = "m"
kind = "smart_nic"
proc_cost_per_op_ns = 100
parallelism = 8
memory_capacity_bytes = 67108864
fast_memory_bytes = 1048576

[[topology.components]]
name = "s"
kind = "server_cpu"
proc_cost_per_op_ns = 100
parallelism = 8
memory_capacity_bytes = 1073741824
fast_memory_bytes = 1048576

[[topology.links]]
a = "c"
b = "m"
latency_ns = 500

[[topology.links]]
a = "c"
b = "s"
latency_ns = 500

[[topology.links]]
a = "m"
b = "s"
latency_ns = 10000

[assignment]
mode = "m"
grant = "m"
holder = "s"
waiter = "s"
"#;
    Scenario::from_toml(toml).unwrap()
}

/// Like `race_scenario` but with validation mutated off, to show grant
/// counting is load-bearing.
pub fn race_scenario_unvalidated() -> Scenario {
    let mut s = race_scenario();
    s.model.disable_grant_validation = true;
    s
}

/// Three clients forcing the grant-race interleaving on lock 0:
/// A holds shared and releases; B waits exclusive; C's shared acquire is
/// timed by `racer_delay_ns` to land between the holder-removal snapshot
/// and the release pipeline's validation.
pub fn race_scripts(racer_delay_ns: u64) -> Vec<ClientScript> {
    let a = ClientScript {
        actions: vec![
            ScriptAction::Acquire {
                lock: 0,
                mode: AcquireMode::Shared,
            },
            ScriptAction::Wait { ns: 6_000 },
            ScriptAction::Release { lock: 0 },
        ],
    };
    let b = ClientScript {
        actions: vec![
            ScriptAction::Wait { ns: 3_000 },
            ScriptAction::Acquire {
                lock: 0,
                mode: AcquireMode::Exclusive,
            },
            ScriptAction::Wait { ns: 2_000 },
            ScriptAction::Release { lock: 0 },
        ],
    };
    // The racer holds long enough that a wrongly committed promotion (when
    // validation is mutated off) overlaps its shared hold.
    let c = ClientScript {
        actions: vec![
            ScriptAction::Wait { ns: racer_delay_ns },
            ScriptAction::Acquire {
                lock: 0,
                mode: AcquireMode::Shared,
            },
            ScriptAction::Wait { ns: 40_000 },
            ScriptAction::Release { lock: 0 },
        ],
    };
    vec![a, b, c]
}

/// Delay sweep for the race scripts: 100 schedules straddling the window.
pub fn race_delay_sweep() -> Vec<u64> {
    (0..100).map(|i| i * 200).collect()
}

/// Tiny synthetic scenario for randomized micro-histories: at most
/// `acquires` acquire/release pairs over 1-2 locks and 2-4 clients.
pub fn micro_scenario(clients: u32, locks: u32, acquires: u64, shared_fraction: f64, seed: u64) -> Scenario {
    let mut s = race_scenario();
    s.name = "micro".into();
    s.workload.num_clients = clients;
    s.workload.num_locks = locks;
    s.workload.total_ops = acquires;
    s.workload.shared_fraction = shared_fraction;
    s.workload.seed = seed;
    s.workload.critical_section_ns = 700;
    s.workload.think_time_ns = 400;
    s
}
