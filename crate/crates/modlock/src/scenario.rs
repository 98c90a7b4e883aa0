//! Scenario configuration: topology, assignment, workload, and model
//! settings, loaded from TOML. The built-in scenarios covering the SmartNIC
//! and disaggregated-memory case studies plus baselines ship embedded and
//! as files under `configs/`.

use crate::grant::NotificationMode;
use crate::hardware::{
    ComponentKind, FootprintModel, HardwareProfile, LinkProfile, RelayRoute, ResourceKind, Topology,
};
use crate::holder::HolderTracking;
use crate::planner::Assignment;
use crate::types::{ComponentId, ModuleKind};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("config parse error: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("invalid config: {0}")]
    Invalid(String),
}

fn invalid(msg: impl Into<String>) -> ConfigError {
    ConfigError::Invalid(msg.into())
}

/// Lock access pattern over the lock space.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DistributionKind {
    Uniform,
    Zipfian,
}

/// Synthetic closed-loop workload parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorkloadConfig {
    pub num_clients: u32,
    pub num_locks: u32,
    pub distribution: DistributionKind,
    /// Zipf skew; ignored for uniform.
    #[serde(default = "default_theta")]
    pub theta: f64,
    /// Probability an acquire is shared rather than exclusive.
    pub shared_fraction: f64,
    pub critical_section_ns: u64,
    pub think_time_ns: u64,
    /// Total acquires across all clients.
    pub total_ops: u64,
    #[serde(default = "default_seed")]
    pub seed: u64,
}

fn default_theta() -> f64 {
    0.99
}

fn default_seed() -> u64 {
    1
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct NotificationCfg {
    mode: String,
    poll_interval_ns: Option<u64>,
    backoff_multiplier: Option<f64>,
    max_interval_ns: Option<u64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ComponentCfg {
    name: String,
    kind: ComponentKind,
    proc_cost_per_op_ns: u64,
    #[serde(default)]
    packet_proc_ns: u64,
    parallelism: u32,
    memory_capacity_bytes: u64,
    fast_memory_bytes: u64,
    #[serde(default = "default_miss_multiplier")]
    miss_penalty_multiplier: f64,
    #[serde(default)]
    comm_ops_budget_per_sec: u64,
    #[serde(default)]
    scarce: Vec<ResourceKind>,
    #[serde(default)]
    hosts_clients: bool,
    /// Modules this component may host; omitted means all four.
    modules_allowed: Option<Vec<ModuleKind>>,
}

fn default_miss_multiplier() -> f64 {
    2.0
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct LinkCfg {
    a: String,
    b: String,
    latency_ns: u64,
    #[serde(default = "default_message_cost")]
    per_message_cost: u64,
}

fn default_message_cost() -> u64 {
    1
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RouteCfg {
    from: String,
    to: String,
    via: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TopologyCfg {
    components: Vec<ComponentCfg>,
    links: Vec<LinkCfg>,
    #[serde(default)]
    routes: Vec<RouteCfg>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PlacementCfg {
    mode: String,
    holder: String,
    waiter: String,
    grant: String,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct AssignmentCfg {
    /// Run the planner and take its top-ranked feasible plan.
    #[serde(default)]
    plan: bool,
    mode: Option<String>,
    holder: Option<String>,
    waiter: Option<String>,
    grant: Option<String>,
    /// Hot/cold split: the hottest `hot_set_size` locks route to `hot`.
    hot_set_size: Option<u32>,
    hot: Option<PlacementCfg>,
    cold: Option<PlacementCfg>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct ModelCfg {
    holder_tracking: String,
    max_holders_per_lock: Option<u64>,
    max_waiters_per_lock: Option<u64>,
    disable_grant_validation: bool,
    mode_bytes_per_lock: Option<u64>,
    holder_entry_bytes: Option<u64>,
    waiter_entry_bytes: Option<u64>,
}

impl Default for ModelCfg {
    fn default() -> Self {
        Self {
            holder_tracking: "identity".into(),
            max_holders_per_lock: None,
            max_waiters_per_lock: None,
            disable_grant_validation: false,
            mode_bytes_per_lock: None,
            holder_entry_bytes: None,
            waiter_entry_bytes: None,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ScenarioFile {
    name: String,
    #[serde(default)]
    baseline_tag: Option<String>,
    notification: NotificationCfg,
    workload: WorkloadConfig,
    topology: TopologyCfg,
    assignment: AssignmentCfg,
    #[serde(default)]
    model: ModelCfg,
}

/// Where the module placement comes from.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum AssignmentSource {
    Explicit(Assignment),
    /// Resolve via the planner's top-ranked feasible plan.
    Plan,
    /// The hottest `hot_set_size` locks (lowest ids) use `hot`, the rest
    /// `cold`.
    HotCold {
        hot_set_size: u32,
        hot: Assignment,
        cold: Assignment,
    },
}

/// Model knobs resolved against workload defaults.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelSettings {
    pub holder_tracking: HolderTracking,
    pub max_holders_per_lock: u64,
    pub max_waiters_per_lock: u64,
    /// Forces every release-time validation to commit. Demonstrates grant
    /// counting is load-bearing; breaks exclusion under races.
    pub disable_grant_validation: bool,
    pub footprints: FootprintModel,
}

/// A fully resolved scenario ready to simulate.
#[derive(Debug, Clone)]
pub struct Scenario {
    pub name: String,
    pub baseline_tag: Option<String>,
    pub topology: Topology,
    pub assignment: AssignmentSource,
    pub workload: WorkloadConfig,
    pub notification: NotificationMode,
    pub model: ModelSettings,
}

impl Scenario {
    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        let file: ScenarioFile = toml::from_str(text)?;
        resolve(file)
    }

    /// A built-in scenario by name.
    pub fn builtin(name: &str) -> Option<Result<Self, ConfigError>> {
        builtin_toml(name).map(Scenario::from_toml)
    }

    pub fn component_id(&self, name: &str) -> Option<ComponentId> {
        self.topology
            .components
            .iter()
            .find(|c| c.name == name)
            .map(|c| c.component)
    }
}

pub const BUILTIN_NAMES: [&str; 7] = [
    "smartnic_monolithic_cpu",
    "smartnic_monolithic_nic",
    "smartnic_modular",
    "dm_polling_baseline",
    "dm_polling_backoff",
    "dm_modular",
    "hotlock_cache_switch",
];

/// Embedded TOML for a built-in scenario. The same files ship under
/// `configs/`.
pub fn builtin_toml(name: &str) -> Option<&'static str> {
    match name {
        "smartnic_monolithic_cpu" => Some(include_str!("../configs/smartnic_monolithic_cpu.toml")),
        "smartnic_monolithic_nic" => Some(include_str!("../configs/smartnic_monolithic_nic.toml")),
        "smartnic_modular" => Some(include_str!("../configs/smartnic_modular.toml")),
        "dm_polling_baseline" => Some(include_str!("../configs/dm_polling_baseline.toml")),
        "dm_polling_backoff" => Some(include_str!("../configs/dm_polling_backoff.toml")),
        "dm_modular" => Some(include_str!("../configs/dm_modular.toml")),
        "hotlock_cache_switch" => Some(include_str!("../configs/hotlock_cache_switch.toml")),
        _ => None,
    }
}

fn resolve(file: ScenarioFile) -> Result<Scenario, ConfigError> {
    let mut names: BTreeMap<String, ComponentId> = BTreeMap::new();
    let mut components = Vec::new();
    for (i, c) in file.topology.components.iter().enumerate() {
        if names.contains_key(&c.name) {
            return Err(invalid(format!("duplicate component name '{}'", c.name)));
        }
        let id = ComponentId(i as u16);
        names.insert(c.name.clone(), id);
        components.push(HardwareProfile {
            component: id,
            name: c.name.clone(),
            kind: c.kind,
            proc_cost_per_op: c.proc_cost_per_op_ns,
            packet_proc_ns: c.packet_proc_ns,
            parallelism: c.parallelism,
            memory_capacity: c.memory_capacity_bytes,
            fast_memory_capacity: c.fast_memory_bytes,
            miss_penalty_multiplier: c.miss_penalty_multiplier,
            comm_ops_budget: c.comm_ops_budget_per_sec,
            scarce: c.scarce.iter().copied().collect(),
            hosts_clients: c.hosts_clients,
            modules_allowed: match &c.modules_allowed {
                None => ModuleKind::ALL.into(),
                Some(ms) => ms.iter().copied().collect(),
            },
        });
    }
    let lookup = |name: &str| -> Result<ComponentId, ConfigError> {
        names
            .get(name)
            .copied()
            .ok_or_else(|| invalid(format!("unknown component '{name}'")))
    };

    let mut links = Vec::new();
    for l in &file.topology.links {
        links.push(LinkProfile {
            endpoints: (lookup(&l.a)?, lookup(&l.b)?),
            latency: l.latency_ns,
            per_message_cost: l.per_message_cost,
        });
    }
    let mut routes = Vec::new();
    for r in &file.topology.routes {
        routes.push(RelayRoute {
            between: (lookup(&r.from)?, lookup(&r.to)?),
            via: lookup(&r.via)?,
        });
    }
    let topology = Topology {
        components,
        links,
        routes,
    };

    if topology.client_components().is_empty() {
        return Err(invalid("no component hosts clients"));
    }

    let placement_of = |p: &PlacementCfg| -> Result<Assignment, ConfigError> {
        let placement = BTreeMap::from([
            (ModuleKind::Mode, lookup(&p.mode)?),
            (ModuleKind::Holder, lookup(&p.holder)?),
            (ModuleKind::Waiter, lookup(&p.waiter)?),
            (ModuleKind::Grant, lookup(&p.grant)?),
        ]);
        Ok(crate::planner::fuse(&Assignment::new(placement)))
    };

    let a = &file.assignment;
    let explicit = a.mode.is_some() || a.holder.is_some() || a.waiter.is_some() || a.grant.is_some();
    let hot_cold = a.hot_set_size.is_some() || a.hot.is_some() || a.cold.is_some();
    let assignment = match (a.plan, explicit, hot_cold) {
        (true, false, false) => AssignmentSource::Plan,
        (false, true, false) => {
            let p = PlacementCfg {
                mode: a.mode.clone().ok_or_else(|| invalid("assignment.mode missing"))?,
                holder: a.holder.clone().ok_or_else(|| invalid("assignment.holder missing"))?,
                waiter: a.waiter.clone().ok_or_else(|| invalid("assignment.waiter missing"))?,
                grant: a.grant.clone().ok_or_else(|| invalid("assignment.grant missing"))?,
            };
            AssignmentSource::Explicit(placement_of(&p)?)
        }
        (false, false, true) => {
            let hot_set_size = a
                .hot_set_size
                .ok_or_else(|| invalid("assignment.hot_set_size missing"))?;
            let hot = a.hot.as_ref().ok_or_else(|| invalid("assignment.hot missing"))?;
            let cold = a.cold.as_ref().ok_or_else(|| invalid("assignment.cold missing"))?;
            if hot_set_size > file.workload.num_locks {
                return Err(invalid("hot_set_size exceeds num_locks"));
            }
            AssignmentSource::HotCold {
                hot_set_size,
                hot: placement_of(hot)?,
                cold: placement_of(cold)?,
            }
        }
        _ => {
            return Err(invalid(
                "assignment must be exactly one of: plan, explicit placement, hot/cold split",
            ))
        }
    };

    let notification = match file.notification.mode.as_str() {
        "push" => NotificationMode::Push,
        "poll" => {
            let defaults = match NotificationMode::default_poll() {
                NotificationMode::Poll {
                    poll_interval,
                    backoff_multiplier,
                    max_interval,
                } => (poll_interval, backoff_multiplier, max_interval),
                NotificationMode::Push => unreachable!(),
            };
            let poll_interval = file.notification.poll_interval_ns.unwrap_or(defaults.0);
            let backoff_multiplier = file.notification.backoff_multiplier.unwrap_or(defaults.1);
            let max_interval = file.notification.max_interval_ns.unwrap_or(defaults.2);
            if poll_interval == 0 {
                return Err(invalid("poll_interval_ns must be positive"));
            }
            if backoff_multiplier < 1.0 {
                return Err(invalid("backoff_multiplier must be >= 1"));
            }
            NotificationMode::Poll {
                poll_interval,
                backoff_multiplier,
                max_interval,
            }
        }
        other => return Err(invalid(format!("unknown notification mode '{other}'"))),
    };

    let w = &file.workload;
    if !(0.0..=1.0).contains(&w.shared_fraction) {
        return Err(invalid("shared_fraction must be in [0, 1]"));
    }
    if w.theta < 0.0 {
        return Err(invalid("theta must be >= 0"));
    }
    if w.num_clients == 0 || w.num_locks == 0 {
        return Err(invalid("num_clients and num_locks must be positive"));
    }

    let tracking = match file.model.holder_tracking.as_str() {
        "identity" => HolderTracking::Identity,
        "counter" => HolderTracking::Counter,
        other => return Err(invalid(format!("unknown holder_tracking '{other}'"))),
    };
    let mut footprints = FootprintModel {
        holder_identity_tracking: tracking == HolderTracking::Identity,
        ..FootprintModel::default()
    };
    if let Some(b) = file.model.mode_bytes_per_lock {
        footprints.mode_bytes_per_lock = b;
    }
    if let Some(b) = file.model.holder_entry_bytes {
        footprints.holder_entry_bytes = b;
    }
    if let Some(b) = file.model.waiter_entry_bytes {
        footprints.waiter_entry_bytes = b;
    }
    let model = ModelSettings {
        holder_tracking: tracking,
        max_holders_per_lock: file
            .model
            .max_holders_per_lock
            .unwrap_or(w.num_clients as u64),
        max_waiters_per_lock: file
            .model
            .max_waiters_per_lock
            .unwrap_or(w.num_clients as u64),
        disable_grant_validation: file.model.disable_grant_validation,
        footprints,
    };

    Ok(Scenario {
        name: file.name,
        baseline_tag: file.baseline_tag,
        topology,
        assignment,
        workload: file.workload,
        notification,
        model,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn all_builtins_parse() {
        for name in BUILTIN_NAMES {
            let s = Scenario::builtin(name)
                .unwrap_or_else(|| panic!("missing builtin {name}"))
                .unwrap_or_else(|e| panic!("builtin {name} invalid: {e}"));
            assert_eq!(s.name, name);
        }
    }

    #[test]
    fn unknown_builtin_is_none() {
        assert!(Scenario::builtin("nope").is_none());
    }

    #[test]
    fn parse_error_reports_field() {
        let err = Scenario::from_toml("name = 3").unwrap_err();
        assert!(matches!(err, ConfigError::Parse(_)));
    }

    #[test]
    fn conflicting_assignment_sources_rejected() {
        let mut text = builtin_toml("smartnic_modular").unwrap().to_string();
        text.push_str("\n[assignment.hot]\nmode = \"nic\"\nholder = \"nic\"\nwaiter = \"nic\"\ngrant = \"nic\"\n");
        let err = Scenario::from_toml(&text).unwrap_err();
        assert!(matches!(err, ConfigError::Invalid(_)));
    }

    #[test]
    fn unknown_component_in_assignment_rejected() {
        let text = builtin_toml("smartnic_modular")
            .unwrap()
            .replace("mode = \"nic\"", "mode = \"nonexistent\"");
        let err = Scenario::from_toml(&text).unwrap_err();
        assert!(matches!(err, ConfigError::Invalid(_)));
    }

    #[test]
    fn smartnic_modular_resolves_expected_placement() {
        let s = Scenario::builtin("smartnic_modular").unwrap().unwrap();
        let nic = s.component_id("nic").unwrap();
        let server = s.component_id("server").unwrap();
        match &s.assignment {
            AssignmentSource::Explicit(a) => {
                assert_eq!(a.host(ModuleKind::Mode), nic);
                assert_eq!(a.host(ModuleKind::Grant), nic);
                assert_eq!(a.host(ModuleKind::Holder), server);
                assert_eq!(a.host(ModuleKind::Waiter), server);
            }
            other => panic!("{other:?}"),
        }
        assert_eq!(s.notification, NotificationMode::Push);
    }

    #[test]
    fn dm_baseline_polls_without_backoff() {
        let s = Scenario::builtin("dm_polling_baseline").unwrap().unwrap();
        match s.notification {
            NotificationMode::Poll {
                poll_interval,
                backoff_multiplier,
                max_interval,
            } => {
                assert_eq!(poll_interval, 500);
                assert_eq!(backoff_multiplier, 1.0);
                assert_eq!(max_interval, poll_interval);
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn hotlock_splits_hot_and_cold() {
        let s = Scenario::builtin("hotlock_cache_switch").unwrap().unwrap();
        match &s.assignment {
            AssignmentSource::HotCold { hot_set_size, hot, cold } => {
                assert_eq!(*hot_set_size, 1000);
                assert_eq!(hot.host(ModuleKind::Mode), s.component_id("switch").unwrap());
                assert_eq!(cold.host(ModuleKind::Mode), s.component_id("server").unwrap());
            }
            other => panic!("{other:?}"),
        }
    }
}
