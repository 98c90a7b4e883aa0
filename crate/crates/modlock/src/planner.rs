//! Assignment planner: produces and scores module-to-component placements.
//!
//! Ranking is lexicographic, encoding the placement heuristics directly:
//! feasibility first, then bottleneck violations ("consider bottlenecks
//! before strengths"), then predicted latency of the uncontended
//! acquire-grant critical path through the mode and grant managers
//! ("prioritize managers on the lock granting critical path"). Co-located
//! modules fuse into groups whose internal interactions cost nothing.

use crate::hardware::{FootprintModel, ResourceKind, SizingParams, Topology};
use crate::types::{ComponentId, ModuleKind};
use std::collections::{BTreeMap, BTreeSet};

/// Resource character of one module.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModuleRequirement {
    pub module: ModuleKind,
    pub on_critical_path: bool,
    pub dominant_resource: ResourceKind,
}

/// The four modules' requirements: mode and grant sit on the granting
/// critical path; holder and waiter are metadata-heavy.
pub fn requirements() -> [ModuleRequirement; 4] {
    [
        ModuleRequirement {
            module: ModuleKind::Mode,
            on_critical_path: true,
            dominant_resource: ResourceKind::Processing,
        },
        ModuleRequirement {
            module: ModuleKind::Holder,
            on_critical_path: false,
            dominant_resource: ResourceKind::Memory,
        },
        ModuleRequirement {
            module: ModuleKind::Waiter,
            on_critical_path: false,
            dominant_resource: ResourceKind::Memory,
        },
        ModuleRequirement {
            module: ModuleKind::Grant,
            on_critical_path: true,
            dominant_resource: ResourceKind::Communication,
        },
    ]
}

/// Placement of the four modules plus the fusion partition.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Assignment {
    pub placement: BTreeMap<ModuleKind, ComponentId>,
    pub fusion_groups: Vec<BTreeSet<ModuleKind>>,
}

impl Assignment {
    pub fn new(placement: BTreeMap<ModuleKind, ComponentId>) -> Self {
        Self {
            placement,
            fusion_groups: ModuleKind::ALL.iter().map(|m| BTreeSet::from([*m])).collect(),
        }
    }

    pub fn host(&self, module: ModuleKind) -> ComponentId {
        self.placement[&module]
    }

    /// Whether holder and waiter share a component (and hence, once fused,
    /// a combined queue of holders and waiters).
    pub fn holder_waiter_colocated(&self) -> bool {
        self.host(ModuleKind::Holder) == self.host(ModuleKind::Waiter)
    }

    fn lex_key(&self) -> [u16; 4] {
        [
            self.host(ModuleKind::Mode).0,
            self.host(ModuleKind::Holder).0,
            self.host(ModuleKind::Waiter).0,
            self.host(ModuleKind::Grant).0,
        ]
    }
}

/// Plan quality under the lexicographic heuristics.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PlanScore {
    /// Uncontended acquire round trip (client -> mode host -> grant host ->
    /// client), averaged over client-hosting components, nanoseconds.
    pub predicted_grant_latency: f64,
    pub bottleneck_violations: u32,
    pub feasible: bool,
}

/// Merge co-located modules into fusion groups.
pub fn fuse(assignment: &Assignment) -> Assignment {
    let mut by_component: BTreeMap<ComponentId, BTreeSet<ModuleKind>> = BTreeMap::new();
    for m in ModuleKind::ALL {
        by_component.entry(assignment.host(m)).or_default().insert(m);
    }
    Assignment {
        placement: assignment.placement.clone(),
        fusion_groups: by_component.into_values().collect(),
    }
}

/// Per-component resident bytes for a placement, with the fused
/// holder+waiter combined-queue discount applied.
pub fn component_residency(
    assignment: &Assignment,
    footprints: &FootprintModel,
    sizing: &SizingParams,
) -> BTreeMap<ComponentId, u64> {
    let mut resident: BTreeMap<ComponentId, u64> = BTreeMap::new();
    let fused_hw = assignment.holder_waiter_colocated();
    for m in ModuleKind::ALL {
        let host = assignment.host(m);
        let bytes = match m {
            ModuleKind::Holder if fused_hw => footprints.fused_holder_waiter_footprint(sizing),
            ModuleKind::Waiter if fused_hw => 0, // charged with the holder half above
            other => footprints.footprint(other, sizing),
        };
        *resident.entry(host).or_insert(0) += bytes;
    }
    resident
}

/// Score one assignment. Deterministic in its inputs.
pub fn score(
    assignment: &Assignment,
    topology: &Topology,
    reqs: &[ModuleRequirement; 4],
    footprints: &FootprintModel,
    sizing: &SizingParams,
) -> PlanScore {
    let mut violations = 0u32;
    let mut feasible = true;

    // Eligibility: a module on a component that cannot host it makes the
    // plan unusable outright.
    for m in ModuleKind::ALL {
        match topology.component(assignment.host(m)) {
            Ok(profile) => {
                if !profile.modules_allowed.contains(&m) {
                    feasible = false;
                }
            }
            Err(_) => feasible = false,
        }
    }

    // Bottleneck check: a module whose dominant resource is scarce on its
    // host counts a violation.
    for req in reqs {
        if let Ok(profile) = topology.component(assignment.host(req.module)) {
            if profile.scarce.contains(&req.dominant_resource) {
                violations += 1;
            }
        }
    }

    // Memory feasibility: resident module state must fit each host.
    let resident = component_residency(assignment, footprints, sizing);
    for (host, bytes) in &resident {
        if let Ok(profile) = topology.component(*host) {
            if *bytes > profile.memory_capacity {
                violations += 1;
                feasible = false;
            }
        }
    }

    // Critical path: client -> mode -> grant -> client, averaged over
    // client components, with per-hop processing at the estimated
    // working-set penalty.
    let mode_host = assignment.host(ModuleKind::Mode);
    let grant_host = assignment.host(ModuleKind::Grant);
    let proc_at = |host: ComponentId| -> Option<f64> {
        let profile = topology.component(host).ok()?;
        let bytes = resident.get(&host).copied().unwrap_or(0);
        let per_thread = bytes / profile.parallelism.max(1) as u64;
        Some(crate::hardware::processing_cost(profile, per_thread) as f64)
    };
    let clients = topology.client_components();
    let mut latency = f64::INFINITY;
    if !clients.is_empty() {
        let mut total = 0.0;
        let mut routable = true;
        for c in &clients {
            let legs = [
                topology.latency(*c, mode_host),
                topology.latency(mode_host, grant_host),
                topology.latency(grant_host, *c),
            ];
            match (legs[0].as_ref(), legs[1].as_ref(), legs[2].as_ref()) {
                (Ok(a), Ok(b), Ok(d)) => total += (a + b + d) as f64,
                _ => routable = false,
            }
        }
        match (proc_at(mode_host), proc_at(grant_host)) {
            (Some(pm), Some(pg)) if routable => {
                latency = total / clients.len() as f64 + pm + pg;
            }
            _ => feasible = false,
        }
        if !routable {
            feasible = false;
        }
    }

    PlanScore {
        predicted_grant_latency: latency,
        bottleneck_violations: violations,
        feasible,
    }
}

/// Enumerate every placement of the four modules over the topology's
/// components, score each, and rank by (feasible, violations, latency),
/// ties broken by lexicographic placement order.
pub fn enumerate_assignments(
    topology: &Topology,
    reqs: &[ModuleRequirement; 4],
    footprints: &FootprintModel,
    sizing: &SizingParams,
) -> Vec<(Assignment, PlanScore)> {
    let ids: Vec<ComponentId> = topology.components.iter().map(|c| c.component).collect();
    let mut plans = Vec::new();
    for &m in &ids {
        for &h in &ids {
            for &w in &ids {
                for &g in &ids {
                    let placement = BTreeMap::from([
                        (ModuleKind::Mode, m),
                        (ModuleKind::Holder, h),
                        (ModuleKind::Waiter, w),
                        (ModuleKind::Grant, g),
                    ]);
                    let assignment = fuse(&Assignment::new(placement));
                    let s = score(&assignment, topology, reqs, footprints, sizing);
                    plans.push((assignment, s));
                }
            }
        }
    }
    plans.sort_by(|(a, sa), (b, sb)| {
        sb.feasible
            .cmp(&sa.feasible)
            .then(sa.bottleneck_violations.cmp(&sb.bottleneck_violations))
            .then(sa.predicted_grant_latency.total_cmp(&sb.predicted_grant_latency))
            .then(a.lex_key().cmp(&b.lex_key()))
    });
    plans
}

/// Serialize a placement as a scenario-config assignment table, keyed by
/// component names, so a scored plan can be fed back to the simulator.
pub fn placement_toml(assignment: &Assignment, topology: &Topology) -> String {
    let mut out = String::from("[assignment]\n");
    for m in ModuleKind::ALL {
        let host = assignment.host(m);
        let name = topology
            .component(host)
            .map(|c| c.name.clone())
            .unwrap_or_else(|_| format!("component-{}", host.0));
        out.push_str(&format!("{m} = \"{name}\"\n"));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hardware::{profile, ComponentKind, LinkProfile};

    fn sizing() -> SizingParams {
        SizingParams {
            num_locks: 1000,
            num_clients: 64,
            max_holders: 4,
            max_waiters: 4,
        }
    }

    /// Client machines, a SmartNIC on the lock server, and the lock server
    /// CPU. The NIC is closer to clients than the server CPU.
    fn smartnic_topology() -> Topology {
        let mut clients = profile(0, "clients", ComponentKind::ComputeNode, 300, 32, 1 << 30, 1 << 15, 0);
        clients.hosts_clients = true;
        clients.modules_allowed = BTreeSet::new();
        let nic = profile(1, "nic", ComponentKind::SmartNic, 600, 256, 64 << 20, 1024, 0);
        let server = profile(2, "server", ComponentKind::ServerCpu, 500, 16, 16 << 30, 2 << 20, 0);
        Topology {
            components: vec![clients, nic, server],
            links: vec![
                LinkProfile {
                    endpoints: (ComponentId(0), ComponentId(1)),
                    latency: 1500,
                    per_message_cost: 1,
                },
                LinkProfile {
                    endpoints: (ComponentId(0), ComponentId(2)),
                    latency: 2500,
                    per_message_cost: 1,
                },
                LinkProfile {
                    endpoints: (ComponentId(1), ComponentId(2)),
                    latency: 1000,
                    per_message_cost: 1,
                },
            ],
            routes: vec![],
        }
    }

    /// Compute nodes and one memory node on an RDMA fabric. Compute nodes
    /// may host only the grant manager.
    fn dm_topology() -> Topology {
        let mut cn0 = profile(0, "cn0", ComponentKind::ComputeNode, 300, 16, 2 << 30, 1 << 15, 0);
        cn0.hosts_clients = true;
        cn0.modules_allowed = BTreeSet::from([ModuleKind::Grant]);
        let mut cn1 = cn0.clone();
        cn1.component = ComponentId(1);
        cn1.name = "cn1".into();
        let mn = profile(2, "mn", ComponentKind::MemoryNode, 150, 4, 64 << 30, 1 << 15, 1_000_000);
        let mut links = vec![LinkProfile {
            endpoints: (ComponentId(0), ComponentId(1)),
            latency: 2000,
            per_message_cost: 1,
        }];
        for cn in [0u16, 1] {
            links.push(LinkProfile {
                endpoints: (ComponentId(cn), ComponentId(2)),
                latency: 2000,
                per_message_cost: 1,
            });
        }
        Topology {
            components: vec![cn0, cn1, mn],
            links,
            routes: vec![],
        }
    }

    #[test]
    fn smartnic_top_plan_puts_mode_and_grant_on_nic() {
        let topo = smartnic_topology();
        let plans = enumerate_assignments(&topo, &requirements(), &FootprintModel::default(), &sizing());
        let (top, s) = &plans[0];
        assert!(s.feasible);
        assert_eq!(s.bottleneck_violations, 0);
        assert_eq!(top.host(ModuleKind::Mode), ComponentId(1));
        assert_eq!(top.host(ModuleKind::Grant), ComponentId(1));
        assert_eq!(top.host(ModuleKind::Holder), ComponentId(2));
        assert_eq!(top.host(ModuleKind::Waiter), ComponentId(2));
    }

    #[test]
    fn dm_top_plan_puts_grant_on_cn_and_fuses_holder_waiter_on_mn() {
        let topo = dm_topology();
        let plans = enumerate_assignments(&topo, &requirements(), &FootprintModel::default(), &sizing());
        let (top, s) = &plans[0];
        assert!(s.feasible);
        assert_eq!(s.bottleneck_violations, 0);
        assert_eq!(top.host(ModuleKind::Mode), ComponentId(2));
        assert_eq!(top.host(ModuleKind::Holder), ComponentId(2));
        assert_eq!(top.host(ModuleKind::Waiter), ComponentId(2));
        let grant_host = top.host(ModuleKind::Grant);
        assert!(grant_host == ComponentId(0) || grant_host == ComponentId(1));
        assert!(top
            .fusion_groups
            .iter()
            .any(|g| g.contains(&ModuleKind::Holder) && g.contains(&ModuleKind::Waiter)));
    }

    #[test]
    fn single_component_topology_collapses_to_monolith() {
        let mut only = profile(0, "server", ComponentKind::ServerCpu, 500, 16, 16 << 30, 2 << 20, 0);
        only.hosts_clients = true;
        let topo = Topology {
            components: vec![only],
            links: vec![],
            routes: vec![],
        };
        let plans = enumerate_assignments(&topo, &requirements(), &FootprintModel::default(), &sizing());
        let (top, s) = &plans[0];
        assert!(s.feasible);
        assert_eq!(top.fusion_groups.len(), 1);
        assert_eq!(top.fusion_groups[0].len(), 4);
        // No inter-module hops: latency is just the two processing legs.
        let proc = 500.0 * 2.0;
        assert_eq!(s.predicted_grant_latency, proc);
    }

    #[test]
    fn mode_on_memory_starved_switch_counts_violation() {
        let mut switch = profile(0, "switch", ComponentKind::Switch, 200, 4, 4_000_000, 1 << 20, 0);
        switch.hosts_clients = true;
        let topo = Topology {
            components: vec![switch],
            links: vec![],
            routes: vec![],
        };
        let big = SizingParams {
            num_locks: 1_000_000,
            num_clients: 64,
            max_holders: 1,
            max_waiters: 1,
        };
        let assignment = fuse(&Assignment::new(
            ModuleKind::ALL.iter().map(|m| (*m, ComponentId(0))).collect(),
        ));
        let s = score(&assignment, &topo, &requirements(), &FootprintModel::default(), &big);
        assert!(!s.feasible);
        assert!(s.bottleneck_violations > 0);
    }

    #[test]
    fn waiter_on_smartnic_is_a_bottleneck_violation() {
        let topo = smartnic_topology();
        let placement = BTreeMap::from([
            (ModuleKind::Mode, ComponentId(1)),
            (ModuleKind::Holder, ComponentId(2)),
            (ModuleKind::Waiter, ComponentId(1)),
            (ModuleKind::Grant, ComponentId(1)),
        ]);
        let s = score(
            &fuse(&Assignment::new(placement)),
            &topo,
            &requirements(),
            &FootprintModel::default(),
            &sizing(),
        );
        assert!(s.bottleneck_violations >= 1);
    }

    #[test]
    fn fusion_groups_examples() {
        let placement = BTreeMap::from([
            (ModuleKind::Mode, ComponentId(0)),
            (ModuleKind::Holder, ComponentId(2)),
            (ModuleKind::Waiter, ComponentId(2)),
            (ModuleKind::Grant, ComponentId(1)),
        ]);
        let fused = fuse(&Assignment::new(placement));
        assert!(fused
            .fusion_groups
            .iter()
            .any(|g| g == &BTreeSet::from([ModuleKind::Holder, ModuleKind::Waiter])));

        let all_distinct = BTreeMap::from([
            (ModuleKind::Mode, ComponentId(0)),
            (ModuleKind::Holder, ComponentId(1)),
            (ModuleKind::Waiter, ComponentId(2)),
            (ModuleKind::Grant, ComponentId(3)),
        ]);
        let fused = fuse(&Assignment::new(all_distinct));
        assert_eq!(fused.fusion_groups.len(), 4);
        assert!(fused.fusion_groups.iter().all(|g| g.len() == 1));
    }

    #[test]
    fn fusion_is_idempotent() {
        let placement = BTreeMap::from([
            (ModuleKind::Mode, ComponentId(1)),
            (ModuleKind::Holder, ComponentId(2)),
            (ModuleKind::Waiter, ComponentId(2)),
            (ModuleKind::Grant, ComponentId(1)),
        ]);
        let once = fuse(&Assignment::new(placement));
        let twice = fuse(&once);
        assert_eq!(once, twice);
    }

    #[test]
    fn score_is_deterministic() {
        let topo = smartnic_topology();
        let plans1 = enumerate_assignments(&topo, &requirements(), &FootprintModel::default(), &sizing());
        let plans2 = enumerate_assignments(&topo, &requirements(), &FootprintModel::default(), &sizing());
        assert_eq!(plans1.len(), plans2.len());
        for (a, b) in plans1.iter().zip(plans2.iter()) {
            assert_eq!(a.0, b.0);
            assert_eq!(a.1.predicted_grant_latency, b.1.predicted_grant_latency);
            assert_eq!(a.1.bottleneck_violations, b.1.bottleneck_violations);
            assert_eq!(a.1.feasible, b.1.feasible);
        }
    }

    /// H#1 dominance: among feasible plans with equal violation counts, the
    /// ranking never places a strictly slower plan first.
    #[test]
    fn ranking_respects_latency_within_violation_class() {
        let topo = smartnic_topology();
        let plans = enumerate_assignments(&topo, &requirements(), &FootprintModel::default(), &sizing());
        let feasible: Vec<_> = plans.iter().filter(|(_, s)| s.feasible).collect();
        for pair in feasible.windows(2) {
            let (_, a) = pair[0];
            let (_, b) = pair[1];
            if a.bottleneck_violations == b.bottleneck_violations {
                assert!(a.predicted_grant_latency <= b.predicted_grant_latency);
            }
        }
    }

    /// H#2 strictness: no plan with violations outranks a violation-free
    /// feasible plan.
    #[test]
    fn violations_never_outrank_clean_plans() {
        let topo = dm_topology();
        let plans = enumerate_assignments(&topo, &requirements(), &FootprintModel::default(), &sizing());
        let mut seen_violating = false;
        for (_, s) in plans.iter().filter(|(_, s)| s.feasible) {
            if s.bottleneck_violations > 0 {
                seen_violating = true;
            } else {
                assert!(!seen_violating, "violation-free plan ranked after a violating one");
            }
        }
    }

    #[test]
    fn placement_serializes_to_config_table() {
        let topo = smartnic_topology();
        let plans = enumerate_assignments(&topo, &requirements(), &FootprintModel::default(), &sizing());
        let text = placement_toml(&plans[0].0, &topo);
        assert!(text.contains("[assignment]"));
        assert!(text.contains("mode = \"nic\""));
        assert!(text.contains("holder = \"server\""));
    }
}
