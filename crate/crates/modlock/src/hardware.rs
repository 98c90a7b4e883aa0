//! Hardware model: heterogeneous components and links with processing,
//! memory, and communication resource axes, plus the charging engine that
//! bills lock-module activity against them.
//!
//! Communication saturation is a FIFO token-bucket per component: each
//! message occupies an endpoint for `per_message_cost / comm_ops_budget`
//! seconds, so traffic above the budget queues and is delayed. Cache
//! behavior is a working-set threshold: when a component's resident
//! lock-module bytes per thread exceed its fast memory, every operation
//! pays the miss penalty multiplier.

use crate::types::{ClientId, ComponentId, ModuleKind};
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};
use thiserror::Error;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum HardwareError {
    #[error("unknown component {0:?}")]
    UnknownComponent(ComponentId),
    #[error("no link between {0:?} and {1:?}")]
    UnknownLink(ComponentId, ComponentId),
    #[error("component {component:?} memory exceeded: resident {resident} + {requested} > capacity {capacity}")]
    CapacityExceeded {
        component: ComponentId,
        resident: u64,
        requested: u64,
        capacity: u64,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ComponentKind {
    ServerCpu,
    SmartNic,
    Switch,
    ComputeNode,
    MemoryNode,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResourceKind {
    Processing,
    Memory,
    Communication,
}

/// One hardware component and its resource attributes.
///
/// `fast_memory_capacity` is per-thread cache bytes; the miss penalty
/// applies when resident lock-module state divided across threads exceeds
/// it. `comm_ops_budget` is communication operations per simulated second
/// (0 means unlimited). `scarce` marks the resource axes that are this
/// component's bottleneck; the planner refuses to load them.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct HardwareProfile {
    pub component: ComponentId,
    pub name: String,
    pub kind: ComponentKind,
    /// Processing cost per manager operation, simulated nanoseconds.
    pub proc_cost_per_op: u64,
    /// Cost to terminate one client-originated message (packet handling),
    /// charged at the first module-hosting component on the message's path.
    #[serde(default)]
    pub packet_proc_ns: u64,
    pub parallelism: u32,
    /// Total memory for lock-module state, bytes.
    pub memory_capacity: u64,
    /// Per-thread fast memory (cache), bytes.
    pub fast_memory_capacity: u64,
    pub miss_penalty_multiplier: f64,
    /// Communication operations per simulated second; 0 = unlimited.
    pub comm_ops_budget: u64,
    #[serde(default)]
    pub scarce: BTreeSet<ResourceKind>,
    #[serde(default)]
    pub hosts_clients: bool,
    /// Modules this component may host. Empty means none (a pure client
    /// machine); managers cannot be placed here.
    #[serde(default)]
    pub modules_allowed: BTreeSet<ModuleKind>,
}

/// Bidirectional link with symmetric cost.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LinkProfile {
    pub endpoints: (ComponentId, ComponentId),
    /// One-way latency, simulated nanoseconds.
    pub latency: u64,
    /// Communication operations charged to each endpoint per message.
    pub per_message_cost: u64,
}

/// Two components whose traffic relays through a third (e.g. a server
/// fronted by its SmartNIC). Applies in both directions.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RelayRoute {
    pub between: (ComponentId, ComponentId),
    pub via: ComponentId,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct Topology {
    pub components: Vec<HardwareProfile>,
    pub links: Vec<LinkProfile>,
    #[serde(default)]
    pub routes: Vec<RelayRoute>,
}

impl Topology {
    pub fn component(&self, id: ComponentId) -> Result<&HardwareProfile, HardwareError> {
        self.components
            .iter()
            .find(|c| c.component == id)
            .ok_or(HardwareError::UnknownComponent(id))
    }

    pub fn link(&self, a: ComponentId, b: ComponentId) -> Result<&LinkProfile, HardwareError> {
        self.links
            .iter()
            .find(|l| {
                (l.endpoints.0 == a && l.endpoints.1 == b)
                    || (l.endpoints.0 == b && l.endpoints.1 == a)
            })
            .ok_or(HardwareError::UnknownLink(a, b))
    }

    pub fn route_via(&self, a: ComponentId, b: ComponentId) -> Option<ComponentId> {
        self.routes
            .iter()
            .find(|r| {
                (r.between.0 == a && r.between.1 == b) || (r.between.0 == b && r.between.1 == a)
            })
            .map(|r| r.via)
    }

    /// One-way latency between two components; zero when co-located, summed
    /// over hops when relayed.
    pub fn latency(&self, a: ComponentId, b: ComponentId) -> Result<u64, HardwareError> {
        if a == b {
            return Ok(0);
        }
        if let Ok(link) = self.link(a, b) {
            return Ok(link.latency);
        }
        if let Some(via) = self.route_via(a, b) {
            return Ok(self.link(a, via)?.latency + self.link(via, b)?.latency);
        }
        Err(HardwareError::UnknownLink(a, b))
    }

    pub fn client_components(&self) -> Vec<ComponentId> {
        self.components
            .iter()
            .filter(|c| c.hosts_clients)
            .map(|c| c.component)
            .collect()
    }
}

/// Sizing inputs for footprint formulas.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct SizingParams {
    pub num_locks: u64,
    pub num_clients: u64,
    /// Per-lock pre-allocated holder entries (identity tracking).
    pub max_holders: u64,
    /// Per-lock pre-allocated waiter entries.
    pub max_waiters: u64,
}

/// Per-entry byte footprints of the four modules. Defaults: 9 B per lock
/// for the mode manager (2-bit mode rounded up plus an 8 B grant counter),
/// 8 B per lock for a counter-only holder manager or 16 B per holder entry,
/// 24 B per waiter entry, and a flat packet buffer plus per-request grant
/// records for the grant manager.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FootprintModel {
    pub mode_bytes_per_lock: u64,
    pub holder_counter_bytes_per_lock: u64,
    pub holder_entry_bytes: u64,
    pub waiter_entry_bytes: u64,
    pub grant_base_bytes: u64,
    pub grant_record_bytes: u64,
    /// Whether the holder manager stores identities (16 B entries) or a
    /// bare counter.
    pub holder_identity_tracking: bool,
}

impl Default for FootprintModel {
    fn default() -> Self {
        Self {
            mode_bytes_per_lock: 9,
            holder_counter_bytes_per_lock: 8,
            holder_entry_bytes: 16,
            waiter_entry_bytes: 24,
            grant_base_bytes: 4096,
            grant_record_bytes: 32,
            holder_identity_tracking: true,
        }
    }
}

impl FootprintModel {
    /// Resident bytes of one module for the given sizing.
    pub fn footprint(&self, module: ModuleKind, sizing: &SizingParams) -> u64 {
        match module {
            ModuleKind::Mode => self.mode_bytes_per_lock * sizing.num_locks,
            ModuleKind::Holder => {
                if self.holder_identity_tracking {
                    self.holder_entry_bytes * sizing.num_locks * sizing.max_holders
                } else {
                    self.holder_counter_bytes_per_lock * sizing.num_locks
                }
            }
            ModuleKind::Waiter => self.waiter_entry_bytes * sizing.num_locks * sizing.max_waiters,
            ModuleKind::Grant => {
                self.grant_base_bytes + self.grant_record_bytes * sizing.num_clients
            }
        }
    }

    /// Footprint of a holder+waiter pair fused into one combined queue of
    /// holders and waiters, which halves the pair's footprint constant.
    pub fn fused_holder_waiter_footprint(&self, sizing: &SizingParams) -> u64 {
        (self.footprint(ModuleKind::Holder, sizing) + self.footprint(ModuleKind::Waiter, sizing)) / 2
    }
}

/// Processing cost of one operation given the per-thread working set.
pub fn processing_cost(profile: &HardwareProfile, working_set: u64) -> u64 {
    if working_set > profile.fast_memory_capacity {
        (profile.proc_cost_per_op as f64 * profile.miss_penalty_multiplier) as u64
    } else {
        profile.proc_cost_per_op
    }
}

/// Resource tallies accumulated over a run. Indexed positionally by the
/// topology's component order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ResourceLedger {
    pub component_names: Vec<String>,
    pub proc_ops: Vec<u64>,
    pub comm_ops: Vec<u64>,
    pub resident_bytes: Vec<u64>,
    pub messages_sent: Vec<u64>,
    pub messages_received: Vec<u64>,
    /// Messages per link, keyed by normalized endpoint pair.
    pub link_messages: BTreeMap<(u16, u16), u64>,
}

impl ResourceLedger {
    fn new(topology: &Topology) -> Self {
        let n = topology.components.len();
        Self {
            component_names: topology.components.iter().map(|c| c.name.clone()).collect(),
            proc_ops: vec![0; n],
            comm_ops: vec![0; n],
            resident_bytes: vec![0; n],
            messages_sent: vec![0; n],
            messages_received: vec![0; n],
            link_messages: BTreeMap::new(),
        }
    }

    pub fn in_flight(&self) -> u64 {
        let sent: u64 = self.messages_sent.iter().sum();
        let received: u64 = self.messages_received.iter().sum();
        sent - received
    }
}

/// Outcome of sending one message.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Delivery {
    pub time: u64,
    /// Whether packet-termination cost is still owed at the destination
    /// (a relay hosting lock modules may have paid it already).
    pub packet_due: bool,
}

/// Stateful charging engine owned by the simulator's event loop.
pub struct HardwareState {
    topology: Topology,
    /// Component index by id for positional vectors.
    index: BTreeMap<u16, usize>,
    /// Per-component per-thread next-free times, kept sorted ascending.
    thread_free: Vec<Vec<u64>>,
    /// Per-component communication server next-free time.
    comm_free: Vec<u64>,
    /// Effective per-op processing cost after the working-set penalty.
    effective_proc_cost: Vec<u64>,
    /// Effective packet-termination cost after the working-set penalty.
    effective_packet_cost: Vec<u64>,
    /// Per-component resident module bytes.
    resident: Vec<u64>,
    /// Components hosting at least one lock module; relays in this set
    /// terminate client packets themselves.
    module_hosts: Vec<bool>,
    pub ledger: ResourceLedger,
}

impl HardwareState {
    pub fn new(topology: Topology) -> Self {
        let n = topology.components.len();
        let index = topology
            .components
            .iter()
            .enumerate()
            .map(|(i, c)| (c.component.0, i))
            .collect();
        let thread_free = topology
            .components
            .iter()
            .map(|c| vec![0u64; c.parallelism.max(1) as usize])
            .collect();
        let effective_proc_cost = topology.components.iter().map(|c| c.proc_cost_per_op).collect();
        let effective_packet_cost = topology.components.iter().map(|c| c.packet_proc_ns).collect();
        let ledger = ResourceLedger::new(&topology);
        Self {
            index,
            thread_free,
            comm_free: vec![0; n],
            effective_proc_cost,
            effective_packet_cost,
            resident: vec![0; n],
            module_hosts: vec![false; n],
            ledger,
            topology,
        }
    }

    /// Mark which components host lock modules (drives relay packet
    /// termination).
    pub fn set_module_hosts(&mut self, hosts: &[ComponentId]) -> Result<(), HardwareError> {
        for h in hosts {
            let i = self.idx(*h)?;
            self.module_hosts[i] = true;
        }
        Ok(())
    }

    pub fn topology(&self) -> &Topology {
        &self.topology
    }

    pub fn idx(&self, id: ComponentId) -> Result<usize, HardwareError> {
        self.index
            .get(&id.0)
            .copied()
            .ok_or(HardwareError::UnknownComponent(id))
    }

    /// Account `bytes` of module state resident on `component`.
    pub fn charge_memory(
        &mut self,
        component: ComponentId,
        _module: ModuleKind,
        bytes: u64,
    ) -> Result<(), HardwareError> {
        let i = self.idx(component)?;
        let capacity = self.topology.components[i].memory_capacity;
        let resident = self.resident[i];
        if resident + bytes > capacity {
            return Err(HardwareError::CapacityExceeded {
                component,
                resident,
                requested: bytes,
                capacity,
            });
        }
        self.resident[i] += bytes;
        self.ledger.resident_bytes[i] = self.resident[i];
        Ok(())
    }

    /// Recompute effective processing and packet costs from the resident
    /// working sets. A blown cache slows the whole request path, packet
    /// handling included. Call once after placement memory has been charged.
    pub fn finalize_placement(&mut self) {
        for (i, c) in self.topology.components.iter().enumerate() {
            let per_thread = self.resident[i] / c.parallelism.max(1) as u64;
            self.effective_proc_cost[i] = processing_cost(c, per_thread);
            self.effective_packet_cost[i] = if per_thread > c.fast_memory_capacity {
                (c.packet_proc_ns as f64 * c.miss_penalty_multiplier) as u64
            } else {
                c.packet_proc_ns
            };
        }
    }

    pub fn effective_proc_cost(&self, component: ComponentId) -> Result<u64, HardwareError> {
        Ok(self.effective_proc_cost[self.idx(component)?])
    }

    /// Occupy a processing thread on `component` starting no earlier than
    /// `now`; returns the completion time of the operation.
    pub fn charge_processing(&mut self, component: ComponentId, now: u64) -> Result<u64, HardwareError> {
        let i = self.idx(component)?;
        let cost = self.effective_proc_cost[i];
        self.occupy_thread(i, now, cost)
    }

    /// Like `charge_processing` with an explicit cost (manager op plus any
    /// packet-termination surcharge).
    pub fn charge_processing_cost(
        &mut self,
        component: ComponentId,
        now: u64,
        cost: u64,
    ) -> Result<u64, HardwareError> {
        let i = self.idx(component)?;
        self.occupy_thread(i, now, cost)
    }

    fn occupy_thread(&mut self, i: usize, now: u64, cost: u64) -> Result<u64, HardwareError> {
        let threads = &mut self.thread_free[i];
        // Earliest-free thread; vector stays sorted so index 0 is it.
        let start = now.max(threads[0]);
        let done = start + cost;
        threads[0] = done;
        let mut j = 0;
        while j + 1 < threads.len() && threads[j] > threads[j + 1] {
            threads.swap(j, j + 1);
            j += 1;
        }
        self.ledger.proc_ops[i] += 1;
        Ok(done)
    }

    pub fn packet_proc_ns(&self, component: ComponentId) -> Result<u64, HardwareError> {
        Ok(self.effective_packet_cost[self.idx(component)?])
    }

    fn comm_interval(&self, i: usize, per_message_cost: u64) -> u64 {
        let budget = self.topology.components[i].comm_ops_budget;
        if budget == 0 {
            0
        } else {
            ((per_message_cost as u128 * 1_000_000_000) / budget as u128) as u64
        }
    }

    fn charge_hop(
        &mut self,
        src: ComponentId,
        dst: ComponentId,
        now: u64,
    ) -> Result<u64, HardwareError> {
        let link = self.topology.link(src, dst)?;
        let latency = link.latency;
        let cost = link.per_message_cost;
        let si = self.idx(src)?;
        let di = self.idx(dst)?;

        // Budget-limited endpoints serve messages FIFO; unlimited ones
        // impose no ordering or delay at all.
        let depart = if self.topology.components[si].comm_ops_budget > 0 {
            let d = now.max(self.comm_free[si]);
            self.comm_free[si] = d + self.comm_interval(si, cost);
            d
        } else {
            now
        };
        let arrive = depart + latency;
        let deliver = if self.topology.components[di].comm_ops_budget > 0 {
            let d = arrive.max(self.comm_free[di]);
            self.comm_free[di] = d + self.comm_interval(di, cost);
            d
        } else {
            arrive
        };

        self.ledger.comm_ops[si] += cost;
        self.ledger.comm_ops[di] += cost;
        let key = (src.0.min(dst.0), src.0.max(dst.0));
        *self.ledger.link_messages.entry(key).or_insert(0) += 1;
        Ok(deliver)
    }

    /// Send one message; returns its delivery. Local (same-component)
    /// messages are free and instantaneous. Each traversed link charges
    /// both endpoints its per-message cost and may delay the message when
    /// saturated. Relayed client-originated messages pay their packet
    /// termination at the relay when it hosts lock modules; otherwise the
    /// relay forwards in hardware and termination stays due downstream.
    pub fn charge_message(
        &mut self,
        src: ComponentId,
        dst: ComponentId,
        now: u64,
        client_originated: bool,
    ) -> Result<Delivery, HardwareError> {
        if src == dst {
            return Ok(Delivery {
                time: now,
                packet_due: false,
            });
        }
        let si = self.idx(src)?;
        if self.topology.link(src, dst).is_ok() {
            let time = self.charge_hop(src, dst, now)?;
            self.ledger.messages_sent[si] += 1;
            return Ok(Delivery {
                time,
                packet_due: client_originated,
            });
        }
        let via = self
            .topology
            .route_via(src, dst)
            .ok_or(HardwareError::UnknownLink(src, dst))?;
        let at_relay = self.charge_hop(src, via, now)?;
        let vi = self.idx(via)?;
        let mut packet_due = client_originated;
        let mut forward_at = at_relay;
        if client_originated && self.module_hosts[vi] {
            let packet = self.effective_packet_cost[vi];
            forward_at = self.occupy_thread(vi, at_relay, packet)?;
            packet_due = false;
        }
        let time = self.charge_hop(via, dst, forward_at)?;
        self.ledger.messages_sent[si] += 1;
        Ok(Delivery { time, packet_due })
    }

    /// Record a message delivery for conservation accounting.
    pub fn mark_received(&mut self, dst: ComponentId) -> Result<(), HardwareError> {
        let i = self.idx(dst)?;
        self.ledger.messages_received[i] += 1;
        Ok(())
    }

    /// One poll round trip from a client's component to the component
    /// hosting the polled grant state. Charges exactly one communication
    /// operation at the polled component, which queues when saturated.
    /// Returns (service time at the polled component, response arrival at
    /// the client).
    pub fn charge_poll(
        &mut self,
        client: ComponentId,
        polled: ComponentId,
        now: u64,
    ) -> Result<(u64, u64), HardwareError> {
        let pi = self.idx(polled)?;
        if client == polled {
            self.ledger.comm_ops[pi] += 1;
            return Ok((now, now));
        }
        let latency = self.topology.latency(client, polled)?;
        let arrive = now + latency;
        let start = if self.topology.components[pi].comm_ops_budget > 0 {
            let s = arrive.max(self.comm_free[pi]);
            self.comm_free[pi] = s + self.comm_interval(pi, 1);
            s
        } else {
            arrive
        };
        self.ledger.comm_ops[pi] += 1;
        Ok((start, start + latency))
    }

    pub fn resident_bytes(&self, component: ComponentId) -> Result<u64, HardwareError> {
        Ok(self.resident[self.idx(component)?])
    }
}

/// Convenience builder for profiles with sane defaults per kind.
#[allow(clippy::too_many_arguments)]
pub fn profile(
    id: u16,
    name: &str,
    kind: ComponentKind,
    proc_cost_per_op: u64,
    parallelism: u32,
    memory_capacity: u64,
    fast_memory_capacity: u64,
    comm_ops_budget: u64,
) -> HardwareProfile {
    let scarce: BTreeSet<ResourceKind> = match kind {
        ComponentKind::ServerCpu => BTreeSet::new(),
        ComponentKind::SmartNic => [ResourceKind::Memory].into(),
        ComponentKind::Switch => [ResourceKind::Memory].into(),
        ComponentKind::ComputeNode => [ResourceKind::Memory].into(),
        ComponentKind::MemoryNode => [ResourceKind::Communication].into(),
    };
    HardwareProfile {
        component: ComponentId(id),
        name: name.to_string(),
        kind,
        proc_cost_per_op,
        packet_proc_ns: 0,
        parallelism,
        memory_capacity,
        fast_memory_capacity,
        miss_penalty_multiplier: 2.0,
        comm_ops_budget,
        scarce,
        hosts_clients: false,
        modules_allowed: ModuleKind::ALL.into(),
    }
}

pub fn client_of(c: &ClientId) -> ComponentId {
    c.location
}
