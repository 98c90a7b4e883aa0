//! Run metrics and their stable CSV rendering.

use crate::hardware::ResourceLedger;

/// One run's headline numbers plus per-component resource totals.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    pub scenario: String,
    pub seed: u64,
    pub total_acquires: u64,
    /// Simulated time of the last event, nanoseconds.
    pub sim_duration_ns: u64,
    /// Completed acquires per simulated second.
    pub throughput_ops_per_sec: f64,
    pub acquire_p50_ns: u64,
    pub acquire_p99_ns: u64,
    pub abort_count: u64,
    pub poll_count: u64,
    /// Per-component rows in topology order.
    pub components: Vec<ComponentRow>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ComponentRow {
    pub name: String,
    pub proc_ops: u64,
    pub comm_ops: u64,
    pub peak_memory_bytes: u64,
    /// Acquire decisions served at this component's mode manager.
    pub requests_served: u64,
}

/// Nearest-rank percentile over unsorted samples.
pub fn percentile(samples: &[u64], pct: u32) -> u64 {
    if samples.is_empty() {
        return 0;
    }
    let mut sorted = samples.to_vec();
    sorted.sort_unstable();
    let rank = ((pct as u64 * sorted.len() as u64).div_ceil(100)).max(1) as usize;
    sorted[rank - 1]
}

impl MetricsReport {
    #[allow(clippy::too_many_arguments)]
    pub fn from_run(
        scenario: &str,
        seed: u64,
        acquire_latencies: &[u64],
        sim_duration_ns: u64,
        abort_count: u64,
        poll_count: u64,
        ledger: &ResourceLedger,
        requests_served: &[u64],
    ) -> Self {
        let total = acquire_latencies.len() as u64;
        let throughput = if sim_duration_ns == 0 {
            0.0
        } else {
            total as f64 * 1e9 / sim_duration_ns as f64
        };
        let components = ledger
            .component_names
            .iter()
            .enumerate()
            .map(|(i, name)| ComponentRow {
                name: name.clone(),
                proc_ops: ledger.proc_ops[i],
                comm_ops: ledger.comm_ops[i],
                peak_memory_bytes: ledger.resident_bytes[i],
                requests_served: requests_served.get(i).copied().unwrap_or(0),
            })
            .collect();
        Self {
            scenario: scenario.to_string(),
            seed,
            total_acquires: total,
            sim_duration_ns,
            throughput_ops_per_sec: throughput,
            acquire_p50_ns: percentile(acquire_latencies, 50),
            acquire_p99_ns: percentile(acquire_latencies, 99),
            abort_count,
            poll_count,
            components,
        }
    }

    /// Stable `metric,value` CSV: fixed header, fixed row order, fixed
    /// decimal formatting.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("metric,value\n");
        let mut row = |k: &str, v: String| {
            out.push_str(k);
            out.push(',');
            out.push_str(&v);
            out.push('\n');
        };
        row("scenario", self.scenario.clone());
        row("seed", self.seed.to_string());
        row("total_acquires", self.total_acquires.to_string());
        row("sim_duration_ns", self.sim_duration_ns.to_string());
        row(
            "throughput_ops_per_sec",
            format!("{:.6}", self.throughput_ops_per_sec),
        );
        row("acquire_p50_ns", self.acquire_p50_ns.to_string());
        row("acquire_p99_ns", self.acquire_p99_ns.to_string());
        row("aborts", self.abort_count.to_string());
        row("polls", self.poll_count.to_string());
        for c in &self.components {
            row(&format!("proc_ops[{}]", c.name), c.proc_ops.to_string());
            row(&format!("comm_ops[{}]", c.name), c.comm_ops.to_string());
            row(
                &format!("peak_memory[{}]", c.name),
                c.peak_memory_bytes.to_string(),
            );
            row(&format!("served[{}]", c.name), c.requests_served.to_string());
        }
        out
    }

    /// Parse a `metric,value` CSV produced by `to_csv`.
    pub fn csv_rows(csv: &str) -> Vec<(String, String)> {
        csv.lines()
            .skip(1)
            .filter_map(|l| l.split_once(','))
            .map(|(k, v)| (k.to_string(), v.to_string()))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn percentile_nearest_rank() {
        let samples: Vec<u64> = (1..=100).collect();
        assert_eq!(percentile(&samples, 50), 50);
        assert_eq!(percentile(&samples, 99), 99);
        assert_eq!(percentile(&[7], 50), 7);
        assert_eq!(percentile(&[], 50), 0);
    }

    #[test]
    fn csv_has_fixed_header_and_order() {
        let ledger = ResourceLedger {
            component_names: vec!["a".into(), "b".into()],
            proc_ops: vec![1, 2],
            comm_ops: vec![3, 4],
            resident_bytes: vec![5, 6],
            messages_sent: vec![0, 0],
            messages_received: vec![0, 0],
            link_messages: Default::default(),
        };
        let report = MetricsReport::from_run("t", 1, &[100, 200], 1000, 0, 0, &ledger, &[2, 0]);
        let csv = report.to_csv();
        assert!(csv.starts_with("metric,value\nscenario,t\nseed,1\n"));
        assert!(csv.contains("served[a],2\n"));
        assert!(csv.contains("comm_ops[b],4\n"));
        let again = report.to_csv();
        assert_eq!(csv, again);
    }
}
