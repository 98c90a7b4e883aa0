//! Command-line front end: run scenarios, rank placements, verify safety
//! and liveness over seed sweeps, and compare two scenarios' metrics.

use anyhow::{anyhow, Context};
use clap::{Parser, Subcommand};
use modlock::hardware::SizingParams;
use modlock::metrics::MetricsReport;
use modlock::planner::{enumerate_assignments, placement_toml, requirements};
use modlock::scenario::{Scenario, BUILTIN_NAMES};
use modlock::sim;
use modlock::types::ModuleKind;
use modlock::verifier;
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(
    name = "modlock",
    about = "Modularized lock manager simulator and placement planner"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Execute a scenario and emit its metrics as CSV.
    Run {
        /// Path to a scenario TOML, or a built-in scenario name.
        config: String,
        /// Seed override (falls back to MODLOCK_SEED, then the config).
        #[arg(long)]
        seed: Option<u64>,
        /// Write the CSV here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Export the operation history (one event per line) to this path.
        #[arg(long)]
        history: Option<PathBuf>,
    },
    /// Rank module placements for a scenario's topology.
    Plan {
        config: String,
        /// How many plans to print.
        #[arg(long, default_value_t = 10)]
        top: usize,
    },
    /// Run the safety/liveness verifier across a seed sweep.
    Verify {
        config: String,
        /// Number of seeds (1..=K).
        #[arg(long, default_value_t = 10)]
        seeds: u64,
    },
    /// Run two scenarios with the same seed and print metric ratios.
    Compare {
        config_a: String,
        config_b: String,
        #[arg(long)]
        seed: Option<u64>,
    },
}

fn load_scenario(spec: &str) -> anyhow::Result<Scenario> {
    let path = PathBuf::from(spec);
    if path.exists() {
        let text = std::fs::read_to_string(&path)
            .with_context(|| format!("reading {}", path.display()))?;
        return Scenario::from_toml(&text).map_err(|e| anyhow!("{}: {e}", path.display()));
    }
    match Scenario::builtin(spec) {
        Some(result) => result.map_err(|e| anyhow!("builtin {spec}: {e}")),
        None => Err(anyhow!(
            "'{spec}' is neither a file nor a built-in scenario (built-ins: {})",
            BUILTIN_NAMES.join(", ")
        )),
    }
}

fn effective_seed(flag: Option<u64>, scenario: &Scenario) -> u64 {
    flag.or_else(|| {
        std::env::var("MODLOCK_SEED")
            .ok()
            .and_then(|v| v.parse().ok())
    })
    .unwrap_or(scenario.workload.seed)
}

fn cmd_run(
    config: &str,
    seed: Option<u64>,
    out: Option<PathBuf>,
    history: Option<PathBuf>,
) -> anyhow::Result<()> {
    let scenario = load_scenario(config)?;
    let seed = effective_seed(seed, &scenario);
    let output = sim::run(&scenario, seed)?;
    let csv = output.metrics.to_csv();
    match out {
        Some(path) => std::fs::write(&path, &csv)
            .with_context(|| format!("writing {}", path.display()))?,
        None => print!("{csv}"),
    }
    if let Some(path) = history {
        std::fs::write(&path, modlock::history::export(&output.history))
            .with_context(|| format!("writing {}", path.display()))?;
    }
    Ok(())
}

fn cmd_plan(config: &str, top: usize) -> anyhow::Result<()> {
    let scenario = load_scenario(config)?;
    let sizing = SizingParams {
        num_locks: scenario.workload.num_locks as u64,
        num_clients: scenario.workload.num_clients as u64,
        max_holders: scenario.model.max_holders_per_lock,
        max_waiters: scenario.model.max_waiters_per_lock,
    };
    let plans = enumerate_assignments(
        &scenario.topology,
        &requirements(),
        &scenario.model.footprints,
        &sizing,
    );
    println!("rank,feasible,violations,predicted_grant_latency_ns,mode,holder,waiter,grant");
    for (rank, (assignment, score)) in plans.iter().take(top).enumerate() {
        let name = |m: ModuleKind| {
            scenario
                .topology
                .component(assignment.host(m))
                .map(|c| c.name.clone())
                .unwrap_or_default()
        };
        println!(
            "{},{},{},{:.1},{},{},{},{}",
            rank + 1,
            score.feasible,
            score.bottleneck_violations,
            score.predicted_grant_latency,
            name(ModuleKind::Mode),
            name(ModuleKind::Holder),
            name(ModuleKind::Waiter),
            name(ModuleKind::Grant),
        );
    }
    if let Some((best, _)) = plans.iter().find(|(_, s)| s.feasible) {
        println!();
        print!("{}", placement_toml(best, &scenario.topology));
    }
    Ok(())
}

/// Returns true when every check passes for every seed.
fn cmd_verify(config: &str, seeds: u64) -> anyhow::Result<bool> {
    let scenario = load_scenario(config)?;
    let mut all_ok = true;
    for seed in 1..=seeds {
        let output = sim::run(&scenario, seed)?;
        let mutex = verifier::check_mutual_exclusion(&output.history)?;
        let liveness = verifier::check_liveness(&output.history, &output.quiescent);
        let traces_ok = output
            .traces
            .iter()
            .filter(|t| !t.steps.is_empty())
            .all(modlock::protocol::is_legal_trace);
        // Histories small enough for the brute-force bound also get the
        // linearizability check; larger ones skip it.
        let lin_ok = match verifier::check_linearizable(&output.history, verifier::DEFAULT_LIN_BOUND)
        {
            Ok(verifier::LinResult::Ok) => true,
            Ok(verifier::LinResult::NoWitness) => {
                println!("seed {seed}: FAIL linearizability (no witness)");
                false
            }
            Err(verifier::VerifyError::TooLarge { .. }) => true,
            Err(e) => return Err(e.into()),
        };
        let ok = mutex.is_ok() && liveness.is_ok() && traces_ok && lin_ok;
        if !ok {
            all_ok = false;
            if let Err(window) = &mutex {
                println!(
                    "seed {seed}: FAIL mutual exclusion on lock {} (clients {} and {}, window {}..{})",
                    window.lock.0,
                    window.first_client,
                    window.second_client,
                    window.overlap_start,
                    window.overlap_end
                );
            }
            if let Err(stuck) = &liveness {
                println!(
                    "seed {seed}: FAIL liveness ({} ungranted, {} stuck queues)",
                    stuck.ungranted.len(),
                    stuck.state.nonempty_queues.len()
                );
            }
            if !traces_ok {
                println!("seed {seed}: FAIL pipeline trace legality");
            }
        } else {
            println!(
                "seed {seed}: ok ({} acquires, {} aborts)",
                output.metrics.total_acquires, output.abort_count
            );
        }
    }
    Ok(all_ok)
}

fn cmd_compare(config_a: &str, config_b: &str, seed: Option<u64>) -> anyhow::Result<()> {
    let a = load_scenario(config_a)?;
    let b = load_scenario(config_b)?;
    let seed_a = effective_seed(seed, &a);
    let seed_b = effective_seed(seed, &b);
    let out_a = sim::run(&a, seed_a)?;
    let out_b = sim::run(&b, seed_b)?;
    let rows_a = MetricsReport::csv_rows(&out_a.metrics.to_csv());
    let rows_b = MetricsReport::csv_rows(&out_b.metrics.to_csv());
    println!("metric,{},{},ratio_b_over_a", a.name, b.name);
    for (key, va) in &rows_a {
        if key == "scenario" || key == "seed" {
            continue;
        }
        let Some((_, vb)) = rows_b.iter().find(|(k, _)| k == key) else {
            continue;
        };
        let ratio = match (va.parse::<f64>(), vb.parse::<f64>()) {
            (Ok(fa), Ok(fb)) if fa != 0.0 => format!("{:.6}", fb / fa),
            _ => "n/a".into(),
        };
        println!("{key},{va},{vb},{ratio}");
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run {
            config,
            seed,
            out,
            history,
        } => cmd_run(&config, seed, out, history).map(|_| true),
        Command::Plan { config, top } => cmd_plan(&config, top).map(|_| true),
        Command::Verify { config, seeds } => cmd_verify(&config, seeds),
        Command::Compare {
            config_a,
            config_b,
            seed,
        } => cmd_compare(&config_a, &config_b, seed).map(|_| true),
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
