//! Scenario loading, the built-in scenario library, run orchestration and
//! report output.

mod builtin;
mod report;

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::inference::{parse_datagrams, InferenceConfig, InferenceState};
use crate::optimizer::{solve_allocation, AllocationProblem, AllocationSolution, DemandFlags};
use crate::scheduler::{derive_schedule, FlowClass, TimeFrameSchedule};
use crate::simnet::{self, Direction, Endpoint, RunMetrics, ScenarioConfig, ServiceRate};
use crate::topology::{
    build_dependence_graph, enumerate_maximal_independent_sets_capped, greedy_cover, ClientId,
    DependenceGraph, IndependentSetMatrix,
};

pub use builtin::{builtin_names, builtin_scenario, sec74_scan_replay};
pub use report::write_report;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("cannot read scenario '{0}': {1}")]
    Io(String, #[source] std::io::Error),
    #[error("scenario parse error: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("override '{key}' does not address an existing field")]
    BadOverridePath { key: String },
    #[error("override '{key}': cannot parse value '{value}'")]
    BadOverrideValue { key: String, value: String },
    #[error(transparent)]
    Sim(#[from] simnet::SimError),
    #[error(transparent)]
    Optimizer(#[from] crate::optimizer::OptimizerError),
    #[error(transparent)]
    Scheduler(#[from] crate::scheduler::SchedulerError),
    #[error(transparent)]
    Topology(#[from] crate::topology::TopologyError),
    #[error("report write failed: {0}")]
    Report(#[source] std::io::Error),
}

impl HarnessError {
    /// Exit code classification: 2 for validation problems, 3 for runtime
    /// failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            HarnessError::Io(..)
            | HarnessError::Parse(..)
            | HarnessError::BadOverridePath { .. }
            | HarnessError::BadOverrideValue { .. } => 2,
            HarnessError::Sim(simnet::SimError::InvalidScenario(_)) => 2,
            _ => 3,
        }
    }
}

/// Resolves a scenario argument: a built-in name or a file path.
pub fn resolve_scenario_text(name_or_path: &str) -> Result<String, HarnessError> {
    if let Some(text) = builtin_scenario(name_or_path) {
        return Ok(text.to_string());
    }
    std::fs::read_to_string(name_or_path)
        .map_err(|e| HarnessError::Io(name_or_path.to_string(), e))
}

/// Parses scenario text with `key=value` overrides applied on dotted paths
/// (e.g. `sim.seed=7`, `controller.ton_ms=200`). `Ton` is an alias for
/// `controller.ton_ms`.
pub fn load_scenario(text: &str, overrides: &[String]) -> Result<ScenarioConfig, HarnessError> {
    let mut value: toml::Value = toml::from_str(text)?;
    for ov in overrides {
        let (key, raw) = ov.split_once('=').ok_or_else(|| HarnessError::BadOverrideValue {
            key: ov.clone(),
            value: String::new(),
        })?;
        let key = normalize_key(key.trim());
        let raw = raw.trim();
        let parsed = parse_override_value(raw).ok_or_else(|| HarnessError::BadOverrideValue {
            key: key.clone(),
            value: raw.to_string(),
        })?;
        set_path(&mut value, &key, parsed)?;
    }
    let config: ScenarioConfig = value.try_into()?;
    config.validate()?;
    Ok(config)
}

fn normalize_key(key: &str) -> String {
    match key {
        "Ton" | "ton" | "ton_ms" => "controller.ton_ms".to_string(),
        "seed" => "sim.seed".to_string(),
        other => other.to_string(),
    }
}

fn parse_override_value(raw: &str) -> Option<toml::Value> {
    if raw == "true" || raw == "false" {
        return Some(toml::Value::Boolean(raw == "true"));
    }
    if let Ok(i) = raw.parse::<i64>() {
        return Some(toml::Value::Integer(i));
    }
    if let Ok(f) = raw.parse::<f64>() {
        return Some(toml::Value::Float(f));
    }
    Some(toml::Value::String(raw.to_string()))
}

fn set_path(root: &mut toml::Value, key: &str, new: toml::Value) -> Result<(), HarnessError> {
    let parts: Vec<&str> = key.split('.').collect();
    let mut cursor = root;
    for part in &parts[..parts.len() - 1] {
        cursor = cursor
            .as_table_mut()
            .and_then(|t| t.get_mut(*part))
            .ok_or_else(|| HarnessError::BadOverridePath {
                key: key.to_string(),
            })?;
    }
    let table = cursor
        .as_table_mut()
        .ok_or_else(|| HarnessError::BadOverridePath {
            key: key.to_string(),
        })?;
    // Inserting new keys is allowed for optional fields (e.g. ton_ms).
    table.insert(parts[parts.len() - 1].to_string(), new);
    Ok(())
}

/// One finished run: the resolved config, the metrics, and where the report
/// landed (when requested).
#[derive(Debug)]
pub struct RunOutcome {
    pub config: ScenarioConfig,
    pub metrics: RunMetrics,
    pub report_dir: Option<PathBuf>,
}

/// Runs a scenario and optionally writes the report directory.
pub fn run_scenario(
    config: &ScenarioConfig,
    out_dir: Option<&Path>,
) -> Result<RunOutcome, HarnessError> {
    let metrics = simnet::run(config)?;
    let report_dir = match out_dir {
        Some(dir) => {
            report::write_report(dir, config, &metrics).map_err(HarnessError::Report)?;
            Some(dir.to_path_buf())
        }
        None => None,
    };
    Ok(RunOutcome {
        config: config.clone(),
        metrics,
        report_dir,
    })
}

/// The controller-side solve of a scenario, without simulating: dependence
/// graph from the declared edges, independent sets, allocation, schedule.
#[derive(Debug)]
pub struct SolveOutput {
    pub clients: Vec<ClientId>,
    pub solution: AllocationSolution,
    pub matrix: IndependentSetMatrix,
    /// Per client in `clients` order: allocated rate in Mbps.
    pub rates_mbps: Vec<f64>,
    pub schedule: TimeFrameSchedule,
}

pub fn solve_scenario(config: &ScenarioConfig) -> Result<SolveOutput, HarnessError> {
    config.validate()?;
    let net = config.network.to_description();
    let extra: BTreeSet<(ClientId, ClientId)> = config
        .network
        .extra_edges
        .iter()
        .map(|e| {
            let (a, b) = if e.a <= e.b { (e.a, e.b) } else { (e.b, e.a) };
            (ClientId(a), ClientId(b))
        })
        .collect();
    let graph = build_dependence_graph(&net, &extra)?;

    let mut clients: Vec<u32> = Vec::new();
    let mut demand: Vec<DemandFlags> = Vec::new();
    for entry in &config.network.clients {
        let mut d = DemandFlags::default();
        for f in &config.flows {
            if f.client != entry.id || f.class != FlowClass::LongLived {
                continue;
            }
            match (f.endpoint, f.direction) {
                (Endpoint::Wan, Direction::Down) => d.wan_down = true,
                (Endpoint::Wan, Direction::Up) => d.wan_up = true,
                (Endpoint::Lan, _) => d.lan = true,
            }
        }
        if d.any() {
            clients.push(entry.id);
            demand.push(d);
        }
    }

    let sub = subgraph(&graph, &clients);
    let matrix = match enumerate_maximal_independent_sets_capped(
        &sub,
        config.controller.exact_enum_cap,
    ) {
        Ok(m) => m,
        Err(_) => greedy_cover(&sub),
    };
    let v_of = |_: u32| match config.controller.service_rate {
        ServiceRate::Fixed { v_mbps } => v_mbps,
        ServiceRate::Adaptive => config.controller.adapter.v_min_mbps,
    };
    let problem = AllocationProblem {
        clients: clients.iter().map(|&c| ClientId(c)).collect(),
        weights: clients.iter().map(|&c| config.weights_for(c)).collect(),
        v: clients.iter().map(|&c| v_of(c)).collect(),
        demand,
        matrix: matrix.clone(),
        r_in: net.wan.r_in,
        r_out: net.wan.r_out,
        alpha: crate::optimizer::ACK_LOADING,
        utility: crate::optimizer::Utility::Log,
        include_aggregate_time_constraint: config.controller.include_aggregate_time_constraint,
    };
    let solution = solve_allocation(&problem)?;
    let rates_mbps = (0..clients.len())
        .map(|j| (solution.x[j] + solution.y[j] + solution.z[j]) * problem.v[j])
        .collect();
    let schedule = derive_schedule(
        &solution,
        &matrix,
        config.controller.frame_ms,
        config.controller.quantum_ms,
    )?;
    Ok(SolveOutput {
        clients: problem.clients.clone(),
        solution,
        matrix,
        rates_mbps,
        schedule,
    })
}

fn subgraph(graph: &DependenceGraph, clients: &[u32]) -> DependenceGraph {
    let ids: BTreeSet<ClientId> = clients.iter().map(|&c| ClientId(c)).collect();
    let mut g = DependenceGraph::new(ids.iter().copied());
    for (a, b) in graph.edges() {
        if ids.contains(&a) && ids.contains(&b) {
            g.add_edge(a, b);
        }
    }
    g
}

/// One step of a scan replay: after ingesting a report, the graph (and the
/// schedule, when it changed).
#[derive(Debug)]
pub struct ReplayRecord {
    pub timestamp_ms: u64,
    pub edges: Vec<(ClientId, ClientId)>,
    pub schedule_dump: Option<String>,
}

/// Replays a scan datagram file against a scenario's network: after every
/// report the dependence graph is re-inferred, and a schedule is re-solved
/// whenever the graph changed. Malformed datagrams are skipped and counted.
pub fn replay_scans(
    scan_text: &str,
    config: &ScenarioConfig,
) -> Result<(Vec<ReplayRecord>, Vec<String>), HarnessError> {
    config.validate()?;
    let net = config.network.to_description();
    let mut warnings = Vec::new();
    let reports = parse_datagrams(scan_text, &mut warnings);
    let infer_cfg = InferenceConfig {
        p_th: config.controller.pth,
        report_ttl_ms: config.controller.report_ttl_ms,
    };
    let mut state = InferenceState::new();
    let mut records = Vec::new();
    let mut last_edges: Option<Vec<(ClientId, ClientId)>> = None;
    for report in reports {
        let ts = report.timestamp_ms;
        if let Err(err) = state.ingest(&net, report) {
            warnings.push(format!("report at {ts} ms rejected: {err}"));
            continue;
        }
        let mut extra: BTreeSet<(ClientId, ClientId)> = config
            .network
            .extra_edges
            .iter()
            .map(|e| {
                let (a, b) = if e.a <= e.b { (e.a, e.b) } else { (e.b, e.a) };
                (ClientId(a), ClientId(b))
            })
            .collect();
        extra.extend(crate::inference::infer_type3_edges(&state, &net, &infer_cfg));
        let graph = build_dependence_graph(&net, &extra)?;
        let edges: Vec<(ClientId, ClientId)> = graph.edges().collect();
        let schedule_dump = if last_edges.as_ref() != Some(&edges) {
            let mut with_edges = config.clone();
            with_edges.network.extra_edges = edges
                .iter()
                .map(|&(a, b)| simnet::EdgeEntry {
                    a: a.0,
                    b: b.0,
                    hidden: false,
                    victim: None,
                })
                .collect();
            match solve_scenario(&with_edges) {
                Ok(out) => Some(out.schedule.dump()),
                Err(_) => None,
            }
        } else {
            None
        };
        last_edges = Some(edges.clone());
        records.push(ReplayRecord {
            timestamp_ms: ts,
            edges,
            schedule_dump,
        });
    }
    Ok((records, warnings))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn builtins_parse_and_round_trip() {
        for name in builtin_names() {
            let text = builtin_scenario(name).unwrap();
            let config = load_scenario(text, &[]).unwrap_or_else(|e| {
                panic!("builtin {name} failed to parse: {e}");
            });
            let serialized = toml::to_string(&config).unwrap();
            let reparsed = load_scenario(&serialized, &[]).unwrap();
            assert_eq!(config, reparsed, "round trip changed {name}");
        }
    }

    #[test]
    fn overrides_apply_and_reject_bad_paths() {
        let text = builtin_scenario("table2_sweep").unwrap();
        let config = load_scenario(
            text,
            &["Ton=200".to_string(), "sim.seed=9".to_string()],
        )
        .unwrap();
        assert_eq!(config.controller.ton_ms, Some(200));
        assert_eq!(config.sim.seed, 9);

        assert!(matches!(
            load_scenario(text, &["nosuch.section.key=1".to_string()]),
            Err(HarnessError::BadOverridePath { .. })
        ));
        // Type mismatch surfaces as a parse error.
        assert!(load_scenario(text, &["sim.seed=notanumber".to_string()]).is_err());
    }

    #[test]
    fn reference_solve_gives_half_quarter_quarter() {
        let text = builtin_scenario("fig3_2ap4sta_lan").unwrap();
        let config = load_scenario(text, &[]).unwrap();
        let out = solve_scenario(&config).unwrap();
        assert_eq!(out.matrix.column_count(), 3);
        assert!((out.solution.a[0] - 0.5).abs() < 1e-4, "a = {:?}", out.solution.a);
        assert!((out.solution.a[1] - 0.25).abs() < 1e-4);
        assert!((out.solution.a[2] - 0.25).abs() < 1e-4);
        let want = [11.0, 5.5, 5.5, 11.0];
        for (got, want) in out.rates_mbps.iter().zip(want) {
            assert!((got - want).abs() < 22.0 * 1e-4, "rates {:?}", out.rates_mbps);
        }
    }

    #[test]
    fn replay_builds_expected_graphs() {
        let text = builtin_scenario("sec74_mobility").unwrap();
        let config = load_scenario(text, &[]).unwrap();
        let (records, warnings) = replay_scans(sec74_scan_replay(), &config).unwrap();
        assert!(warnings.is_empty(), "{warnings:?}");
        // After the four initial reports the graph is the two same-AP edges.
        let initial = &records[3];
        assert_eq!(
            initial.edges,
            vec![(ClientId(1), ClientId(2)), (ClientId(3), ClientId(4))]
        );
        // After station 2 moves, its link conflicts with AP2's clients.
        let moved = &records[4];
        assert!(moved.edges.contains(&(ClientId(2), ClientId(3))));
        assert!(moved.edges.contains(&(ClientId(2), ClientId(4))));
        assert!(moved.schedule_dump.is_some(), "schedule must re-solve");
        // Empty input: no records.
        let (empty, _) = replay_scans("", &config).unwrap();
        assert!(empty.is_empty());
    }
}
