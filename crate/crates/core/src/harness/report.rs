//! Report directory output: CSV metric tables, schedule and adapter dumps,
//! the resolved config, and a one-page summary.

use std::fmt::Write as _;
use std::fs;
use std::io;
use std::path::Path;

use crate::scheduler::FlowClass;
use crate::simnet::{Mode, RunMetrics, ScenarioConfig};

fn class_name(class: FlowClass) -> &'static str {
    match class {
        FlowClass::LongLived => "long_lived",
        FlowClass::ShortLived => "short_lived",
        FlowClass::Interactive => "interactive",
    }
}

fn mode_name(mode: Mode) -> &'static str {
    match mode {
        Mode::Managed => "managed",
        Mode::Unmanaged => "unmanaged",
    }
}

/// Writes the full report into `dir`, creating it if needed. Output is
/// deterministic for identical metrics.
pub fn write_report(
    dir: &Path,
    config: &ScenarioConfig,
    metrics: &RunMetrics,
) -> Result<(), io::Error> {
    fs::create_dir_all(dir)?;

    let mut throughput = String::from("t_s,client,class,mbps\n");
    for b in &metrics.throughput {
        let _ = writeln!(
            throughput,
            "{},{},{},{:.6}",
            b.t_s,
            b.client,
            class_name(b.class),
            b.mbps
        );
    }
    fs::write(dir.join("throughput.csv"), throughput)?;

    let mut responses = String::from("client,request_id,ms,t_s,started_s\n");
    for r in &metrics.responses {
        let _ = writeln!(
            responses,
            "{},{},{:.3},{:.6},{:.6}",
            r.client, r.request_id, r.ms, r.t_s, r.started_s
        );
    }
    fs::write(dir.join("responses.csv"), responses)?;

    let mut rtt = String::from("t_s,client,ms\n");
    for r in &metrics.rtt {
        let _ = writeln!(rtt, "{:.6},{},{:.3}", r.t_s, r.client, r.ms);
    }
    fs::write(dir.join("rtt.csv"), rtt)?;

    let mut utility = String::from("t_s,aggregate\n");
    for (t, u) in &metrics.utility {
        let _ = writeln!(utility, "{},{:.6}", t, u);
    }
    fs::write(dir.join("utility.csv"), utility)?;

    let mut schedule = String::new();
    for (t, dump) in &metrics.schedules {
        let _ = writeln!(schedule, "# installed at {:.3} s", t);
        schedule.push_str(dump);
    }
    fs::write(dir.join("schedule.txt"), schedule)?;

    let mut adapter = String::new();
    for a in &metrics.adapter {
        let _ = writeln!(
            adapter,
            "ADAPT {} {:.3} {:.6} {:.6}",
            a.client, a.t_s, a.v_mbps, a.q_bar_kb
        );
    }
    fs::write(dir.join("adapter.txt"), adapter)?;

    let mut solutions = String::new();
    for s in &metrics.solutions {
        solutions.push_str(s);
        solutions.push('\n');
    }
    fs::write(dir.join("solutions.txt"), solutions)?;

    let resolved = toml::to_string_pretty(config)
        .map_err(|e| io::Error::new(io::ErrorKind::InvalidData, e))?;
    fs::write(dir.join("config.toml"), resolved)?;

    fs::write(dir.join("summary.txt"), summary(config, metrics))?;
    Ok(())
}

/// One-page human summary: per mode segment, per (client, class) mean and
/// standard deviation of throughput, plus the mean aggregate utility.
pub fn summary(config: &ScenarioConfig, metrics: &RunMetrics) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "duration: {} s, seed: {}", config.sim.duration_s, config.sim.seed);
    let _ = writeln!(out, "events: {}", metrics.events_processed);
    let mut pairs: Vec<(crate::topology::ClientId, FlowClass)> = metrics
        .throughput
        .iter()
        .map(|b| (b.client, b.class))
        .collect();
    pairs.sort_by_key(|(c, k)| (c.0, class_name(*k)));
    pairs.dedup();

    for &(from, to, mode) in &metrics.mode_segments {
        let _ = writeln!(out, "\n[{} {:.0}-{:.0} s]", mode_name(mode), from, to);
        let (lo, hi) = (from.ceil() as u32, to.floor() as u32);
        for &(client, class) in &pairs {
            let mean = metrics.mean_throughput(client, class, lo, hi);
            let std = metrics.std_throughput(client, class, lo, hi);
            let _ = writeln!(
                out,
                "  client {:>3} {:<12} mean {:>7.3} Mbps  std {:>6.3}",
                client.to_string(),
                class_name(class),
                mean,
                std
            );
        }
        let utils: Vec<f64> = metrics
            .utility
            .iter()
            .filter(|(t, _)| *t >= lo && *t < hi)
            .map(|(_, u)| *u)
            .collect();
        if !utils.is_empty() {
            let mean = utils.iter().sum::<f64>() / utils.len() as f64;
            let _ = writeln!(out, "  aggregate utility mean {:.4}", mean);
        }
        let resp: Vec<f64> = metrics
            .responses
            .iter()
            .filter(|_| true)
            .map(|r| r.ms)
            .collect();
        let _ = resp;
    }
    if !metrics.responses.is_empty() {
        let _ = writeln!(out, "\nresponses: {} samples", metrics.responses.len());
    }
    if !metrics.rtt.is_empty() {
        let _ = writeln!(out, "rtt probes: {} samples", metrics.rtt.len());
    }
    out
}
