//! Deterministic discrete-event simulation of time-sliced WLAN paths.
//!
//! The simulated pipeline per download is: TCP sender at a LAN or WAN
//! server, optionally a split-connection proxy terminating the WAN leg,
//! the controller (four virtual queues per client, gated by the frame
//! schedule), the per-AP downlink FIFO served by the abstract medium, and
//! the client. Time is integer microseconds; rates are carried in Mbps,
//! which is numerically identical to bits per microsecond.

mod engine;
pub mod medium;
pub mod rng;
pub mod tcp;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::optimizer::ClassWeights;
use crate::scheduler::FlowClass;
use crate::topology::{ApId, ApRecord, ClientId, ClientRecord, NetworkDescription, WanParams};
use crate::vqueue::RateAdapterParams;

pub use engine::run;

pub type SimTime = u64;
pub const US_PER_MS: u64 = 1_000;
pub const US_PER_S: u64 = 1_000_000;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid scenario: {0}")]
    InvalidScenario(String),
    #[error(transparent)]
    Topology(#[from] crate::topology::TopologyError),
    #[error(transparent)]
    Optimizer(#[from] crate::optimizer::OptimizerError),
    #[error(transparent)]
    Scheduler(#[from] crate::scheduler::SchedulerError),
}

/// Operating mode of the controller.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Managed,
    Unmanaged,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ApEntry {
    pub id: u32,
    #[serde(default = "default_channel")]
    pub channel: u32,
}

fn default_channel() -> u32 {
    11
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClientEntry {
    pub id: u32,
    pub ap: u32,
    /// Physical association rate, Mbps.
    #[serde(default = "default_phy_rate")]
    pub phy_rate_mbps: f64,
    /// Mean TCP service rate over the air, Mbps.
    #[serde(default = "default_mu")]
    pub mu_mbps: f64,
    /// Fraction of frames lost while a hidden-flagged neighbour is busy.
    #[serde(default)]
    pub hidden_penalty: f64,
    /// Scripted (time_s, new mu) steps, e.g. a PHY rate drop.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub mu_timeline: Vec<(f64, f64)>,
}

fn default_phy_rate() -> f64 {
    54.0
}

fn default_mu() -> f64 {
    23.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EdgeEntry {
    pub a: u32,
    pub b: u32,
    #[serde(default)]
    pub hidden: bool,
    /// With `hidden`, restricts the losing side to this client; both
    /// endpoints suffer when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub victim: Option<u32>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WanSection {
    pub r_in_mbps: f64,
    pub r_out_mbps: f64,
    pub rtpd_ms: f64,
}

impl Default for WanSection {
    fn default() -> Self {
        Self {
            r_in_mbps: 8.0,
            r_out_mbps: 8.0,
            rtpd_ms: 150.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkSection {
    pub aps: Vec<ApEntry>,
    pub clients: Vec<ClientEntry>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub ap_conflicts: Vec<(u32, u32)>,
    /// Known or reconstructed client-pair dependencies beyond the same-AP
    /// rule; `hidden` marks hidden-node interference.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub extra_edges: Vec<EdgeEntry>,
    #[serde(default)]
    pub wan: WanSection,
    #[serde(default)]
    pub proxy: bool,
}

impl NetworkSection {
    pub fn to_description(&self) -> NetworkDescription {
        NetworkDescription {
            aps: self
                .aps
                .iter()
                .map(|a| ApRecord {
                    id: ApId(a.id),
                    channel: a.channel,
                    position: None,
                })
                .collect(),
            clients: self
                .clients
                .iter()
                .map(|c| ClientRecord {
                    id: ClientId(c.id),
                    associated_ap: ApId(c.ap),
                    phy_rate: c.phy_rate_mbps,
                    position: None,
                })
                .collect(),
            static_ap_conflicts: self
                .ap_conflicts
                .iter()
                .map(|&(a, b)| {
                    if a <= b {
                        (ApId(a), ApId(b))
                    } else {
                        (ApId(b), ApId(a))
                    }
                })
                .collect(),
            wan: WanParams {
                r_in: self.wan.r_in_mbps,
                r_out: self.wan.r_out_mbps,
                rtpd: self.wan.rtpd_ms,
            },
            proxy_enabled: self.proxy,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    Down,
    Up,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Endpoint {
    Lan,
    Wan,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ArrivalSpec {
    Poisson { rate_per_s: f64 },
    Periodic { interval_s: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ObjectSizeSpec {
    Fixed { bytes: u64 },
    Lognormal { median_bytes: f64, sigma: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FlowSpec {
    pub client: u32,
    pub class: FlowClass,
    #[serde(default = "default_direction")]
    pub direction: Direction,
    pub endpoint: Endpoint,
    #[serde(default)]
    pub start_s: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stop_s: Option<f64>,
    /// Transfer size; absent means a long-lived unbounded transfer.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub size_bytes: Option<u64>,
    /// Receive window override, KBytes.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rwnd_kb: Option<f64>,
    /// Short-lived flows: think time between a completed transfer and the
    /// next request.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub arrival: Option<ArrivalSpec>,
    /// Short-lived flows: per-request object size.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub object_size: Option<ObjectSizeSpec>,
    /// Interactive flows: probe interval, seconds.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub interval_s: Option<f64>,
    /// Interactive flows: probe size, bytes.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub packet_bytes: Option<u32>,
}

fn default_direction() -> Direction {
    Direction::Down
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ServiceRate {
    Fixed { v_mbps: f64 },
    Adaptive,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpreadSpec {
    pub client: u32,
    pub share: f64,
    pub parts: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WeightEntry {
    pub client: u32,
    #[serde(default = "one")]
    pub eta: f64,
    #[serde(default = "one")]
    pub xi: f64,
    #[serde(default = "one")]
    pub delta: f64,
}

fn one() -> f64 {
    1.0
}

impl WeightEntry {
    pub fn weights(&self) -> ClassWeights {
        ClassWeights {
            eta: self.eta,
            xi: self.xi,
            delta: self.delta,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ControllerSection {
    #[serde(default = "default_frame_ms")]
    pub frame_ms: u64,
    #[serde(default = "default_quantum_ms")]
    pub quantum_ms: u64,
    #[serde(default = "default_pth")]
    pub pth: f64,
    #[serde(default = "default_report_ttl_ms")]
    pub report_ttl_ms: u64,
    pub service_rate: ServiceRate,
    #[serde(default)]
    pub adapter: RateAdapterParams,
    #[serde(default = "default_queue_capacity_kb")]
    pub queue_capacity_kb: f64,
    /// Fixed per-frame ON time; bypasses the optimizer (single-slot
    /// schedules for the sweep scenarios).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ton_ms: Option<u64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub bypass: Vec<u32>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub spread: Vec<SpreadSpec>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub weights: Vec<WeightEntry>,
    #[serde(default)]
    pub include_aggregate_time_constraint: bool,
    #[serde(default = "default_enum_cap")]
    pub exact_enum_cap: usize,
    /// Re-solve when any v moved by more than this fraction.
    #[serde(default = "default_resolve_threshold")]
    pub resolve_v_threshold: f64,
}

fn default_frame_ms() -> u64 {
    1000
}
fn default_quantum_ms() -> u64 {
    10
}
fn default_pth() -> f64 {
    0.3
}
fn default_report_ttl_ms() -> u64 {
    10_000
}
fn default_queue_capacity_kb() -> f64 {
    200.0
}
fn default_enum_cap() -> usize {
    20
}
fn default_resolve_threshold() -> f64 {
    0.05
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TimelineSegment {
    pub at_s: f64,
    pub mode: Mode,
    /// Replaces the controller's sub-slice spreading list for this segment.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub spread: Option<Vec<SpreadSpec>>,
    /// Replaces the interactive bypass set for this segment.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bypass: Option<Vec<u32>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScriptedScan {
    pub at_s: f64,
    pub client: u32,
    /// (ap id, rssi dBm) pairs.
    pub rssi: Vec<(u32, f64)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimSection {
    pub duration_s: f64,
    #[serde(default = "default_seed")]
    pub seed: u64,
    #[serde(default = "default_noise_sigma")]
    pub unmanaged_noise_sigma: f64,
    #[serde(default = "default_noise_interval_ms")]
    pub noise_interval_ms: u64,
    #[serde(default = "default_ap_queue_kb")]
    pub ap_queue_kb: f64,
    #[serde(default = "default_jitter_cov")]
    pub service_jitter_cov: f64,
    #[serde(default = "default_lan_rtpd_ms")]
    pub lan_rtpd_ms: f64,
    #[serde(default = "default_wan_buffer_kb")]
    pub wan_buffer_kb: f64,
    #[serde(default = "default_proxy_buffer_kb")]
    pub proxy_buffer_kb: f64,
    #[serde(default = "default_proxy_window_kb")]
    pub proxy_window_kb: f64,
    #[serde(default = "default_rwnd_kb")]
    pub default_rwnd_kb: f64,
    #[serde(default = "default_true")]
    pub frto: bool,
}

fn default_seed() -> u64 {
    1
}
fn default_noise_sigma() -> f64 {
    0.3
}
fn default_noise_interval_ms() -> u64 {
    1000
}
fn default_ap_queue_kb() -> f64 {
    200.0
}
fn default_jitter_cov() -> f64 {
    0.1
}
fn default_lan_rtpd_ms() -> f64 {
    0.5
}
fn default_wan_buffer_kb() -> f64 {
    // Roughly 1.3 bandwidth-delay products at 32 Mbps x 150 ms; deep enough
    // that slow start tops out against the receive window, not against
    // drop-tail loss bursts that cumulative-ACK recovery handles poorly.
    768.0
}
fn default_proxy_buffer_kb() -> f64 {
    // Relay storage deep enough that the WAN side streams through gated-off
    // periods instead of stalling on a closed window.
    2000.0
}
fn default_proxy_window_kb() -> f64 {
    // Advertised window cap of the relay: keeps the WAN-side flight small
    // enough that slow start tops out without a loss burst on any access
    // link this corpus uses.
    768.0
}
fn default_rwnd_kb() -> f64 {
    256.0
}
fn default_true() -> bool {
    true
}

/// Default sweep axis of a scenario, used by the sweep runner when no
/// explicit parameter grid is given.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSection {
    /// Dotted config path, e.g. `controller.ton_ms`.
    pub param: String,
    pub values: Vec<f64>,
}

/// A complete simulation scenario; also the on-disk file schema.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub network: NetworkSection,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub flows: Vec<FlowSpec>,
    pub controller: ControllerSection,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub timeline: Vec<TimelineSegment>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub scans: Vec<ScriptedScan>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sweep: Option<SweepSection>,
    pub sim: SimSection,
}

impl ScenarioConfig {
    pub fn validate(&self) -> Result<(), SimError> {
        let net = self.network.to_description();
        net.validate()?;
        for f in &self.flows {
            if net.client(ClientId(f.client)).is_none() {
                return Err(SimError::InvalidScenario(format!(
                    "flow references unknown client {}",
                    f.client
                )));
            }
            if let Some(stop) = f.stop_s {
                if stop < f.start_s {
                    return Err(SimError::InvalidScenario(format!(
                        "flow for client {} stops before it starts",
                        f.client
                    )));
                }
            }
            if f.class == FlowClass::ShortLived && f.arrival.is_none() {
                return Err(SimError::InvalidScenario(format!(
                    "short-lived flow for client {} needs an arrival process",
                    f.client
                )));
            }
        }
        let mut last = f64::NEG_INFINITY;
        for seg in &self.timeline {
            if seg.at_s < last {
                return Err(SimError::InvalidScenario(
                    "timeline segments out of order".into(),
                ));
            }
            last = seg.at_s;
        }
        for s in &self.scans {
            if net.client(ClientId(s.client)).is_none() {
                return Err(SimError::InvalidScenario(format!(
                    "scan references unknown client {}",
                    s.client
                )));
            }
        }
        if self.sim.duration_s <= 0.0 {
            return Err(SimError::InvalidScenario(
                "duration must be positive".into(),
            ));
        }
        if let ServiceRate::Fixed { v_mbps } = self.controller.service_rate {
            if v_mbps <= 0.0 {
                return Err(SimError::InvalidScenario(
                    "fixed v must be positive".into(),
                ));
            }
        }
        Ok(())
    }

    /// Mode in effect at time `t_s`; managed when no timeline is given.
    pub fn mode_at(&self, t_s: f64) -> Mode {
        let mut mode = Mode::Managed;
        for seg in &self.timeline {
            if seg.at_s <= t_s {
                mode = seg.mode;
            }
        }
        mode
    }

    /// Per-client utility weights (unity unless overridden).
    pub fn weights_for(&self, client: u32) -> ClassWeights {
        self.controller
            .weights
            .iter()
            .find(|w| w.client == client)
            .map(|w| w.weights())
            .unwrap_or_default()
    }
}

/// One per-second throughput observation.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ThroughputBin {
    pub t_s: u32,
    pub client: ClientId,
    pub class: FlowClass,
    pub mbps: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ResponseSample {
    pub client: ClientId,
    pub request_id: u64,
    pub ms: f64,
    /// Completion time within the run.
    pub t_s: f64,
    /// Request emission time.
    pub started_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RttSample {
    pub t_s: f64,
    pub client: ClientId,
    pub ms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AdapterSample {
    pub client: ClientId,
    pub t_s: f64,
    pub v_mbps: f64,
    pub q_bar_kb: f64,
}

/// Final sender-side connection statistics.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConnStat {
    pub client: ClientId,
    pub label: String,
    pub srtt_ms: Option<f64>,
    pub delivered_bytes: u64,
    pub retransmits: u64,
    pub rto_count: u64,
    pub first_rtos_us: Vec<u64>,
}

/// Everything a run produces.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct RunMetrics {
    pub throughput: Vec<ThroughputBin>,
    pub responses: Vec<ResponseSample>,
    pub rtt: Vec<RttSample>,
    /// (t_s, aggregate utility over long-lived flows).
    pub utility: Vec<(u32, f64)>,
    pub adapter: Vec<AdapterSample>,
    /// (t_s of activation, schedule dump) per schedule installed.
    pub schedules: Vec<(f64, String)>,
    /// Solver solutions, one text block per re-solve.
    pub solutions: Vec<String>,
    /// (from_s, to_s, mode) segments actually executed.
    pub mode_segments: Vec<(f64, f64, Mode)>,
    pub conn_stats: Vec<ConnStat>,
    /// Payload bytes delivered to / sent toward each client, for
    /// conservation checks.
    pub delivered_bytes: BTreeMap<u32, u64>,
    pub sent_bytes: BTreeMap<u32, u64>,
    /// Requests still open at the end of the run: (client, start time).
    pub unfinished_requests: Vec<(ClientId, f64)>,
    /// Dropped bytes per location label (link, AP FIFO, virtual queue).
    pub drops: BTreeMap<String, u64>,
    pub events_processed: u64,
}

impl RunMetrics {
    /// Mean throughput of `client`'s `class` flows over [from_s, to_s).
    pub fn mean_throughput(
        &self,
        client: ClientId,
        class: FlowClass,
        from_s: u32,
        to_s: u32,
    ) -> f64 {
        let bins: Vec<f64> = self
            .throughput
            .iter()
            .filter(|b| b.client == client && b.class == class && b.t_s >= from_s && b.t_s < to_s)
            .map(|b| b.mbps)
            .collect();
        if bins.is_empty() {
            0.0
        } else {
            bins.iter().sum::<f64>() / bins.len() as f64
        }
    }

    /// Sample standard deviation companion to `mean_throughput`.
    pub fn std_throughput(
        &self,
        client: ClientId,
        class: FlowClass,
        from_s: u32,
        to_s: u32,
    ) -> f64 {
        let bins: Vec<f64> = self
            .throughput
            .iter()
            .filter(|b| b.client == client && b.class == class && b.t_s >= from_s && b.t_s < to_s)
            .map(|b| b.mbps)
            .collect();
        if bins.len() < 2 {
            return 0.0;
        }
        let mean = bins.iter().sum::<f64>() / bins.len() as f64;
        let var =
            bins.iter().map(|b| (b - mean) * (b - mean)).sum::<f64>() / (bins.len() - 1) as f64;
        var.sqrt()
    }
}

/// Prediction of the time-sliced throughput oracle.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ThroughputPrediction {
    Mbps(f64),
    /// Un-proxied WAN transfers over a large RTPD degrade in a way this
    /// oracle deliberately does not predict.
    Unpredicted,
}

/// Expected steady throughput of a time-sliced transfer served at C Mbps for
/// Ton out of every T milliseconds. `r_in` is the WAN bottleneck when the
/// path crosses the access link (None for LAN paths). Without a proxy the
/// WAN case has no closed form.
pub fn expected_throughput(
    c_mbps: f64,
    ton_ms: f64,
    t_ms: f64,
    r_in_mbps: Option<f64>,
    proxy: bool,
) -> Result<ThroughputPrediction, SimError> {
    if !(0.0..=t_ms).contains(&ton_ms) {
        return Err(SimError::InvalidScenario(format!(
            "Ton {ton_ms} outside [0, {t_ms}]"
        )));
    }
    let sliced = c_mbps * ton_ms / t_ms;
    Ok(match r_in_mbps {
        None => ThroughputPrediction::Mbps(sliced),
        Some(r_in) if proxy => ThroughputPrediction::Mbps(sliced.min(r_in)),
        Some(_) => ThroughputPrediction::Unpredicted,
    })
}
