//! The discrete-event core: links, AP queues, controller, endpoints.
//!
//! Everything runs on one binary heap of (time, sequence) ordered events;
//! ties break on insertion order, which makes runs bit-reproducible for a
//! given seed. Serializing links, the per-AP downlink FIFO, the controller's
//! virtual servers and all timers are events here; TCP logic lives in the
//! state machines of `tcp.rs`.
//!
//! Paths. Downloads: server (LAN or WAN) -> serializing link -> controller
//! -> per-AP FIFO -> client; ACKs return over the client uplink and the
//! reverse link. With the proxy enabled, WAN downloads split into a WAN-side
//! connection terminating at the proxy and a WLAN-side connection from the
//! proxy, coupled by a bounded relay buffer with window backpressure.
//! Uploads run the mirror image with the controller gating upload data.
//!
//! The controller gates only the queue classes it manages. Pure ACKs, and
//! all traffic of clients that carry no long-lived demand and no spread
//! slice, pass straight through; interactive traffic of bypass clients does
//! too. In unmanaged mode the controller is fully transparent and the queues
//! migrate to the AP FIFOs, which is where the contention model and the
//! hidden-node losses bite.

use std::cmp::Reverse;
use std::collections::{BTreeMap, BTreeSet, BinaryHeap, VecDeque};

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::medium::{ConflictMap, ServiceJitter};
use super::rng::stream;
use super::tcp::{TcpParams, TcpReceiver, TcpSender, Transmission, ACK_BYTES};
use super::*;
use crate::inference::{infer_type3_edges, InferenceConfig, InferenceState, ScanReport};
use crate::optimizer::{solve_allocation, AllocationProblem, DemandFlags};
use crate::scheduler::{derive_schedule, spread_subslices, FlowClass, TimeFrameSchedule};
use crate::topology::{
    build_dependence_graph, enumerate_maximal_independent_sets_capped, greedy_cover,
    DependenceGraph,
};
use crate::vqueue::{
    class_weights, sample_post_service_queue, QueueClass, RateAdapterState, VirtualQueueSet,
};

const CTRL_PROC_US: u64 = 10;
const UPLINK_PROP_US: u64 = 50;
const UPLINK_CAP_BYTES: u64 = 128 * 1000;
const LAN_RATE_MBPS: f64 = 1000.0;
const LAN_CAP_BYTES: u64 = 2_000_000;
const REQUEST_BYTES: u32 = 64;
const PING_BYTES: u32 = 64;
const SERVER_RWND: u64 = 1 << 40;
/// Window-update threshold: announce freed relay space in these steps.
const WINDOW_UPDATE_BYTES: u64 = 12_000;
/// A frame that would occupy the air longer than this hits the MAC retry
/// limit instead and is lost.
const MAX_AIR_SERVICE_US: u64 = 100_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Kind {
    Data { seq: u64, tx_id: u64 },
    Ack { cum: u64, echo_tx: u64, rwnd: u64 },
    Request,
    Ping { id: u64, sent_us: u64 },
    Pong { id: u64, sent_us: u64 },
}

#[derive(Debug, Clone, Copy)]
struct Packet {
    flow: usize,
    /// Connection index; `NO_CONN` for ping probes.
    conn: usize,
    bytes: u32,
    kind: Kind,
}

const NO_CONN: usize = usize::MAX;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Site {
    LanServer,
    WanServer,
    Proxy,
    Client(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Leg {
    Direct,
    WanSide,
    WlanSide,
}

struct ConnRt {
    flow: usize,
    leg: Leg,
    sender_at: Site,
    receiver_at: Site,
    sender: TcpSender,
    receiver: TcpReceiver,
    pair: Option<usize>,
    active: bool,
    rto_deadline: Option<u64>,
    delack_deadline: Option<u64>,
    /// Request emission time on the conn that delivers to the client.
    request_t0: Option<u64>,
    req_id: u64,
    last_advertised_rwnd: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum LinkId {
    LanDown,
    LanUp,
    WanDown,
    WanUp,
    Uplink(usize),
}

struct LinkRt {
    rate_mbps: f64,
    prop_us: u64,
    cap_bytes: u64,
    queue: VecDeque<Packet>,
    queued_bytes: u64,
    busy: bool,
}

impl LinkRt {
    fn new(rate_mbps: f64, prop_us: u64, cap_bytes: u64) -> Self {
        Self {
            rate_mbps,
            prop_us,
            cap_bytes,
            queue: VecDeque::new(),
            queued_bytes: 0,
            busy: false,
        }
    }
}

struct ApRt {
    fifo: VecDeque<Packet>,
    queued_bytes: u64,
    cap_bytes: u64,
    busy: bool,
    head_loss: f64,
    epoch: u64,
}

struct FlowRt {
    spec: FlowSpec,
    client: usize,
    queue_class: QueueClass,
    conns: Vec<usize>,
    ping_counter: u64,
    req_counter: u64,
    /// A request is outstanding; the next one is drawn at completion.
    awaiting: bool,
    delivered_per_bin: BTreeMap<u32, u64>,
    utility_weight: f64,
}

#[derive(Debug)]
enum Ev {
    Arrive(LinkId, Packet),
    LinkDone(usize),
    CtrlDown(Packet),
    CtrlUp(Packet),
    Endpoint(Packet),
    ApArrive(usize, Packet),
    ApDone(usize, u64),
    VqDone(usize, u64),
    SlotStart(u64, usize),
    SlotEnd(u64, usize),
    Frame(u64),
    Rto(usize, u64),
    Delack(usize, u64),
    Noise,
    Request(usize),
    Ping(usize),
    FlowStart(usize),
    MuChange(usize, f64),
    Scan(usize),
}

struct EventEntry {
    t: u64,
    seq: u64,
    ev: Ev,
}

impl PartialEq for EventEntry {
    fn eq(&self, other: &Self) -> bool {
        self.t == other.t && self.seq == other.seq
    }
}
impl Eq for EventEntry {}
impl PartialOrd for EventEntry {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for EventEntry {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        (self.t, self.seq).cmp(&(other.t, other.seq))
    }
}

struct Engine {
    sc: ScenarioConfig,
    net: crate::topology::NetworkDescription,
    now: u64,
    end: u64,
    seq: u64,
    events: BinaryHeap<Reverse<EventEntry>>,

    client_ids: Vec<u32>,
    client_index: BTreeMap<u32, usize>,
    client_ap: Vec<usize>,
    mu: Vec<f64>,
    hidden_penalty: Vec<f64>,
    conflict: ConflictMap,

    aps: Vec<ApRt>,
    ap_backlog: Vec<u32>,

    links: Vec<LinkRt>,
    uplink_base: usize,

    flows: Vec<FlowRt>,
    conns: Vec<ConnRt>,

    mode: Mode,
    mode_since: u64,
    schedule: Option<TimeFrameSchedule>,
    schedule_epoch: u64,
    graph: DependenceGraph,
    graph_dirty: bool,
    managed_client: Vec<bool>,
    spread_specs: Vec<SpreadSpec>,
    bypass: BTreeSet<u32>,
    timeline_cursor: usize,

    infer_state: InferenceState,
    infer_cfg: InferenceConfig,

    v: Vec<f64>,
    solved_v: Vec<f64>,
    adapters: Vec<RateAdapterState>,
    vq: Vec<VirtualQueueSet<Packet>>,
    vq_busy: Vec<bool>,
    vq_epoch: Vec<u64>,
    vq_inflight: Vec<Option<Packet>>,
    vq_holdback: Vec<Option<(QueueClass, u32, Packet)>>,
    frame_sample: Vec<Option<f64>>,
    scheduled_in_frame: Vec<bool>,
    weights: Vec<[f64; 4]>,

    noise: Vec<f64>,
    jitter: ServiceJitter,
    rng_jitter: ChaCha8Rng,
    rng_loss: ChaCha8Rng,
    rng_noise: ChaCha8Rng,
    rng_flows: Vec<ChaCha8Rng>,

    metrics: RunMetrics,
    needs_solve: bool,
    error: Option<SimError>,
}

/// Runs a validated scenario to completion.
pub fn run(sc: &ScenarioConfig) -> Result<RunMetrics, SimError> {
    sc.validate()?;
    let mut engine = Engine::build(sc.clone())?;
    engine.prime();
    engine.run_loop()?;
    Ok(engine.finish())
}

impl Engine {
    fn build(sc: ScenarioConfig) -> Result<Self, SimError> {
        let net = sc.network.to_description();
        let n = sc.network.clients.len();

        let client_ids: Vec<u32> = sc.network.clients.iter().map(|c| c.id).collect();
        let client_index: BTreeMap<u32, usize> = client_ids
            .iter()
            .enumerate()
            .map(|(i, &id)| (id, i))
            .collect();
        let ap_ids: Vec<u32> = sc.network.aps.iter().map(|a| a.id).collect();
        let ap_index: BTreeMap<u32, usize> = ap_ids
            .iter()
            .enumerate()
            .map(|(i, &id)| (id, i))
            .collect();
        let client_ap: Vec<usize> = sc
            .network
            .clients
            .iter()
            .map(|c| ap_index[&c.ap])
            .collect();

        // Physical interference: same AP, surveyed AP pairs, declared edges.
        let mut conflict = ConflictMap::new(n);
        for i in 0..n {
            for j in (i + 1)..n {
                if client_ap[i] == client_ap[j] {
                    conflict.add_conflict(i, j, false);
                }
            }
        }
        for &(a, b) in &sc.network.ap_conflicts {
            for i in 0..n {
                for j in 0..n {
                    if i != j && sc.network.clients[i].ap == a && sc.network.clients[j].ap == b {
                        conflict.add_conflict(i, j, false);
                    }
                }
            }
        }
        for e in &sc.network.extra_edges {
            let (Some(&i), Some(&j)) = (client_index.get(&e.a), client_index.get(&e.b)) else {
                return Err(SimError::InvalidScenario(format!(
                    "extra edge references unknown client {} or {}",
                    e.a, e.b
                )));
            };
            let (a_suffers, b_suffers) = match (e.hidden, e.victim) {
                (false, _) => (false, false),
                (true, None) => (true, true),
                (true, Some(v)) => (v == e.a, v == e.b),
            };
            conflict.add_conflict_directed(i, j, a_suffers, b_suffers);
        }

        let wan = sc.network.wan;
        let wan_prop = (wan.rtpd_ms / 2.0 * 1000.0) as u64;
        let lan_prop = (sc.sim.lan_rtpd_ms / 2.0 * 1000.0) as u64;
        let wan_cap = (sc.sim.wan_buffer_kb * 1000.0) as u64;
        let mut links = vec![
            LinkRt::new(LAN_RATE_MBPS, lan_prop, LAN_CAP_BYTES), // LanDown
            LinkRt::new(LAN_RATE_MBPS, lan_prop, LAN_CAP_BYTES), // LanUp
            LinkRt::new(wan.r_in_mbps, wan_prop, wan_cap),       // WanDown
            LinkRt::new(wan.r_out_mbps, wan_prop, wan_cap),      // WanUp
        ];
        let uplink_base = links.len();
        for c in &sc.network.clients {
            links.push(LinkRt::new(c.mu_mbps, UPLINK_PROP_US, UPLINK_CAP_BYTES));
        }

        let aps: Vec<ApRt> = ap_ids
            .iter()
            .map(|_| ApRt {
                fifo: VecDeque::new(),
                queued_bytes: 0,
                cap_bytes: (sc.sim.ap_queue_kb * 1000.0) as u64,
                busy: false,
                head_loss: 0.0,
                epoch: 0,
            })
            .collect();

        let adapters: Vec<RateAdapterState> = (0..n)
            .map(|_| RateAdapterState::new(sc.controller.adapter))
            .collect();
        let v: Vec<f64> = match sc.controller.service_rate {
            ServiceRate::Fixed { v_mbps } => vec![v_mbps; n],
            ServiceRate::Adaptive => adapters.iter().map(|a| a.v_mbps).collect(),
        };
        let cap_bytes = (sc.controller.queue_capacity_kb * 1000.0) as u64;
        let vq = (0..n).map(|_| VirtualQueueSet::new(cap_bytes)).collect();

        let weights: Vec<[f64; 4]> = client_ids
            .iter()
            .map(|&id| {
                let w = sc.weights_for(id);
                class_weights(w.eta, w.xi, w.delta)
            })
            .collect();

        let mut flows = Vec::new();
        for spec in sc.flows.clone() {
            let client = client_index[&spec.client];
            let queue_class = match (spec.endpoint, spec.direction) {
                (Endpoint::Wan, Direction::Down) => QueueClass::WanDown,
                (Endpoint::Wan, Direction::Up) => QueueClass::WanUp,
                (Endpoint::Lan, Direction::Down) => QueueClass::LanDown,
                (Endpoint::Lan, Direction::Up) => QueueClass::LanUp,
            };
            let w = sc.weights_for(spec.client);
            let utility_weight = match (spec.endpoint, spec.direction) {
                (Endpoint::Wan, Direction::Down) => w.eta,
                (Endpoint::Wan, Direction::Up) => w.xi,
                (Endpoint::Lan, _) => w.delta,
            };
            flows.push(FlowRt {
                spec,
                client,
                queue_class,
                conns: Vec::new(),
                ping_counter: 0,
                req_counter: 0,
                awaiting: false,
                delivered_per_bin: BTreeMap::new(),
                utility_weight,
            });
        }

        let seed = sc.sim.seed;
        let rng_flows = (0..flows.len())
            .map(|i| stream(seed, "flow", i as u64))
            .collect();

        let graph = build_dependence_graph(&net, &BTreeSet::new())?;
        let infer_cfg = InferenceConfig {
            p_th: sc.controller.pth,
            report_ttl_ms: sc.controller.report_ttl_ms,
        };

        let end = (sc.sim.duration_s * US_PER_S as f64).round() as u64;
        let jitter = ServiceJitter::new(sc.sim.service_jitter_cov);
        let spread_specs = sc.controller.spread.clone();
        let bypass = sc.controller.bypass.iter().copied().collect();
        let mode = sc.mode_at(0.0);
        let mu = sc.network.clients.iter().map(|c| c.mu_mbps).collect();
        let hidden_penalty = sc
            .network
            .clients
            .iter()
            .map(|c| c.hidden_penalty)
            .collect();

        Ok(Self {
            net,
            now: 0,
            end,
            seq: 0,
            events: BinaryHeap::new(),
            client_ids,
            client_index,
            client_ap,
            mu,
            hidden_penalty,
            conflict,
            aps,
            ap_backlog: vec![0; n],
            links,
            uplink_base,
            flows,
            conns: Vec::new(),
            mode,
            mode_since: 0,
            schedule: None,
            schedule_epoch: 0,
            graph,
            graph_dirty: true,
            managed_client: vec![false; n],
            spread_specs,
            bypass,
            timeline_cursor: usize::MAX,
            infer_state: InferenceState::new(),
            infer_cfg,
            v,
            solved_v: Vec::new(),
            adapters,
            vq,
            vq_busy: vec![false; n],
            vq_epoch: vec![0; n],
            vq_inflight: vec![None; n],
            vq_holdback: (0..n).map(|_| None).collect(),
            frame_sample: vec![None; n],
            scheduled_in_frame: vec![false; n],
            weights,
            noise: vec![1.0; n],
            jitter,
            rng_jitter: stream(seed, "jitter", 0),
            rng_loss: stream(seed, "loss", 0),
            rng_noise: stream(seed, "noise", 0),
            rng_flows,
            metrics: RunMetrics::default(),
            needs_solve: true,
            error: None,
            sc,
        })
    }

    fn push(&mut self, t: u64, ev: Ev) {
        self.seq += 1;
        self.events.push(Reverse(EventEntry {
            t,
            seq: self.seq,
            ev,
        }));
    }

    fn t_s(&self) -> f64 {
        self.now as f64 / US_PER_S as f64
    }

    fn frame_us(&self) -> u64 {
        self.sc.controller.frame_ms * US_PER_MS
    }

    fn prime(&mut self) {
        self.push(0, Ev::Frame(0));
        self.push(0, Ev::Noise);
        for idx in 0..self.flows.len() {
            let spec = self.flows[idx].spec.clone();
            let start = (spec.start_s * US_PER_S as f64) as u64;
            match spec.class {
                FlowClass::LongLived => {
                    let conns = self.build_transfer_conns(idx, spec.size_bytes);
                    self.flows[idx].conns = conns;
                    self.push(start, Ev::FlowStart(idx));
                }
                FlowClass::ShortLived => self.push(start, Ev::Request(idx)),
                FlowClass::Interactive => self.push(start.max(1), Ev::Ping(idx)),
            }
        }
        for i in 0..self.sc.network.clients.len() {
            for &(t_s, mu) in &self.sc.network.clients[i].mu_timeline.clone() {
                self.push((t_s * US_PER_S as f64) as u64, Ev::MuChange(i, mu));
            }
        }
        for s in 0..self.sc.scans.len() {
            let at = (self.sc.scans[s].at_s * US_PER_S as f64) as u64;
            self.push(at, Ev::Scan(s));
        }
    }

    fn build_transfer_conns(&mut self, flow: usize, size: Option<u64>) -> Vec<usize> {
        let spec = self.flows[flow].spec.clone();
        let client = self.flows[flow].client;
        let rwnd = (spec.rwnd_kb.unwrap_or(self.sc.sim.default_rwnd_kb) * 1000.0) as u64;
        let params = TcpParams {
            frto_enabled: self.sc.sim.frto,
            ..Default::default()
        };
        let proxied = self.sc.network.proxy
            && spec.endpoint == Endpoint::Wan
            && spec.direction == Direction::Down;
        let mut out = Vec::new();
        match (spec.direction, spec.endpoint, proxied) {
            (Direction::Down, Endpoint::Wan, true) => {
                let proxy_cap = (self.sc.sim.proxy_buffer_kb * 1000.0)
                    .min(self.sc.sim.proxy_window_kb * 1000.0) as u64;
                let wan = self.make_conn(
                    flow,
                    Leg::WanSide,
                    Site::WanServer,
                    Site::Proxy,
                    size,
                    proxy_cap,
                    params,
                );
                let wlan = self.make_conn(
                    flow,
                    Leg::WlanSide,
                    Site::Proxy,
                    Site::Client(client),
                    size,
                    rwnd,
                    params,
                );
                self.conns[wan].pair = Some(wlan);
                self.conns[wlan].pair = Some(wan);
                // The proxy side sender is app-limited, not request-gated.
                self.conns[wlan].active = true;
                out.push(wan);
                out.push(wlan);
            }
            (Direction::Down, Endpoint::Wan, false) => {
                out.push(self.make_conn(
                    flow,
                    Leg::Direct,
                    Site::WanServer,
                    Site::Client(client),
                    size,
                    rwnd,
                    params,
                ));
            }
            (Direction::Down, Endpoint::Lan, _) => {
                out.push(self.make_conn(
                    flow,
                    Leg::Direct,
                    Site::LanServer,
                    Site::Client(client),
                    size,
                    rwnd,
                    params,
                ));
            }
            (Direction::Up, endpoint, _) => {
                let server = if endpoint == Endpoint::Lan {
                    Site::LanServer
                } else {
                    Site::WanServer
                };
                out.push(self.make_conn(
                    flow,
                    Leg::Direct,
                    Site::Client(client),
                    server,
                    size,
                    SERVER_RWND,
                    params,
                ));
            }
        }
        out
    }

    fn make_conn(
        &mut self,
        flow: usize,
        leg: Leg,
        sender_at: Site,
        receiver_at: Site,
        size: Option<u64>,
        rwnd: u64,
        params: TcpParams,
    ) -> usize {
        self.conns.push(ConnRt {
            flow,
            leg,
            sender_at,
            receiver_at,
            sender: TcpSender::new(params, size, rwnd),
            receiver: TcpReceiver::new(),
            pair: None,
            active: false,
            rto_deadline: None,
            delack_deadline: None,
            request_t0: None,
            req_id: 0,
            last_advertised_rwnd: rwnd,
        });
        self.conns.len() - 1
    }

    fn run_loop(&mut self) -> Result<(), SimError> {
        while let Some(Reverse(entry)) = self.events.pop() {
            if entry.t > self.end {
                break;
            }
            self.now = entry.t;
            self.metrics.events_processed += 1;
            self.handle(entry.ev);
            if let Some(err) = self.error.take() {
                return Err(err);
            }
        }
        self.now = self.end;
        Ok(())
    }

    fn handle(&mut self, ev: Ev) {
        match ev {
            Ev::Arrive(link, pkt) => self.link_enqueue(link, pkt),
            Ev::LinkDone(idx) => self.link_done(idx),
            Ev::CtrlDown(pkt) => self.ctrl_down(pkt),
            Ev::CtrlUp(pkt) => self.ctrl_up(pkt),
            Ev::Endpoint(pkt) => self.endpoint_dispatch(pkt),
            Ev::ApArrive(ap, pkt) => self.ap_arrive(ap, pkt),
            Ev::ApDone(ap, epoch) => self.ap_done(ap, epoch),
            Ev::VqDone(client, epoch) => self.vq_service_done(client, epoch),
            Ev::SlotStart(epoch, slot) => self.slot_start(epoch, slot),
            Ev::SlotEnd(epoch, slot) => self.slot_end(epoch, slot),
            Ev::Frame(idx) => self.frame_boundary(idx),
            Ev::Rto(conn, deadline) => self.rto_fire(conn, deadline),
            Ev::Delack(conn, deadline) => self.delack_fire(conn, deadline),
            Ev::Noise => self.noise_tick(),
            Ev::Request(flow) => self.request_arrival(flow),
            Ev::Ping(flow) => self.ping_tick(flow),
            Ev::FlowStart(flow) => self.flow_start(flow),
            Ev::MuChange(client, mu) => {
                self.mu[client] = mu;
                self.links[self.uplink_base + client].rate_mbps = mu;
            }
            Ev::Scan(idx) => self.scan_event(idx),
        }
    }

    // ------------------------------------------------------------------
    // Serializing links

    fn link_index(&self, id: LinkId) -> usize {
        match id {
            LinkId::LanDown => 0,
            LinkId::LanUp => 1,
            LinkId::WanDown => 2,
            LinkId::WanUp => 3,
            LinkId::Uplink(i) => self.uplink_base + i,
        }
    }

    fn link_id(&self, idx: usize) -> LinkId {
        match idx {
            0 => LinkId::LanDown,
            1 => LinkId::LanUp,
            2 => LinkId::WanDown,
            3 => LinkId::WanUp,
            i => LinkId::Uplink(i - self.uplink_base),
        }
    }

    fn link_enqueue(&mut self, id: LinkId, pkt: Packet) {
        let idx = self.link_index(id);
        if self.links[idx].queued_bytes + pkt.bytes as u64 > self.links[idx].cap_bytes {
            *self
                .metrics
                .drops
                .entry(format!("link:{:?}", id))
                .or_insert(0) += pkt.bytes as u64;
            return; // drop-tail
        }
        let link = &mut self.links[idx];
        link.queued_bytes += pkt.bytes as u64;
        link.queue.push_back(pkt);
        if !link.busy {
            self.link_start(idx);
        }
    }

    fn link_start(&mut self, idx: usize) {
        let link = &mut self.links[idx];
        let Some(head) = link.queue.front() else {
            link.busy = false;
            return;
        };
        link.busy = true;
        let serv = ((head.bytes as f64 * 8.0) / link.rate_mbps).max(1.0) as u64;
        self.push(self.now + serv, Ev::LinkDone(idx));
    }

    fn link_done(&mut self, idx: usize) {
        let Some(pkt) = self.links[idx].queue.pop_front() else {
            self.links[idx].busy = false;
            return;
        };
        self.links[idx].queued_bytes -= pkt.bytes as u64;
        let prop = self.links[idx].prop_us;
        if self.links[idx].queue.is_empty() {
            self.links[idx].busy = false;
        } else {
            self.link_start(idx);
        }
        let arrive = self.now + prop;
        match self.link_id(idx) {
            LinkId::LanDown => self.push(arrive + CTRL_PROC_US, Ev::CtrlDown(pkt)),
            LinkId::WanDown => {
                let to_proxy = pkt.conn != NO_CONN
                    && (self.conns[pkt.conn].leg == Leg::WanSide
                        && (matches!(pkt.kind, Kind::Data { .. })
                            || matches!(pkt.kind, Kind::Request)));
                if to_proxy || (pkt.conn != NO_CONN && self.is_endpoint_bound_down(&pkt)) {
                    self.push(arrive, Ev::Endpoint(pkt));
                } else {
                    self.push(arrive + CTRL_PROC_US, Ev::CtrlDown(pkt));
                }
            }
            LinkId::LanUp | LinkId::WanUp => self.push(arrive, Ev::Endpoint(pkt)),
            LinkId::Uplink(_) => self.push(arrive + CTRL_PROC_US, Ev::CtrlUp(pkt)),
        }
    }

    /// Downlink WAN packets whose destination is the proxy or a server-side
    /// endpoint rather than a wireless client: WAN-side data (to the proxy)
    /// and ACKs for upload senders do still go to the client, so only the
    /// proxy-terminated leg counts.
    fn is_endpoint_bound_down(&self, pkt: &Packet) -> bool {
        let conn = &self.conns[pkt.conn];
        match pkt.kind {
            Kind::Data { .. } => conn.receiver_at == Site::Proxy,
            Kind::Ack { .. } => conn.sender_at == Site::Proxy,
            _ => false,
        }
    }

    // ------------------------------------------------------------------
    // Controller: downlink ingress

    fn gate_open(&self, client: usize) -> bool {
        match &self.schedule {
            None => false,
            Some(s) => {
                let rel = self.now % s.frame_us;
                s.slot_at(rel)
                    .active
                    .contains(&crate::topology::ClientId(self.client_ids[client]))
            }
        }
    }

    /// Absolute end of the current slot for gating decisions.
    fn slot_end_abs(&self) -> u64 {
        match &self.schedule {
            None => u64::MAX,
            Some(s) => {
                let frame_start = self.now - self.now % s.frame_us;
                let rel = self.now % s.frame_us;
                frame_start + s.slot_at(rel).end_us
            }
        }
    }

    fn ctrl_down(&mut self, pkt: Packet) {
        let flow = &self.flows[pkt.flow];
        let client = flow.client;
        let ap = self.client_ap[client];
        let transparent = self.mode == Mode::Unmanaged || !self.managed_client[client];
        match pkt.kind {
            Kind::Data { .. } if flow.spec.direction == Direction::Down => {
                let bypassed = flow.spec.class == FlowClass::Interactive
                    && self.bypass.contains(&self.client_ids[client]);
                if transparent || bypassed {
                    self.ap_arrive(ap, pkt);
                } else {
                    let class = flow.queue_class;
                    if !self.vq[client].push(class, pkt.bytes, pkt) {
                        *self
                            .metrics
                            .drops
                            .entry(format!("vq:{}", self.client_ids[client]))
                            .or_insert(0) += pkt.bytes as u64;
                    }
                    self.try_start_vq(client);
                }
            }
            Kind::Ping { .. } => {
                let bypassed = self.bypass.contains(&self.client_ids[client]);
                if transparent || bypassed {
                    self.ap_arrive(ap, pkt);
                } else {
                    let class = flow.queue_class;
                    self.vq[client].push(class, pkt.bytes, pkt);
                    self.try_start_vq(client);
                }
            }
            // ACKs toward clients (upload reverse path) pass ungated.
            _ => self.ap_arrive(ap, pkt),
        }
    }

    // ------------------------------------------------------------------
    // Controller: uplink ingress

    fn ctrl_up(&mut self, pkt: Packet) {
        let flow = &self.flows[pkt.flow];
        let client = flow.client;
        if let Kind::Data { .. } = pkt.kind {
            if flow.spec.direction == Direction::Up {
                let transparent = self.mode == Mode::Unmanaged || !self.managed_client[client];
                if !transparent {
                    let class = flow.queue_class;
                    self.vq[client].push(class, pkt.bytes, pkt);
                    self.try_start_vq(client);
                    return;
                }
            }
        }
        self.route_upstream(pkt);
    }

    /// Sends an uplink packet onward to its LAN- or WAN-side destination.
    fn route_upstream(&mut self, pkt: Packet) {
        let site = match pkt.kind {
            Kind::Ack { .. } => self.conns[pkt.conn].sender_at,
            Kind::Request => self.conns[pkt.conn].sender_at,
            Kind::Pong { .. } => {
                if self.flows[pkt.flow].spec.endpoint == Endpoint::Lan {
                    Site::LanServer
                } else {
                    Site::WanServer
                }
            }
            Kind::Data { .. } => self.conns[pkt.conn].receiver_at,
            Kind::Ping { .. } => return,
        };
        let link = match site {
            Site::LanServer | Site::Proxy => LinkId::LanUp,
            Site::WanServer => LinkId::WanUp,
            Site::Client(_) => return,
        };
        self.link_enqueue(link, pkt);
    }

    // ------------------------------------------------------------------
    // Virtual queues and servers

    fn try_start_vq(&mut self, client: usize) {
        if self.vq_busy[client]
            || self.mode == Mode::Unmanaged
            || !self.managed_client[client]
            || !self.gate_open(client)
        {
            return;
        }
        // Whole-packet grants: a grant issued while the gate is open may
        // finish up to one MTU time past the slot edge, well inside the
        // slot quantum.
        let next = self.vq_holdback[client]
            .take()
            .or_else(|| self.vq[client].next_packet(&self.weights[client]));
        let Some((_class, bytes, pkt)) = next else {
            return;
        };
        let serv = ((bytes as f64 * 8.0) / self.v[client]).max(1.0) as u64;
        self.vq_busy[client] = true;
        self.vq_inflight[client] = Some(pkt);
        let epoch = self.vq_epoch[client];
        self.push(self.now + serv, Ev::VqDone(client, epoch));
    }

    fn vq_service_done(&mut self, client: usize, epoch: u64) {
        if epoch != self.vq_epoch[client] {
            return;
        }
        self.vq_busy[client] = false;
        let Some(pkt) = self.vq_inflight[client].take() else {
            return;
        };
        self.forward_served(client, pkt);
        self.try_start_vq(client);
    }

    fn forward_served(&mut self, client: usize, pkt: Packet) {
        let down = match pkt.kind {
            Kind::Data { .. } => self.flows[pkt.flow].spec.direction == Direction::Down,
            _ => true, // pings ride the downlink
        };
        if down {
            let ap = self.client_ap[client];
            self.ap_arrive(ap, pkt);
        } else {
            self.route_upstream(pkt);
        }
    }

    /// Dumps everything held in the controller into the AP queues (mode
    /// switch to unmanaged).
    fn flush_vqueues(&mut self) {
        for client in 0..self.client_ids.len() {
            self.vq_epoch[client] += 1;
            self.vq_busy[client] = false;
            if let Some(pkt) = self.vq_inflight[client].take() {
                self.forward_served(client, pkt);
            }
            if let Some((_, _, pkt)) = self.vq_holdback[client].take() {
                self.forward_served(client, pkt);
            }
            let weights = self.weights[client];
            while let Some((_, _, pkt)) = self.vq[client].next_packet(&weights) {
                self.forward_served(client, pkt);
            }
        }
    }

    // ------------------------------------------------------------------
    // AP downlink FIFO and the medium

    fn ap_arrive(&mut self, ap: usize, pkt: Packet) {
        if self.aps[ap].queued_bytes + pkt.bytes as u64 > self.aps[ap].cap_bytes {
            *self.metrics.drops.entry(format!("ap:{ap}")).or_insert(0) += pkt.bytes as u64;
            return; // radio buffer overflow
        }
        let a = &mut self.aps[ap];
        a.queued_bytes += pkt.bytes as u64;
        a.fifo.push_back(pkt);
        self.ap_backlog[self.flows[pkt.flow].client] += 1;
        if !self.aps[ap].busy {
            self.ap_start(ap);
        }
    }

    fn ap_start(&mut self, ap: usize) {
        let Some(head) = self.aps[ap].fifo.front().copied() else {
            self.aps[ap].busy = false;
            return;
        };
        let client = self.flows[head.flow].client;
        let rivals = (0..self.client_ids.len())
            .filter(|&i| {
                i != client && self.ap_backlog[i] > 0 && self.conflict.conflicts(client, i)
            })
            .count();
        let noise = if self.mode == Mode::Unmanaged {
            self.noise[client]
        } else {
            1.0
        };
        let rate = (self.mu[client] * noise / (1 + rivals) as f64).max(0.01);
        let hidden_active = (0..self.client_ids.len()).any(|i| {
            i != client && self.ap_backlog[i] > 0 && self.conflict.hidden_pair(client, i)
        });
        self.aps[ap].head_loss = if hidden_active {
            self.hidden_penalty[client].clamp(0.0, 1.0)
        } else {
            0.0
        };
        let serv_base = (head.bytes as f64 * 8.0) / rate;
        let mut serv = (serv_base * self.jitter.factor(&mut self.rng_jitter)).max(1.0) as u64;
        if serv > MAX_AIR_SERVICE_US {
            // Retry limit: the frame burns its airtime budget and dies.
            serv = MAX_AIR_SERVICE_US;
            self.aps[ap].head_loss = 1.0;
        }
        self.aps[ap].busy = true;
        self.aps[ap].epoch += 1;
        let epoch = self.aps[ap].epoch;
        self.push(self.now + serv, Ev::ApDone(ap, epoch));
    }

    fn ap_done(&mut self, ap: usize, epoch: u64) {
        if self.aps[ap].epoch != epoch || !self.aps[ap].busy {
            return;
        }
        let Some(pkt) = self.aps[ap].fifo.pop_front() else {
            self.aps[ap].busy = false;
            return;
        };
        self.aps[ap].queued_bytes -= pkt.bytes as u64;
        let client = self.flows[pkt.flow].client;
        self.ap_backlog[client] -= 1;
        let loss = self.aps[ap].head_loss;
        let lost = loss > 0.0 && self.rng_loss.gen::<f64>() < loss;
        self.aps[ap].busy = false;
        if !self.aps[ap].fifo.is_empty() {
            self.ap_start(ap);
        }
        if !lost {
            self.client_rx(client, pkt);
        }
    }

    // ------------------------------------------------------------------
    // Endpoints

    fn client_rx(&mut self, client: usize, pkt: Packet) {
        match pkt.kind {
            Kind::Data { seq, tx_id } => self.receiver_on_data(pkt.conn, seq, tx_id, pkt.bytes),
            Kind::Ack {
                cum,
                echo_tx,
                rwnd,
            } => self.sender_on_ack(pkt.conn, cum, echo_tx, rwnd),
            Kind::Ping { id, sent_us } => {
                let pong = Packet {
                    flow: pkt.flow,
                    conn: NO_CONN,
                    bytes: pkt.bytes,
                    kind: Kind::Pong { id, sent_us },
                };
                self.link_enqueue(LinkId::Uplink(client), pong);
            }
            _ => {}
        }
    }

    fn endpoint_dispatch(&mut self, pkt: Packet) {
        match pkt.kind {
            Kind::Data { seq, tx_id } => self.receiver_on_data(pkt.conn, seq, tx_id, pkt.bytes),
            Kind::Ack {
                cum,
                echo_tx,
                rwnd,
            } => self.sender_on_ack(pkt.conn, cum, echo_tx, rwnd),
            Kind::Request => {
                self.conns[pkt.conn].active = true;
                self.pump(pkt.conn);
            }
            Kind::Pong { sent_us, .. } => {
                let client = self.flows[pkt.flow].client;
                self.metrics.rtt.push(RttSample {
                    t_s: self.t_s(),
                    client: crate::topology::ClientId(self.client_ids[client]),
                    ms: (self.now - sent_us) as f64 / 1000.0,
                });
            }
            Kind::Ping { .. } => {}
        }
    }

    fn receiver_on_data(&mut self, conn: usize, seq: u64, tx_id: u64, bytes: u32) {
        let act = self.conns[conn].receiver.on_data(self.now, seq, tx_id, bytes);
        if act.delivered_bytes > 0 {
            match self.conns[conn].receiver_at {
                Site::Client(client) => {
                    self.record_delivery(conn, client, act.delivered_bytes);
                    self.check_transfer_complete(conn, client);
                }
                Site::Proxy => {
                    // New relay payload for the WLAN-side sender.
                    if let Some(wlan) = self.conns[conn].pair {
                        self.pump(wlan);
                    }
                }
                Site::LanServer | Site::WanServer => {
                    let client = self.flows[self.conns[conn].flow].client;
                    self.record_delivery(conn, client, act.delivered_bytes);
                }
            }
        }
        if let Some(ack) = act.ack_now {
            self.emit_ack(conn, ack.cum, ack.echo_tx);
        }
        if let Some(deadline) = act.arm_delack_at {
            self.conns[conn].delack_deadline = Some(deadline);
            self.push(deadline, Ev::Delack(conn, deadline));
        }
    }

    fn record_delivery(&mut self, conn: usize, client: usize, bytes: u64) {
        let flow = self.conns[conn].flow;
        let bin = (self.now / US_PER_S) as u32;
        *self.flows[flow].delivered_per_bin.entry(bin).or_insert(0) += bytes;
        *self
            .metrics
            .delivered_bytes
            .entry(self.client_ids[client])
            .or_insert(0) += bytes;
    }

    fn check_transfer_complete(&mut self, conn: usize, client: usize) {
        let c = &mut self.conns[conn];
        let Some(t0) = c.request_t0 else { return };
        let Some(total) = c.sender.total_bytes else {
            return;
        };
        if c.receiver.bytes_in_order >= total {
            let ms = (self.now - t0) as f64 / 1000.0;
            let req_id = c.req_id;
            c.request_t0 = None;
            let t_s = self.now as f64 / US_PER_S as f64;
            let flow = c.flow;
            self.metrics.responses.push(ResponseSample {
                client: crate::topology::ClientId(self.client_ids[client]),
                request_id: req_id,
                ms,
                t_s,
                started_s: t0 as f64 / US_PER_S as f64,
            });
            // Think, then fetch the next object.
            if self.flows[flow].spec.class == FlowClass::ShortLived {
                self.flows[flow].awaiting = false;
                let think = self.draw_think(flow);
                self.push(self.now + think, Ev::Request(flow));
            }
        }
    }

    fn draw_think(&mut self, flow: usize) -> u64 {
        match self.flows[flow].spec.arrival.expect("validated") {
            ArrivalSpec::Poisson { rate_per_s } => {
                let u: f64 = self.rng_flows[flow].gen::<f64>().max(1e-12);
                ((-u.ln() / rate_per_s) * US_PER_S as f64) as u64
            }
            ArrivalSpec::Periodic { interval_s } => (interval_s * US_PER_S as f64) as u64,
        }
        .max(1)
    }

    fn sender_on_ack(&mut self, conn: usize, cum: u64, echo_tx: u64, rwnd: u64) {
        let out = self.conns[conn].sender.on_ack(self.now, cum, echo_tx, rwnd);
        let retransmits: Vec<Transmission> = out.retransmits;
        for tx in retransmits {
            self.emit_data(conn, tx);
        }
        if out.newly_acked_bytes > 0 {
            if self.conns[conn].sender.flight_segments() > 0 {
                self.arm_rto(conn);
            } else {
                self.conns[conn].rto_deadline = None;
            }
            // Freed relay space may reopen the WAN-side window.
            if self.conns[conn].leg == Leg::WlanSide {
                if let Some(wan) = self.conns[conn].pair {
                    self.maybe_window_update(wan);
                }
            }
        }
        self.pump(conn);
    }

    /// Sends new data while the window, the peer window and the application
    /// buffer allow.
    fn pump(&mut self, conn: usize) {
        if !self.conns[conn].active {
            return;
        }
        loop {
            let limit = self.app_limit_segments(conn);
            if !self.conns[conn].sender.can_send_new(limit) {
                break;
            }
            let tx = self.conns[conn].sender.send_new(self.now);
            self.emit_data(conn, tx);
        }
        if self.conns[conn].sender.flight_segments() > 0
            && self.conns[conn].rto_deadline.is_none()
        {
            self.arm_rto(conn);
        }
    }

    /// Relay-buffer limit for proxy WLAN-side senders.
    fn app_limit_segments(&self, conn: usize) -> Option<u64> {
        if self.conns[conn].leg != Leg::WlanSide {
            return None;
        }
        let wan = self.conns[conn].pair?;
        let avail = self.conns[wan].receiver.bytes_in_order;
        let sender = &self.conns[conn].sender;
        if let Some(total) = sender.total_bytes {
            if avail >= total {
                return None; // everything buffered; internal cap applies
            }
        }
        Some(avail / sender.params.mss as u64)
    }

    fn emit_data(&mut self, conn: usize, tx: Transmission) {
        let flow = self.conns[conn].flow;
        let client = self.flows[flow].client;
        let pkt = Packet {
            flow,
            conn,
            bytes: tx.bytes,
            kind: Kind::Data {
                seq: tx.seq,
                tx_id: tx.tx_id,
            },
        };
        *self
            .metrics
            .sent_bytes
            .entry(self.client_ids[client])
            .or_insert(0) += tx.bytes as u64;
        let link = match self.conns[conn].sender_at {
            Site::LanServer | Site::Proxy => LinkId::LanDown,
            Site::WanServer => LinkId::WanDown,
            Site::Client(j) => LinkId::Uplink(j),
        };
        self.link_enqueue(link, pkt);
    }

    fn emit_ack(&mut self, conn: usize, cum: u64, echo_tx: u64) {
        // The receiver's advertised window: clients drain instantly so they
        // advertise their configured buffer; the proxy advertises its free
        // relay space.
        let rwnd = match self.conns[conn].receiver_at {
            Site::Client(_) => self.client_rwnd(conn),
            Site::Proxy => self.proxy_rwnd(conn),
            _ => SERVER_RWND,
        };
        self.conns[conn].last_advertised_rwnd = rwnd;
        let flow = self.conns[conn].flow;
        let pkt = Packet {
            flow,
            conn,
            bytes: ACK_BYTES,
            kind: Kind::Ack {
                cum,
                echo_tx,
                rwnd,
            },
        };
        let link = match self.conns[conn].receiver_at {
            Site::Client(j) => LinkId::Uplink(j),
            Site::Proxy => LinkId::WanUp,
            Site::LanServer => LinkId::LanDown,
            Site::WanServer => LinkId::WanDown,
        };
        self.link_enqueue(link, pkt);
    }

    fn client_rwnd(&self, conn: usize) -> u64 {
        let flow = &self.flows[self.conns[conn].flow];
        (flow
            .spec
            .rwnd_kb
            .unwrap_or(self.sc.sim.default_rwnd_kb)
            * 1000.0) as u64
    }

    fn proxy_rwnd(&self, wan_conn: usize) -> u64 {
        let cap = (self.sc.sim.proxy_buffer_kb * 1000.0) as u64;
        let window_cap = (self.sc.sim.proxy_window_kb * 1000.0) as u64;
        let Some(wlan) = self.conns[wan_conn].pair else {
            return cap.min(window_cap);
        };
        let mss = self.conns[wlan].sender.params.mss as u64;
        let acked = self.conns[wlan].sender.highest_acked * mss;
        let buffered = self.conns[wan_conn]
            .receiver
            .bytes_in_order
            .saturating_sub(acked.min(self.conns[wan_conn].receiver.bytes_in_order));
        cap.saturating_sub(buffered).min(window_cap)
    }

    fn maybe_window_update(&mut self, wan_conn: usize) {
        let new = self.proxy_rwnd(wan_conn);
        if new >= self.conns[wan_conn].last_advertised_rwnd + WINDOW_UPDATE_BYTES {
            let ack = self.conns[wan_conn].receiver.window_update();
            self.emit_ack(wan_conn, ack.cum, ack.echo_tx);
        }
    }

    // ------------------------------------------------------------------
    // Timers

    fn arm_rto(&mut self, conn: usize) {
        let deadline = self.now + self.conns[conn].sender.rto_us();
        self.conns[conn].rto_deadline = Some(deadline);
        self.push(deadline, Ev::Rto(conn, deadline));
    }

    fn rto_fire(&mut self, conn: usize, deadline: u64) {
        if self.conns[conn].rto_deadline != Some(deadline) {
            return;
        }
        if self.conns[conn].sender.flight_segments() == 0 {
            self.conns[conn].rto_deadline = None;
            return;
        }
        let tx = self.conns[conn].sender.on_timeout(self.now);
        self.emit_data(conn, tx);
        self.arm_rto(conn);
    }

    fn delack_fire(&mut self, conn: usize, deadline: u64) {
        if self.conns[conn].delack_deadline != Some(deadline) {
            return;
        }
        self.conns[conn].delack_deadline = None;
        if let Some(ack) = self.conns[conn].receiver.on_delack_timer() {
            self.emit_ack(conn, ack.cum, ack.echo_tx);
        }
    }

    // ------------------------------------------------------------------
    // Flows

    fn flow_start(&mut self, flow: usize) {
        for conn in self.flows[flow].conns.clone() {
            self.conns[conn].active = true;
            self.pump(conn);
        }
    }

    fn request_arrival(&mut self, flow: usize) {
        let spec = self.flows[flow].spec.clone();
        let stop = spec.stop_s.unwrap_or(f64::INFINITY);
        if self.t_s() >= stop || self.flows[flow].awaiting {
            return;
        }
        let size = match spec.object_size.unwrap_or(ObjectSizeSpec::Fixed { bytes: 65_536 }) {
            ObjectSizeSpec::Fixed { bytes } => bytes,
            ObjectSizeSpec::Lognormal {
                median_bytes,
                sigma,
            } => {
                let z: f64 = {
                    use rand_distr::{Distribution, StandardNormal};
                    <StandardNormal as Distribution<f64>>::sample(
                        &StandardNormal,
                        &mut self.rng_flows[flow],
                    )
                };
                (median_bytes * (sigma * z).exp()).max(1000.0) as u64
            }
        };
        let conns = self.build_transfer_conns(flow, Some(size));
        self.flows[flow].req_counter += 1;
        self.flows[flow].awaiting = true;
        let req_id = self.flows[flow].req_counter;
        // The conn that delivers to the client carries the response clock.
        let delivering = *conns.last().expect("transfer has conns");
        self.conns[delivering].request_t0 = Some(self.now);
        self.conns[delivering].req_id = req_id;
        let data_sender = conns[0];
        let client = self.flows[flow].client;
        let req = Packet {
            flow,
            conn: data_sender,
            bytes: REQUEST_BYTES,
            kind: Kind::Request,
        };
        self.link_enqueue(LinkId::Uplink(client), req);
    }

    fn ping_tick(&mut self, flow: usize) {
        let spec = self.flows[flow].spec.clone();
        let stop = spec.stop_s.unwrap_or(f64::INFINITY);
        if self.t_s() >= stop {
            return;
        }
        self.flows[flow].ping_counter += 1;
        let pkt = Packet {
            flow,
            conn: NO_CONN,
            bytes: spec.packet_bytes.unwrap_or(PING_BYTES),
            kind: Kind::Ping {
                id: self.flows[flow].ping_counter,
                sent_us: self.now,
            },
        };
        match spec.endpoint {
            Endpoint::Lan => self.link_enqueue(LinkId::LanDown, pkt),
            Endpoint::Wan => self.link_enqueue(LinkId::WanDown, pkt),
        }
        let interval = (spec.interval_s.unwrap_or(1.0) * US_PER_S as f64) as u64;
        self.push(self.now + interval.max(1), Ev::Ping(flow));
    }

    // ------------------------------------------------------------------
    // Controller cadence: frames, slots, scans, noise

    fn noise_tick(&mut self) {
        if self.mode == Mode::Unmanaged {
            self.noise = super::medium::sample_noise(
                self.sc.sim.unmanaged_noise_sigma,
                self.client_ids.len(),
                &mut self.rng_noise,
            );
        }
        let interval = (self.sc.sim.noise_interval_ms * US_PER_MS).max(1);
        self.push(self.now + interval, Ev::Noise);
    }

    fn scan_event(&mut self, idx: usize) {
        let s = self.sc.scans[idx].clone();
        let report = ScanReport {
            client: crate::topology::ClientId(s.client),
            timestamp_ms: self.now / US_PER_MS,
            measurements: s
                .rssi
                .iter()
                .map(|&(ap, rssi)| (crate::topology::ApId(ap), rssi))
                .collect(),
        };
        if self.infer_state.ingest(&self.net, report).is_ok() {
            self.graph_dirty = true;
        }
    }

    fn slot_start(&mut self, epoch: u64, slot: usize) {
        if epoch != self.schedule_epoch {
            return;
        }
        let Some(schedule) = &self.schedule else { return };
        let active: Vec<usize> = schedule.slots[slot]
            .active
            .iter()
            .filter_map(|c| self.client_index.get(&c.0).copied())
            .collect();
        for client in active {
            self.scheduled_in_frame[client] = true;
            self.try_start_vq(client);
        }
    }

    fn slot_end(&mut self, epoch: u64, slot: usize) {
        if epoch != self.schedule_epoch {
            return;
        }
        let Some(schedule) = &self.schedule else { return };
        let active: Vec<usize> = schedule.slots[slot]
            .active
            .iter()
            .filter_map(|c| self.client_index.get(&c.0).copied())
            .collect();
        for client in active {
            // Post-service queue sample; the frame's last slice wins.
            self.frame_sample[client] =
                Some(sample_post_service_queue(&self.vq[client], false));
        }
    }

    fn frame_boundary(&mut self, idx: u64) {
        let frame_us = self.frame_us();
        let t = idx * frame_us;
        debug_assert_eq!(t, self.now);
        let t_s = t as f64 / US_PER_S as f64;

        // Adapter steps for the frame that just ended.
        if idx > 0
            && self.mode == Mode::Managed
            && matches!(self.sc.controller.service_rate, ServiceRate::Adaptive)
        {
            for client in 0..self.client_ids.len() {
                let scheduled = self.scheduled_in_frame[client];
                let sample = self.frame_sample[client]
                    .unwrap_or_else(|| self.vq[client].occupancy_kb());
                if self.adapters[client].rate_adapt_step(sample, t_s, scheduled) {
                    let vnew = self.adapters[client].v_mbps;
                    self.v[client] = vnew;
                    self.metrics.adapter.push(AdapterSample {
                        client: crate::topology::ClientId(self.client_ids[client]),
                        t_s,
                        v_mbps: vnew,
                        q_bar_kb: self.adapters[client].q_bar_kb,
                    });
                }
            }
        }
        for client in 0..self.client_ids.len() {
            self.scheduled_in_frame[client] = false;
            self.frame_sample[client] = None;
        }

        // Timeline transitions (mode and per-segment overrides).
        let new_mode = self.sc.mode_at(t_s);
        let seg_idx = self
            .sc
            .timeline
            .iter()
            .rposition(|s| s.at_s <= t_s)
            .unwrap_or(usize::MAX);
        if seg_idx != self.timeline_cursor {
            self.timeline_cursor = seg_idx;
            self.needs_solve = true;
        }
        if new_mode != self.mode {
            self.metrics
                .mode_segments
                .push((self.mode_since as f64 / US_PER_S as f64, t_s, self.mode));
            self.mode = new_mode;
            self.mode_since = t;
            match new_mode {
                Mode::Unmanaged => {
                    self.flush_vqueues();
                    self.schedule = None;
                    self.schedule_epoch += 1;
                }
                Mode::Managed => {
                    self.needs_solve = true;
                    // Algorithm clock starts at mode entry.
                    for a in &mut self.adapters {
                        a.t_prev_s = t_s;
                    }
                }
            }
        }

        if self.mode == Mode::Managed {
            if self.graph_dirty {
                self.rebuild_graph();
            }
            if !self.solved_v.is_empty() {
                let threshold = self.sc.controller.resolve_v_threshold;
                let moved = self
                    .v
                    .iter()
                    .zip(&self.solved_v)
                    .any(|(&now_v, &was)| (now_v - was).abs() > threshold * was.max(1e-9));
                if moved {
                    self.needs_solve = true;
                }
            }
            if self.needs_solve {
                if let Err(err) = self.solve_and_install(t_s) {
                    self.error = Some(err);
                    return;
                }
                self.needs_solve = false;
            }
            // Emit this frame's slot events.
            if let Some(schedule) = &self.schedule {
                let epoch = self.schedule_epoch;
                let boundaries: Vec<(u64, u64, usize)> = schedule
                    .slots
                    .iter()
                    .enumerate()
                    .map(|(i, s)| (s.start_us, s.end_us, i))
                    .collect();
                for (start, end, i) in boundaries {
                    self.push(t + start, Ev::SlotStart(epoch, i));
                    self.push(t + end, Ev::SlotEnd(epoch, i));
                }
            }
        }

        let next = t + frame_us;
        if next <= self.end {
            self.push(next, Ev::Frame(idx + 1));
        }
    }

    /// Controller view of the dependence graph: same-AP and surveyed AP
    /// conflicts, scenario-declared edges, plus the currently inferred
    /// Type III edges.
    fn rebuild_graph(&mut self) {
        let mut extra: BTreeSet<(crate::topology::ClientId, crate::topology::ClientId)> = self
            .sc
            .network
            .extra_edges
            .iter()
            .map(|e| {
                let (a, b) = if e.a <= e.b { (e.a, e.b) } else { (e.b, e.a) };
                (crate::topology::ClientId(a), crate::topology::ClientId(b))
            })
            .collect();
        extra.extend(infer_type3_edges(
            &self.infer_state,
            &self.net,
            &self.infer_cfg,
        ));
        match build_dependence_graph(&self.net, &extra) {
            Ok(graph) => {
                if graph != self.graph {
                    self.graph = graph;
                    self.needs_solve = true;
                }
                self.graph_dirty = false;
            }
            Err(_) => {
                self.graph_dirty = false;
            }
        }
    }

    fn demand_flags(&self, client: usize) -> DemandFlags {
        let mut d = DemandFlags::default();
        for f in &self.flows {
            if f.client != client || f.spec.class != FlowClass::LongLived {
                continue;
            }
            match f.queue_class {
                QueueClass::WanDown => d.wan_down = true,
                QueueClass::WanUp => d.wan_up = true,
                QueueClass::LanDown | QueueClass::LanUp => d.lan = true,
            }
        }
        d
    }

    fn solve_and_install(&mut self, t_s: f64) -> Result<(), SimError> {
        let n = self.client_ids.len();
        // Segment overrides replace the spread/bypass sets.
        if self.timeline_cursor != usize::MAX {
            let seg = &self.sc.timeline[self.timeline_cursor];
            if let Some(spread) = &seg.spread {
                self.spread_specs = spread.clone();
            }
            if let Some(bypass) = &seg.bypass {
                self.bypass = bypass.iter().copied().collect();
            }
        }

        let mut managed = vec![false; n];
        let demand: Vec<DemandFlags> = (0..n).map(|c| self.demand_flags(c)).collect();
        for (c, d) in demand.iter().enumerate() {
            if d.any() {
                managed[c] = true;
            }
        }
        for s in &self.spread_specs {
            if let Some(&c) = self.client_index.get(&s.client) {
                managed[c] = true;
            }
        }

        let schedule = if let Some(ton_ms) = self.sc.controller.ton_ms {
            // Fixed ON window at the head of every frame, everyone gated
            // together; interactive bypass still applies.
            let frame = self.frame_us();
            let ton = (ton_ms * US_PER_MS).min(frame);
            let mut slots = Vec::new();
            let all: BTreeSet<crate::topology::ClientId> = self
                .client_ids
                .iter()
                .map(|&id| crate::topology::ClientId(id))
                .collect();
            slots.push(crate::scheduler::Slot {
                start_us: 0,
                end_us: ton.max(1),
                active: all,
            });
            if ton < frame {
                slots.push(crate::scheduler::Slot {
                    start_us: ton,
                    end_us: frame,
                    active: BTreeSet::new(),
                });
            }
            for m in &mut managed {
                *m = true;
            }
            Some(TimeFrameSchedule {
                frame_us: frame,
                quantum_us: self.sc.controller.quantum_ms * US_PER_MS,
                slots,
                bypass_clients: self.bypass.iter().map(|&id| crate::topology::ClientId(id)).collect(),
            })
        } else {
            let demand_clients: Vec<usize> = (0..n).filter(|&c| demand[c].any()).collect();
            if demand_clients.is_empty() && self.spread_specs.is_empty() {
                None
            } else if demand_clients.is_empty() {
                // Only spread clients: start from an idle frame.
                let frame = self.frame_us();
                let base = TimeFrameSchedule {
                    frame_us: frame,
                    quantum_us: self.sc.controller.quantum_ms * US_PER_MS,
                    slots: vec![crate::scheduler::Slot {
                        start_us: 0,
                        end_us: frame,
                        active: BTreeSet::new(),
                    }],
                    bypass_clients: BTreeSet::new(),
                };
                Some(self.apply_spread(base)?)
            } else {
                let sub = self.subgraph(&demand_clients);
                let cap = self.sc.controller.exact_enum_cap;
                let matrix = match enumerate_maximal_independent_sets_capped(&sub, cap) {
                    Ok(m) => m,
                    Err(_) => greedy_cover(&sub),
                };
                let problem = AllocationProblem {
                    clients: demand_clients
                        .iter()
                        .map(|&c| crate::topology::ClientId(self.client_ids[c]))
                        .collect(),
                    weights: demand_clients
                        .iter()
                        .map(|&c| self.sc.weights_for(self.client_ids[c]))
                        .collect(),
                    v: demand_clients.iter().map(|&c| self.v[c]).collect(),
                    demand: demand_clients.iter().map(|&c| demand[c]).collect(),
                    matrix,
                    r_in: self.net.wan.r_in,
                    r_out: self.net.wan.r_out,
                    alpha: crate::optimizer::ACK_LOADING,
                    utility: crate::optimizer::Utility::Log,
                    include_aggregate_time_constraint: self
                        .sc
                        .controller
                        .include_aggregate_time_constraint,
                };
                let sol = solve_allocation(&problem)?;
                self.metrics.solutions.push(format!(
                    "t={:.3}s clients={:?} x={:?} y={:?} z={:?} a={:?} objective={:.6} kkt={:.3e}",
                    t_s,
                    problem.clients,
                    sol.x,
                    sol.y,
                    sol.z,
                    sol.a,
                    sol.objective_value,
                    sol.kkt_residual
                ));
                let mut sched = derive_schedule(
                    &sol,
                    &problem.matrix,
                    self.sc.controller.frame_ms,
                    self.sc.controller.quantum_ms,
                )?;
                sched.bypass_clients = self
                    .bypass
                    .iter()
                    .map(|&id| crate::topology::ClientId(id))
                    .collect();
                Some(self.apply_spread(sched)?)
            }
        };

        self.managed_client = managed;
        self.schedule_epoch += 1;
        if let Some(s) = &schedule {
            self.metrics.schedules.push((t_s, s.dump()));
        }
        self.schedule = schedule;
        self.solved_v = self.v.clone();
        // Kick any backlogged clients whose gate is open at the frame head.
        for client in 0..n {
            self.try_start_vq(client);
        }
        Ok(())
    }

    fn apply_spread(&self, mut sched: TimeFrameSchedule) -> Result<TimeFrameSchedule, SimError> {
        for spec in &self.spread_specs {
            let client = crate::topology::ClientId(spec.client);
            sched = spread_subslices(&sched, &self.graph, client, spec.share, spec.parts)?;
        }
        Ok(sched)
    }

    fn subgraph(&self, clients: &[usize]) -> DependenceGraph {
        let ids: BTreeSet<crate::topology::ClientId> = clients
            .iter()
            .map(|&c| crate::topology::ClientId(self.client_ids[c]))
            .collect();
        let mut g = DependenceGraph::new(ids.iter().copied());
        for (a, b) in self.graph.edges() {
            if ids.contains(&a) && ids.contains(&b) {
                g.add_edge(a, b);
            }
        }
        g
    }

    // ------------------------------------------------------------------

    fn finish(mut self) -> RunMetrics {
        self.metrics.mode_segments.push((
            self.mode_since as f64 / US_PER_S as f64,
            self.end as f64 / US_PER_S as f64,
            self.mode,
        ));
        let duration_s = (self.end / US_PER_S) as u32;
        // Aggregate delivered bytes into per (client, class) bins.
        let mut agg: BTreeMap<(u32, u8, u32), u64> = BTreeMap::new();
        for f in &self.flows {
            let class_idx = match f.spec.class {
                FlowClass::LongLived => 0u8,
                FlowClass::ShortLived => 1,
                FlowClass::Interactive => 2,
            };
            for (&bin, &bytes) in &f.delivered_per_bin {
                *agg.entry((self.client_ids[f.client], class_idx, bin))
                    .or_insert(0) += bytes;
            }
        }
        for (&(client, class_idx, bin), &bytes) in &agg {
            let class = match class_idx {
                0 => FlowClass::LongLived,
                1 => FlowClass::ShortLived,
                _ => FlowClass::Interactive,
            };
            self.metrics.throughput.push(ThroughputBin {
                t_s: bin,
                client: crate::topology::ClientId(client),
                class,
                mbps: bytes as f64 * 8.0 / 1e6,
            });
        }
        // Aggregate utility over long-lived flows, per second.
        let long_lived: Vec<usize> = (0..self.flows.len())
            .filter(|&i| self.flows[i].spec.class == FlowClass::LongLived)
            .collect();
        if !long_lived.is_empty() {
            for bin in 0..duration_s {
                let mut total = 0.0;
                for &i in &long_lived {
                    let bytes = self.flows[i]
                        .delivered_per_bin
                        .get(&bin)
                        .copied()
                        .unwrap_or(0);
                    let mbps = bytes as f64 * 8.0 / 1e6;
                    total += self.flows[i].utility_weight
                        * mbps.max(crate::optimizer::RATE_FLOOR_MBPS).ln();
                }
                self.metrics.utility.push((bin, total));
            }
        }
        for c in self.conns.iter() {
            if let Some(t0) = c.request_t0 {
                let flow = &self.flows[c.flow];
                self.metrics.unfinished_requests.push((
                    crate::topology::ClientId(self.client_ids[flow.client]),
                    t0 as f64 / US_PER_S as f64,
                ));
            }
        }
        for (i, c) in self.conns.iter().enumerate() {
            let flow = &self.flows[c.flow];
            let label = format!(
                "conn{}[client {} {:?} {:?}]",
                i,
                self.client_ids[flow.client],
                flow.spec.class,
                c.leg
            );
            self.metrics.conn_stats.push(ConnStat {
                client: crate::topology::ClientId(self.client_ids[flow.client]),
                label,
                srtt_ms: c.sender.srtt_us.map(|s| s / 1000.0),
                delivered_bytes: c.receiver.bytes_in_order,
                retransmits: c.sender.retransmit_count,
                rto_count: c.sender.rto_count,
                first_rtos_us: c.sender.first_rtos_us.clone(),
            });
        }
        self.metrics
    }
}
