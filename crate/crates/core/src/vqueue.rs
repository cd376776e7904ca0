//! Per-client virtual queues and the service-rate adapter.
//!
//! The controller keeps four drop-tail byte queues per client (WAN down, WAN
//! up, LAN down, LAN up) and drains them at the client's virtual service rate
//! v while the client's slot is open, weighted round-robin across classes
//! with weights (eta, xi, delta, delta). Service credit does not bank across
//! gated-off periods beyond one MTU.
//!
//! The adapter nudges v toward the unknown wireless service rate: if the
//! smoothed post-service queue length stays above a lower bound, the queue is
//! building inside the controller and v rises additively; otherwise the queue
//! is migrating to the AP and v backs off multiplicatively.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

pub const MTU_BYTES: u32 = 1500;
pub const BYTES_PER_KB: f64 = 1000.0;

/// The four per-client traffic class queues.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QueueClass {
    WanDown,
    WanUp,
    LanDown,
    LanUp,
}

impl QueueClass {
    pub const ALL: [QueueClass; 4] = [
        QueueClass::WanDown,
        QueueClass::WanUp,
        QueueClass::LanDown,
        QueueClass::LanUp,
    ];

    pub fn index(self) -> usize {
        match self {
            QueueClass::WanDown => 0,
            QueueClass::WanUp => 1,
            QueueClass::LanDown => 2,
            QueueClass::LanUp => 3,
        }
    }
}

/// Service weights per class queue, in `QueueClass` index order.
/// LAN down and LAN up share the client's single LAN weight.
pub fn class_weights(eta: f64, xi: f64, delta: f64) -> [f64; 4] {
    [eta, xi, delta, delta]
}

/// Byte-accounting counters for one queue.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct QueueCounters {
    pub enqueued_bytes: u64,
    pub dequeued_bytes: u64,
    pub dropped_bytes: u64,
}

/// Four FIFO drop-tail byte queues plus deficit-round-robin service state.
#[derive(Debug, Clone)]
pub struct VirtualQueueSet<T> {
    queues: [VecDeque<(u32, T)>; 4],
    occupancy: [u64; 4],
    counters: [QueueCounters; 4],
    capacity_bytes: u64,
    deficit: [f64; 4],
    cursor: usize,
}

impl<T> VirtualQueueSet<T> {
    pub fn new(capacity_bytes: u64) -> Self {
        Self {
            queues: Default::default(),
            occupancy: [0; 4],
            counters: [QueueCounters::default(); 4],
            capacity_bytes,
            deficit: [0.0; 4],
            cursor: 0,
        }
    }

    pub fn capacity_bytes(&self) -> u64 {
        self.capacity_bytes
    }

    pub fn occupancy_bytes(&self, class: QueueClass) -> u64 {
        self.occupancy[class.index()]
    }

    pub fn total_bytes(&self) -> u64 {
        self.occupancy.iter().sum()
    }

    pub fn is_empty(&self) -> bool {
        self.total_bytes() == 0
    }

    pub fn counters(&self, class: QueueClass) -> QueueCounters {
        self.counters[class.index()]
    }

    /// Drop-tail enqueue; returns false (and drops) when the class queue is
    /// full.
    pub fn push(&mut self, class: QueueClass, bytes: u32, item: T) -> bool {
        let i = class.index();
        if self.occupancy[i] + bytes as u64 > self.capacity_bytes {
            self.counters[i].dropped_bytes += bytes as u64;
            return false;
        }
        self.occupancy[i] += bytes as u64;
        self.counters[i].enqueued_bytes += bytes as u64;
        self.queues[i].push_back((bytes, item));
        true
    }

    /// Pops the next packet by deficit round robin over the given weights.
    /// Weight-zero queues are only served when every weighted queue is empty.
    pub fn next_packet(&mut self, weights: &[f64; 4]) -> Option<(QueueClass, u32, T)> {
        if self.is_empty() {
            for d in &mut self.deficit {
                *d = 0.0;
            }
            return None;
        }
        let max_w = weights.iter().cloned().fold(0.0f64, f64::max);
        let backlogged_weighted: Vec<usize> = (0..4)
            .filter(|&i| !self.queues[i].is_empty() && weights[i] > 0.0)
            .collect();
        if backlogged_weighted.is_empty() {
            // All backlog sits in weight-zero queues; serve round robin so
            // nothing deadlocks.
            for off in 0..4 {
                let i = (self.cursor + off) % 4;
                if let Some((bytes, item)) = self.queues[i].pop_front() {
                    self.occupancy[i] -= bytes as u64;
                    self.counters[i].dequeued_bytes += bytes as u64;
                    self.cursor = (i + 1) % 4;
                    return Some((QueueClass::ALL[i], bytes, item));
                }
            }
            return None;
        }
        // Idle queues must not bank deficit.
        for i in 0..4 {
            if self.queues[i].is_empty() {
                self.deficit[i] = 0.0;
            }
        }
        loop {
            for off in 0..4 {
                let i = (self.cursor + off) % 4;
                if self.queues[i].is_empty() || weights[i] <= 0.0 {
                    continue;
                }
                let head = self.queues[i].front().expect("non-empty").0;
                if self.deficit[i] >= head as f64 {
                    let (bytes, item) = self.queues[i].pop_front().expect("non-empty");
                    self.deficit[i] -= bytes as f64;
                    self.occupancy[i] -= bytes as u64;
                    self.counters[i].dequeued_bytes += bytes as u64;
                    self.cursor = i;
                    return Some((QueueClass::ALL[i], bytes, item));
                }
            }
            // New round: add one weighted quantum everywhere backlogged.
            self.cursor = (self.cursor + 1) % 4;
            for &i in &backlogged_weighted {
                self.deficit[i] += weights[i] / max_w * MTU_BYTES as f64;
            }
        }
    }

    /// Sum of the four queue occupancies in KBytes. Meaningful as the
    /// post-service sample only at the end of the client's gated slice.
    pub fn occupancy_kb(&self) -> f64 {
        self.total_bytes() as f64 / BYTES_PER_KB
    }
}

/// Batch service: releases up to `v_mbps * dt_us` bits (one MTU of overdraft
/// on the final packet), weighted round robin across the class queues.
pub fn serve<T>(
    set: &mut VirtualQueueSet<T>,
    weights: &[f64; 4],
    v_mbps: f64,
    dt_us: u64,
) -> Vec<(QueueClass, u32, T)> {
    // Mbps and bits-per-microsecond coincide.
    let budget_bits = v_mbps * dt_us as f64;
    let mut spent_bits = 0.0;
    let mut out = Vec::new();
    while spent_bits < budget_bits {
        match set.next_packet(weights) {
            Some((class, bytes, item)) => {
                spent_bits += bytes as f64 * 8.0;
                out.push((class, bytes, item));
            }
            None => break,
        }
    }
    out
}

/// Control parameters of the rate adapter.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RateAdapterParams {
    /// Additive gain, Mbps per KByte of smoothed backlog.
    pub epsilon: f64,
    /// Multiplicative decrease in (0, 1).
    pub lambda: f64,
    /// EWMA gain in [0, 1]; larger reacts faster.
    pub beta: f64,
    /// Backlog lower bound, KBytes.
    pub q_lb_kb: f64,
    /// Seconds between adaptation steps.
    pub t_interval_s: f64,
    pub v_min_mbps: f64,
    pub v_max_mbps: f64,
}

impl Default for RateAdapterParams {
    fn default() -> Self {
        Self {
            epsilon: 0.05,
            lambda: 0.9,
            beta: 0.8,
            q_lb_kb: 7.5,
            t_interval_s: 3.0,
            v_min_mbps: 1.0,
            // 1.2x the TCP ceiling of a 54 Mbps association.
            v_max_mbps: 1.2 * 23.0,
        }
    }
}

/// Per-client adapter state.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RateAdapterState {
    pub v_mbps: f64,
    pub q_bar_kb: f64,
    pub t_prev_s: f64,
    pub params: RateAdapterParams,
}

impl RateAdapterState {
    pub fn new(params: RateAdapterParams) -> Self {
        Self {
            v_mbps: params.v_min_mbps,
            q_bar_kb: 0.0,
            t_prev_s: 0.0,
            params,
        }
    }

    /// One adaptation opportunity. Fires only when the interval has elapsed
    /// and the client was actually scheduled; returns whether it fired.
    ///
    /// Order matters: the rate update reads the pre-update EWMA, then the
    /// EWMA absorbs the new sample, then the interval clock advances.
    pub fn rate_adapt_step(&mut self, q_sample_kb: f64, now_s: f64, was_scheduled: bool) -> bool {
        if now_s < self.t_prev_s + self.params.t_interval_s || !was_scheduled {
            return false;
        }
        if self.q_bar_kb > self.params.q_lb_kb {
            self.v_mbps += self.params.epsilon * self.q_bar_kb;
        } else {
            self.v_mbps *= self.params.lambda;
        }
        self.v_mbps = self
            .v_mbps
            .clamp(self.params.v_min_mbps, self.params.v_max_mbps);
        self.q_bar_kb = self.params.beta * q_sample_kb + (1.0 - self.params.beta) * self.q_bar_kb;
        self.t_prev_s += self.params.t_interval_s;
        true
    }
}

/// Post-service queue sample in KBytes: the sum of the client's four queues.
/// Calling mid-slice violates the sampling contract.
pub fn sample_post_service_queue<T>(set: &VirtualQueueSet<T>, slice_open: bool) -> f64 {
    debug_assert!(
        !slice_open,
        "post-service queue sampled while the slice is still open"
    );
    set.occupancy_kb()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn backlog(set: &mut VirtualQueueSet<u32>, class: QueueClass, packets: u32) {
        for i in 0..packets {
            assert!(set.push(class, MTU_BYTES, i));
        }
    }

    #[test]
    fn serve_releases_rate_times_time() {
        let mut set = VirtualQueueSet::new(20_000_000);
        backlog(&mut set, QueueClass::LanDown, 2000);
        // 22 Mbps for 500 ms -> 11 Mbit.
        let released = serve(&mut set, &class_weights(1.0, 1.0, 1.0), 22.0, 500_000);
        let bits: u64 = released.iter().map(|&(_, b, _)| b as u64 * 8).sum();
        let target = 11_000_000i64;
        assert!(
            (bits as i64 - target).abs() <= (MTU_BYTES as i64) * 8,
            "released {bits} bits"
        );
    }

    #[test]
    fn empty_queues_release_nothing_and_bank_no_credit() {
        let mut set: VirtualQueueSet<u32> = VirtualQueueSet::new(1_000_000);
        let released = serve(&mut set, &class_weights(1.0, 1.0, 1.0), 22.0, 500_000);
        assert!(released.is_empty());
        // A long idle serve leaves no credit: the next 1 us serve moves at
        // most one packet.
        backlog(&mut set, QueueClass::WanDown, 10);
        let released = serve(&mut set, &class_weights(1.0, 1.0, 1.0), 22.0, 1);
        assert_eq!(released.len(), 1);
    }

    #[test]
    fn two_backlogged_queues_split_evenly() {
        let mut set = VirtualQueueSet::new(20_000_000);
        backlog(&mut set, QueueClass::WanDown, 1000);
        backlog(&mut set, QueueClass::LanDown, 1000);
        let released = serve(&mut set, &class_weights(1.0, 1.0, 1.0), 22.0, 200_000);
        let wan: i64 = released
            .iter()
            .filter(|(c, _, _)| *c == QueueClass::WanDown)
            .map(|&(_, b, _)| b as i64)
            .sum();
        let lan: i64 = released
            .iter()
            .filter(|(c, _, _)| *c == QueueClass::LanDown)
            .map(|&(_, b, _)| b as i64)
            .sum();
        assert!((wan - lan).abs() <= MTU_BYTES as i64, "wan={wan} lan={lan}");
    }

    #[test]
    fn weights_bias_the_split() {
        let mut set = VirtualQueueSet::new(20_000_000);
        backlog(&mut set, QueueClass::WanDown, 1000);
        backlog(&mut set, QueueClass::LanDown, 1000);
        // delta twice eta: LAN gets about two thirds.
        let released = serve(&mut set, &class_weights(1.0, 1.0, 2.0), 24.0, 500_000);
        let wan: f64 = released
            .iter()
            .filter(|(c, _, _)| *c == QueueClass::WanDown)
            .map(|&(_, b, _)| b as f64)
            .sum();
        let lan: f64 = released
            .iter()
            .filter(|(c, _, _)| *c == QueueClass::LanDown)
            .map(|&(_, b, _)| b as f64)
            .sum();
        let ratio = lan / wan;
        assert!((ratio - 2.0).abs() < 0.1, "ratio {ratio}");
    }

    #[test]
    fn drop_tail_and_byte_conservation() {
        let mut set = VirtualQueueSet::new(3000);
        assert!(set.push(QueueClass::LanDown, 1500, 0));
        assert!(set.push(QueueClass::LanDown, 1500, 1));
        assert!(!set.push(QueueClass::LanDown, 1500, 2)); // full
        let released = serve(&mut set, &class_weights(1.0, 1.0, 1.0), 22.0, 10_000);
        assert_eq!(released.len(), 2);
        let c = set.counters(QueueClass::LanDown);
        assert_eq!(c.enqueued_bytes, 3000);
        assert_eq!(c.dropped_bytes, 1500);
        assert_eq!(c.dequeued_bytes, 3000);
        assert_eq!(
            c.enqueued_bytes,
            c.dequeued_bytes + set.occupancy_bytes(QueueClass::LanDown)
        );
    }

    #[test]
    fn fifo_order_within_a_class() {
        let mut set = VirtualQueueSet::new(1_000_000);
        for i in 0..5u32 {
            set.push(QueueClass::WanUp, 100, i);
        }
        let released = serve(&mut set, &class_weights(1.0, 1.0, 1.0), 22.0, 10_000);
        let tags: Vec<u32> = released.iter().map(|&(_, _, t)| t).collect();
        assert_eq!(tags, vec![0, 1, 2, 3, 4]);
    }

    #[test]
    fn adapter_increase_rule() {
        let mut st = RateAdapterState::new(RateAdapterParams::default());
        st.v_mbps = 22.0;
        st.q_bar_kb = 10.0;
        assert!(st.rate_adapt_step(10.0, 3.0, true));
        assert!((st.v_mbps - 22.5).abs() < 1e-12, "v = {}", st.v_mbps);
    }

    #[test]
    fn adapter_decrease_rule() {
        let mut st = RateAdapterState::new(RateAdapterParams::default());
        st.v_mbps = 22.0;
        st.q_bar_kb = 0.0;
        assert!(st.rate_adapt_step(0.0, 3.0, true));
        assert!((st.v_mbps - 19.8).abs() < 1e-12, "v = {}", st.v_mbps);
    }

    #[test]
    fn adapter_ewma_update() {
        let mut st = RateAdapterState::new(RateAdapterParams::default());
        st.v_mbps = 22.0;
        st.q_bar_kb = 8.0;
        assert!(st.rate_adapt_step(12.0, 3.0, true));
        assert!((st.q_bar_kb - 11.2).abs() < 1e-12, "q_bar = {}", st.q_bar_kb);
    }

    #[test]
    fn adapter_gates_on_time_and_scheduling() {
        let mut st = RateAdapterState::new(RateAdapterParams::default());
        let before = st;
        assert!(!st.rate_adapt_step(5.0, 1.0, true)); // too early
        assert_eq!(st, before);
        assert!(!st.rate_adapt_step(5.0, 3.0, false)); // not scheduled
        assert_eq!(st, before);
        assert!(st.rate_adapt_step(5.0, 3.0, true));
        assert!((st.t_prev_s - 3.0).abs() < 1e-12);
    }

    #[test]
    fn adapter_clamps_to_bounds() {
        let params = RateAdapterParams {
            v_max_mbps: 23.0,
            ..Default::default()
        };
        let mut st = RateAdapterState::new(params);
        st.v_mbps = 22.9;
        st.q_bar_kb = 100.0;
        st.rate_adapt_step(100.0, 3.0, true);
        assert_eq!(st.v_mbps, 23.0);
        st.v_mbps = 1.0;
        st.q_bar_kb = 0.0;
        st.rate_adapt_step(0.0, 6.0, true);
        assert_eq!(st.v_mbps, 1.0); // v_min
    }

    #[test]
    fn adapter_replay_is_bit_exact() {
        let samples = [40.0, 25.0, 3.0, 0.0, 18.0, 55.0, 7.0, 7.6];
        let run = || {
            let mut st = RateAdapterState::new(RateAdapterParams::default());
            let mut trace = Vec::new();
            for (i, &q) in samples.iter().enumerate() {
                st.rate_adapt_step(q, 3.0 * (i + 1) as f64, true);
                trace.push((st.v_mbps.to_bits(), st.q_bar_kb.to_bits()));
            }
            trace
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn post_service_sample_sums_queues() {
        let mut set: VirtualQueueSet<u32> = VirtualQueueSet::new(1_000_000);
        assert_eq!(sample_post_service_queue(&set, false), 0.0);
        set.push(QueueClass::WanDown, 5000, 0);
        set.push(QueueClass::LanDown, 3000, 1);
        assert!((sample_post_service_queue(&set, false) - 8.0).abs() < 1e-12);
    }

    #[test]
    #[should_panic(expected = "post-service queue sampled")]
    #[cfg(debug_assertions)]
    fn mid_slice_sample_asserts() {
        let set: VirtualQueueSet<u32> = VirtualQueueSet::new(1_000_000);
        sample_post_service_queue(&set, true);
    }

    /// Convergence against a synthetic bottleneck: the sender keeps a small
    /// window of backlog in the controller while v is below the wireless
    /// drain mu, and the queue empties once v exceeds mu. v must climb from
    /// 1 Mbps to a hunting band around mu and track a later drop in mu.
    /// The tight band property runs against the full simulator in the
    /// acceptance suite; this checks the adapter mechanics in isolation.
    #[test]
    fn adapter_converges_to_bottleneck_band() {
        let params = RateAdapterParams::default();
        let mut st = RateAdapterState::new(params);
        let mut queue_kb: f64;
        let window_kb = 12.0;
        let mut entered = None;
        for step in 0..200 {
            let mu = if step < 100 { 23.0 } else { 11.0 };
            let now = 3.0 * (step + 1) as f64;
            queue_kb = if st.v_mbps < mu { window_kb } else { 0.0 };
            st.rate_adapt_step(queue_kb, now, true);
            if step < 100 && entered.is_none() && (st.v_mbps - 23.0).abs() <= 0.15 * 23.0 {
                entered = Some(step);
            }
            assert!(st.v_mbps <= params.v_max_mbps && st.v_mbps >= params.v_min_mbps);
        }
        let entered = entered.expect("never entered the band");
        assert!(entered < 60, "entered at step {entered}");
        // After 100 steps at mu = 11 the hunting cycle sits near mu.
        assert!(
            st.v_mbps >= 0.75 * 11.0 && st.v_mbps <= 1.15 * 11.0,
            "v = {}",
            st.v_mbps
        );
    }
}
