//! Reno-style TCP sender and receiver state machines.
//!
//! Sequence numbers count MSS-sized segments (the last segment of a sized
//! transfer may be short). Every transmission carries a monotone tx id which
//! the receiver echoes in its ACKs; that both gives Karn-safe RTT samples
//! and lets forward-RTO recovery recognize an ACK triggered by an original
//! transmission after a retransmission (a spurious timeout).

use std::collections::{BTreeMap, BTreeSet};

pub const DEFAULT_MSS: u32 = 1500;
pub const ACK_BYTES: u32 = 52;
/// Immediate ACK after this many unacknowledged data segments.
pub const DELACK_SEGMENTS: u32 = 2;
pub const DELACK_TIMEOUT_US: u64 = 40_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CcState {
    SlowStart,
    CongAvoid,
    FastRecovery,
    RtoWait,
}

#[derive(Debug, Clone, Copy)]
pub struct TcpParams {
    pub mss: u32,
    pub init_cwnd: f64,
    pub rto_min_us: u64,
    pub rto_max_us: u64,
    pub rto_init_us: u64,
    pub frto_enabled: bool,
}

impl Default for TcpParams {
    fn default() -> Self {
        Self {
            mss: DEFAULT_MSS,
            init_cwnd: 4.0,
            rto_min_us: 200_000,
            // Caps backoff so a sender buried by a hostile channel starts
            // probing again within seconds once conditions improve.
            rto_max_us: 8_000_000,
            rto_init_us: 1_000_000,
            frto_enabled: true,
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct SentInfo {
    last_tx_us: u64,
    retransmitted: bool,
}

#[derive(Debug, Clone, Copy)]
struct FrtoCandidate {
    rto_seq: u64,
    retx_tx_id: u64,
    prior_cwnd: f64,
    prior_ssthresh: f64,
}

/// A segment the engine must put on the wire.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Transmission {
    pub seq: u64,
    pub tx_id: u64,
    pub bytes: u32,
}

/// What an incoming ACK did to the sender.
#[derive(Debug, Default)]
pub struct AckOutcome {
    /// Segments to put on the wire right now (fast or partial-ack
    /// retransmissions). New-data transmissions are pulled separately.
    pub retransmits: Vec<Transmission>,
    /// A spurious timeout was detected and the window restored.
    pub spurious_rto: bool,
    /// Newly acknowledged payload bytes.
    pub newly_acked_bytes: u64,
}

#[derive(Debug, Clone)]
pub struct TcpSender {
    pub params: TcpParams,
    pub cwnd: f64,
    pub ssthresh: f64,
    pub state: CcState,
    pub srtt_us: Option<f64>,
    pub rttvar_us: f64,
    pub dup_acks: u32,
    /// Next new segment to send.
    pub next_seq: u64,
    /// Cumulative ACK point.
    pub highest_acked: u64,
    /// Total payload bytes of the transfer; None streams forever.
    pub total_bytes: Option<u64>,
    /// Peer receive window in bytes (from the latest ACK).
    pub peer_rwnd_bytes: u64,
    recover: u64,
    backoff: u32,
    tx_counter: u64,
    sent: BTreeMap<u64, SentInfo>,
    frto: Option<FrtoCandidate>,
    ca_acc: f64,
    pub retransmit_count: u64,
    pub rto_count: u64,
    pub first_rtos_us: Vec<u64>,
}

impl TcpSender {
    pub fn new(params: TcpParams, total_bytes: Option<u64>, peer_rwnd_bytes: u64) -> Self {
        Self {
            params,
            cwnd: params.init_cwnd,
            ssthresh: 1e9,
            state: CcState::SlowStart,
            srtt_us: None,
            rttvar_us: 0.0,
            dup_acks: 0,
            next_seq: 0,
            highest_acked: 0,
            total_bytes,
            peer_rwnd_bytes,
            recover: 0,
            backoff: 0,
            tx_counter: 0,
            sent: BTreeMap::new(),
            frto: None,
            ca_acc: 0.0,
            retransmit_count: 0,
            rto_count: 0,
            first_rtos_us: Vec::new(),
        }
    }

    pub fn total_segments(&self) -> Option<u64> {
        self.total_bytes
            .map(|b| b.div_ceil(self.params.mss as u64).max(1))
    }

    pub fn segment_bytes(&self, seq: u64) -> u32 {
        match self.total_bytes {
            None => self.params.mss,
            Some(total) => {
                let offset = seq * self.params.mss as u64;
                (total - offset).min(self.params.mss as u64) as u32
            }
        }
    }

    pub fn flight_segments(&self) -> u64 {
        self.next_seq - self.highest_acked
    }

    pub fn all_acked(&self) -> bool {
        match self.total_segments() {
            Some(n) => self.highest_acked >= n,
            None => false,
        }
    }

    /// Base timeout from the RTT estimate, before backoff.
    fn rto_base_us(&self) -> u64 {
        match self.srtt_us {
            None => self.params.rto_init_us,
            Some(srtt) => {
                let rto = srtt + (4.0 * self.rttvar_us).max(1_000.0);
                (rto as u64).clamp(self.params.rto_min_us, self.params.rto_max_us)
            }
        }
    }

    /// Current timeout including exponential backoff.
    pub fn rto_us(&self) -> u64 {
        let base = self.rto_base_us();
        base.saturating_mul(1u64 << self.backoff.min(20))
            .min(self.params.rto_max_us)
    }

    /// Can a new (never sent) segment go out now? `app_limit_segments` caps
    /// sequence numbers that have payload ready (relay buffers).
    pub fn can_send_new(&self, app_limit_segments: Option<u64>) -> bool {
        if self.flight_segments() >= self.cwnd.floor().max(1.0) as u64 {
            return false;
        }
        let rwnd_segs = (self.peer_rwnd_bytes / self.params.mss as u64).max(0);
        if self.flight_segments() >= rwnd_segs {
            return false;
        }
        if let Some(limit) = app_limit_segments {
            if self.next_seq >= limit {
                return false;
            }
        }
        if let Some(n) = self.total_segments() {
            if self.next_seq >= n {
                return false;
            }
        }
        true
    }

    /// Registers a new-data transmission and returns what to send.
    pub fn send_new(&mut self, now_us: u64) -> Transmission {
        let seq = self.next_seq;
        self.next_seq += 1;
        self.tx_counter += 1;
        self.sent.insert(
            seq,
            SentInfo {
                last_tx_us: now_us,
                retransmitted: false,
            },
        );
        Transmission {
            seq,
            tx_id: self.tx_counter,
            bytes: self.segment_bytes(seq),
        }
    }

    fn retransmit(&mut self, seq: u64, now_us: u64) -> Transmission {
        self.tx_counter += 1;
        self.retransmit_count += 1;
        let info = self.sent.entry(seq).or_insert(SentInfo {
            last_tx_us: now_us,
            retransmitted: true,
        });
        info.last_tx_us = now_us;
        info.retransmitted = true;
        Transmission {
            seq,
            tx_id: self.tx_counter,
            bytes: self.segment_bytes(seq),
        }
    }

    fn sample_rtt(&mut self, now_us: u64, acked_through: u64) {
        // Karn: only segments never retransmitted give samples.
        let seq = acked_through - 1;
        if let Some(info) = self.sent.get(&seq) {
            if !info.retransmitted {
                let r = (now_us - info.last_tx_us) as f64;
                match self.srtt_us {
                    None => {
                        self.srtt_us = Some(r);
                        self.rttvar_us = r / 2.0;
                    }
                    Some(srtt) => {
                        self.rttvar_us = 0.75 * self.rttvar_us + 0.25 * (srtt - r).abs();
                        self.srtt_us = Some(0.875 * srtt + 0.125 * r);
                    }
                }
            }
        }
    }

    /// Handles a cumulative ACK. `echo_tx` is the tx id of the data packet
    /// that triggered the ACK at the receiver.
    pub fn on_ack(&mut self, now_us: u64, cum: u64, echo_tx: u64, rwnd_bytes: u64) -> AckOutcome {
        let mut out = AckOutcome::default();
        // A pure window update is not a duplicate ACK.
        let window_changed = rwnd_bytes != self.peer_rwnd_bytes;
        self.peer_rwnd_bytes = rwnd_bytes;
        if cum > self.highest_acked {
            let n = cum - self.highest_acked;
            for s in self.highest_acked..cum {
                out.newly_acked_bytes += self.segment_bytes(s) as u64;
            }
            self.sample_rtt(now_us, cum);

            if let Some(c) = self.frto.take() {
                if cum > c.rto_seq && echo_tx < c.retx_tx_id {
                    // The original transmission was acknowledged after the
                    // RTO retransmit: the timeout was spurious.
                    self.cwnd = c.prior_cwnd;
                    self.ssthresh = c.prior_ssthresh;
                    self.state = if self.cwnd < self.ssthresh {
                        CcState::SlowStart
                    } else {
                        CcState::CongAvoid
                    };
                    out.spurious_rto = true;
                }
            }

            let range: Vec<u64> = self
                .sent
                .range(self.highest_acked..cum)
                .map(|(&s, _)| s)
                .collect();
            for s in range {
                self.sent.remove(&s);
            }
            self.highest_acked = cum;
            self.backoff = 0;
            self.dup_acks = 0;

            if !out.spurious_rto {
                match self.state {
                    CcState::FastRecovery => {
                        if cum >= self.recover {
                            self.cwnd = self.ssthresh.max(2.0);
                            self.state = CcState::CongAvoid;
                        } else {
                            // Partial ACK: the next hole is lost too.
                            self.cwnd = (self.cwnd - n as f64 + 1.0).max(1.0);
                            out.retransmits.push(self.retransmit(cum, now_us));
                        }
                    }
                    CcState::RtoWait | CcState::SlowStart | CcState::CongAvoid => {
                        if self.state == CcState::RtoWait {
                            self.state = if self.cwnd < self.ssthresh {
                                CcState::SlowStart
                            } else {
                                CcState::CongAvoid
                            };
                        }
                        match self.state {
                            CcState::SlowStart => {
                                // Byte counting, at most two segments per ACK.
                                self.cwnd += (n as f64).min(2.0);
                                if self.cwnd >= self.ssthresh {
                                    self.state = CcState::CongAvoid;
                                    self.ca_acc = 0.0;
                                }
                            }
                            CcState::CongAvoid => {
                                // One segment per window's worth of ACKs.
                                self.ca_acc += n as f64;
                                while self.ca_acc >= self.cwnd.floor().max(1.0) {
                                    self.ca_acc -= self.cwnd.floor().max(1.0);
                                    self.cwnd += 1.0;
                                }
                            }
                            _ => {}
                        }
                    }
                }
            }
        } else if cum == self.highest_acked && self.flight_segments() > 0 && !window_changed {
            self.dup_acks += 1;
            if self.state == CcState::FastRecovery {
                self.cwnd += 1.0;
            } else if self.dup_acks == 3 {
                self.frto = None;
                self.ssthresh = (self.cwnd / 2.0).max(2.0);
                self.cwnd = self.ssthresh + 3.0;
                self.recover = self.next_seq;
                self.state = CcState::FastRecovery;
                out.retransmits.push(self.retransmit(cum, now_us));
            }
        }
        out
    }

    /// Retransmission timeout fired.
    pub fn on_timeout(&mut self, now_us: u64) -> Transmission {
        self.rto_count += 1;
        if self.first_rtos_us.len() < 12 {
            self.first_rtos_us.push(now_us);
        }
        if self.params.frto_enabled && self.frto.is_none() && self.state != CcState::RtoWait {
            self.frto = Some(FrtoCandidate {
                rto_seq: self.highest_acked,
                retx_tx_id: self.tx_counter + 1,
                prior_cwnd: self.cwnd,
                prior_ssthresh: self.ssthresh,
            });
        } else {
            // A second timeout for the same outage is genuine loss.
            self.frto = None;
        }
        self.ssthresh = (self.cwnd / 2.0).max(2.0);
        self.cwnd = 1.0;
        self.state = CcState::RtoWait;
        self.dup_acks = 0;
        self.backoff = (self.backoff + 1).min(20);
        self.retransmit(self.highest_acked, now_us)
    }
}

/// What the receiver wants done after a data segment arrives.
#[derive(Debug, Default, PartialEq, Eq)]
pub struct RxAction {
    /// Send this cumulative ACK immediately.
    pub ack_now: Option<AckInfo>,
    /// (Re)arm the delayed-ACK timer to this absolute deadline.
    pub arm_delack_at: Option<u64>,
    /// In-order payload bytes newly available to the application.
    pub delivered_bytes: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AckInfo {
    pub cum: u64,
    pub echo_tx: u64,
}

#[derive(Debug, Clone)]
pub struct TcpReceiver {
    pub rcv_nxt: u64,
    ooo: BTreeMap<u64, u32>,
    pending: u32,
    last_tx: u64,
    delack_armed: bool,
    /// Cumulative in-order payload bytes received.
    pub bytes_in_order: u64,
}

impl Default for TcpReceiver {
    fn default() -> Self {
        Self::new()
    }
}

impl TcpReceiver {
    pub fn new() -> Self {
        Self {
            rcv_nxt: 0,
            ooo: BTreeMap::new(),
            pending: 0,
            last_tx: 0,
            delack_armed: false,
            bytes_in_order: 0,
        }
    }

    pub fn on_data(&mut self, now_us: u64, seq: u64, tx_id: u64, bytes: u32) -> RxAction {
        let mut act = RxAction::default();
        self.last_tx = tx_id;
        if seq == self.rcv_nxt {
            let had_hole = !self.ooo.is_empty();
            self.rcv_nxt += 1;
            act.delivered_bytes += bytes as u64;
            self.bytes_in_order += bytes as u64;
            while let Some((&s, &b)) = self.ooo.first_key_value() {
                if s == self.rcv_nxt {
                    self.ooo.remove(&s);
                    self.rcv_nxt += 1;
                    act.delivered_bytes += b as u64;
                    self.bytes_in_order += b as u64;
                } else {
                    break;
                }
            }
            self.pending += 1;
            // A segment that (partially) fills a hole is acknowledged at
            // once so the sender sees recovery progress.
            if self.pending >= DELACK_SEGMENTS || had_hole {
                act.ack_now = Some(self.make_ack());
            } else if !self.delack_armed {
                self.delack_armed = true;
                act.arm_delack_at = Some(now_us + DELACK_TIMEOUT_US);
            }
        } else {
            // Out of order or duplicate: ACK immediately (dup-ACK signal).
            if seq > self.rcv_nxt {
                self.ooo.insert(seq, bytes);
            }
            act.ack_now = Some(self.make_ack());
        }
        act
    }

    fn make_ack(&mut self) -> AckInfo {
        self.pending = 0;
        self.delack_armed = false;
        AckInfo {
            cum: self.rcv_nxt,
            echo_tx: self.last_tx,
        }
    }

    /// Current cumulative ACK state without consuming pending-ACK credit;
    /// used for pure window updates.
    pub fn window_update(&self) -> AckInfo {
        AckInfo {
            cum: self.rcv_nxt,
            echo_tx: self.last_tx,
        }
    }

    /// Delayed-ACK timer fired; returns the ACK if one is still pending.
    pub fn on_delack_timer(&mut self) -> Option<AckInfo> {
        if self.delack_armed && self.pending > 0 {
            Some(self.make_ack())
        } else {
            None
        }
    }

    /// Segments the receiver has seen out of order (diagnostics).
    pub fn ooo_segments(&self) -> BTreeSet<u64> {
        self.ooo.keys().copied().collect()
    }
}
