//! Frame schedule synthesis and gating.
//!
//! A frame of duration T is cut into slots, one per maximal independent set
//! with enough activation to survive the slot quantum, laid out in the
//! deterministic column order of the set matrix. Slot boundaries are kept in
//! integer microseconds so frames always partition exactly. Short-lived
//! clients can have their slice split into several equally spaced gates, and
//! interactive clients can bypass gating entirely.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::optimizer::AllocationSolution;
use crate::topology::{ClientId, DependenceGraph, IndependentSetMatrix};

pub const US_PER_MS: u64 = 1_000;
/// Default slot quantum: coarse slicing is the premise, sub-10 ms slices are
/// noise at a 1000 ms frame.
pub const DEFAULT_SLOT_QUANTUM_US: u64 = 10 * US_PER_MS;

#[derive(Debug, Error)]
pub enum SchedulerError {
    #[error("negative set activation a[{0}] = {1}")]
    NegativeActivation(usize, f64),
    #[error("set activations sum to {0}, above the frame budget")]
    OverfullFrame(f64),
    #[error("share {share} over {parts} parts cannot fill the {quantum_us} us quantum")]
    InfeasibleSpacing {
        share: f64,
        parts: u32,
        quantum_us: u64,
    },
    #[error("invalid spread parameters: {0}")]
    BadSpread(String),
    #[error("solution has {0} activations but the matrix has {1} columns")]
    ColumnMismatch(usize, usize),
}

/// Traffic classes a simulated flow can carry.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FlowClass {
    LongLived,
    ShortLived,
    Interactive,
}

/// One scheduled slot; an empty active set is idle time.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Slot {
    pub start_us: u64,
    pub end_us: u64,
    pub active: BTreeSet<ClientId>,
}

impl Slot {
    pub fn duration_us(&self) -> u64 {
        self.end_us - self.start_us
    }
}

/// A complete frame schedule.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TimeFrameSchedule {
    pub frame_us: u64,
    pub quantum_us: u64,
    pub slots: Vec<Slot>,
    /// Clients whose INTERACTIVE traffic ignores gating.
    pub bypass_clients: BTreeSet<ClientId>,
}

impl TimeFrameSchedule {
    /// Slot covering frame-relative time `t_us` (t_us < frame_us).
    pub fn slot_at(&self, t_us: u64) -> &Slot {
        debug_assert!(t_us < self.frame_us);
        let idx = self
            .slots
            .partition_point(|s| s.end_us <= t_us)
            .min(self.slots.len() - 1);
        &self.slots[idx]
    }

    /// Total gated-ON time of `client` within one frame.
    pub fn on_time_us(&self, client: ClientId) -> u64 {
        self.slots
            .iter()
            .filter(|s| s.active.contains(&client))
            .map(Slot::duration_us)
            .sum()
    }

    /// Checks that slots partition the frame and that every active set is
    /// independent in `graph`.
    pub fn validate(&self, graph: &DependenceGraph) -> bool {
        let mut cursor = 0;
        for s in &self.slots {
            if s.start_us != cursor || s.end_us <= s.start_us {
                return false;
            }
            cursor = s.end_us;
            if !graph.is_independent(&s.active) {
                return false;
            }
        }
        cursor == self.frame_us
    }

    /// Dump format: `FRAME <T_ms>`, `BYPASS <ids|->`, then one
    /// `SLOT <start_ms> <end_ms> <ids|IDLE>` line per slot.
    pub fn dump(&self) -> String {
        let mut out = format!("FRAME {}\n", fmt_ms(self.frame_us));
        if self.bypass_clients.is_empty() {
            out.push_str("BYPASS -\n");
        } else {
            out.push_str(&format!("BYPASS {}\n", join_ids(&self.bypass_clients)));
        }
        for s in &self.slots {
            let members = if s.active.is_empty() {
                "IDLE".to_string()
            } else {
                join_ids(&s.active)
            };
            out.push_str(&format!(
                "SLOT {} {} {}\n",
                fmt_ms(s.start_us),
                fmt_ms(s.end_us),
                members
            ));
        }
        out
    }
}

fn fmt_ms(us: u64) -> String {
    if us % US_PER_MS == 0 {
        format!("{}", us / US_PER_MS)
    } else {
        format!("{}", us as f64 / US_PER_MS as f64)
    }
}

fn join_ids(ids: &BTreeSet<ClientId>) -> String {
    ids.iter()
        .map(|c| c.to_string())
        .collect::<Vec<_>>()
        .join(",")
}

/// Is the decision to gate `client`'s `class` traffic open at absolute time
/// `t_us`? Interactive traffic of bypass clients is always open; everything
/// else follows slot membership of the frame-relative instant.
pub fn gate(sched: &TimeFrameSchedule, t_us: u64, client: ClientId, class: FlowClass) -> bool {
    if class == FlowClass::Interactive && sched.bypass_clients.contains(&client) {
        return true;
    }
    let rel = t_us % sched.frame_us;
    sched.slot_at(rel).active.contains(&client)
}

/// Turns set activations into a slot list: one slot per column with
/// activation above the quantum, rounded to the quantum, in column order,
/// with leftover frame time appended as an idle slot. Sub-quantum
/// activations hand their time to the largest slot.
pub fn derive_schedule(
    sol: &AllocationSolution,
    matrix: &IndependentSetMatrix,
    frame_ms: u64,
    quantum_ms: u64,
) -> Result<TimeFrameSchedule, SchedulerError> {
    if sol.a.len() != matrix.column_count() {
        return Err(SchedulerError::ColumnMismatch(
            sol.a.len(),
            matrix.column_count(),
        ));
    }
    for (k, &a) in sol.a.iter().enumerate() {
        if a < -1e-9 {
            return Err(SchedulerError::NegativeActivation(k, a));
        }
    }
    let total: f64 = sol.a.iter().sum();
    if total > 1.0 + 1e-6 {
        return Err(SchedulerError::OverfullFrame(total));
    }

    let frame_us = frame_ms * US_PER_MS;
    let quantum_us = (quantum_ms * US_PER_MS).max(1);
    let mut raw: Vec<(usize, f64)> = sol
        .a
        .iter()
        .enumerate()
        .map(|(k, &a)| (k, a.max(0.0) * frame_us as f64))
        .collect();

    // Return sub-quantum slivers to the largest activation.
    let kept: Vec<usize> = raw
        .iter()
        .filter(|&&(_, r)| r > quantum_us as f64)
        .map(|&(k, _)| k)
        .collect();
    if !kept.is_empty() {
        let dropped: f64 = raw
            .iter()
            .filter(|(k, _)| !kept.contains(k))
            .map(|&(_, r)| r)
            .sum();
        if dropped > 0.0 {
            let largest = *kept
                .iter()
                .max_by(|&&a, &&b| {
                    raw[a]
                        .1
                        .partial_cmp(&raw[b].1)
                        .unwrap()
                        .then(b.cmp(&a))
                })
                .unwrap();
            raw[largest].1 += dropped;
        }
    }

    let mut durations: Vec<(usize, u64)> = kept
        .iter()
        .map(|&k| {
            let quanta = (raw[k].1 / quantum_us as f64).round() as u64;
            (k, quanta.max(1) * quantum_us)
        })
        .collect();

    // Rounding may overshoot the frame; trim the largest slots back.
    loop {
        let sum: u64 = durations.iter().map(|&(_, d)| d).sum();
        if sum <= frame_us {
            break;
        }
        let largest = durations
            .iter_mut()
            .max_by_key(|e| e.1)
            .expect("non-empty overflow");
        largest.1 -= quantum_us;
    }

    let mut slots = Vec::new();
    let mut cursor = 0u64;
    for &(k, d) in &durations {
        if d == 0 {
            continue;
        }
        slots.push(Slot {
            start_us: cursor,
            end_us: cursor + d,
            active: matrix.columns()[k].clone(),
        });
        cursor += d;
    }
    if cursor < frame_us {
        slots.push(Slot {
            start_us: cursor,
            end_us: frame_us,
            active: BTreeSet::new(),
        });
    }
    if slots.is_empty() {
        slots.push(Slot {
            start_us: 0,
            end_us: frame_us,
            active: BTreeSet::new(),
        });
    }
    Ok(TimeFrameSchedule {
        frame_us,
        quantum_us,
        slots,
        bypass_clients: BTreeSet::new(),
    })
}

/// Splits `client`'s airtime into `parts` equal gates spaced frame/parts
/// apart. Existing slots shrink proportionally to make room; a gate landing
/// on a slot whose members are all independent of `client` keeps those
/// members active through the gate, otherwise the gate is exclusive.
pub fn spread_subslices(
    sched: &TimeFrameSchedule,
    graph: &DependenceGraph,
    client: ClientId,
    share: f64,
    parts: u32,
) -> Result<TimeFrameSchedule, SchedulerError> {
    if !(share > 0.0 && share <= 1.0) {
        return Err(SchedulerError::BadSpread(format!("share {share}")));
    }
    if parts == 0 {
        return Err(SchedulerError::BadSpread("parts = 0".into()));
    }
    let frame = sched.frame_us;
    let gate_total = (share * frame as f64).round() as u64;
    if gate_total < parts as u64 * sched.quantum_us {
        return Err(SchedulerError::InfeasibleSpacing {
            share,
            parts,
            quantum_us: sched.quantum_us,
        });
    }

    // Gate lengths sum exactly to gate_total.
    let base = gate_total / parts as u64;
    let rem = (gate_total % parts as u64) as usize;
    let gate_len: Vec<u64> = (0..parts as usize)
        .map(|p| if p < rem { base + 1 } else { base })
        .collect();
    let period = frame / parts as u64;

    // Old timeline without the spread client.
    let old: Vec<Slot> = sched
        .slots
        .iter()
        .map(|s| {
            let mut active = s.active.clone();
            active.remove(&client);
            Slot {
                start_us: s.start_us,
                end_us: s.end_us,
                active,
            }
        })
        .collect();

    // Per gate, the old slot under its nominal start decides merging.
    let mergeable_set = |p: usize| -> Option<BTreeSet<ClientId>> {
        let t = (p as u64 * period).min(frame - 1);
        let idx = old.partition_point(|s| s.end_us <= t).min(old.len() - 1);
        let set = &old[idx].active;
        if set.iter().all(|&m| !graph.has_edge(m, client)) {
            Some(set.clone())
        } else {
            None
        }
    };

    // Scale the old timeline onto frame - gate_total microseconds by mapping
    // cumulative boundaries; this keeps the partition exact.
    let filler_total = frame - gate_total;
    let scale = |t: u64| -> u64 { ((t as u128 * filler_total as u128) / frame as u128) as u64 };
    let mut scaled: Vec<Slot> = Vec::new();
    for s in &old {
        let a = scale(s.start_us);
        let b = scale(s.end_us);
        if b > a {
            scaled.push(Slot {
                start_us: a,
                end_us: b,
                active: s.active.clone(),
            });
        }
    }

    // Interleave: [gate p][filler chunk p] so gate p starts at p * period.
    let mut out: Vec<Slot> = Vec::new();
    let mut cursor = 0u64;
    let mut filler_cursor = 0u64; // position within the scaled timeline
    for p in 0..parts as usize {
        let mut active = BTreeSet::new();
        active.insert(client);
        if let Some(extra) = mergeable_set(p) {
            active.extend(extra);
        }
        out.push(Slot {
            start_us: cursor,
            end_us: cursor + gate_len[p],
            active,
        });
        cursor += gate_len[p];

        // Chunk length chosen so the next gate lands on its nominal start.
        let next_gate_start = (p as u64 + 1) * period;
        let chunk_len = if p + 1 == parts as usize {
            filler_total - filler_cursor
        } else {
            next_gate_start.saturating_sub(cursor)
        };
        let chunk_stop = filler_cursor + chunk_len;
        while filler_cursor < chunk_stop {
            let idx = scaled
                .partition_point(|s| s.end_us <= filler_cursor)
                .min(scaled.len().saturating_sub(1));
            if scaled.is_empty() {
                break;
            }
            let s = &scaled[idx];
            let take_end = s.end_us.min(chunk_stop);
            if take_end <= filler_cursor {
                break;
            }
            out.push(Slot {
                start_us: cursor,
                end_us: cursor + (take_end - filler_cursor),
                active: s.active.clone(),
            });
            cursor += take_end - filler_cursor;
            filler_cursor = take_end;
        }
    }
    // Merge zero-length artifacts and coalesce adjacent identical sets.
    let mut slots: Vec<Slot> = Vec::new();
    for s in out {
        if s.end_us <= s.start_us {
            continue;
        }
        if let Some(last) = slots.last_mut() {
            if last.active == s.active && last.end_us == s.start_us {
                last.end_us = s.end_us;
                continue;
            }
        }
        slots.push(s);
    }
    debug_assert_eq!(slots.last().map(|s| s.end_us), Some(frame));
    Ok(TimeFrameSchedule {
        frame_us: frame,
        quantum_us: sched.quantum_us,
        slots,
        bypass_clients: sched.bypass_clients.clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::optimizer::AllocationSolution;
    use crate::topology::{enumerate_maximal_independent_sets, DependenceGraph};

    fn c(id: u32) -> ClientId {
        ClientId(id)
    }

    fn fig_layout() -> (DependenceGraph, IndependentSetMatrix) {
        let mut g = DependenceGraph::new((1..=4).map(c));
        for (a, b) in [(1, 2), (1, 3), (2, 3), (2, 4), (3, 4)] {
            g.add_edge(c(a), c(b));
        }
        let m = enumerate_maximal_independent_sets(&g).unwrap();
        (g, m)
    }

    fn solution(a: &[f64]) -> AllocationSolution {
        AllocationSolution {
            x: vec![],
            y: vec![],
            z: vec![],
            a: a.to_vec(),
            objective_value: 0.0,
            kkt_residual: 0.0,
        }
    }

    #[test]
    fn reference_layout_500_250_250() {
        let (g, m) = fig_layout();
        let sched = derive_schedule(&solution(&[0.5, 0.25, 0.25]), &m, 1000, 10).unwrap();
        assert!(sched.validate(&g));
        assert_eq!(sched.slots.len(), 3);
        let starts: Vec<u64> = sched.slots.iter().map(|s| s.start_us).collect();
        let ends: Vec<u64> = sched.slots.iter().map(|s| s.end_us).collect();
        assert_eq!(starts, vec![0, 500_000, 750_000]);
        assert_eq!(ends, vec![500_000, 750_000, 1_000_000]);
        let expect: Vec<BTreeSet<ClientId>> = vec![
            [c(1), c(4)].into_iter().collect(),
            [c(2)].into_iter().collect(),
            [c(3)].into_iter().collect(),
        ];
        for (s, e) in sched.slots.iter().zip(expect) {
            assert_eq!(s.active, e);
        }
    }

    #[test]
    fn single_full_column() {
        let mut g = DependenceGraph::new([c(1)]);
        g.add_edge(c(1), c(1));
        let m = enumerate_maximal_independent_sets(&g).unwrap();
        let sched = derive_schedule(&solution(&[1.0]), &m, 1000, 10).unwrap();
        assert_eq!(sched.slots.len(), 1);
        assert_eq!(sched.slots[0].duration_us(), 1_000_000);
    }

    #[test]
    fn thirds_round_down_with_idle_tail() {
        let mut g = DependenceGraph::new((1..=3).map(c));
        for (a, b) in [(1, 2), (1, 3), (2, 3)] {
            g.add_edge(c(a), c(b));
        }
        let m = enumerate_maximal_independent_sets(&g).unwrap();
        let third = 1.0 / 3.0;
        let sched = derive_schedule(&solution(&[third, third, third]), &m, 1000, 10).unwrap();
        assert_eq!(sched.slots.len(), 4);
        for s in &sched.slots[..3] {
            assert_eq!(s.duration_us(), 330_000);
        }
        let idle = &sched.slots[3];
        assert!(idle.active.is_empty());
        assert_eq!(idle.duration_us(), 10_000);
        for id in 1..=3 {
            let err = sched.on_time_us(c(id)) as i64 - 333_333;
            assert!(err.abs() <= 10_000, "on-time error {err}");
        }
    }

    #[test]
    fn sub_quantum_time_returns_to_largest_slot() {
        let mut g = DependenceGraph::new((1..=3).map(c));
        for (a, b) in [(1, 2), (1, 3), (2, 3)] {
            g.add_edge(c(a), c(b));
        }
        let m = enumerate_maximal_independent_sets(&g).unwrap();
        let sched = derive_schedule(&solution(&[0.6, 0.39, 0.005]), &m, 1000, 10).unwrap();
        // Column 3's 5 ms returns to the largest (600 ms) slot, which then
        // rounds up to 610 ms.
        assert_eq!(sched.slots.len(), 2);
        assert_eq!(sched.slots[0].duration_us(), 610_000);
        assert_eq!(sched.slots[1].duration_us(), 390_000);
    }

    #[test]
    fn negative_activation_rejected() {
        let (_, m) = fig_layout();
        assert!(matches!(
            derive_schedule(&solution(&[-0.1, 0.5, 0.5]), &m, 1000, 10),
            Err(SchedulerError::NegativeActivation(0, _))
        ));
    }

    #[test]
    fn gate_follows_slots_and_wraps() {
        let (_, m) = fig_layout();
        let sched = derive_schedule(&solution(&[0.5, 0.25, 0.25]), &m, 1000, 10).unwrap();
        // t = 600 ms: slot {2}.
        assert!(gate(&sched, 600_000, c(2), FlowClass::LongLived));
        assert!(!gate(&sched, 600_000, c(1), FlowClass::LongLived));
        // t = 1200 ms wraps to 200 ms: slot {1,4}.
        assert!(gate(&sched, 1_200_000, c(1), FlowClass::LongLived));
        assert!(gate(&sched, 1_200_000, c(4), FlowClass::LongLived));
        assert!(!gate(&sched, 1_200_000, c(2), FlowClass::LongLived));
    }

    #[test]
    fn interactive_bypass_always_open() {
        let (_, m) = fig_layout();
        let mut sched = derive_schedule(&solution(&[0.5, 0.25, 0.25]), &m, 1000, 10).unwrap();
        sched.bypass_clients.insert(c(3));
        for t in [0u64, 100_000, 600_000, 999_999, 5_432_100] {
            assert!(gate(&sched, t, c(3), FlowClass::Interactive));
        }
        // Bypass applies to interactive traffic only.
        assert!(!gate(&sched, 600_000, c(3), FlowClass::LongLived));
    }

    #[test]
    fn spread_splits_into_equally_spaced_gates() {
        let mut g = DependenceGraph::new((1..=4).map(c));
        for (a, b) in [(1, 2), (1, 3), (1, 4), (2, 3), (2, 4), (3, 4)] {
            g.add_edge(c(a), c(b));
        }
        let m = enumerate_maximal_independent_sets(&g).unwrap();
        let base = derive_schedule(&solution(&[0.1, 0.3, 0.3, 0.3]), &m, 1000, 10).unwrap();
        let spread = spread_subslices(&base, &g, c(1), 0.1, 3).unwrap();
        assert!(spread.validate(&g));
        let gates: Vec<&Slot> = spread
            .slots
            .iter()
            .filter(|s| s.active.contains(&c(1)))
            .collect();
        assert_eq!(gates.len(), 3);
        let starts: Vec<u64> = gates.iter().map(|s| s.start_us).collect();
        assert_eq!(starts, vec![0, 333_333, 666_666]);
        let total: u64 = gates.iter().map(|s| s.duration_us()).sum();
        assert_eq!(total, 100_000);
        // Other clients keep 90% of their time.
        for id in 2..=4 {
            let on = spread.on_time_us(c(id));
            assert!((on as i64 - 270_000).abs() <= 2, "client {id}: {on}");
        }
        assert_eq!(spread.slots.last().unwrap().end_us, 1_000_000);
    }

    #[test]
    fn spread_one_part_is_contiguous() {
        let (g, m) = fig_layout();
        let base = derive_schedule(&solution(&[0.5, 0.25, 0.25]), &m, 1000, 10).unwrap();
        let spread = spread_subslices(&base, &g, c(2), 0.2, 1).unwrap();
        let gates: Vec<&Slot> = spread
            .slots
            .iter()
            .filter(|s| s.active.contains(&c(2)))
            .collect();
        assert_eq!(gates.len(), 1);
        assert_eq!(gates[0].duration_us(), 200_000);
        assert!(spread.validate(&g));
    }

    #[test]
    fn spread_merges_with_independent_slot_members() {
        // Clients 1 and 4 are independent; a gate for 4 landing on the
        // {1}-slot keeps 1 active.
        let mut g = DependenceGraph::new((1..=4).map(c));
        for (a, b) in [(1, 2), (1, 3), (2, 3), (2, 4), (3, 4)] {
            g.add_edge(c(a), c(b));
        }
        let m = enumerate_maximal_independent_sets(&g).unwrap();
        // Columns: {1,4}, {2}, {3}. Build a schedule without client 4 first.
        let base = derive_schedule(&solution(&[0.5, 0.25, 0.25]), &m, 1000, 10).unwrap();
        let spread = spread_subslices(&base, &g, c(4), 0.12, 2).unwrap();
        assert!(spread.validate(&g));
        let first_gate = spread
            .slots
            .iter()
            .find(|s| s.active.contains(&c(4)))
            .unwrap();
        // Gate 0 lands on the old {1,4} slot (4 removed -> {1}), and 1 is
        // independent of 4, so both ride the gate.
        assert!(first_gate.active.contains(&c(1)));
    }

    #[test]
    fn spread_infeasible_spacing_is_rejected() {
        let (g, m) = fig_layout();
        let base = derive_schedule(&solution(&[0.5, 0.25, 0.25]), &m, 1000, 10).unwrap();
        assert!(matches!(
            spread_subslices(&base, &g, c(2), 0.02, 3),
            Err(SchedulerError::InfeasibleSpacing { .. })
        ));
    }

    #[test]
    fn derive_is_deterministic() {
        let (_, m) = fig_layout();
        let s1 = derive_schedule(&solution(&[0.5, 0.25, 0.25]), &m, 1000, 10).unwrap();
        let s2 = derive_schedule(&solution(&[0.5, 0.25, 0.25]), &m, 1000, 10).unwrap();
        assert_eq!(s1, s2);
    }

    #[test]
    fn dump_format() {
        let (_, m) = fig_layout();
        let mut sched = derive_schedule(&solution(&[0.5, 0.25, 0.25]), &m, 1000, 10).unwrap();
        sched.bypass_clients.insert(c(9));
        let dump = sched.dump();
        let lines: Vec<&str> = dump.lines().collect();
        assert_eq!(lines[0], "FRAME 1000");
        assert_eq!(lines[1], "BYPASS 9");
        assert_eq!(lines[2], "SLOT 0 500 1,4");
        assert_eq!(lines[3], "SLOT 500 750 2");
        assert_eq!(lines[4], "SLOT 750 1000 3");
    }
}
