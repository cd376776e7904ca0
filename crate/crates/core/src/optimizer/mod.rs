//! Constrained utility maximization for time slices and per-class airtime
//! shares.
//!
//! Decision variables per client j are the fractions of WLAN time given to
//! WAN downloads (x_j), WAN uploads (y_j) and LAN transfers (z_j), plus one
//! activation fraction a_k per maximal independent set. The objective is
//! sum of weight * U(fraction * v_j) over present traffic classes, U strictly
//! concave increasing. Constraints couple the WAN access link (with an ACK
//! loading factor on the reverse direction), per-client airtime against the
//! sets containing the client, and the total set activation budget.

mod interior;

use std::sync::Arc;

use serde::Serialize;
use thiserror::Error;

use crate::topology::{ClientId, IndependentSetMatrix};

/// Reverse-direction ACK bits per forward data bit: one 52-byte ACK per two
/// 1500-byte data packets.
pub const ACK_LOADING: f64 = 52.0 / 3000.0;

/// Rates at or below this floor are clamped before applying a log utility.
pub const RATE_FLOOR_MBPS: f64 = 1e-3;

/// Constraint satisfaction tolerance used throughout.
pub const FEASIBILITY_TOL: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum OptimizerError {
    #[error("no active traffic class at all: empty objective")]
    EmptyObjective,
    #[error("custom utility failed the concavity check near rate {0} Mbps")]
    NonConcaveUtility(f64),
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("invalid parameter: {0}")]
    BadParameter(String),
}

/// Utility weights of one client's traffic classes. LAN downloads and uploads
/// share one weight.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ClassWeights {
    /// WAN download weight.
    pub eta: f64,
    /// WAN upload weight.
    pub xi: f64,
    /// LAN transfer weight.
    pub delta: f64,
}

impl Default for ClassWeights {
    fn default() -> Self {
        Self {
            eta: 1.0,
            xi: 1.0,
            delta: 1.0,
        }
    }
}

/// Which traffic classes of a client currently carry traffic. Idle classes
/// are excluded from the objective and pinned to zero allocation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
pub struct DemandFlags {
    pub wan_down: bool,
    pub wan_up: bool,
    pub lan: bool,
}

impl DemandFlags {
    pub fn any(&self) -> bool {
        self.wan_down || self.wan_up || self.lan
    }
}

/// The utility function shape.
#[derive(Clone)]
pub enum Utility {
    /// Natural logarithm (proportional fairness).
    Log,
    /// Caller-supplied strictly concave increasing function.
    Custom {
        value: Arc<dyn Fn(f64) -> f64 + Send + Sync>,
        derivative: Arc<dyn Fn(f64) -> f64 + Send + Sync>,
    },
}

impl std::fmt::Debug for Utility {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Utility::Log => write!(f, "Log"),
            Utility::Custom { .. } => write!(f, "Custom"),
        }
    }
}

impl Utility {
    pub fn value(&self, rate: f64) -> f64 {
        match self {
            Utility::Log => rate.max(RATE_FLOOR_MBPS).ln(),
            Utility::Custom { value, .. } => value(rate.max(RATE_FLOOR_MBPS)),
        }
    }

    pub fn derivative(&self, rate: f64) -> f64 {
        match self {
            Utility::Log => 1.0 / rate.max(RATE_FLOOR_MBPS),
            Utility::Custom { derivative, .. } => derivative(rate.max(RATE_FLOOR_MBPS)),
        }
    }

    /// Second derivative; analytic for log, central difference otherwise.
    pub fn second_derivative(&self, rate: f64) -> f64 {
        match self {
            Utility::Log => {
                let r = rate.max(RATE_FLOOR_MBPS);
                -1.0 / (r * r)
            }
            Utility::Custom { derivative, .. } => {
                let r = rate.max(RATE_FLOOR_MBPS);
                let h = (1e-6 * r).max(1e-9);
                (derivative(r + h) - derivative(r - h)) / (2.0 * h)
            }
        }
    }
}

/// A fully assembled allocation problem.
#[derive(Debug, Clone)]
pub struct AllocationProblem {
    pub clients: Vec<ClientId>,
    /// Per-client utility weights, same order as `clients`.
    pub weights: Vec<ClassWeights>,
    /// Per-client virtual service rate, Mbps.
    pub v: Vec<f64>,
    pub demand: Vec<DemandFlags>,
    pub matrix: IndependentSetMatrix,
    /// WAN inbound capacity, Mbps.
    pub r_in: f64,
    /// WAN outbound capacity, Mbps.
    pub r_out: f64,
    /// ACK loading factor in (0, 1).
    pub alpha: f64,
    pub utility: Utility,
    /// Adds the literal aggregate airtime bound sum(x+y+z) <= 1 when true.
    /// Off by default: concurrent independent transmissions legitimately push
    /// the sum above 1 while the set activation budget already bounds medium
    /// time.
    pub include_aggregate_time_constraint: bool,
}

impl AllocationProblem {
    pub fn validate(&self) -> Result<(), OptimizerError> {
        let n = self.clients.len();
        if self.weights.len() != n || self.v.len() != n || self.demand.len() != n {
            return Err(OptimizerError::DimensionMismatch(format!(
                "clients={} weights={} v={} demand={}",
                n,
                self.weights.len(),
                self.v.len(),
                self.demand.len()
            )));
        }
        for w in &self.weights {
            if w.eta < 0.0 || w.xi < 0.0 || w.delta < 0.0 {
                return Err(OptimizerError::BadParameter("negative weight".into()));
            }
        }
        for &v in &self.v {
            if v <= 0.0 {
                return Err(OptimizerError::BadParameter(format!(
                    "service rate must be positive, got {v}"
                )));
            }
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(OptimizerError::BadParameter(format!(
                "alpha must be in (0,1), got {}",
                self.alpha
            )));
        }
        if self.r_in <= 0.0 || self.r_out <= 0.0 {
            return Err(OptimizerError::BadParameter(
                "WAN rates must be positive".into(),
            ));
        }
        if !self.demand.iter().any(|d| d.any()) {
            return Err(OptimizerError::EmptyObjective);
        }
        Ok(())
    }
}

/// Optimizer output: per-client fractions, per-set activations, and the
/// certificate residual.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AllocationSolution {
    pub x: Vec<f64>,
    pub y: Vec<f64>,
    pub z: Vec<f64>,
    pub a: Vec<f64>,
    pub objective_value: f64,
    pub kkt_residual: f64,
}

impl AllocationSolution {
    /// Total airtime fraction of client j.
    pub fn total_share(&self, j: usize) -> f64 {
        self.x[j] + self.y[j] + self.z[j]
    }
}

/// Solves the allocation problem to a KKT-certified point.
pub fn solve_allocation(p: &AllocationProblem) -> Result<AllocationSolution, OptimizerError> {
    p.validate()?;
    if let Utility::Custom { .. } = p.utility {
        check_concavity(p)?;
    }
    interior::solve(p)
}

fn check_concavity(p: &AllocationProblem) -> Result<(), OptimizerError> {
    let r_max = p.v.iter().cloned().fold(1.0f64, f64::max);
    let mut prev: Option<f64> = None;
    let steps = 64;
    for k in 0..=steps {
        let r = RATE_FLOOR_MBPS + (r_max - RATE_FLOOR_MBPS) * (k as f64 / steps as f64);
        let d = p.utility.derivative(r);
        if d <= 0.0 {
            return Err(OptimizerError::NonConcaveUtility(r));
        }
        if let Some(prev) = prev {
            if d > prev * (1.0 + 1e-9) {
                return Err(OptimizerError::NonConcaveUtility(r));
            }
        }
        prev = Some(d);
    }
    Ok(())
}

/// Weighted utility sum of a rate vector. Rates at or below the floor are
/// clamped first.
pub fn evaluate_utility(rates: &[f64], weights: &[f64], utility: &Utility) -> f64 {
    debug_assert_eq!(rates.len(), weights.len());
    rates
        .iter()
        .zip(weights)
        .map(|(&r, &w)| w * utility.value(r))
        .sum()
}

/// Slack of one constraint; negative means violated.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConstraintSlack {
    pub name: String,
    pub slack: f64,
}

/// Per-constraint slacks of a candidate solution.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FeasibilityReport {
    pub entries: Vec<ConstraintSlack>,
    /// True iff every slack is >= -FEASIBILITY_TOL.
    pub pass: bool,
    /// True when an active class ended up at (clamped) zero rate, which makes
    /// a log objective value meaningless.
    pub degenerate_log_rates: bool,
}

/// Evaluates every constraint of `p` at `s` and reports slacks.
pub fn check_feasibility(
    p: &AllocationProblem,
    s: &AllocationSolution,
) -> Result<FeasibilityReport, OptimizerError> {
    let n = p.clients.len();
    if s.x.len() != n || s.y.len() != n || s.z.len() != n {
        return Err(OptimizerError::DimensionMismatch(
            "solution/client size".into(),
        ));
    }
    if s.a.len() != p.matrix.column_count() {
        return Err(OptimizerError::DimensionMismatch(
            "solution/matrix columns".into(),
        ));
    }
    let mut entries = Vec::new();

    let wan_in: f64 = (0..n)
        .map(|j| (s.x[j] + p.alpha * s.y[j]) * p.v[j])
        .sum();
    entries.push(ConstraintSlack {
        name: "wan_inbound".into(),
        slack: p.r_in - wan_in,
    });
    let wan_out: f64 = (0..n)
        .map(|j| (p.alpha * s.x[j] + s.y[j]) * p.v[j])
        .sum();
    entries.push(ConstraintSlack {
        name: "wan_outbound".into(),
        slack: p.r_out - wan_out,
    });

    for j in 0..n {
        let cover: f64 = p
            .matrix
            .columns_of(p.clients[j])
            .iter()
            .map(|&k| s.a[k])
            .sum();
        entries.push(ConstraintSlack {
            name: format!("client_{}_airtime", p.clients[j]),
            slack: cover - s.total_share(j),
        });
    }

    let a_sum: f64 = s.a.iter().sum();
    entries.push(ConstraintSlack {
        name: "set_activation_budget".into(),
        slack: 1.0 - a_sum,
    });

    if p.include_aggregate_time_constraint {
        let total: f64 = (0..n).map(|j| s.total_share(j)).sum();
        entries.push(ConstraintSlack {
            name: "aggregate_airtime".into(),
            slack: 1.0 - total,
        });
    }

    for j in 0..n {
        entries.push(ConstraintSlack {
            name: format!("client_{}_nonneg", p.clients[j]),
            slack: s.x[j].min(s.y[j]).min(s.z[j]),
        });
    }
    entries.push(ConstraintSlack {
        name: "set_activation_nonneg".into(),
        slack: s.a.iter().cloned().fold(f64::INFINITY, f64::min),
    });

    let pass = entries.iter().all(|e| e.slack >= -FEASIBILITY_TOL);
    let mut degenerate = false;
    for j in 0..n {
        let d = p.demand[j];
        let rates = [
            (d.wan_down, s.x[j] * p.v[j]),
            (d.wan_up, s.y[j] * p.v[j]),
            (d.lan, s.z[j] * p.v[j]),
        ];
        for (active, rate) in rates {
            if active && rate <= RATE_FLOOR_MBPS {
                degenerate = true;
            }
        }
    }
    Ok(FeasibilityReport {
        entries,
        pass,
        degenerate_log_rates: degenerate,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::topology::{enumerate_maximal_independent_sets, DependenceGraph};
    use std::collections::BTreeSet;

    fn c(id: u32) -> ClientId {
        ClientId(id)
    }

    pub(crate) fn matrix_from(
        n: u32,
        edges: &[(u32, u32)],
    ) -> (DependenceGraph, IndependentSetMatrix) {
        let mut g = DependenceGraph::new((1..=n).map(c));
        for &(a, b) in edges {
            g.add_edge(c(a), c(b));
        }
        let m = enumerate_maximal_independent_sets(&g).unwrap();
        (g, m)
    }

    /// The four-client all-LAN problem whose conflict graph admits exactly
    /// the sets {1,4}, {2}, {3}.
    pub(crate) fn four_client_lan_problem() -> AllocationProblem {
        let (_, m) = matrix_from(4, &[(1, 2), (1, 3), (2, 3), (2, 4), (3, 4)]);
        assert_eq!(m.column_count(), 3);
        AllocationProblem {
            clients: (1..=4).map(c).collect(),
            weights: vec![ClassWeights::default(); 4],
            v: vec![22.0; 4],
            demand: vec![
                DemandFlags {
                    lan: true,
                    ..Default::default()
                };
                4
            ],
            matrix: m,
            r_in: 8.0,
            r_out: 8.0,
            alpha: ACK_LOADING,
            utility: Utility::Log,
            include_aggregate_time_constraint: false,
        }
    }

    #[test]
    fn four_client_lan_matches_proportional_shares() {
        let p = four_client_lan_problem();
        let s = solve_allocation(&p).unwrap();
        // Column order is {1,4}, {2}, {3}; log utility weights the shared
        // column by its two members.
        assert!((s.a[0] - 0.5).abs() < 1e-4, "a = {:?}", s.a);
        assert!((s.a[1] - 0.25).abs() < 1e-4);
        assert!((s.a[2] - 0.25).abs() < 1e-4);
        let rates: Vec<f64> = (0..4).map(|j| s.z[j] * p.v[j]).collect();
        for (got, want) in rates.iter().zip([11.0, 5.5, 5.5, 11.0]) {
            assert!((got - want).abs() < 22.0 * 1e-4, "rates = {rates:?}");
        }
        assert!(s.kkt_residual <= 1e-6, "kkt = {}", s.kkt_residual);
        // WAN classes carry no demand and must be exactly zero.
        assert!(s.x.iter().chain(s.y.iter()).all(|&v| v == 0.0));
    }

    #[test]
    fn single_client_takes_everything() {
        let (_, m) = matrix_from(1, &[]);
        let p = AllocationProblem {
            clients: vec![c(1)],
            weights: vec![ClassWeights::default()],
            v: vec![22.0],
            demand: vec![DemandFlags {
                lan: true,
                ..Default::default()
            }],
            matrix: m,
            r_in: 8.0,
            r_out: 8.0,
            alpha: ACK_LOADING,
            utility: Utility::Log,
            include_aggregate_time_constraint: false,
        };
        let s = solve_allocation(&p).unwrap();
        assert!((s.z[0] - 1.0).abs() < 1e-6);
        assert!((s.a[0] - 1.0).abs() < 1e-6);
        assert!(s.kkt_residual <= 1e-6);
    }

    #[test]
    fn wan_inbound_constraint_binds_before_wlan() {
        // Two WAN download clients sharing one set, plus a LAN pair; the
        // 8 Mbps access link caps the WAN clients at 4 Mbps each.
        let (_, m) = matrix_from(4, &[(1, 2), (1, 3), (2, 4), (3, 4)]);
        // Columns of this graph: {1,4} and {2,3}.
        assert_eq!(m.column_count(), 2);
        let p = AllocationProblem {
            clients: (1..=4).map(c).collect(),
            weights: vec![ClassWeights::default(); 4],
            v: vec![22.0; 4],
            demand: vec![
                DemandFlags {
                    lan: true,
                    ..Default::default()
                },
                DemandFlags {
                    wan_down: true,
                    ..Default::default()
                },
                DemandFlags {
                    wan_down: true,
                    ..Default::default()
                },
                DemandFlags {
                    lan: true,
                    ..Default::default()
                },
            ],
            matrix: m,
            r_in: 8.0,
            r_out: 8.0,
            alpha: ACK_LOADING,
            utility: Utility::Log,
            include_aggregate_time_constraint: false,
        };
        let s = solve_allocation(&p).unwrap();
        for j in [1usize, 2] {
            let rate = s.x[j] * p.v[j];
            assert!((rate - 4.0).abs() < 0.01, "WAN rate {rate}");
        }
        assert!(s.kkt_residual <= 1e-6);
        let report = check_feasibility(&p, &s).unwrap();
        assert!(report.pass);
    }

    #[test]
    fn no_demand_is_empty_objective() {
        let (_, m) = matrix_from(1, &[]);
        let p = AllocationProblem {
            clients: vec![c(1)],
            weights: vec![ClassWeights::default()],
            v: vec![22.0],
            demand: vec![DemandFlags::default()],
            matrix: m,
            r_in: 8.0,
            r_out: 8.0,
            alpha: ACK_LOADING,
            utility: Utility::Log,
            include_aggregate_time_constraint: false,
        };
        assert!(matches!(
            solve_allocation(&p),
            Err(OptimizerError::EmptyObjective)
        ));
    }

    #[test]
    fn non_concave_custom_utility_is_rejected() {
        let (_, m) = matrix_from(1, &[]);
        let p = AllocationProblem {
            clients: vec![c(1)],
            weights: vec![ClassWeights::default()],
            v: vec![22.0],
            demand: vec![DemandFlags {
                lan: true,
                ..Default::default()
            }],
            matrix: m,
            r_in: 8.0,
            r_out: 8.0,
            alpha: ACK_LOADING,
            utility: Utility::Custom {
                value: Arc::new(|r| r * r),
                derivative: Arc::new(|r| 2.0 * r),
            },
            include_aggregate_time_constraint: false,
        };
        assert!(matches!(
            solve_allocation(&p),
            Err(OptimizerError::NonConcaveUtility(_))
        ));
    }

    #[test]
    fn concave_custom_utility_solves() {
        let (_, m) = matrix_from(2, &[(1, 2)]);
        let p = AllocationProblem {
            clients: vec![c(1), c(2)],
            weights: vec![ClassWeights::default(); 2],
            v: vec![22.0; 2],
            demand: vec![
                DemandFlags {
                    lan: true,
                    ..Default::default()
                };
                2
            ],
            matrix: m,
            r_in: 8.0,
            r_out: 8.0,
            alpha: ACK_LOADING,
            utility: Utility::Custom {
                value: Arc::new(|r: f64| r.sqrt()),
                derivative: Arc::new(|r: f64| 0.5 / r.sqrt()),
            },
            include_aggregate_time_constraint: false,
        };
        let s = solve_allocation(&p).unwrap();
        // Symmetric clients split the frame.
        assert!((s.z[0] - 0.5).abs() < 1e-4, "z = {:?}", s.z);
        assert!((s.z[1] - 0.5).abs() < 1e-4);
        assert!(s.kkt_residual <= 1e-6);
    }

    #[test]
    fn utility_evaluation_examples() {
        let u = Utility::Log;
        let got = evaluate_utility(&[11.0, 5.5, 5.5, 11.0], &[1.0; 4], &u);
        let want = 2.0 * 11.0f64.ln() + 2.0 * 5.5f64.ln();
        assert!((got - want).abs() < 1e-9);
        assert!((want - 8.2047).abs() < 1e-3);

        assert_eq!(evaluate_utility(&[1.0], &[1.0], &u), 0.0);

        let clamped = evaluate_utility(&[0.0], &[1.0], &u);
        assert!((clamped - 1e-3f64.ln()).abs() < 1e-9);
        assert!((clamped + 6.9078).abs() < 1e-3);
    }

    #[test]
    fn feasibility_of_reference_solution_and_aggregate_toggle() {
        let mut p = four_client_lan_problem();
        let s = AllocationSolution {
            x: vec![0.0; 4],
            y: vec![0.0; 4],
            z: vec![0.5, 0.25, 0.25, 0.5],
            a: vec![0.5, 0.25, 0.25],
            objective_value: 0.0,
            kkt_residual: 0.0,
        };
        let report = check_feasibility(&p, &s).unwrap();
        assert!(report.pass, "{report:?}");
        assert!(report.entries.iter().all(|e| e.slack >= -1e-12));

        p.include_aggregate_time_constraint = true;
        let report = check_feasibility(&p, &s).unwrap();
        assert!(!report.pass);
        let agg = report
            .entries
            .iter()
            .find(|e| e.name == "aggregate_airtime")
            .unwrap();
        assert!((agg.slack + 0.5).abs() < 1e-9, "slack = {}", agg.slack);
    }

    #[test]
    fn all_zero_solution_is_feasible_but_flagged() {
        let p = four_client_lan_problem();
        let s = AllocationSolution {
            x: vec![0.0; 4],
            y: vec![0.0; 4],
            z: vec![0.0; 4],
            a: vec![0.0; 3],
            objective_value: 0.0,
            kkt_residual: 0.0,
        };
        let report = check_feasibility(&p, &s).unwrap();
        assert!(report.pass);
        assert!(report.degenerate_log_rates);
    }

    #[test]
    fn weight_scaling_leaves_argmax_unchanged() {
        let p = four_client_lan_problem();
        let base = solve_allocation(&p).unwrap();
        let mut scaled = p.clone();
        for w in &mut scaled.weights {
            w.eta *= 250.0;
            w.xi *= 250.0;
            w.delta *= 250.0;
        }
        let s = solve_allocation(&scaled).unwrap();
        for (a, b) in base.z.iter().zip(&s.z) {
            assert!((a - b).abs() < 1e-6, "{:?} vs {:?}", base.z, s.z);
        }
        for (a, b) in base.a.iter().zip(&s.a) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn permutation_of_clients_permutes_solution() {
        let p = four_client_lan_problem();
        let base = solve_allocation(&p).unwrap();

        // Reverse the client order; the conflict structure is the same, so
        // the per-client allocations must follow the permutation.
        let perm = [3usize, 2, 1, 0];
        let permuted = AllocationProblem {
            clients: perm.iter().map(|&i| p.clients[i]).collect(),
            weights: perm.iter().map(|&i| p.weights[i]).collect(),
            v: perm.iter().map(|&i| p.v[i]).collect(),
            demand: perm.iter().map(|&i| p.demand[i]).collect(),
            ..p.clone()
        };
        let s = solve_allocation(&permuted).unwrap();
        for (new_idx, &old_idx) in perm.iter().enumerate() {
            assert!(
                (s.z[new_idx] - base.z[old_idx]).abs() < 1e-6,
                "permutation mismatch: {:?} vs {:?}",
                s.z,
                base.z
            );
        }
    }

    #[test]
    fn symmetric_clients_get_equal_allocations() {
        let (_, m) = matrix_from(3, &[(1, 2), (1, 3), (2, 3)]);
        let p = AllocationProblem {
            clients: (1..=3).map(c).collect(),
            weights: vec![ClassWeights::default(); 3],
            v: vec![18.0; 3],
            demand: vec![
                DemandFlags {
                    lan: true,
                    ..Default::default()
                };
                3
            ],
            matrix: m,
            r_in: 10.0,
            r_out: 10.0,
            alpha: ACK_LOADING,
            utility: Utility::Log,
            include_aggregate_time_constraint: false,
        };
        let s = solve_allocation(&p).unwrap();
        assert!((s.z[0] - s.z[1]).abs() < 1e-6);
        assert!((s.z[1] - s.z[2]).abs() < 1e-6);
        assert!((s.z[0] - 1.0 / 3.0).abs() < 1e-4);
    }
}
