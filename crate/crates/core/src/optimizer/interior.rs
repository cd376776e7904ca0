//! Primal-dual interior-point solver for the allocation problem.
//!
//! The problem is a separable concave maximization over linear inequality
//! constraints and nonnegative variables, small enough (tens of variables)
//! for dense Newton steps. We follow the central path of
//!
//!   minimize f(u)  s.t.  A u <= b,  u >= 0
//!
//! with f = -objective, driving the perturbed complementarity products to
//! zero. Each iteration solves the reduced normal equations with a Cholesky
//! factorization. The returned `kkt_residual` is the maximum of stationarity,
//! complementarity and feasibility violations, scaled by the largest utility
//! weight so that rescaling all weights rescales the certificate too.

use nalgebra::{Cholesky, DMatrix, DVector};

use super::{AllocationProblem, AllocationSolution, OptimizerError};

const MAX_ITERS: usize = 400;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Class {
    WanDown,
    WanUp,
    Lan,
}

/// Maps (client, active class) pairs and set activations onto a flat
/// variable vector: allocation variables first, then one entry per column.
struct VarMap {
    entries: Vec<(usize, Class)>,
    columns: usize,
}

impl VarMap {
    fn build(p: &AllocationProblem) -> Self {
        let mut entries = Vec::new();
        for (j, d) in p.demand.iter().enumerate() {
            if d.wan_down {
                entries.push((j, Class::WanDown));
            }
            if d.wan_up {
                entries.push((j, Class::WanUp));
            }
            if d.lan {
                entries.push((j, Class::Lan));
            }
        }
        Self {
            entries,
            columns: p.matrix.column_count(),
        }
    }

    fn len(&self) -> usize {
        self.entries.len() + self.columns
    }

    fn a_index(&self, k: usize) -> usize {
        self.entries.len() + k
    }

    fn weight(&self, p: &AllocationProblem, i: usize) -> f64 {
        let (j, class) = self.entries[i];
        match class {
            Class::WanDown => p.weights[j].eta,
            Class::WanUp => p.weights[j].xi,
            Class::Lan => p.weights[j].delta,
        }
    }
}

/// Builds the inequality system A u <= b.
fn build_constraints(p: &AllocationProblem, vars: &VarMap) -> (DMatrix<f64>, DVector<f64>) {
    let n = vars.len();
    let mut rows: Vec<Vec<f64>> = Vec::new();
    let mut b: Vec<f64> = Vec::new();

    // WAN inbound: sum (x + alpha y) v <= r_in.
    let mut row = vec![0.0; n];
    for (i, &(j, class)) in vars.entries.iter().enumerate() {
        row[i] = match class {
            Class::WanDown => p.v[j],
            Class::WanUp => p.alpha * p.v[j],
            Class::Lan => 0.0,
        };
    }
    rows.push(row);
    b.push(p.r_in);

    // WAN outbound: sum (alpha x + y) v <= r_out.
    let mut row = vec![0.0; n];
    for (i, &(j, class)) in vars.entries.iter().enumerate() {
        row[i] = match class {
            Class::WanDown => p.alpha * p.v[j],
            Class::WanUp => p.v[j],
            Class::Lan => 0.0,
        };
    }
    rows.push(row);
    b.push(p.r_out);

    // Per client with demand: x + y + z - sum_k M_jk a_k <= 0.
    for (j, d) in p.demand.iter().enumerate() {
        if !d.any() {
            continue;
        }
        let mut row = vec![0.0; n];
        for (i, &(cj, _)) in vars.entries.iter().enumerate() {
            if cj == j {
                row[i] = 1.0;
            }
        }
        for k in p.matrix.columns_of(p.clients[j]) {
            row[vars.a_index(k)] = -1.0;
        }
        rows.push(row);
        b.push(0.0);
    }

    // Activation budget: sum a <= 1.
    let mut row = vec![0.0; n];
    for k in 0..vars.columns {
        row[vars.a_index(k)] = 1.0;
    }
    rows.push(row);
    b.push(1.0);

    if p.include_aggregate_time_constraint {
        let mut row = vec![0.0; n];
        for i in 0..vars.entries.len() {
            row[i] = 1.0;
        }
        rows.push(row);
        b.push(1.0);
    }

    let m = rows.len();
    let a = DMatrix::from_fn(m, n, |r, c| rows[r][c]);
    (a, DVector::from_vec(b))
}

/// Strictly interior, primal-feasible starting point.
fn initial_point(p: &AllocationProblem, vars: &VarMap) -> DVector<f64> {
    let n = vars.len();
    let k = vars.columns.max(1);
    let a0 = 1.0 / (2.0 * k as f64);
    let mut u = DVector::from_element(n, 0.0);
    for col in 0..vars.columns {
        u[vars.a_index(col)] = a0;
    }
    let mut active_per_client = vec![0usize; p.clients.len()];
    for &(j, _) in &vars.entries {
        active_per_client[j] += 1;
    }
    for (i, &(j, _)) in vars.entries.iter().enumerate() {
        let budget = p.matrix.columns_of(p.clients[j]).len() as f64 * a0;
        u[i] = budget / (2.0 * active_per_client[j] as f64);
    }
    if p.include_aggregate_time_constraint {
        let total: f64 = (0..vars.entries.len()).map(|i| u[i]).sum();
        if total > 0.5 {
            for i in 0..vars.entries.len() {
                u[i] *= 0.5 / total;
            }
        }
    }
    // Pull WAN variables inside the access-link budget.
    let mut win = 0.0;
    let mut wout = 0.0;
    for (i, &(j, class)) in vars.entries.iter().enumerate() {
        match class {
            Class::WanDown => {
                win += u[i] * p.v[j];
                wout += p.alpha * u[i] * p.v[j];
            }
            Class::WanUp => {
                win += p.alpha * u[i] * p.v[j];
                wout += u[i] * p.v[j];
            }
            Class::Lan => {}
        }
    }
    let mut factor: f64 = 1.0;
    if win > 0.5 * p.r_in {
        factor = factor.min(0.5 * p.r_in / win);
    }
    if wout > 0.5 * p.r_out {
        factor = factor.min(0.5 * p.r_out / wout);
    }
    if factor < 1.0 {
        for (i, &(_, class)) in vars.entries.iter().enumerate() {
            if matches!(class, Class::WanDown | Class::WanUp) {
                u[i] *= factor;
            }
        }
    }
    u
}

/// Gradient and (diagonal) Hessian of f = -objective.
fn objective_derivatives(
    p: &AllocationProblem,
    vars: &VarMap,
    u: &DVector<f64>,
) -> (DVector<f64>, DVector<f64>) {
    let n = vars.len();
    let mut grad = DVector::from_element(n, 0.0);
    let mut hess = DVector::from_element(n, 0.0);
    for (i, &(j, _)) in vars.entries.iter().enumerate() {
        let w = vars.weight(p, i);
        if w == 0.0 {
            continue;
        }
        let v = p.v[j];
        let rate = v * u[i];
        grad[i] = -w * v * p.utility.derivative(rate);
        hess[i] = (-w * v * v * p.utility.second_derivative(rate)).max(0.0);
    }
    (grad, hess)
}

fn objective_value(p: &AllocationProblem, vars: &VarMap, u: &DVector<f64>) -> f64 {
    let mut total = 0.0;
    for (i, &(j, _)) in vars.entries.iter().enumerate() {
        let w = vars.weight(p, i);
        if w > 0.0 {
            total += w * p.utility.value(p.v[j] * u[i]);
        }
    }
    total
}

pub(super) fn solve(p: &AllocationProblem) -> Result<AllocationSolution, OptimizerError> {
    for (j, d) in p.demand.iter().enumerate() {
        if d.any() && p.matrix.columns_of(p.clients[j]).is_empty() {
            return Err(OptimizerError::BadParameter(format!(
                "client {} carries traffic but belongs to no independent set",
                p.clients[j]
            )));
        }
    }
    let vars = VarMap::build(p);
    let (a_mat, b) = build_constraints(p, &vars);
    let n = vars.len();
    let m = b.len();

    let wscale = (0..vars.entries.len())
        .map(|i| vars.weight(p, i))
        .fold(1.0f64, f64::max);
    let tol = 1e-9 * wscale;

    let mut u = initial_point(p, &vars);
    let mut s = &b - &a_mat * &u;
    for i in 0..m {
        if s[i] <= 0.0 {
            s[i] = 1e-9;
        }
    }
    let mu0 = wscale;
    let mut lam = DVector::from_fn(m, |i, _| mu0 / s[i]);
    let mut zdual = DVector::from_fn(n, |i, _| mu0 / u[i].max(1e-12));

    for _ in 0..MAX_ITERS {
        let (grad, hess) = objective_derivatives(p, &vars, &u);
        let r_dual = &grad + a_mat.transpose() * &lam - &zdual;
        let gap_rows: f64 = (0..m).map(|i| s[i] * lam[i]).sum();
        let gap_bounds: f64 = (0..n).map(|i| u[i] * zdual[i]).sum();
        let mu = (gap_rows + gap_bounds) / (m + n) as f64;
        let r_dual_inf = r_dual.amax();
        if mu <= tol && r_dual_inf <= 1e-8 * wscale {
            break;
        }

        let sigma: f64 = if mu > 1e-6 * wscale { 0.2 } else { 0.1 };
        let target = sigma * mu;

        // Reduced normal matrix: H + Z/U + A^T diag(lam/s) A.
        let mut mat = DMatrix::from_element(n, n, 0.0);
        for i in 0..n {
            mat[(i, i)] = hess[i] + zdual[i] / u[i];
        }
        for row in 0..m {
            let scale = lam[row] / s[row];
            for i in 0..n {
                let ai = a_mat[(row, i)];
                if ai == 0.0 {
                    continue;
                }
                for j in 0..n {
                    let aj = a_mat[(row, j)];
                    if aj != 0.0 {
                        mat[(i, j)] += scale * ai * aj;
                    }
                }
            }
        }

        // rhs = -r_dual + A^T S^-1 r2 - U^-1 r3.
        let r2 = DVector::from_fn(m, |i, _| lam[i] * s[i] - target);
        let r3 = DVector::from_fn(n, |i, _| zdual[i] * u[i] - target);
        let mut rhs = -&r_dual;
        for row in 0..m {
            let w = r2[row] / s[row];
            for i in 0..n {
                rhs[i] += a_mat[(row, i)] * w;
            }
        }
        for i in 0..n {
            rhs[i] -= r3[i] / u[i];
        }

        let du = match Cholesky::new(mat.clone()) {
            Some(chol) => chol.solve(&rhs),
            None => {
                let ridge = 1e-10 * mat.diagonal().amax().max(1.0);
                let mut damped = mat;
                for i in 0..n {
                    damped[(i, i)] += ridge;
                }
                match Cholesky::new(damped) {
                    Some(chol) => chol.solve(&rhs),
                    None => break,
                }
            }
        };

        let a_du = &a_mat * &du;
        let dlam = DVector::from_fn(m, |i, _| (-r2[i] + lam[i] * a_du[i]) / s[i]);
        let dz = DVector::from_fn(n, |i, _| (-r3[i] - zdual[i] * du[i]) / u[i]);

        let tau = if mu > 1e-3 * wscale {
            0.9
        } else if mu > 1e-6 * wscale {
            0.99
        } else {
            0.999
        };
        let mut alpha_p: f64 = 1.0;
        for i in 0..n {
            if du[i] < 0.0 {
                alpha_p = alpha_p.min(-tau * u[i] / du[i]);
            }
        }
        for i in 0..m {
            if a_du[i] > 0.0 {
                alpha_p = alpha_p.min(tau * s[i] / a_du[i]);
            }
        }
        let mut alpha_d: f64 = 1.0;
        for i in 0..m {
            if dlam[i] < 0.0 {
                alpha_d = alpha_d.min(-tau * lam[i] / dlam[i]);
            }
        }
        for i in 0..n {
            if dz[i] < 0.0 {
                alpha_d = alpha_d.min(-tau * zdual[i] / dz[i]);
            }
        }
        if alpha_p < 1e-12 && alpha_d < 1e-12 {
            break;
        }

        u += alpha_p * &du;
        lam += alpha_d * &dlam;
        zdual += alpha_d * &dz;
        s = &b - &a_mat * &u;
        for i in 0..m {
            if s[i] <= 0.0 {
                s[i] = f64::MIN_POSITIVE;
            }
        }
    }

    // Final certificate.
    let (grad, _) = objective_derivatives(p, &vars, &u);
    let r_dual = &grad + a_mat.transpose() * &lam - &zdual;
    let mut residual: f64 = r_dual.amax() / wscale;
    for i in 0..m {
        residual = residual.max((s[i] * lam[i]).abs() / wscale);
        residual = residual.max(-s[i]);
        residual = residual.max(-lam[i]);
    }
    for i in 0..n {
        residual = residual.max((u[i] * zdual[i]).abs() / wscale);
        residual = residual.max(-u[i]);
        residual = residual.max(-zdual[i]);
    }

    let nc = p.clients.len();
    let mut x = vec![0.0; nc];
    let mut y = vec![0.0; nc];
    let mut z = vec![0.0; nc];
    for (i, &(j, class)) in vars.entries.iter().enumerate() {
        match class {
            Class::WanDown => x[j] = u[i],
            Class::WanUp => y[j] = u[i],
            Class::Lan => z[j] = u[i],
        }
    }
    let a = (0..vars.columns).map(|k| u[vars.a_index(k)]).collect();

    Ok(AllocationSolution {
        x,
        y,
        z,
        a,
        objective_value: objective_value(p, &vars, &u),
        kkt_residual: residual,
    })
}

#[cfg(test)]
mod tests {
    use super::super::tests::four_client_lan_problem;
    use super::*;

    #[test]
    fn solver_is_deterministic() {
        let p = four_client_lan_problem();
        let s1 = solve(&p).unwrap();
        let s2 = solve(&p).unwrap();
        assert_eq!(s1, s2);
    }

    #[test]
    fn constraint_rows_have_expected_shape() {
        let p = four_client_lan_problem();
        let vars = VarMap::build(&p);
        let (a, b) = build_constraints(&p, &vars);
        // 2 WAN rows + 4 client rows + activation budget.
        assert_eq!(a.nrows(), 7);
        assert_eq!(b.len(), 7);
        assert_eq!(a.ncols(), 4 + 3);
    }
}
