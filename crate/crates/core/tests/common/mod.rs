#![allow(dead_code)]

use koopsafe::qp::QpProblem;
use nalgebra::{DMatrix, DVector};
use rand::Rng;

/// One-sided form `A y ≤ b` of every inequality and finite bound.
pub fn one_sided(p: &QpProblem) -> (DMatrix<f64>, DVector<f64>) {
    let v = p.var_count();
    let mut rows: Vec<(Vec<f64>, f64)> = (0..p.row_count())
        .map(|i| (p.ineq.row(i).iter().copied().collect(), p.ineq_rhs[i]))
        .collect();
    for j in 0..v {
        if p.ub[j].is_finite() {
            let mut r = vec![0.0; v];
            r[j] = 1.0;
            rows.push((r, p.ub[j]));
        }
        if p.lb[j].is_finite() {
            let mut r = vec![0.0; v];
            r[j] = -1.0;
            rows.push((r, -p.lb[j]));
        }
    }
    let a = DMatrix::from_fn(rows.len(), v, |i, j| rows[i].0[j]);
    let b = DVector::from_iterator(rows.len(), rows.iter().map(|r| r.1));
    (a, b)
}

fn next_subset(set: &mut [usize], n: usize) -> bool {
    let k = set.len();
    for i in (0..k).rev() {
        if set[i] < n - k + i {
            set[i] += 1;
            for j in i + 1..k {
                set[j] = set[j - 1] + 1;
            }
            return true;
        }
    }
    false
}

/// Optimal objective of a strictly convex QP by enumerating active sets in
/// order of size; the first KKT point that is primal feasible with
/// non-negative multipliers is the unique optimum.
pub fn enumerate_active_sets(p: &QpProblem) -> Option<(f64, DVector<f64>)> {
    let (a, b) = one_sided(p);
    let v = p.var_count();
    let rows = a.nrows();
    for k in 0..=rows.min(v) {
        let mut set: Vec<usize> = (0..k).collect();
        loop {
            let n = v + k;
            let mut kkt = DMatrix::zeros(n, n);
            kkt.view_mut((0, 0), (v, v)).copy_from(&p.hessian);
            let mut rhs = DVector::zeros(n);
            rhs.rows_mut(0, v).copy_from(&(-&p.linear));
            for (s, &i) in set.iter().enumerate() {
                for j in 0..v {
                    kkt[(v + s, j)] = a[(i, j)];
                    kkt[(j, v + s)] = a[(i, j)];
                }
                rhs[v + s] = b[i];
            }
            // Near-singular systems (e.g. both bounds of one variable in the
            // set) can return a non-solution, so check the residual.
            let solved = kkt
                .clone()
                .lu()
                .solve(&rhs)
                .filter(|sol| (&kkt * sol - &rhs).norm() <= 1e-8 * (1.0 + rhs.norm()));
            if let Some(sol) = solved {
                let y = sol.rows(0, v).into_owned();
                let feasible = (&a * &y - &b).iter().all(|r| *r <= 1e-9);
                let duals_ok = sol.rows(v, k).iter().all(|l| *l >= -1e-9);
                if feasible && duals_ok && sol.iter().all(|x| x.is_finite()) {
                    return Some((p.objective(&y), y));
                }
            }
            if k == 0 || !next_subset(&mut set, rows) {
                break;
            }
        }
    }
    None
}

/// Feasible strictly convex instance with at most `max_vars` variables and
/// `max_rows` one-sided constraints.
pub fn random_convex_qp<R: Rng>(rng: &mut R, max_vars: usize, max_rows: usize) -> QpProblem {
    let v = rng.gen_range(2..=max_vars);
    let m = DMatrix::from_fn(v, v, |_, _| rng.gen_range(-1.0..1.0));
    let h = &m * m.transpose() + DMatrix::identity(v, v) * rng.gen_range(0.05..1.0);
    let g = DVector::from_fn(v, |_, _| rng.gen_range(-5.0..5.0));
    let center = DVector::from_fn(v, |_, _| rng.gen_range(-0.5..0.5));
    let boxed: Vec<bool> = (0..v).map(|_| rng.gen_bool(0.4)).collect();
    let box_rows = 2 * boxed.iter().filter(|b| **b).count();
    let r = rng.gen_range(1..=(max_rows - box_rows).max(1));
    let gm = DMatrix::from_fn(r, v, |_, _| rng.gen_range(-1.0..1.0));
    let hv = &gm * &center + DVector::from_fn(r, |_, _| rng.gen_range(0.05..1.0));
    let lb = DVector::from_fn(v, |j, _| {
        if boxed[j] {
            center[j] - rng.gen_range(0.1..1.0)
        } else {
            f64::NEG_INFINITY
        }
    });
    let ub = DVector::from_fn(v, |j, _| {
        if boxed[j] {
            center[j] + rng.gen_range(0.1..1.0)
        } else {
            f64::INFINITY
        }
    });
    QpProblem::new(h, g)
        .unwrap()
        .with_bounds(lb, ub)
        .unwrap()
        .with_inequalities(gm, hv)
        .unwrap()
}

/// Instance with an empty feasible set, built from one of several
/// contradiction patterns plus random extra rows.
pub fn random_infeasible_qp<R: Rng>(rng: &mut R, pattern: usize) -> QpProblem {
    let v = rng.gen_range(2..=8);
    let m = DMatrix::from_fn(v, v, |_, _| rng.gen_range(-1.0..1.0));
    let h = &m * m.transpose() + DMatrix::identity(v, v) * 0.1;
    let g = DVector::from_fn(v, |_, _| rng.gen_range(-1.0..1.0));
    let mut rows: Vec<(DVector<f64>, f64)> = Vec::new();
    let mut lb = DVector::from_element(v, f64::NEG_INFINITY);
    let mut ub = DVector::from_element(v, f64::INFINITY);
    let a1 = DVector::from_fn(v, |_, _| rng.gen_range(-1.0..1.0));
    match pattern % 3 {
        0 => {
            // a·y ≤ -c and -a·y ≤ -c.
            let c = rng.gen_range(0.1..1.0);
            rows.push((a1.clone(), -c));
            rows.push((-a1, -c));
        }
        1 => {
            // Three rows summing to zero with negative total rhs.
            let a2 = DVector::from_fn(v, |_, _| rng.gen_range(-1.0..1.0));
            let a3 = -(&a1 + &a2);
            rows.push((a1, 0.2));
            rows.push((a2, 0.3));
            rows.push((a3, -0.5 - rng.gen_range(0.1..1.0)));
        }
        _ => {
            // Box [-1, 1]ⁿ against Σ y ≥ n + margin.
            lb.fill(-1.0);
            ub.fill(1.0);
            rows.push((
                DVector::from_element(v, -1.0),
                -(v as f64) - rng.gen_range(0.1..1.0),
            ));
        }
    }
    for _ in 0..rng.gen_range(0..4) {
        let a = DVector::from_fn(v, |_, _| rng.gen_range(-1.0..1.0));
        rows.push((a, rng.gen_range(0.5..2.0)));
    }
    let gm = DMatrix::from_fn(rows.len(), v, |i, j| rows[i].0[j]);
    let hv = DVector::from_iterator(rows.len(), rows.iter().map(|r| r.1));
    QpProblem::new(h, g)
        .unwrap()
        .with_bounds(lb, ub)
        .unwrap()
        .with_inequalities(gm, hv)
        .unwrap()
}
