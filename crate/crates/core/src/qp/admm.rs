use std::time::Instant;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn, SymmetricEigen};
use serde::{Deserialize, Serialize};

use super::{Certificate, QpOutcome, QpProblem, QpStatus};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct QpSettings {
    /// Initial step parameter.
    pub rho: f64,
    pub sigma: f64,
    /// Over-relaxation factor in (0, 2).
    pub alpha: f64,
    pub eps_abs: f64,
    pub eps_rel: f64,
    /// Tolerance of the infeasibility test on the dual iterate difference.
    pub eps_infeasible: f64,
    pub max_iter: usize,
    pub check_interval: usize,
    pub adaptive_rho: bool,
    pub adaptive_interval: usize,
    pub scaling_iters: usize,
    pub polish: bool,
}

impl Default for QpSettings {
    fn default() -> Self {
        Self {
            rho: 0.1,
            sigma: 1e-6,
            alpha: 1.6,
            eps_abs: 1e-6,
            eps_rel: 1e-6,
            eps_infeasible: 1e-5,
            max_iter: 4000,
            check_interval: 25,
            adaptive_rho: true,
            adaptive_interval: 25,
            scaling_iters: 4,
            polish: true,
        }
    }
}

const RHO_MIN: f64 = 1e-6;
const RHO_MAX: f64 = 1e6;
const EQ_RHO_FACTOR: f64 = 1e3;

/// Stateless dense solver; one instance may be reused for any number of
/// problems.
#[derive(Debug, Clone, Default)]
pub struct QpSolver {
    pub settings: QpSettings,
}

/// Problem in the form `l ≤ C y ≤ u` with `C = [G; I]`, after equilibration.
struct Scaled {
    p: DMatrix<f64>,
    q: DVector<f64>,
    c: DMatrix<f64>,
    l: DVector<f64>,
    u: DVector<f64>,
    /// Variable scaling: `y = d ∘ ỹ`.
    d: DVector<f64>,
    /// Row scaling: `C̃ = diag(e) C diag(d)`.
    e: DVector<f64>,
    cost: f64,
}

fn stacked(problem: &QpProblem) -> (DMatrix<f64>, DVector<f64>, DVector<f64>) {
    let v = problem.var_count();
    let r = problem.row_count();
    let mut c = DMatrix::zeros(r + v, v);
    c.view_mut((0, 0), (r, v)).copy_from(&problem.ineq);
    c.view_mut((r, 0), (v, v)).fill_with_identity();
    let mut l = DVector::from_element(r + v, f64::NEG_INFINITY);
    l.rows_mut(r, v).copy_from(&problem.lb);
    let mut u = DVector::zeros(r + v);
    u.rows_mut(0, r).copy_from(&problem.ineq_rhs);
    u.rows_mut(r, v).copy_from(&problem.ub);
    (c, l, u)
}

fn limit_scale(x: f64) -> f64 {
    if x < 1e-4 {
        1.0
    } else {
        x.min(1e4)
    }
}

fn equilibrate(problem: &QpProblem, iters: usize) -> Scaled {
    let (mut c, l, u) = stacked(problem);
    let mut p = problem.hessian.clone();
    let mut q = problem.linear.clone();
    let v = p.nrows();
    let m = c.nrows();
    let mut d = DVector::from_element(v, 1.0);
    let mut e = DVector::from_element(m, 1.0);
    let mut cost = 1.0;
    for _ in 0..iters {
        let dv = DVector::from_fn(v, |j, _| {
            let pc = p.column(j).amax();
            let cc = c.column(j).amax();
            1.0 / limit_scale(pc.max(cc)).sqrt()
        });
        let mut row_max = DVector::<f64>::zeros(m);
        for col in c.column_iter() {
            for (r, x) in row_max.iter_mut().zip(col.iter()) {
                *r = r.max(x.abs());
            }
        }
        let ev = row_max.map(|x| 1.0 / limit_scale(x).sqrt());
        for (j, (mut pc, mut cc)) in p.column_iter_mut().zip(c.column_iter_mut()).enumerate() {
            pc.component_mul_assign(&dv);
            pc *= dv[j];
            cc.component_mul_assign(&ev);
            cc *= dv[j];
        }
        q.component_mul_assign(&dv);
        d.component_mul_assign(&dv);
        e.component_mul_assign(&ev);
        let mean_col = (0..v).map(|j| p.column(j).amax()).sum::<f64>() / v as f64;
        let gamma = 1.0 / limit_scale(mean_col).max(limit_scale(q.amax()));
        p *= gamma;
        q *= gamma;
        cost *= gamma;
    }
    let l = l.component_mul(&e);
    let u = u.component_mul(&e);
    Scaled {
        p,
        q,
        c,
        l,
        u,
        d,
        e,
        cost,
    }
}

fn row_rhos(l: &DVector<f64>, u: &DVector<f64>, rho: f64) -> DVector<f64> {
    DVector::from_fn(l.len(), |i, _| {
        if l[i] == f64::NEG_INFINITY && u[i] == f64::INFINITY {
            RHO_MIN
        } else if u[i] - l[i] < 1e-12 {
            EQ_RHO_FACTOR * rho
        } else {
            rho
        }
    })
}

fn factor(s: &Scaled, rows: usize, rhos: &DVector<f64>, sigma: f64) -> Result<Cholesky<f64, Dyn>> {
    let v = s.p.nrows();
    let g = s.c.rows(0, rows);
    let mut rg = g.into_owned();
    for (i, mut row) in rg.row_iter_mut().enumerate() {
        row *= rhos[i];
    }
    let mut k = &s.p + g.tr_mul(&rg);
    for j in 0..v {
        let d = s.c[(rows + j, j)];
        k[(j, j)] += sigma + rhos[rows + j] * d * d;
    }
    Cholesky::new(k)
        .ok_or_else(|| Error::NotConvex("iteration matrix is not positive definite".into()))
}

fn clamp(x: &DVector<f64>, l: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
    DVector::from_fn(x.len(), |i, _| x[i].max(l[i]).min(u[i]))
}

/// Maps a dual difference on the stacked rows to a one-sided certificate.
fn certificate_from_dual(problem: &QpProblem, dy: &DVector<f64>) -> Certificate {
    let r = problem.row_count();
    let v = problem.var_count();
    let mut cert = Certificate {
        rows: vec![0.0; r],
        upper: vec![0.0; v],
        lower: vec![0.0; v],
    };
    for i in 0..r {
        if dy[i] > 0.0 && problem.ineq_rhs[i].is_finite() {
            cert.rows[i] = dy[i];
        }
    }
    for j in 0..v {
        let y = dy[r + j];
        if y > 0.0 && problem.ub[j].is_finite() {
            cert.upper[j] = y;
        } else if y < 0.0 && problem.lb[j].is_finite() {
            cert.lower[j] = -y;
        }
    }
    let norm = cert
        .rows
        .iter()
        .chain(&cert.upper)
        .chain(&cert.lower)
        .fold(0.0f64, |m, x| m.max(*x));
    if norm > 0.0 {
        for x in cert
            .rows
            .iter_mut()
            .chain(cert.upper.iter_mut())
            .chain(cert.lower.iter_mut())
        {
            *x /= norm;
        }
    }
    cert
}

/// A row that no point of the bound box can satisfy on its own. Its
/// certificate is exact, so the iteration can be skipped.
fn single_row_certificate(problem: &QpProblem) -> Option<Certificate> {
    let v = problem.var_count();
    for i in 0..problem.row_count() {
        let h = problem.ineq_rhs[i];
        let mut lowest = 0.0;
        let mut bounded = true;
        for j in 0..v {
            let g = problem.ineq[(i, j)];
            let edge = if g > 0.0 {
                problem.lb[j]
            } else if g < 0.0 {
                problem.ub[j]
            } else {
                continue;
            };
            if !edge.is_finite() {
                bounded = false;
                break;
            }
            lowest += g * edge;
        }
        if !bounded || lowest - h <= 1e-9 * (1.0 + h.abs()) {
            continue;
        }
        let mut cert = Certificate {
            rows: vec![0.0; problem.row_count()],
            upper: vec![0.0; v],
            lower: vec![0.0; v],
        };
        cert.rows[i] = 1.0;
        for j in 0..v {
            let g = problem.ineq[(i, j)];
            if g > 0.0 {
                cert.lower[j] = g;
            } else if g < 0.0 {
                cert.upper[j] = -g;
            }
        }
        let norm = cert
            .rows
            .iter()
            .chain(&cert.upper)
            .chain(&cert.lower)
            .fold(0.0f64, |m, x| m.max(*x));
        for x in cert
            .rows
            .iter_mut()
            .chain(cert.upper.iter_mut())
            .chain(cert.lower.iter_mut())
        {
            *x /= norm;
        }
        if cert.verify(problem) {
            return Some(cert);
        }
    }
    None
}

/// Projects the certificate onto the null space of `Aᵀ` restricted to its
/// support, which removes the residual left by an inexact dual iterate.
fn refine_certificate(problem: &QpProblem, cert: &Certificate) -> Option<Certificate> {
    let v = problem.var_count();
    let r = problem.row_count();
    // (kind, index): 0 = ineq row, 1 = upper bound, 2 = lower bound.
    let mut support = Vec::new();
    for (i, &x) in cert.rows.iter().enumerate() {
        if x > 1e-7 {
            support.push((0, i, x));
        }
    }
    for j in 0..v {
        if cert.upper[j] > 1e-7 {
            support.push((1, j, cert.upper[j]));
        }
        if cert.lower[j] > 1e-7 {
            support.push((2, j, cert.lower[j]));
        }
    }
    if support.is_empty() {
        return None;
    }
    let k = support.len();
    let a = DMatrix::from_fn(k, v, |s, col| {
        let (kind, idx, _) = support[s];
        match kind {
            0 => problem.ineq[(idx, col)],
            1 => f64::from(u8::from(col == idx)),
            _ => -f64::from(u8::from(col == idx)),
        }
    });
    let gram = &a * a.transpose();
    let eig = SymmetricEigen::new(gram);
    let top = eig.eigenvalues.amax().max(1.0);
    let xi = DVector::from_iterator(k, support.iter().map(|s| s.2));
    let mut projected = DVector::zeros(k);
    for (idx, lam) in eig.eigenvalues.iter().enumerate() {
        if *lam <= 1e-10 * top {
            let vec = eig.eigenvectors.column(idx);
            projected += vec * vec.dot(&xi);
        }
    }
    let norm = projected.amax();
    if norm == 0.0 || projected.min() < -1e-9 * norm {
        return None;
    }
    let mut out = Certificate {
        rows: vec![0.0; r],
        upper: vec![0.0; v],
        lower: vec![0.0; v],
    };
    for (s, &(kind, idx, _)) in support.iter().enumerate() {
        let val = (projected[s] / norm).max(0.0);
        match kind {
            0 => out.rows[idx] = val,
            1 => out.upper[idx] = val,
            _ => out.lower[idx] = val,
        }
    }
    Some(out)
}

/// Dual-difference infeasibility test on unscaled quantities.
fn infeasibility_test(
    problem: &QpProblem,
    c: &DMatrix<f64>,
    l: &DVector<f64>,
    u: &DVector<f64>,
    dy: &DVector<f64>,
    eps: f64,
) -> bool {
    let norm = dy.amax();
    if norm < 1e-30 {
        return false;
    }
    let mut support = 0.0;
    for i in 0..dy.len() {
        let y = dy[i];
        if y > 0.0 {
            if u[i].is_infinite() {
                if y > eps * norm {
                    return false;
                }
            } else {
                support += u[i] * y;
            }
        } else if y < 0.0 {
            if l[i].is_infinite() {
                if -y > eps * norm {
                    return false;
                }
            } else {
                support += l[i] * y;
            }
        }
    }
    let _ = problem;
    c.tr_mul(dy).amax() <= eps * norm && support < -eps * norm
}

/// Active-set refinement: solves the equality-constrained KKT system on a
/// guessed active set, then swaps rows until primal and dual signs agree.
fn polish(
    problem: &QpProblem,
    c: &DMatrix<f64>,
    l: &DVector<f64>,
    u: &DVector<f64>,
    z: &DVector<f64>,
    y: &DVector<f64>,
    tol: f64,
) -> Option<DVector<f64>> {
    let m = c.nrows();
    let v = problem.var_count();
    // +1 upper active, -1 lower active, 0 inactive.
    let mut side = vec![0i8; m];
    for i in 0..m {
        if u[i] - l[i] < 1e-12 || (l[i].is_finite() && z[i] - l[i] < -y[i]) {
            side[i] = -1;
        } else if u[i].is_finite() && u[i] - z[i] < y[i] {
            side[i] = 1;
        }
    }
    let h = &problem.hessian;
    let g = &problem.linear;
    for _ in 0..(2 * m + 10).min(60) {
        let active: Vec<usize> = (0..m).filter(|&i| side[i] != 0).collect();
        let k = active.len();
        let n = v + k;
        let mut kkt = DMatrix::zeros(n, n);
        kkt.view_mut((0, 0), (v, v)).copy_from(h);
        let mut rhs = DVector::zeros(n);
        rhs.rows_mut(0, v).copy_from(&(-g));
        for (a, &i) in active.iter().enumerate() {
            for j in 0..v {
                kkt[(v + a, j)] = c[(i, j)];
                kkt[(j, v + a)] = c[(i, j)];
            }
            rhs[v + a] = if side[i] > 0 { u[i] } else { l[i] };
        }
        let delta = 1e-9;
        let mut reg = kkt.clone();
        for i in 0..v {
            reg[(i, i)] += delta;
        }
        for i in v..n {
            reg[(i, i)] -= delta;
        }
        let lu = reg.lu();
        let mut sol = lu.solve(&rhs)?;
        for _ in 0..5 {
            let resid = &rhs - &kkt * &sol;
            sol += lu.solve(&resid)?;
        }
        if sol.iter().any(|x| !x.is_finite()) {
            return None;
        }
        let x = sol.rows(0, v).into_owned();
        let cx = c * &x;
        // Most wrong-signed multiplier first, then most violated row.
        let mut worst_dual = (tol, None);
        for (a, &i) in active.iter().enumerate() {
            if u[i] - l[i] < 1e-12 {
                continue;
            }
            let wrong = -f64::from(side[i]) * sol[v + a];
            if wrong > worst_dual.0 {
                worst_dual = (wrong, Some(i));
            }
        }
        if let (_, Some(i)) = worst_dual {
            side[i] = 0;
            continue;
        }
        let mut worst_primal = (tol, None);
        for i in 0..m {
            if side[i] != 0 {
                continue;
            }
            if cx[i] - u[i] > worst_primal.0 {
                worst_primal = (cx[i] - u[i], Some((i, 1)));
            }
            if l[i] - cx[i] > worst_primal.0 {
                worst_primal = (l[i] - cx[i], Some((i, -1)));
            }
        }
        match worst_primal.1 {
            Some((i, s)) => side[i] = s,
            None => return Some(x),
        }
    }
    None
}

impl QpSolver {
    pub fn new(settings: QpSettings) -> Self {
        Self { settings }
    }

    pub fn solve(
        &self,
        problem: &QpProblem,
        warm_start: Option<&DVector<f64>>,
    ) -> Result<QpOutcome> {
        let start = Instant::now();
        problem.validate()?;
        let v = problem.var_count();
        if v == 0 {
            return Err(Error::param("problem has no variables"));
        }
        let shift = 1e-10 * problem.hessian.amax().max(1.0);
        if Cholesky::new(&problem.hessian + DMatrix::identity(v, v) * shift).is_none() {
            return Err(Error::NotConvex("hessian has a negative eigenvalue".into()));
        }
        if let Some(w) = warm_start {
            if w.len() != v {
                return Err(Error::dims("warm start", v, w.len()));
            }
        }
        if let Some(cert) = single_row_certificate(problem) {
            return Ok(QpOutcome {
                status: QpStatus::PrimalInfeasible,
                solution: None,
                objective: f64::NAN,
                slack_usage: Vec::new(),
                certificate: Some(cert),
                loose_infeasible: false,
                iterations: 0,
                polished: false,
                solve_time: start.elapsed(),
            });
        }
        let st = &self.settings;
        let s = equilibrate(problem, st.scaling_iters);
        let (c_raw, l_raw, u_raw) = stacked(problem);
        let m = s.c.nrows();

        let mut rho = st.rho;
        let mut rhos = row_rhos(&s.l, &s.u, rho);
        let mut chol = factor(&s, problem.row_count(), &rhos, st.sigma)?;
        let mut x = match warm_start {
            Some(w) => w.component_div(&s.d),
            None => DVector::zeros(v),
        };
        let mut z = clamp(&(&s.c * &x), &s.l, &s.u);
        let mut y = DVector::<f64>::zeros(m);
        let mut status = QpStatus::MaxIter;
        let mut certificate = None;
        let mut loose_infeasible = false;
        let mut iterations = 0;
        let mut refine_calls = 0usize;
        let inv_d = s.d.map(|x| 1.0 / x);
        let inv_e = s.e.map(|x| 1.0 / x);

        // `C = [G; I]` after scaling: a dense block and a diagonal.
        let r = problem.row_count();
        let g_s = s.c.rows(0, r).into_owned();
        let diag = DVector::from_fn(v, |j, _| s.c[(r + j, j)]);
        let mut inv_rhos = rhos.map(|x| 1.0 / x);
        let mut w = DVector::<f64>::zeros(m);
        let mut xt = DVector::<f64>::zeros(v);
        let mut zt = DVector::<f64>::zeros(m);
        let mut dy = DVector::<f64>::zeros(m);
        for k in 1..=st.max_iter {
            iterations = k;
            for (((wi, ri), zi), yi) in w.iter_mut().zip(rhos.iter()).zip(z.iter()).zip(y.iter()) {
                *wi = ri * zi - yi;
            }
            xt.gemv_tr(1.0, &g_s, &w.rows(0, r), 0.0);
            for j in 0..v {
                xt[j] += diag[j] * w[r + j] + st.sigma * x[j] - s.q[j];
            }
            chol.solve_mut(&mut xt);
            zt.rows_mut(0, r).gemv(1.0, &g_s, &xt, 0.0);
            for j in 0..v {
                zt[r + j] = diag[j] * xt[j];
            }
            x.axpy(st.alpha, &xt, 1.0 - st.alpha);
            for i in 0..m {
                let zr = st.alpha * zt[i] + (1.0 - st.alpha) * z[i];
                let zn = (zr + y[i] * inv_rhos[i]).max(s.l[i]).min(s.u[i]);
                dy[i] = rhos[i] * (zr - zn);
                y[i] += dy[i];
                z[i] = zn;
            }

            let check = k % st.check_interval.max(1) == 0 || k == st.max_iter;
            let adapt = st.adaptive_rho && k % st.adaptive_interval.max(1) == 0;
            if !check && !adapt {
                continue;
            }
            // Unscaled residuals.
            let cx = &s.c * &x;
            let prim = (&cx - &z).component_mul(&inv_e).amax();
            let px = (&s.p * &x).component_mul(&inv_d) / s.cost;
            let cty = s.c.tr_mul(&y).component_mul(&inv_d) / s.cost;
            let qn = s.q.component_mul(&inv_d) / s.cost;
            let dual = (&px + &cty + &qn).amax();
            let prim_scale = cx
                .component_mul(&inv_e)
                .amax()
                .max(z.component_mul(&inv_e).amax());
            let dual_scale = px.amax().max(cty.amax()).max(qn.amax());
            if check {
                let eps_p = st.eps_abs + st.eps_rel * prim_scale;
                let eps_d = st.eps_abs + st.eps_rel * dual_scale;
                if prim <= eps_p && dual <= eps_d {
                    status = QpStatus::Solved;
                    break;
                }
                let dy_raw = dy.component_mul(&s.e) / s.cost;
                if infeasibility_test(problem, &c_raw, &l_raw, &u_raw, &dy_raw, st.eps_infeasible) {
                    let raw = certificate_from_dual(problem, &dy_raw);
                    refine_calls += 1;
                    let cert = if raw.verify(problem) {
                        Some(raw)
                    } else if refine_calls % 8 == 1 {
                        refine_certificate(problem, &raw).filter(|c| c.verify(problem))
                    } else {
                        None
                    };
                    if cert.is_some() {
                        status = QpStatus::PrimalInfeasible;
                        certificate = cert;
                        break;
                    }
                }
                if k == st.max_iter {
                    loose_infeasible = infeasibility_test(
                        problem,
                        &c_raw,
                        &l_raw,
                        &u_raw,
                        &dy_raw,
                        10.0 * st.eps_infeasible,
                    );
                }
            }
            if adapt && prim_scale > 0.0 && dual_scale > 0.0 {
                let ratio = ((prim / prim_scale.max(1e-30))
                    / (dual / dual_scale.max(1e-30)).max(1e-30))
                .sqrt();
                let new_rho = (rho * ratio).clamp(RHO_MIN, RHO_MAX);
                if new_rho > 5.0 * rho || new_rho < 0.2 * rho {
                    rho = new_rho;
                    rhos = row_rhos(&s.l, &s.u, rho);
                    inv_rhos = rhos.map(|x| 1.0 / x);
                    chol = factor(&s, problem.row_count(), &rhos, st.sigma)?;
                }
            }
        }

        let mut polished = false;
        let solution = match status {
            QpStatus::Solved => {
                let mut sol = x.component_mul(&s.d);
                if st.polish {
                    let z_raw = z.component_mul(&inv_e);
                    let y_raw = y.component_mul(&s.e) / s.cost;
                    if let Some(p) = polish(problem, &c_raw, &l_raw, &u_raw, &z_raw, &y_raw, 1e-9) {
                        if problem.max_violation(&p) <= st.eps_abs {
                            sol = p;
                            polished = true;
                        }
                    }
                }
                Some(sol)
            }
            _ => None,
        };
        let objective = solution.as_ref().map_or(f64::NAN, |y| problem.objective(y));
        let slack_usage = match &solution {
            Some(sol) => problem
                .slack
                .iter()
                .map(|sc| sol[sc.column].max(0.0))
                .collect(),
            None => Vec::new(),
        };
        Ok(QpOutcome {
            status,
            solution,
            objective,
            slack_usage,
            certificate,
            loose_infeasible,
            iterations,
            polished,
            solve_time: start.elapsed(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn solver() -> QpSolver {
        QpSolver::default()
    }

    fn one_dim() -> QpProblem {
        QpProblem::new(DMatrix::from_element(1, 1, 2.0), DVector::zeros(1)).unwrap()
    }

    #[test]
    fn one_dimensional_projection() {
        // min u² s.t. u ≥ 1, written as -u ≤ -1.
        let p = one_dim()
            .with_inequalities(
                DMatrix::from_element(1, 1, -1.0),
                DVector::from_element(1, -1.0),
            )
            .unwrap();
        let out = solver().solve(&p, None).unwrap();
        assert_eq!(out.status, QpStatus::Solved);
        assert!((out.solution.unwrap()[0] - 1.0).abs() < 1e-9);
        assert!(out.polished);
    }

    #[test]
    fn empty_feasible_set_is_certified() {
        let p = one_dim()
            .with_inequalities(
                DMatrix::from_row_slice(2, 1, &[1.0, -1.0]),
                DVector::from_vec(vec![-1.0, -1.0]),
            )
            .unwrap();
        let out = solver().solve(&p, None).unwrap();
        assert_eq!(out.status, QpStatus::PrimalInfeasible);
        assert!(out.counts_as_infeasible());
        assert!(out.certificate.unwrap().verify(&p));
    }

    #[test]
    fn conflicting_bounds_and_rows_are_certified() {
        // y ≤ 1 by bound, y ≥ 2 by row.
        let p = one_dim()
            .with_bounds(
                DVector::from_element(1, -1.0),
                DVector::from_element(1, 1.0),
            )
            .unwrap()
            .with_inequalities(
                DMatrix::from_element(1, 1, -1.0),
                DVector::from_element(1, -2.0),
            )
            .unwrap();
        let out = solver().solve(&p, None).unwrap();
        assert_eq!(out.status, QpStatus::PrimalInfeasible);
        assert!(out.certificate.unwrap().verify(&p));
    }

    #[test]
    fn indefinite_hessian_is_rejected() {
        let h = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -1.0]);
        let p = QpProblem::new(h, DVector::zeros(2)).unwrap();
        assert!(matches!(solver().solve(&p, None), Err(Error::NotConvex(_))));
    }

    #[test]
    fn slack_with_heavy_weight_matches_hard_problem() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let v = 4;
        let m = DMatrix::from_fn(v, v, |_, _| rng.gen_range(-1.0..1.0));
        let h = &m * m.transpose() + DMatrix::identity(v, v);
        let g = DVector::from_fn(v, |_, _| rng.gen_range(-2.0..2.0));
        let gm = DMatrix::from_fn(5, v, |_, _| rng.gen_range(-1.0..1.0));
        let hv = DVector::from_fn(5, |_, _| rng.gen_range(0.1..1.0));
        let p = QpProblem::new(h, g)
            .unwrap()
            .with_inequalities(gm, hv)
            .unwrap();
        let hard = solver().solve(&p, None).unwrap();
        let soft_p = p.add_slack(&[0, 2, 4], 1e9).unwrap();
        let soft = solver().solve(&soft_p, None).unwrap();
        let a = hard.solution.unwrap();
        let b = soft.solution.unwrap();
        assert!((a - b.rows(0, v)).amax() < 1e-5);
    }

    #[test]
    fn slack_resolves_conflicting_pair() {
        // Variables (u, s): min u² + ρ s² with u ≤ -1 + s and u ≥ 1. Both
        // terms grow with u, so u = 1 and s = u + 1 = 2.
        let p = one_dim()
            .with_inequalities(
                DMatrix::from_row_slice(2, 1, &[1.0, -1.0]),
                DVector::from_vec(vec![-1.0, -1.0]),
            )
            .unwrap();
        let s = p.add_slack(&[0], 1e6).unwrap();
        let out = solver().solve(&s, None).unwrap();
        assert_eq!(out.status, QpStatus::Solved);
        let y = out.solution.unwrap();
        assert!((y[0] - 1.0).abs() < 1e-3);
        assert!((out.slack_usage[0] - 2.0).abs() < 1e-3);
    }

    #[test]
    fn warm_start_keeps_solution() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..10 {
            let v = 6;
            let m = DMatrix::from_fn(v, v, |_, _| rng.gen_range(-1.0..1.0));
            let h = &m * m.transpose() + DMatrix::identity(v, v) * 0.1;
            let g = DVector::from_fn(v, |_, _| rng.gen_range(-2.0..2.0));
            let gm = DMatrix::from_fn(8, v, |_, _| rng.gen_range(-1.0..1.0));
            let hv = DVector::from_fn(8, |_, _| rng.gen_range(-0.2..1.0));
            let p = QpProblem::new(h, g)
                .unwrap()
                .with_bounds(
                    DVector::from_element(v, -1.0),
                    DVector::from_element(v, 1.0),
                )
                .unwrap()
                .with_inequalities(gm, hv)
                .unwrap();
            let cold = solver().solve(&p, None).unwrap();
            if cold.status != QpStatus::Solved {
                continue;
            }
            let guess = DVector::from_fn(v, |_, _| rng.gen_range(-1.0..1.0));
            let warm = solver().solve(&p, Some(&guess)).unwrap();
            assert!((cold.solution.unwrap() - warm.solution.unwrap()).amax() < 1e-6);
        }
    }

    #[test]
    fn equality_bounds_are_respected() {
        let h = DMatrix::identity(3, 3);
        let g = DVector::from_vec(vec![1.0, -1.0, 0.5]);
        let p = QpProblem::new(h, g)
            .unwrap()
            .with_bounds(
                DVector::from_vec(vec![0.3, -5.0, -5.0]),
                DVector::from_vec(vec![0.3, 5.0, 5.0]),
            )
            .unwrap();
        let out = solver().solve(&p, None).unwrap();
        let y = out.solution.unwrap();
        assert!((y[0] - 0.3).abs() < 1e-9);
        assert!((y[1] - 1.0).abs() < 1e-9 && (y[2] + 0.5).abs() < 1e-9);
    }
}
