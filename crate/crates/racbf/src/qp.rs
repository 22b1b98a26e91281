//! Dense convex quadratic programming for the per-step controller.
//!
//! Problems are tiny (six variables, around a dozen rows) and solved once per
//! control step, so the solver is a dual active-set iteration working from
//! the unconstrained minimum: no feasible starting point is needed and
//! primal infeasibility falls out of the dual step test. Variables are
//! equilibrated by the cost diagonal and rows normalized to unit infinity
//! norm before iterating; all reported quantities refer to the original data.

use nalgebra::{DMatrix, DVector};

const FEAS_TOL: f64 = 1e-10;
const STEP_TOL: f64 = 1e-11;
const DUAL_TOL: f64 = 1e-12;

/// Dense inequality-constrained QP
/// `min 0.5 w^T H w + c^T w  s.t.  A w <= b,  lb <= w <= ub`.
///
/// On the controller path the decision layout is `w = [u; delta_0; delta_i..]`.
#[derive(Debug, Clone)]
pub struct QuadraticProgram {
    pub h: DMatrix<f64>,
    pub c: DVector<f64>,
    pub a: DMatrix<f64>,
    pub b: DVector<f64>,
    pub lb: DVector<f64>,
    pub ub: DVector<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QpStatus {
    Optimal,
    Infeasible,
    MaxIterations,
}

/// Solver outcome. `active_set` and `multipliers` index the combined row
/// system: the `A` rows first, then finite upper bounds, then finite lower
/// bounds, both in variable order.
#[derive(Debug, Clone)]
pub struct QpSolution {
    pub w: DVector<f64>,
    pub status: QpStatus,
    pub objective: f64,
    pub active_set: Vec<usize>,
    pub kkt_residual: f64,
    pub multipliers: DVector<f64>,
}

/// Combined inequality system (general rows plus boxed variables).
fn combined_rows(qp: &QuadraticProgram) -> (DMatrix<f64>, DVector<f64>) {
    let d = qp.h.nrows();
    let mut rows: Vec<DVector<f64>> = Vec::new();
    let mut rhs: Vec<f64> = Vec::new();
    for i in 0..qp.a.nrows() {
        rows.push(qp.a.row(i).transpose());
        rhs.push(qp.b[i]);
    }
    for j in 0..d {
        if qp.ub[j].is_finite() {
            let mut e = DVector::zeros(d);
            e[j] = 1.0;
            rows.push(e);
            rhs.push(qp.ub[j]);
        }
    }
    for j in 0..d {
        if qp.lb[j].is_finite() {
            let mut e = DVector::zeros(d);
            e[j] = -1.0;
            rows.push(e);
            rhs.push(-qp.lb[j]);
        }
    }
    let k = rows.len();
    let mut a = DMatrix::zeros(k, d);
    for (i, r) in rows.iter().enumerate() {
        a.set_row(i, &r.transpose());
    }
    (a, DVector::from_vec(rhs))
}

/// Worst KKT residual of `(w, multipliers)` for the combined row system:
/// stationarity, primal violation, dual negativity and complementarity.
pub fn kkt_residual(qp: &QuadraticProgram, w: &DVector<f64>, multipliers: &DVector<f64>) -> f64 {
    let (a_all, b_all) = combined_rows(qp);
    assert_eq!(multipliers.len(), a_all.nrows());
    let stat = (&qp.h * w + &qp.c + a_all.transpose() * multipliers).amax();
    let slack = &a_all * w - &b_all;
    let pviol = slack.iter().cloned().fold(0.0f64, f64::max);
    let dneg = multipliers.iter().map(|l| -l).fold(0.0f64, f64::max);
    let comp = slack
        .iter()
        .zip(multipliers.iter())
        .map(|(s, l)| (s * l).abs())
        .fold(0.0f64, f64::max);
    stat.max(pviol).max(dneg).max(comp)
}

fn objective(qp: &QuadraticProgram, w: &DVector<f64>) -> f64 {
    0.5 * (w.transpose() * &qp.h * w)[(0, 0)] + qp.c.dot(w)
}

struct Scaled {
    h: DMatrix<f64>,
    c: DVector<f64>,
    rows: DMatrix<f64>,
    rhs: DVector<f64>,
    var_scale: DVector<f64>,
    row_scale: DVector<f64>,
}

fn scale_problem(qp: &QuadraticProgram) -> Scaled {
    let d = qp.h.nrows();
    let (a_all, b_all) = combined_rows(qp);
    let diag_floor = 1e-12 * (1.0 + qp.h.diagonal().amax());
    let var_scale = DVector::from_fn(d, |j, _| 1.0 / qp.h[(j, j)].max(diag_floor).sqrt());
    let mut h = DMatrix::zeros(d, d);
    for i in 0..d {
        for j in 0..d {
            // Symmetrize while scaling.
            h[(i, j)] = 0.5 * (qp.h[(i, j)] + qp.h[(j, i)]) * var_scale[i] * var_scale[j];
        }
    }
    let c = DVector::from_fn(d, |j, _| qp.c[j] * var_scale[j]);
    let k = a_all.nrows();
    let mut rows = DMatrix::zeros(k, d);
    let mut rhs = DVector::zeros(k);
    let mut row_scale = DVector::from_element(k, 1.0);
    for i in 0..k {
        let scaled_row = DVector::from_fn(d, |j, _| a_all[(i, j)] * var_scale[j]);
        let norm = scaled_row.amax();
        let s = if norm > 0.0 { norm } else { 1.0 };
        row_scale[i] = s;
        rows.set_row(i, &(scaled_row / s).transpose());
        rhs[i] = b_all[i] / s;
    }
    Scaled { h, c, rows, rhs, var_scale, row_scale }
}

fn cholesky_with_ridge(h: &DMatrix<f64>) -> nalgebra::Cholesky<f64, nalgebra::Dyn> {
    let d = h.nrows();
    let mut ridge = 0.0;
    loop {
        let m = if ridge == 0.0 {
            h.clone()
        } else {
            h + DMatrix::identity(d, d) * ridge
        };
        if let Some(ch) = nalgebra::Cholesky::new(m) {
            return ch;
        }
        ridge = if ridge == 0.0 { 1e-10 } else { ridge * 100.0 };
        assert!(ridge < 1.0, "cost matrix is not positive semidefinite");
    }
}

/// Solves the QP by dual active-set iteration.
///
/// Deterministic: the most violated row enters first, ties broken by lowest
/// row index, and blocked multipliers leave by lowest row index.
pub fn solve(qp: &QuadraticProgram) -> QpSolution {
    let d = qp.h.nrows();
    let s = scale_problem(qp);
    let k = s.rows.nrows();
    let chol = cholesky_with_ridge(&s.h);

    let mut x = -chol.solve(&s.c);
    let mut active: Vec<usize> = Vec::new();
    let mut lam: Vec<f64> = Vec::new();
    let max_iter = 100 * d.max(1);
    let mut iters = 0usize;

    let finish = |x: &DVector<f64>, active: &[usize], lam: &[f64], status: QpStatus| {
        let w = DVector::from_fn(d, |j, _| x[j] * s.var_scale[j]);
        let mut multipliers = DVector::zeros(k);
        for (j, &idx) in active.iter().enumerate() {
            multipliers[idx] = lam[j] / s.row_scale[idx];
        }
        let mut sorted = active.to_vec();
        sorted.sort_unstable();
        let kkt = if status == QpStatus::Optimal {
            kkt_residual(qp, &w, &multipliers)
        } else {
            f64::INFINITY
        };
        QpSolution {
            objective: objective(qp, &w),
            w,
            status,
            active_set: sorted,
            kkt_residual: kkt,
            multipliers,
        }
    };

    loop {
        // Most violated inactive row; ties go to the lowest index.
        let mut entering = None;
        let mut worst = FEAS_TOL;
        for i in 0..k {
            if active.contains(&i) {
                continue;
            }
            let v = s.rows.row(i).transpose().dot(&x) - s.rhs[i];
            if v > worst {
                worst = v;
                entering = Some(i);
            }
        }
        let Some(idx) = entering else {
            return finish(&x, &active, &lam, QpStatus::Optimal);
        };
        let np = s.rows.row(idx).transpose();
        let mut lam_new = 0.0;

        loop {
            iters += 1;
            if iters > max_iter {
                return finish(&x, &active, &lam, QpStatus::MaxIterations);
            }
            let z0 = chol.solve(&np);
            let (z, r) = if active.is_empty() {
                (z0, Vec::new())
            } else {
                let na = active.len();
                let mut n_mat = DMatrix::zeros(d, na);
                for (j, &ai) in active.iter().enumerate() {
                    n_mat.set_column(j, &s.rows.row(ai).transpose());
                }
                let hn = chol.solve(&n_mat);
                let m = n_mat.transpose() * &hn;
                let rhs = n_mat.transpose() * &z0;
                let r_vec = nalgebra::Cholesky::new(m)
                    .map(|ch| ch.solve(&rhs))
                    .unwrap_or_else(|| DVector::zeros(na));
                let z = &z0 - &hn * &r_vec;
                (z, r_vec.iter().cloned().collect())
            };

            // Dual blocking step over active rows with positive dual rate.
            let mut t1 = f64::INFINITY;
            let mut blocking = None;
            for (j, &rj) in r.iter().enumerate() {
                if rj > DUAL_TOL {
                    let ratio = lam[j] / rj;
                    if ratio < t1 - 1e-15 || (ratio < t1 + 1e-15 && blocking.is_some_and(|b: usize| active[j] < active[b])) {
                        t1 = ratio;
                        blocking = Some(j);
                    }
                }
            }

            // Full primal step to the entering row.
            let viol = np.dot(&x) - s.rhs[idx];
            let denom = np.dot(&z);
            let t2 = if z.amax() <= STEP_TOL || denom <= STEP_TOL {
                f64::INFINITY
            } else {
                viol / denom
            };

            if !t1.is_finite() && !t2.is_finite() {
                return finish(&x, &active, &lam, QpStatus::Infeasible);
            }
            let t = t1.min(t2);
            if t.is_finite() && t > 0.0 {
                x -= &z * t;
            }
            lam_new += t;
            for (j, &rj) in r.iter().enumerate() {
                lam[j] -= t * rj;
            }

            if t2 <= t1 {
                active.push(idx);
                lam.push(lam_new);
                break;
            }
            let j = blocking.expect("finite dual step implies a blocking row");
            active.remove(j);
            lam.remove(j);
        }
    }
}
