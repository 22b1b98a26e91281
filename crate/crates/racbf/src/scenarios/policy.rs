//! The pointwise CLF-CBF-QP control policy shared by both case studies.
//!
//! Decision vector layout: `w = [u_1..u_m, delta_0, delta_1..delta_q]`.
//! `delta_0` relaxes the fixed-time decrease condition (quadratic weight
//! `p0`), each `delta_i >= 1` scales the barrier-row class-K term and is
//! capped to keep degenerate geometry bounded.

use nalgebra::{DMatrix, DVector};

use crate::estimator::EstimatorView;
use crate::qp::{solve, QpStatus, QuadraticProgram};
use crate::safety::{fxt_clf_row, racbf_row, BarrierFunction, LyapunovFunction};
use crate::sim::{ControlPolicy, MatFn, PolicyOutput, StepStatus, VecFn};

pub const DELTA_CAP: f64 = 1e6;

/// Sampled-data guard subtracted from the shrunken barrier inside the QP
/// rows: the zero-order-hold loop otherwise rides `h_r = 0` and dips below
/// it by the per-step integration error.
pub const SAMPLING_GUARD: f64 = 1e-3;

/// Cost weights and input bounds of the controller QP.
#[derive(Debug, Clone)]
pub struct QpWeights {
    pub q_cost: DMatrix<f64>,
    pub p0: f64,
    pub p_i: Vec<f64>,
    pub u_bounds: Vec<(f64, f64)>,
}

/// Supplies the active goal certificate; phased scenarios advance their
/// internal phase here and may shape desired states by the current
/// uncertainty envelope.
pub trait ClfSource: Send {
    fn certificate(&mut self, t: f64, x: &DVector<f64>, view: &EstimatorView) -> LyapunovFunction;
    fn goal_reached(&mut self, t: f64, x: &DVector<f64>) -> bool;
}

/// Static certificate with a Euclidean goal ball.
pub struct StaticClf {
    pub lf: LyapunovFunction,
    pub goal_radius: f64,
}

impl ClfSource for StaticClf {
    fn certificate(&mut self, _t: f64, _x: &DVector<f64>, _view: &EstimatorView) -> LyapunovFunction {
        self.lf.clone()
    }

    fn goal_reached(&mut self, _t: f64, x: &DVector<f64>) -> bool {
        x.norm() <= self.goal_radius
    }
}

/// CLF-CBF-QP policy over a model view (the known fields only).
pub struct ClfCbfQpPolicy {
    pub f: VecFn,
    pub g: MatFn,
    pub delta: MatFn,
    pub barriers: Vec<BarrierFunction>,
    pub clf: Box<dyn ClfSource>,
    pub weights: QpWeights,
}

impl ClfCbfQpPolicy {
    fn dims(&self) -> (usize, usize, usize) {
        let m = self.weights.u_bounds.len();
        let q = self.barriers.len();
        (m, q, m + 1 + q)
    }
}

impl ControlPolicy for ClfCbfQpPolicy {
    fn compute(&mut self, t: f64, x: &DVector<f64>, view: &EstimatorView) -> PolicyOutput {
        let (m, q, d) = self.dims();
        let lf = self.clf.certificate(t, x, view);
        let f_x = (self.f)(x);
        let g_x = (self.g)(x);
        let delta_x = (self.delta)(x);

        let v_eval = lf.eval(x);
        let clf_row = fxt_clf_row(&lf, &v_eval, &f_x, &g_x, &delta_x, view);
        let cbf_rows: Vec<_> = self
            .barriers
            .iter()
            .map(|b| racbf_row(&b.eval(x), &f_x, &g_x, &delta_x, view))
            .collect();

        let mut h = DMatrix::zeros(d, d);
        h.view_mut((0, 0), (m, m)).copy_from(&self.weights.q_cost);
        h[(m, m)] = 2.0 * self.weights.p0;
        for i in 0..q {
            h[(m + 1 + i, m + 1 + i)] = 2.0 * self.weights.p_i[i];
        }

        let mut a = DMatrix::zeros(1 + q, d);
        let mut b = DVector::zeros(1 + q);
        for j in 0..m {
            a[(0, j)] = clf_row.u_coeffs[j];
        }
        a[(0, m)] = -1.0;
        b[0] = clf_row.rhs;
        for (i, row) in cbf_rows.iter().enumerate() {
            for j in 0..m {
                a[(1 + i, j)] = -row.u_coeffs[j];
            }
            a[(1 + i, m + 1 + i)] = -(row.h_r - SAMPLING_GUARD);
            b[1 + i] = row.constant;
        }

        let mut lb = DVector::from_element(d, f64::NEG_INFINITY);
        let mut ub = DVector::from_element(d, f64::INFINITY);
        for (j, (lo, hi)) in self.weights.u_bounds.iter().enumerate() {
            lb[j] = *lo;
            ub[j] = *hi;
        }
        for i in 0..q {
            lb[m + 1 + i] = 1.0;
            ub[m + 1 + i] = DELTA_CAP;
        }

        let qp = QuadraticProgram { h, c: DVector::zeros(d), a, b, lb, ub };
        let sol = solve(&qp);
        let status = match sol.status {
            QpStatus::Optimal => StepStatus::Optimal,
            QpStatus::Infeasible => StepStatus::Infeasible,
            QpStatus::MaxIterations => StepStatus::MaxIterations,
        };
        let (u, slacks) = if status == StepStatus::Optimal {
            (
                DVector::from_fn(m, |j, _| sol.w[j]),
                DVector::from_fn(1 + q, |j, _| sol.w[m + j]),
            )
        } else {
            (DVector::zeros(m), DVector::zeros(1 + q))
        };

        PolicyOutput {
            u,
            status,
            slacks,
            v_value: v_eval.value,
            h_r: DVector::from_fn(q, |i, _| cbf_rows[i].h_r),
            goal_reached: self.clf.goal_reached(t, x),
        }
    }
}
