//! Safety and performance certificates and the robust-adaptive constraint
//! rows fed to the controller QP.
//!
//! A barrier is evaluated together with its Lie derivatives along the model
//! fields; the worst admissible effect of the unknown parameters enters the
//! barrier row through `psi_worst_case` (a minimum over the envelope-clamped
//! parameter interval) and the performance row through its mirror
//! `phi_worst_case`.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use crate::estimator::EstimatorView;
use crate::types::{signed_pow, ParameterBox};

pub type ScalarFn = Arc<dyn Fn(&DVector<f64>) -> f64 + Send + Sync>;
pub type GradFn = Arc<dyn Fn(&DVector<f64>) -> DVector<f64> + Send + Sync>;

/// Scalar safety certificate with analytic gradient.
#[derive(Clone)]
pub struct BarrierFunction {
    pub h: ScalarFn,
    pub grad_h: GradFn,
    pub label: String,
}

impl BarrierFunction {
    pub fn new(label: impl Into<String>, h: ScalarFn, grad_h: GradFn) -> Self {
        Self { h, grad_h, label: label.into() }
    }

    pub fn eval(&self, x: &DVector<f64>) -> CertificateEval {
        CertificateEval { value: (self.h)(x), grad: (self.grad_h)(x) }
    }
}

/// Goal certificate with the fixed-time decrease gains.
#[derive(Clone)]
pub struct LyapunovFunction {
    pub v: ScalarFn,
    pub grad_v: GradFn,
    pub c1: f64,
    pub c2: f64,
    pub gamma1: f64,
    pub gamma2: f64,
}

impl LyapunovFunction {
    pub fn eval(&self, x: &DVector<f64>) -> CertificateEval {
        CertificateEval { value: (self.v)(x), grad: (self.grad_v)(x) }
    }
}

/// A certificate value and gradient at one state.
#[derive(Debug, Clone)]
pub struct CertificateEval {
    pub value: f64,
    pub grad: DVector<f64>,
}

/// Central finite-difference gradient; testing aid for checking analytic
/// gradients, never used on the control path.
pub fn fd_gradient(f: &ScalarFn, x: &DVector<f64>, step: f64) -> DVector<f64> {
    DVector::from_fn(x.len(), |i, _| {
        let mut xp = x.clone();
        let mut xm = x.clone();
        xp[i] += step;
        xm[i] -= step;
        ((f)(&xp) - (f)(&xm)) / (2.0 * step)
    })
}

/// Inputs of the worst-case parameter terms.
#[derive(Debug, Clone)]
pub struct RobustTermInputs<'a> {
    /// Row of certificate-gradient times regressor, one entry per parameter.
    pub l_delta: DVector<f64>,
    pub theta_hat: &'a DVector<f64>,
    pub eta: f64,
    pub theta_box: &'a ParameterBox,
}

/// Worst (smallest) admissible value of `l_delta . theta` over the
/// envelope interval clamped to the parameter box; separable per component,
/// so each term is the smaller of the two clamped endpoints.
pub fn psi_worst_case(inp: &RobustTermInputs) -> f64 {
    let mut total = 0.0;
    for i in 0..inp.l_delta.len() {
        let lo = inp.theta_box.clamp_component(i, inp.theta_hat[i] - inp.eta);
        let hi = inp.theta_box.clamp_component(i, inp.theta_hat[i] + inp.eta);
        let c = inp.l_delta[i];
        total += (c * lo).min(c * hi);
    }
    total
}

/// Mirror of [`psi_worst_case`]: the largest admissible value, bounding the
/// parameter effect on the decrease condition from above.
pub fn phi_worst_case(inp: &RobustTermInputs) -> f64 {
    let mut total = 0.0;
    for i in 0..inp.l_delta.len() {
        let lo = inp.theta_box.clamp_component(i, inp.theta_hat[i] - inp.eta);
        let hi = inp.theta_box.clamp_component(i, inp.theta_hat[i] + inp.eta);
        let c = inp.l_delta[i];
        total += (c * lo).max(c * hi);
    }
    total
}

/// Robust-adaptive barrier row, affine in `(u, delta_i)`:
///
/// `u_coeffs . u  >=  rhs_lower - delta_i * h_r`
///
/// equivalently `-u_coeffs . u - h_r * delta_i <= -rhs_lower` in QP form,
/// where `rhs_lower = -(L_f h + Psi - tr(Gamma^-1) eta etadot)`.
#[derive(Debug, Clone)]
pub struct CbfRow {
    pub u_coeffs: DVector<f64>,
    /// Shrunken-barrier value multiplying the row's relaxation variable.
    pub h_r: f64,
    /// Constant part `L_f h + Psi - tr(Gamma^-1) eta etadot`.
    pub constant: f64,
    /// Set when the state is already outside the shrunken set.
    pub margin_violated: bool,
}

/// Fixed-time performance row, affine in `(u, delta_0)`:
///
/// `u_coeffs . u - delta_0 <= rhs`
#[derive(Debug, Clone)]
pub struct ClfRow {
    pub u_coeffs: DVector<f64>,
    pub rhs: f64,
    pub value: f64,
}

/// Assembles the robust-adaptive barrier condition at one state from the
/// certificate evaluation and the model fields.
pub fn racbf_row(
    cert: &CertificateEval,
    f_x: &DVector<f64>,
    g_x: &DMatrix<f64>,
    delta_x: &DMatrix<f64>,
    view: &EstimatorView,
) -> CbfRow {
    let grad_row = cert.grad.transpose();
    let l_f = (&grad_row * f_x)[(0, 0)];
    let l_g = (&grad_row * g_x).transpose();
    let l_delta = (&grad_row * delta_x).transpose();
    let psi = psi_worst_case(&RobustTermInputs {
        l_delta,
        theta_hat: &view.theta_hat,
        eta: view.eta,
        theta_box: &view.theta_box,
    });
    let h_r = cert.value - view.shrink_offset();
    let constant = l_f + psi - view.trace_gamma_inv() * view.eta * view.eta_dot;
    CbfRow { u_coeffs: l_g, h_r, constant, margin_violated: h_r < 0.0 }
}

/// Assembles the fixed-time decrease condition at one state. Powers of the
/// certificate are sign-preserving so the condition relaxes smoothly inside
/// the goal set.
pub fn fxt_clf_row(
    lf: &LyapunovFunction,
    cert: &CertificateEval,
    f_x: &DVector<f64>,
    g_x: &DMatrix<f64>,
    delta_x: &DMatrix<f64>,
    view: &EstimatorView,
) -> ClfRow {
    let grad_row = cert.grad.transpose();
    let l_f = (&grad_row * f_x)[(0, 0)];
    let l_g = (&grad_row * g_x).transpose();
    let l_delta = (&grad_row * delta_x).transpose();
    let phi = phi_worst_case(&RobustTermInputs {
        l_delta,
        theta_hat: &view.theta_hat,
        eta: view.eta,
        theta_box: &view.theta_box,
    });
    let v = cert.value;
    let rhs = -l_f - phi - lf.c1 * signed_pow(v, lf.gamma1) - lf.c2 * signed_pow(v, lf.gamma2);
    ClfRow { u_coeffs: l_g, rhs, value: v }
}
