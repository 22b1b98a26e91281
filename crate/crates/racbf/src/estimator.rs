//! Signal filtering, regressor memory and the parameter adaptation laws.
//!
//! The pipeline is: second-order low-pass filters on the plant signals feed
//! exponentially-forgotten integrals `P` and `Q` of the filtered regressor,
//! which satisfy `Q = P theta` along trajectories. The residual
//! `W = P theta_hat - Q` then drives either the fixed-time adaptation law or
//! the finite-time baseline law. A closed-form envelope `eta(t)` bounds the
//! infinity-norm estimation error from the moment the memory becomes
//! informative.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::types::{lambda_max_sym, lambda_min_sym, ParameterBox};

/// Residual norms below this are treated as converged; both laws are
/// singular at `W = 0`.
pub const DEAD_ZONE: f64 = 1e-10;

/// Infinity-norm cap on the adaptation rate, guarding the Euler sub-step
/// against the rate spike directly after activation.
pub const RATE_CLAMP: f64 = 1e6;

/// Condition-number limit beyond which `P` is considered unusable.
pub const COND_LIMIT: f64 = 1e12;

/// States of the three critically damped second-order filter channels.
///
/// Each channel obeys `k_e^2 beta_f'' + 2 k_e beta_f' + beta_f = beta` with
/// unit DC gain and no overshoot. The `x` channel position state starts at
/// `x(0)` so that the filtered-dynamics identity holds exactly from t = 0;
/// the derivative states and the other channels start at zero.
#[derive(Debug, Clone)]
pub struct FilterBank {
    pub k_e: f64,
    pub x_f: DVector<f64>,
    pub xdot_f: DVector<f64>,
    pub phi_f: DVector<f64>,
    pub phidot_f: DVector<f64>,
    pub big_phi_f: DMatrix<f64>,
    pub big_phidot_f: DMatrix<f64>,
}

/// Time derivatives of all six filter states.
#[derive(Debug, Clone)]
pub struct FilterRates {
    pub x_f: DVector<f64>,
    pub xdot_f: DVector<f64>,
    pub phi_f: DVector<f64>,
    pub phidot_f: DVector<f64>,
    pub big_phi_f: DMatrix<f64>,
    pub big_phidot_f: DMatrix<f64>,
}

impl FilterBank {
    pub fn new(k_e: f64, x0: &DVector<f64>, p: usize) -> Self {
        assert!(k_e > 0.0);
        let n = x0.len();
        Self {
            k_e,
            x_f: x0.clone(),
            xdot_f: DVector::zeros(n),
            phi_f: DVector::zeros(n),
            phidot_f: DVector::zeros(n),
            big_phi_f: DMatrix::zeros(n, p),
            big_phidot_f: DMatrix::zeros(n, p),
        }
    }

    pub fn state_dim(&self) -> (usize, usize) {
        (self.x_f.len(), self.big_phi_f.ncols())
    }
}

/// Rates of the filter states for inputs `x`, `phi = f + g u`, `Phi = Delta`.
pub fn filter_rates(
    bank: &FilterBank,
    x: &DVector<f64>,
    phi: &DVector<f64>,
    big_phi: &DMatrix<f64>,
) -> FilterRates {
    let k = bank.k_e;
    let k2 = k * k;
    FilterRates {
        x_f: bank.xdot_f.clone(),
        xdot_f: (x - &bank.x_f - &bank.xdot_f * (2.0 * k)) / k2,
        phi_f: bank.phidot_f.clone(),
        phidot_f: (phi - &bank.phi_f - &bank.phidot_f * (2.0 * k)) / k2,
        big_phi_f: bank.big_phidot_f.clone(),
        big_phidot_f: (big_phi - &bank.big_phi_f - &bank.big_phidot_f * (2.0 * k)) / k2,
    }
}

/// Exponentially forgotten integrals of the filtered regressor.
#[derive(Debug, Clone)]
pub struct AuxiliaryMemory {
    pub ell_e: f64,
    pub p_mat: DMatrix<f64>,
    pub q_vec: DVector<f64>,
}

impl AuxiliaryMemory {
    pub fn new(ell_e: f64, p: usize) -> Self {
        assert!(ell_e > 0.0);
        Self {
            ell_e,
            p_mat: DMatrix::zeros(p, p),
            q_vec: DVector::zeros(p),
        }
    }
}

/// Rates of `P` and `Q`. The derivative of the filtered state comes from the
/// filter's own internal state; nothing is differentiated numerically.
pub fn aux_rates(aux: &AuxiliaryMemory, bank: &FilterBank) -> (DMatrix<f64>, DVector<f64>) {
    let residual = &bank.xdot_f - &bank.phi_f;
    let pdot = bank.big_phi_f.transpose() * &bank.big_phi_f - &aux.p_mat * aux.ell_e;
    let qdot = bank.big_phi_f.transpose() * residual - &aux.q_vec * aux.ell_e;
    (pdot, qdot)
}

/// Residual `W = P theta_hat - Q`; equals `-P theta_tilde` while `Q = P theta`.
pub fn compute_w(aux: &AuxiliaryMemory, theta_hat: &DVector<f64>) -> DVector<f64> {
    &aux.p_mat * theta_hat - &aux.q_vec
}

/// Gains of the adaptation laws and the error envelope.
///
/// `gamma` stores the diagonal of the positive-definite gain matrix. The
/// exponents are tied to `mu_e` as `gamma1e = 1 - 1/mu_e` and
/// `gamma2e = 1 + 1/mu_e`.
#[derive(Debug, Clone)]
pub struct AdaptationGains {
    pub gamma: DVector<f64>,
    pub c1e: f64,
    pub c2e: f64,
    pub mu_e: f64,
    /// Activation threshold on the smallest eigenvalue of `P`.
    pub sigma: f64,
    /// Initial infinity-norm error bound (widest span of the parameter box).
    pub vartheta: f64,
}

impl AdaptationGains {
    pub fn new(gamma: DVector<f64>, c1e: f64, c2e: f64, mu_e: f64, sigma: f64, vartheta: f64) -> Self {
        assert!(gamma.iter().all(|g| *g > 0.0));
        assert!(c1e > 0.0 && c2e > 0.0 && mu_e > 1.0 && sigma > 0.0 && vartheta >= 0.0);
        Self { gamma, c1e, c2e, mu_e, sigma, vartheta }
    }

    pub fn gamma1e(&self) -> f64 {
        1.0 - 1.0 / self.mu_e
    }

    pub fn gamma2e(&self) -> f64 {
        1.0 + 1.0 / self.mu_e
    }

    pub fn gamma_max(&self) -> f64 {
        self.gamma.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn trace_gamma_inv(&self) -> f64 {
        self.gamma.iter().map(|g| 1.0 / g).sum()
    }

    /// Worst-case initial value of the error Lyapunov function,
    /// `0.5 * eta0^T Gamma^-1 eta0` with `eta0 = vartheta * 1`.
    fn v0_bound(&self, eta0: f64) -> f64 {
        0.5 * eta0 * eta0 * self.trace_gamma_inv()
    }

    fn n_ratio(&self) -> f64 {
        (self.c2e / self.c1e).sqrt()
    }

    fn xi(&self, eta0: f64) -> f64 {
        let v0 = self.v0_bound(eta0);
        (self.n_ratio() * v0.powf(1.0 / self.mu_e)).atan()
    }
}

/// Settling-time bounds: the gain-only bound `T_b` and the tighter
/// envelope-based bound `mu_e * Xi / sqrt(c1e c2e)`.
pub fn settling_bounds(gains: &AdaptationGains) -> (f64, f64) {
    let t_b = 1.0 / (gains.c1e * (1.0 - gains.gamma1e()))
        + 1.0 / (gains.c2e * (gains.gamma2e() - 1.0));
    let t_tight = gains.mu_e * gains.xi(gains.vartheta) / (gains.c1e * gains.c2e).sqrt();
    (t_b, t_tight)
}

/// Closed-form envelope on the infinity-norm estimation error, clocked from
/// activation. Clamps to zero once the tangent bracket reaches its root.
pub fn eta(t: f64, gains: &AdaptationGains, eta0: f64) -> Result<f64> {
    if t < 0.0 {
        return Err(Error::NegativeTime { t });
    }
    let n = gains.n_ratio();
    let bracket = gains.xi(eta0) - n * (gains.c1e / gains.mu_e) * t;
    if bracket <= 0.0 {
        return Ok(0.0);
    }
    let m = 2.0 * gains.gamma_max();
    Ok((m * (bracket.tan() / n).powf(gains.mu_e)).sqrt())
}

/// Time derivative of [`eta`], consistent with the implemented envelope
/// (half the magnitude of the constant printed alongside the envelope's
/// source derivation; validated against finite differences).
pub fn eta_dot(t: f64, gains: &AdaptationGains, eta0: f64) -> Result<f64> {
    if t < 0.0 {
        return Err(Error::NegativeTime { t });
    }
    let n = gains.n_ratio();
    let bracket = gains.xi(eta0) - n * (gains.c1e / gains.mu_e) * t;
    if bracket <= 0.0 {
        return Ok(0.0);
    }
    let m = 2.0 * gains.gamma_max();
    let z = -(gains.c1e / 2.0) * m.sqrt() * n.powf(1.0 - gains.mu_e / 2.0);
    let sec2 = 1.0 / (bracket.cos() * bracket.cos());
    Ok(z * bracket.tan().powf(gains.mu_e / 2.0 - 1.0) * sec2)
}

/// Error Lyapunov value reconstructed from the memory alone:
/// `nu = 0.5 W^T P^-T Gamma^-1 P^-1 W`, which equals
/// `0.5 theta_tilde^T Gamma^-1 theta_tilde` while `Q = P theta` holds.
/// Returns `None` when `P` has no usable inverse.
pub fn nu_from_memory(
    aux: &AuxiliaryMemory,
    theta_hat: &DVector<f64>,
    gains: &AdaptationGains,
) -> Option<f64> {
    let w = compute_w(aux, theta_hat);
    let chol = nalgebra::Cholesky::new(aux.p_mat.clone())?;
    let y = chol.solve(&w);
    Some(0.5 * y.iter().zip(gains.gamma.iter()).map(|(yi, g)| yi * yi / g).sum::<f64>())
}

/// Estimator: filter bank, memory, current estimate and activation latch.
#[derive(Debug, Clone)]
pub struct EstimatorState {
    pub filter: FilterBank,
    pub aux: AuxiliaryMemory,
    pub theta_hat: DVector<f64>,
    pub activated: bool,
    pub t_activate: f64,
    pub gains: AdaptationGains,
}

impl EstimatorState {
    pub fn new(
        gains: AdaptationGains,
        k_e: f64,
        ell_e: f64,
        x0: &DVector<f64>,
        theta_hat0: DVector<f64>,
    ) -> Self {
        let p = theta_hat0.len();
        Self {
            filter: FilterBank::new(k_e, x0, p),
            aux: AuxiliaryMemory::new(ell_e, p),
            theta_hat: theta_hat0,
            activated: false,
            t_activate: f64::NAN,
            gains,
        }
    }

    /// Latches the activation flag the first time `lambda_min(P)` clears the
    /// threshold; idempotent afterwards.
    pub fn check_activation(&mut self, t: f64) -> bool {
        if !self.activated && lambda_min_sym(&self.aux.p_mat) >= self.gains.sigma {
            self.activated = true;
            self.t_activate = t;
        }
        self.activated
    }

    /// Envelope value and slope at absolute time `t` for the given mode.
    pub fn envelope(&self, t: f64, mode: EnvelopeMode) -> (f64, f64) {
        match mode {
            EnvelopeMode::Zero => (0.0, 0.0),
            EnvelopeMode::FrozenFull => (self.gains.vartheta, 0.0),
            EnvelopeMode::Adaptive => {
                if !self.activated {
                    (self.gains.vartheta, 0.0)
                } else {
                    let tau = (t - self.t_activate).max(0.0);
                    let e = eta(tau, &self.gains, self.gains.vartheta).unwrap_or(0.0);
                    let ed = eta_dot(tau, &self.gains, self.gains.vartheta).unwrap_or(0.0);
                    (e, ed)
                }
            }
        }
    }

    /// View handed to controllers. Never exposes the true parameters.
    pub fn view(&self, t: f64, mode: EnvelopeMode, theta_box: &ParameterBox) -> EstimatorView {
        let (eta, eta_dot) = self.envelope(t, mode);
        EstimatorView {
            theta_hat: self.theta_hat.clone(),
            eta,
            eta_dot,
            gamma: self.gains.gamma.clone(),
            theta_box: theta_box.clone(),
            activated: self.activated,
        }
    }
}

/// How the uncertainty envelope is presented to the controller.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EnvelopeMode {
    /// Shrinking envelope from activation (frozen at the box span before).
    Adaptive,
    /// Worst-case envelope at all times (robust baseline).
    FrozenFull,
    /// No uncertainty margin (certainty-equivalent sanity mode).
    Zero,
}

/// Which adaptation law drives the estimate.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AdaptationLaw {
    FixedTime,
    FiniteTimeBaseline,
    Frozen,
}

/// Controller-facing snapshot of the estimator.
#[derive(Debug, Clone)]
pub struct EstimatorView {
    pub theta_hat: DVector<f64>,
    pub eta: f64,
    pub eta_dot: f64,
    pub gamma: DVector<f64>,
    pub theta_box: ParameterBox,
    pub activated: bool,
}

impl EstimatorView {
    pub fn trace_gamma_inv(&self) -> f64 {
        self.gamma.iter().map(|g| 1.0 / g).sum()
    }

    /// Shrunken-barrier offset `0.5 * eta^T Gamma^-1 eta` with `eta = eta * 1`.
    pub fn shrink_offset(&self) -> f64 {
        0.5 * self.eta * self.eta * self.trace_gamma_inv()
    }
}

fn solve_p(aux: &AuxiliaryMemory, w: &DVector<f64>) -> Result<DVector<f64>> {
    let lam_min = lambda_min_sym(&aux.p_mat);
    let lam_max = lambda_max_sym(&aux.p_mat);
    let cond = if lam_min > 0.0 { lam_max / lam_min } else { f64::INFINITY };
    if !cond.is_finite() || cond > COND_LIMIT {
        return Err(Error::SingularMemory { cond });
    }
    let chol = nalgebra::Cholesky::new(aux.p_mat.clone())
        .ok_or(Error::SingularMemory { cond })?;
    Ok(chol.solve(w))
}

/// Fixed-time adaptation law. Returns the raw estimate rate; zero inside the
/// dead zone. `P` must be invertible and well conditioned.
pub fn fxts_update(state: &EstimatorState) -> Result<DVector<f64>> {
    let w = compute_w(&state.aux, &state.theta_hat);
    let p_dim = w.len();
    if w.norm() <= DEAD_ZONE {
        return Ok(DVector::zeros(p_dim));
    }
    let y = solve_p(&state.aux, &w)?;
    let g = &state.gains;
    let nu: f64 = 0.5 * y.iter().zip(g.gamma.iter()).map(|(yi, gi)| yi * yi / gi).sum::<f64>();
    let denom = w.dot(&y);
    let bracket = -g.c1e * nu.powf(g.gamma1e()) - g.c2e * nu.powf(g.gamma2e());
    let scale = bracket / denom;
    Ok(DVector::from_fn(p_dim, |i, _| g.gamma[i] * w[i] * scale))
}

/// Finite-time baseline law `-Gamma P^T W / ||W||`.
pub fn ft_update_baseline(state: &EstimatorState) -> Result<DVector<f64>> {
    let w = compute_w(&state.aux, &state.theta_hat);
    let p_dim = w.len();
    if w.norm() <= DEAD_ZONE {
        return Ok(DVector::zeros(p_dim));
    }
    // Condition gate shared with the fixed-time law.
    solve_p(&state.aux, &w)?;
    let dir = state.aux.p_mat.transpose() * &w / w.norm();
    Ok(DVector::from_fn(p_dim, |i, _| -state.gains.gamma[i] * dir[i]))
}

/// Componentwise clamp of an estimate onto the admissible box.
pub fn project_box(theta: &DVector<f64>, theta_box: &ParameterBox) -> DVector<f64> {
    theta_box.project(theta)
}
