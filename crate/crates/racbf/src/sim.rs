//! Closed-loop simulation of the plant coupled with the estimator filters
//! and regressor memory.
//!
//! Plant state, filter states and the memory `P`, `Q` integrate together in
//! one fixed-step RK4 vector; the parameter estimate advances by an explicit
//! Euler sub-step after each RK4 step because the adaptation law is
//! discontinuous at its converged point and stiff directly after activation,
//! which RK4 stages handle poorly. Control is zero-order-hold over each step.
//! The control policy only ever sees the measured state and the estimator
//! view, never the true parameters.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::estimator::{
    aux_rates, filter_rates, ft_update_baseline, fxts_update, AdaptationLaw, AuxiliaryMemory,
    EnvelopeMode, EstimatorState, EstimatorView, FilterBank, RATE_CLAMP,
};
use crate::safety::BarrierFunction;
use crate::types::ParameterBox;

pub type VecFn = Arc<dyn Fn(&DVector<f64>) -> DVector<f64> + Send + Sync>;
pub type MatFn = Arc<dyn Fn(&DVector<f64>) -> DMatrix<f64> + Send + Sync>;

/// Any state component beyond this magnitude aborts the run.
pub const DIVERGENCE_LIMIT: f64 = 1e9;

/// Control-affine plant `xdot = f(x) + g(x) u + Delta(x) theta`.
///
/// `theta_true` is only read by the simulator and by test oracles; control
/// policies receive estimates through the estimator view.
#[derive(Clone)]
pub struct PlantModel {
    pub n: usize,
    pub m: usize,
    pub p: usize,
    pub f: VecFn,
    pub g: MatFn,
    pub delta: MatFn,
    pub theta_true: DVector<f64>,
    pub theta_box: ParameterBox,
}

impl PlantModel {
    pub fn validate(&self) -> Result<()> {
        if self.theta_true.len() != self.p || self.theta_box.dim() != self.p {
            return Err(Error::Config("parameter dimension mismatch".into()));
        }
        if !self.theta_box.contains(&self.theta_true) {
            return Err(Error::Config("true parameters outside admissible box".into()));
        }
        Ok(())
    }
}

/// True plant rate at one state; simulator-side only.
pub fn eval_dynamics(model: &PlantModel, x: &DVector<f64>, u: &DVector<f64>) -> Result<DVector<f64>> {
    let dx = (model.f)(x) + (model.g)(x) * u + (model.delta)(x) * &model.theta_true;
    if dx.iter().all(|v| v.is_finite()) {
        Ok(dx)
    } else {
        Err(Error::Divergence { t: f64::NAN, what: "non-finite plant rate".into() })
    }
}

/// Classical fourth-order Runge-Kutta step; errors out on any non-finite
/// stage.
pub fn rk4_step<F>(rate: F, t: f64, y: &DVector<f64>, dt: f64) -> Result<DVector<f64>>
where
    F: Fn(f64, &DVector<f64>) -> Result<DVector<f64>>,
{
    assert!(dt > 0.0);
    let check = |k: DVector<f64>, stage_t: f64| -> Result<DVector<f64>> {
        if k.iter().all(|v| v.is_finite()) {
            Ok(k)
        } else {
            Err(Error::Divergence { t: stage_t, what: "non-finite RK4 stage".into() })
        }
    };
    let k1 = check(rate(t, y)?, t)?;
    let k2 = check(rate(t + 0.5 * dt, &(y + &k1 * (0.5 * dt)))?, t + 0.5 * dt)?;
    let k3 = check(rate(t + 0.5 * dt, &(y + &k2 * (0.5 * dt)))?, t + 0.5 * dt)?;
    let k4 = check(rate(t + dt, &(y + &k3 * dt))?, t + dt)?;
    Ok(y + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (dt / 6.0))
}

/// Per-step solver outcome recorded in the trace.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StepStatus {
    Optimal,
    Infeasible,
    MaxIterations,
}

impl fmt::Display for StepStatus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            StepStatus::Optimal => "optimal",
            StepStatus::Infeasible => "infeasible",
            StepStatus::MaxIterations => "max-iterations",
        };
        f.write_str(s)
    }
}

impl FromStr for StepStatus {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "optimal" => Ok(StepStatus::Optimal),
            "infeasible" => Ok(StepStatus::Infeasible),
            "max-iterations" => Ok(StepStatus::MaxIterations),
            other => Err(format!("unknown step status: {other}")),
        }
    }
}

/// Control decision for one step.
#[derive(Debug, Clone)]
pub struct PolicyOutput {
    pub u: DVector<f64>,
    pub status: StepStatus,
    /// Relaxations `delta_0 .. delta_q`.
    pub slacks: DVector<f64>,
    pub v_value: f64,
    /// Shrunken-barrier values, one per barrier.
    pub h_r: DVector<f64>,
    pub goal_reached: bool,
}

/// A state-feedback control policy. The interface shape enforces controller
/// isolation: only the measured state and the estimator view are available.
pub trait ControlPolicy: Send {
    fn compute(&mut self, t: f64, x: &DVector<f64>, view: &EstimatorView) -> PolicyOutput;
}

/// Time-indexed record of a run. All columns share one length and the time
/// grid is uniform.
#[derive(Debug, Clone, Default)]
pub struct SimulationTrace {
    pub dt: f64,
    pub times: Vec<f64>,
    pub states: Vec<DVector<f64>>,
    pub controls: Vec<DVector<f64>>,
    pub estimates: Vec<DVector<f64>>,
    pub envelope: Vec<f64>,
    pub barrier_values: Vec<DVector<f64>>,
    pub hr_values: Vec<DVector<f64>>,
    pub lyapunov_values: Vec<f64>,
    pub qp_statuses: Vec<StepStatus>,
    pub slacks: Vec<DVector<f64>>,
}

impl SimulationTrace {
    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn check_invariants(&self) -> Result<()> {
        let n = self.times.len();
        let aligned = self.states.len() == n
            && self.controls.len() == n
            && self.estimates.len() == n
            && self.envelope.len() == n
            && self.barrier_values.len() == n
            && self.hr_values.len() == n
            && self.lyapunov_values.len() == n
            && self.qp_statuses.len() == n
            && self.slacks.len() == n;
        if !aligned {
            return Err(Error::Config("trace column lengths differ".into()));
        }
        for w in self.times.windows(2) {
            if w[1] <= w[0] || (w[1] - w[0] - self.dt).abs() > 1e-9 * (1.0 + self.dt) {
                return Err(Error::Config("trace time grid not uniform".into()));
            }
        }
        Ok(())
    }

    pub fn min_barrier_values(&self) -> Vec<f64> {
        if self.barrier_values.is_empty() || self.barrier_values[0].is_empty() {
            return Vec::new();
        }
        let q = self.barrier_values[0].len();
        (0..q)
            .map(|i| {
                self.barrier_values
                    .iter()
                    .map(|h| h[i])
                    .fold(f64::INFINITY, f64::min)
            })
            .collect()
    }
}

/// What to do when the controller QP has no solution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InfeasiblePolicy {
    HoldPrevious,
    Abort,
}

/// How a run ended.
#[derive(Debug, Clone, PartialEq)]
pub enum RunOutcome {
    Completed,
    Diverged { t: f64 },
    InfeasibleAbort { t: f64 },
}

/// Result of a run: the trace plus bookkeeping for summaries.
#[derive(Debug, Clone)]
pub struct SimRun {
    pub trace: SimulationTrace,
    pub outcome: RunOutcome,
    pub completion_time: Option<f64>,
    pub t_activate: Option<f64>,
    pub rate_clamp_hits: usize,
    pub singular_holds: usize,
    pub infeasible_steps: usize,
    pub final_estimator: EstimatorState,
}

/// A fully wired closed-loop experiment.
pub struct Simulation {
    pub model: PlantModel,
    pub policy: Box<dyn ControlPolicy>,
    /// Barriers evaluated for the trace record.
    pub barriers: Vec<BarrierFunction>,
    pub estimator: EstimatorState,
    pub law: AdaptationLaw,
    pub envelope_mode: EnvelopeMode,
    pub x0: DVector<f64>,
    pub t_final: f64,
    pub dt: f64,
    pub infeasible_policy: InfeasiblePolicy,
    /// Optional per-step probe of the estimator internals, for tests and
    /// diagnostics that need the filter and memory histories.
    pub step_observer: Option<Box<dyn FnMut(f64, &EstimatorState) + Send>>,
}

// Flat layout of the coupled RK4 state:
// [x | x_f | xdot_f | phi_f | phidot_f | Phi_f | Phidot_f | P | Q]
struct Layout {
    n: usize,
    p: usize,
}

impl Layout {
    fn dim(&self) -> usize {
        5 * self.n + 2 * self.n * self.p + self.p * self.p + self.p
    }

    fn pack(&self, x: &DVector<f64>, bank: &FilterBank, aux: &AuxiliaryMemory) -> DVector<f64> {
        let mut y = DVector::zeros(self.dim());
        let mut at = 0usize;
        let mut put = |s: &[f64], y: &mut DVector<f64>| {
            y.as_mut_slice()[at..at + s.len()].copy_from_slice(s);
            at += s.len();
        };
        put(x.as_slice(), &mut y);
        put(bank.x_f.as_slice(), &mut y);
        put(bank.xdot_f.as_slice(), &mut y);
        put(bank.phi_f.as_slice(), &mut y);
        put(bank.phidot_f.as_slice(), &mut y);
        put(bank.big_phi_f.as_slice(), &mut y);
        put(bank.big_phidot_f.as_slice(), &mut y);
        put(aux.p_mat.as_slice(), &mut y);
        put(aux.q_vec.as_slice(), &mut y);
        y
    }

    fn unpack(&self, y: &DVector<f64>, x: &mut DVector<f64>, bank: &mut FilterBank, aux: &mut AuxiliaryMemory) {
        let s = y.as_slice();
        let mut at = 0usize;
        let mut take = |dst: &mut [f64]| {
            dst.copy_from_slice(&s[at..at + dst.len()]);
            at += dst.len();
        };
        take(x.as_mut_slice());
        take(bank.x_f.as_mut_slice());
        take(bank.xdot_f.as_mut_slice());
        take(bank.phi_f.as_mut_slice());
        take(bank.phidot_f.as_mut_slice());
        take(bank.big_phi_f.as_mut_slice());
        take(bank.big_phidot_f.as_mut_slice());
        take(aux.p_mat.as_mut_slice());
        take(aux.q_vec.as_mut_slice());
    }
}

impl Simulation {
    /// Runs the closed loop, recording the trace at every grid point.
    /// Divergence and infeasibility aborts return the partial trace in the
    /// outcome rather than an error.
    pub fn run(&mut self) -> Result<SimRun> {
        self.model.validate()?;
        if self.dt <= 0.0 || self.t_final <= 0.0 {
            return Err(Error::Config("dt and t_final must be positive".into()));
        }
        let steps_f = self.t_final / self.dt;
        let steps = steps_f.round() as usize;
        if (steps_f - steps as f64).abs() > 1e-6 {
            return Err(Error::Config("dt must divide t_final".into()));
        }

        let layout = Layout { n: self.model.n, p: self.model.p };
        let mut x = self.x0.clone();
        let mut est = self.estimator.clone();
        let mut prev_u = DVector::zeros(self.model.m);
        let mut trace = SimulationTrace { dt: self.dt, ..Default::default() };
        let mut outcome = RunOutcome::Completed;
        let mut completion_time = None;
        let mut rate_clamp_hits = 0usize;
        let mut singular_holds = 0usize;
        let mut infeasible_steps = 0usize;

        for k in 0..=steps {
            let t = k as f64 * self.dt;
            let view = est.view(t, self.envelope_mode, &self.model.theta_box);
            let out = self.policy.compute(t, &x, &view);
            let u = match out.status {
                StepStatus::Optimal => out.u.clone(),
                _ => {
                    infeasible_steps += 1;
                    match self.infeasible_policy {
                        InfeasiblePolicy::HoldPrevious => prev_u.clone(),
                        InfeasiblePolicy::Abort => {
                            outcome = RunOutcome::InfeasibleAbort { t };
                            break;
                        }
                    }
                }
            };

            trace.times.push(t);
            trace.states.push(x.clone());
            trace.controls.push(u.clone());
            trace.estimates.push(est.theta_hat.clone());
            trace.envelope.push(view.eta);
            trace
                .barrier_values
                .push(DVector::from_fn(self.barriers.len(), |i, _| (self.barriers[i].h)(&x)));
            trace.hr_values.push(out.h_r.clone());
            trace.lyapunov_values.push(out.v_value);
            trace.qp_statuses.push(out.status);
            trace.slacks.push(out.slacks.clone());

            if out.goal_reached && completion_time.is_none() {
                completion_time = Some(t);
            }
            if k == steps {
                break;
            }

            let y = layout.pack(&x, &est.filter, &est.aux);
            let rate = |_tt: f64, yy: &DVector<f64>| -> Result<DVector<f64>> {
                let mut xs = DVector::zeros(self.model.n);
                let mut bank = est.filter.clone();
                let mut aux = est.aux.clone();
                layout.unpack(yy, &mut xs, &mut bank, &mut aux);
                let phi = (self.model.f)(&xs) + (self.model.g)(&xs) * &u;
                let delta = (self.model.delta)(&xs);
                let xdot = &phi + &delta * &self.model.theta_true;
                let fr = filter_rates(&bank, &xs, &phi, &delta);
                let (pdot, qdot) = aux_rates(&aux, &bank);
                let mut scratch_bank = bank;
                scratch_bank.x_f = fr.x_f;
                scratch_bank.xdot_f = fr.xdot_f;
                scratch_bank.phi_f = fr.phi_f;
                scratch_bank.phidot_f = fr.phidot_f;
                scratch_bank.big_phi_f = fr.big_phi_f;
                scratch_bank.big_phidot_f = fr.big_phidot_f;
                let mut scratch_aux = aux;
                scratch_aux.p_mat = pdot;
                scratch_aux.q_vec = qdot;
                Ok(layout.pack(&xdot, &scratch_bank, &scratch_aux))
            };

            match rk4_step(rate, t, &y, self.dt) {
                Ok(yn) => layout.unpack(&yn, &mut x, &mut est.filter, &mut est.aux),
                Err(Error::Divergence { t, what }) => {
                    outcome = RunOutcome::Diverged { t };
                    let _ = what;
                    break;
                }
                Err(e) => return Err(e),
            }
            if x.amax() > DIVERGENCE_LIMIT {
                outcome = RunOutcome::Diverged { t: t + self.dt };
                break;
            }

            est.check_activation(t + self.dt);
            if est.activated && self.law != AdaptationLaw::Frozen {
                let rate = match self.law {
                    AdaptationLaw::FixedTime => fxts_update(&est),
                    AdaptationLaw::FiniteTimeBaseline => ft_update_baseline(&est),
                    AdaptationLaw::Frozen => unreachable!(),
                };
                match rate {
                    Ok(mut r) => {
                        if r.amax() > RATE_CLAMP {
                            rate_clamp_hits += 1;
                            let s = RATE_CLAMP / r.amax();
                            r *= s;
                        }
                        // Overshoot protection: once the Euler step would
                        // jump past the memory's own solution of
                        // P theta = Q, land on it instead. Both laws are
                        // singular there and an uncorrected step limit-cycles
                        // around the converged point.
                        let newton = crate::estimator::compute_w(&est.aux, &est.theta_hat);
                        let correction = nalgebra::Cholesky::new(est.aux.p_mat.clone())
                            .map(|ch| ch.solve(&newton));
                        let euler = r * self.dt;
                        let stepped = match correction {
                            Some(full) if euler.amax() >= full.amax() => &est.theta_hat - full,
                            _ => &est.theta_hat + euler,
                        };
                        est.theta_hat = self.model.theta_box.project(&stepped);
                    }
                    Err(Error::SingularMemory { .. }) => singular_holds += 1,
                    Err(e) => return Err(e),
                }
            }
            if let Some(obs) = self.step_observer.as_mut() {
                obs(t + self.dt, &est);
            }
            prev_u = u;
        }

        trace.check_invariants()?;
        Ok(SimRun {
            trace,
            outcome,
            completion_time,
            t_activate: if est.activated { Some(est.t_activate) } else { None },
            rate_clamp_hits,
            singular_holds,
            infeasible_steps,
            final_estimator: est,
        })
    }
}
