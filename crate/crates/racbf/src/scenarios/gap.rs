//! "Shoot the Gap": planar single integrator with a sinusoidal regressor,
//! two elliptical obstacles separated by a narrow channel, and a fixed-time
//! CLF goal at the origin.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::estimator::{AdaptationGains, AdaptationLaw, EnvelopeMode, EstimatorState};
use crate::safety::{BarrierFunction, LyapunovFunction};
use crate::sim::{InfeasiblePolicy, PlantModel, Simulation, SimulationTrace};
use crate::types::ParameterBox;

use super::policy::{ClfCbfQpPolicy, QpWeights, StaticClf};
use super::{auto_gamma_scale, ControllerKind};

/// Reference parameter bound used to size the scenario gain matrix; the
/// table bound of the case study. Keeping the gain fixed across a sweep
/// makes the robust baseline's margin grow with the run's bound.
pub const THETA_BAR_REF: f64 = 10.0;

/// Parameters of the gap case study. Defaults reproduce the published table.
#[derive(Debug, Clone)]
pub struct GapConfig {
    pub k_delta: f64,
    pub f1: f64,
    pub f2: f64,
    pub theta_true: [f64; 2],
    pub theta_bar: f64,
    /// Ellipse semi-axes and centers.
    pub a: f64,
    pub b: f64,
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
    pub k_v: f64,
    /// Fixed-time horizon and exponent parameter of the goal certificate.
    pub t_horizon: f64,
    pub mu: f64,
    pub q_cost: [f64; 2],
    pub p0: f64,
    pub p1: f64,
    pub p2: f64,
    pub u_bar: [f64; 2],
    pub k_e: f64,
    pub ell_e: f64,
    pub c1e: f64,
    pub c2e: f64,
    pub mu_e: f64,
    pub sigma: f64,
    /// Adaptation/shrink gain scale; `None` sizes it from the initial
    /// barrier margins at the reference bound.
    pub gamma_scale: Option<f64>,
    pub x0: [f64; 2],
    pub goal_radius: f64,
    pub theta_hat0: Option<[f64; 2]>,
    pub t_final: f64,
    pub dt: f64,
    pub infeasible_policy: InfeasiblePolicy,
}

impl Default for GapConfig {
    fn default() -> Self {
        Self {
            k_delta: 0.833,
            f1: 1.0,
            f2: 4.0,
            theta_true: [-1.0, 1.0],
            theta_bar: 10.0,
            a: 1.0,
            b: 4.99,
            x1: 1.0,
            y1: -6.0,
            x2: 1.0,
            y2: 4.0,
            k_v: 1.0,
            t_horizon: 4.0,
            mu: 5.0,
            q_cost: [1.0, 1.0],
            p0: 50.0,
            p1: 5.0,
            p2: 5.0,
            u_bar: [2.5, 2.5],
            k_e: 0.001,
            ell_e: 100.0,
            c1e: 50.0,
            c2e: 50.0,
            mu_e: 5.0,
            sigma: 1e-4,
            gamma_scale: None,
            x0: [2.3, -8.2],
            goal_radius: 0.1,
            theta_hat0: None,
            t_final: 10.0,
            dt: 1e-3,
            infeasible_policy: InfeasiblePolicy::HoldPrevious,
        }
    }
}

impl GapConfig {
    /// Fixed-time goal gains `c1 = c2 = mu pi / (2 T)`.
    pub fn clf_gains(&self) -> (f64, f64) {
        let c = self.mu * std::f64::consts::PI / (2.0 * self.t_horizon);
        (c, c)
    }

    pub fn regressor(&self, z: &DVector<f64>) -> DMatrix<f64> {
        let s = (2.0 * std::f64::consts::PI * self.f1 * z[0]).sin();
        let c = (2.0 * std::f64::consts::PI * self.f2 * z[1]).cos();
        DMatrix::from_row_slice(
            2,
            2,
            &[
                self.k_delta * (1.0 + s * s),
                0.0,
                0.0,
                self.k_delta * (1.0 + c * c),
            ],
        )
    }

    pub fn barriers(&self) -> Vec<BarrierFunction> {
        let mk = |cx: f64, cy: f64, a: f64, b: f64, label: &str| {
            let h = move |z: &DVector<f64>| {
                (z[0] - cx) * (z[0] - cx) / (a * a) + (z[1] - cy) * (z[1] - cy) / (b * b) - 1.0
            };
            let grad = move |z: &DVector<f64>| {
                DVector::from_vec(vec![
                    2.0 * (z[0] - cx) / (a * a),
                    2.0 * (z[1] - cy) / (b * b),
                ])
            };
            BarrierFunction::new(label, Arc::new(h), Arc::new(grad))
        };
        vec![
            mk(self.x1, self.y1, self.a, self.b, "h1"),
            mk(self.x2, self.y2, self.a, self.b, "h2"),
        ]
    }

    pub fn lyapunov(&self) -> LyapunovFunction {
        let k_v = self.k_v;
        let (c1, c2) = self.clf_gains();
        LyapunovFunction {
            v: Arc::new(move |z: &DVector<f64>| k_v * (z[0] * z[0] + z[1] * z[1])),
            grad_v: Arc::new(move |z: &DVector<f64>| {
                DVector::from_vec(vec![2.0 * k_v * z[0], 2.0 * k_v * z[1]])
            }),
            c1,
            c2,
            gamma1: 1.0 - 1.0 / self.mu,
            gamma2: 1.0 + 1.0 / self.mu,
        }
    }

    pub fn plant(&self) -> PlantModel {
        let cfg = self.clone();
        let theta_box = ParameterBox::symmetric(2, self.theta_bar);
        let theta_true = theta_box.project(&DVector::from_row_slice(&self.theta_true));
        PlantModel {
            n: 2,
            m: 2,
            p: 2,
            f: Arc::new(|_z: &DVector<f64>| DVector::zeros(2)),
            g: Arc::new(|_z: &DVector<f64>| DMatrix::identity(2, 2)),
            delta: Arc::new(move |z: &DVector<f64>| cfg.regressor(z)),
            theta_true,
            theta_box,
        }
    }

    /// Smallest initial barrier value, used to size the gain matrix.
    pub fn initial_margin(&self) -> f64 {
        let z0 = DVector::from_row_slice(&self.x0);
        self.barriers()
            .iter()
            .map(|b| (b.h)(&z0))
            .fold(f64::INFINITY, f64::min)
    }

    pub fn gamma(&self) -> f64 {
        self.gamma_scale.unwrap_or_else(|| {
            auto_gamma_scale(self.theta_bar.max(THETA_BAR_REF), 2, self.initial_margin())
        })
    }
}

/// Wires the full gap simulation for one controller kind.
pub fn build_gap(cfg: &GapConfig, kind: ControllerKind) -> Result<Simulation> {
    let z0 = DVector::from_row_slice(&cfg.x0);
    let barriers = cfg.barriers();
    for b in &barriers {
        if (b.h)(&z0) <= 0.0 {
            return Err(Error::Config(format!(
                "initial state inside obstacle {}",
                b.label
            )));
        }
    }

    let model = cfg.plant();
    let gamma = cfg.gamma();
    let vartheta = model.theta_box.vartheta();
    let gains = AdaptationGains::new(
        DVector::from_element(2, gamma),
        cfg.c1e,
        cfg.c2e,
        cfg.mu_e,
        cfg.sigma,
        vartheta,
    );
    let theta_hat0 = match cfg.theta_hat0 {
        Some(v) => model.theta_box.project(&DVector::from_row_slice(&v)),
        None => model.theta_box.center(),
    };
    let estimator = EstimatorState::new(gains, cfg.k_e, cfg.ell_e, &z0, theta_hat0);

    let (law, mode) = match kind {
        ControllerKind::Proposed => (AdaptationLaw::FixedTime, EnvelopeMode::Adaptive),
        ControllerKind::RobustBaseline => (AdaptationLaw::Frozen, EnvelopeMode::FrozenFull),
        ControllerKind::CertaintyEquivalent => (AdaptationLaw::Frozen, EnvelopeMode::Zero),
    };

    let policy = ClfCbfQpPolicy {
        f: model.f.clone(),
        g: model.g.clone(),
        delta: model.delta.clone(),
        barriers: barriers.clone(),
        clf: Box::new(StaticClf {
            lf: cfg.lyapunov(),
            goal_radius: cfg.goal_radius,
        }),
        weights: QpWeights {
            q_cost: DMatrix::from_partial_diagonal(2, 2, &cfg.q_cost),
            p0: cfg.p0,
            p_i: vec![cfg.p1, cfg.p2],
            u_bounds: vec![
                (-cfg.u_bar[0], cfg.u_bar[0]),
                (-cfg.u_bar[1], cfg.u_bar[1]),
            ],
        },
    };

    Ok(Simulation {
        model,
        policy: Box::new(policy),
        barriers,
        estimator,
        law,
        envelope_mode: mode,
        x0: z0,
        t_final: cfg.t_final,
        dt: cfg.dt,
        infeasible_policy: cfg.infeasible_policy,
        step_observer: None,
    })
}

/// True when the trace crosses the inter-ellipse band `(y1 + b, y2 - b)`
/// with the crossing abscissa inside the obstacles' x-extent.
pub fn crossed_gap(trace: &SimulationTrace, cfg: &GapConfig) -> bool {
    let lo = cfg.y1 + cfg.b;
    let hi = cfg.y2 - cfg.b;
    trace.states.iter().any(|z| {
        z[1] > lo && z[1] < hi && z[0] > cfg.x1 - cfg.a && z[0] < cfg.x1 + cfg.a
    })
}
