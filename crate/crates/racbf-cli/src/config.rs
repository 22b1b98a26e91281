//! Layered experiment configuration: scenario-table defaults, an optional
//! TOML file, then dotted-path `--set` overrides. The fully resolved
//! configuration is echoed next to the run outputs and reloads to an
//! identical run.

use anyhow::{anyhow, bail, Context, Result};
use racbf::scenarios::{ControllerKind, GapConfig, OvertakeConfig};
use racbf::sim::InfeasiblePolicy;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScenarioId {
    Gap,
    Overtake,
}

impl std::fmt::Display for ScenarioId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ScenarioId::Gap => write!(f, "gap"),
            ScenarioId::Overtake => write!(f, "overtake"),
        }
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FileConfig {
    pub experiment: ExperimentSection,
    pub estimator: EstimatorSection,
    pub sim: SimSection,
    pub gap: GapSection,
    pub overtake: OvertakeSection,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentSection {
    pub scenario: Option<ScenarioId>,
    pub controller: Option<String>,
    pub theta_bar: Option<f64>,
    pub sweep: Option<Vec<f64>>,
    pub dt: Option<f64>,
    pub t_final: Option<f64>,
    pub seed: Option<u64>,
    pub decimate: Option<usize>,
    pub out_dir: Option<String>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EstimatorSection {
    pub k_e: Option<f64>,
    pub ell_e: Option<f64>,
    pub c1e: Option<f64>,
    pub c2e: Option<f64>,
    pub mu_e: Option<f64>,
    pub sigma: Option<f64>,
    pub gamma_scale: Option<f64>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimSection {
    /// "hold" keeps the previous control on an infeasible step; "abort"
    /// terminates the run.
    pub infeasible_policy: Option<String>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GapSection {
    pub k_delta: Option<f64>,
    pub f1: Option<f64>,
    pub f2: Option<f64>,
    pub theta_true: Option<[f64; 2]>,
    pub a: Option<f64>,
    pub b: Option<f64>,
    pub x1: Option<f64>,
    pub y1: Option<f64>,
    pub x2: Option<f64>,
    pub y2: Option<f64>,
    pub k_v: Option<f64>,
    pub t_horizon: Option<f64>,
    pub mu: Option<f64>,
    pub q_cost: Option<[f64; 2]>,
    pub p0: Option<f64>,
    pub p1: Option<f64>,
    pub p2: Option<f64>,
    pub u_bar: Option<[f64; 2]>,
    pub x0: Option<[f64; 2]>,
    pub goal_radius: Option<f64>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OvertakeSection {
    pub mass: Option<f64>,
    pub l_c: Option<f64>,
    pub w_c: Option<f64>,
    pub e_r: Option<f64>,
    pub e_l: Option<f64>,
    pub speed_limit: Option<f64>,
    pub tau: Option<f64>,
    pub omega_bar: Option<f64>,
    pub a_bar: Option<f64>,
    pub f_l1: Option<f64>,
    pub f_l2: Option<f64>,
    pub theta_true: Option<[f64; 2]>,
    pub k_v: Option<f64>,
    pub k_x: Option<f64>,
    pub k_y: Option<f64>,
    pub k_theta: Option<f64>,
    pub k_vel: Option<f64>,
    pub mu: Option<f64>,
    pub p0: Option<f64>,
    pub p_i: Option<[f64; 3]>,
    pub k_s: Option<f64>,
    pub phase_horizons: Option<[f64; 4]>,
    pub oncoming_first: Option<f64>,
    pub oncoming_interval: Option<f64>,
    pub ego0: Option<[f64; 4]>,
    pub lead0: Option<[f64; 4]>,
}

/// A fully resolved experiment, ready to build and run.
#[derive(Debug, Clone)]
pub struct Resolved {
    pub scenario: ScenarioId,
    pub controller: ControllerKind,
    pub theta_bar: f64,
    pub sweep: Vec<f64>,
    pub seed: u64,
    pub decimate: usize,
    pub out_dir: String,
    pub gap: GapConfig,
    pub overtake: OvertakeConfig,
}

impl Resolved {
    pub fn dt(&self) -> f64 {
        match self.scenario {
            ScenarioId::Gap => self.gap.dt,
            ScenarioId::Overtake => self.overtake.dt,
        }
    }

    pub fn t_final(&self) -> f64 {
        match self.scenario {
            ScenarioId::Gap => self.gap.t_final,
            ScenarioId::Overtake => self.overtake.t_final,
        }
    }
}

fn parse_infeasible(s: &str) -> Result<InfeasiblePolicy> {
    match s {
        "hold" => Ok(InfeasiblePolicy::HoldPrevious),
        "abort" => Ok(InfeasiblePolicy::Abort),
        other => bail!("sim.infeasible_policy must be \"hold\" or \"abort\", got {other:?}"),
    }
}

macro_rules! take {
    ($dst:expr, $src:expr) => {
        if let Some(v) = $src {
            $dst = v;
        }
    };
}

impl FileConfig {
    /// Parses a TOML document, reporting the offending line and field on
    /// malformed input.
    pub fn from_toml_str(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| anyhow!("config error: {e}"))
    }

    /// Applies one `path.to.key=value` override.
    pub fn apply_set(table: &mut toml::Table, spec: &str) -> Result<()> {
        let (path, raw) = spec
            .split_once('=')
            .ok_or_else(|| anyhow!("--set needs key=value, got {spec:?}"))?;
        let parts: Vec<&str> = path.trim().split('.').collect();
        if parts.iter().any(|p| p.is_empty()) {
            bail!("--set path {path:?} is malformed");
        }
        // Parse the right-hand side with the TOML grammar; bare words fall
        // back to strings.
        let value = match format!("v = {raw}").parse::<toml::Table>() {
            Ok(t) => t["v"].clone(),
            Err(_) => toml::Value::String(raw.trim().to_string()),
        };
        let mut node = table;
        for key in &parts[..parts.len() - 1] {
            node = node
                .entry(key.to_string())
                .or_insert_with(|| toml::Value::Table(toml::Table::new()))
                .as_table_mut()
                .ok_or_else(|| anyhow!("--set path {path:?} crosses a non-table value"))?;
        }
        node.insert(parts[parts.len() - 1].to_string(), value);
        Ok(())
    }

    pub fn from_table(table: toml::Table) -> Result<Self> {
        FileConfig::deserialize(toml::Value::Table(table))
            .map_err(|e| anyhow!("config error: {e}"))
    }

    /// Fills every optional field from the scenario-table defaults and the
    /// cascade rules, producing both the runnable configs and an echo of
    /// this layer that reloads identically.
    pub fn resolve(&self) -> Result<(Resolved, FileConfig)> {
        let scenario = self.experiment.scenario.unwrap_or(ScenarioId::Gap);
        let controller: ControllerKind = self
            .experiment
            .controller
            .as_deref()
            .unwrap_or("proposed")
            .parse()
            .map_err(|e: String| anyhow!("config error: {e}"))?;
        let infeasible = parse_infeasible(
            self.sim.infeasible_policy.as_deref().unwrap_or("hold"),
        )?;

        let mut gap = GapConfig::default();
        {
            let s = &self.gap;
            take!(gap.k_delta, s.k_delta);
            take!(gap.f1, s.f1);
            take!(gap.f2, s.f2);
            take!(gap.theta_true, s.theta_true);
            take!(gap.a, s.a);
            take!(gap.b, s.b);
            take!(gap.x1, s.x1);
            take!(gap.y1, s.y1);
            take!(gap.x2, s.x2);
            take!(gap.y2, s.y2);
            take!(gap.k_v, s.k_v);
            take!(gap.t_horizon, s.t_horizon);
            take!(gap.mu, s.mu);
            take!(gap.q_cost, s.q_cost);
            take!(gap.p0, s.p0);
            take!(gap.p1, s.p1);
            take!(gap.p2, s.p2);
            take!(gap.u_bar, s.u_bar);
            take!(gap.x0, s.x0);
            take!(gap.goal_radius, s.goal_radius);
        }
        let mut overtake = OvertakeConfig::default();
        {
            let s = &self.overtake;
            take!(overtake.mass, s.mass);
            take!(overtake.l_c, s.l_c);
            take!(overtake.w_c, s.w_c);
            take!(overtake.e_r, s.e_r);
            take!(overtake.e_l, s.e_l);
            take!(overtake.speed_limit, s.speed_limit);
            take!(overtake.tau, s.tau);
            take!(overtake.omega_bar, s.omega_bar);
            take!(overtake.a_bar, s.a_bar);
            take!(overtake.f_l1, s.f_l1);
            take!(overtake.f_l2, s.f_l2);
            take!(overtake.theta_true, s.theta_true);
            take!(overtake.k_v, s.k_v);
            take!(overtake.k_x, s.k_x);
            take!(overtake.k_y, s.k_y);
            take!(overtake.k_theta, s.k_theta);
            take!(overtake.k_vel, s.k_vel);
            take!(overtake.mu, s.mu);
            take!(overtake.p0, s.p0);
            take!(overtake.p_i, s.p_i);
            take!(overtake.k_s, s.k_s);
            take!(overtake.phase_horizons, s.phase_horizons);
            take!(overtake.oncoming_first, s.oncoming_first);
            take!(overtake.oncoming_interval, s.oncoming_interval);
            take!(overtake.ego0, s.ego0);
            take!(overtake.lead0, s.lead0);
        }

        // Estimator knobs apply to whichever scenario runs.
        take!(gap.k_e, self.estimator.k_e);
        take!(gap.ell_e, self.estimator.ell_e);
        take!(gap.c1e, self.estimator.c1e);
        take!(gap.c2e, self.estimator.c2e);
        take!(gap.mu_e, self.estimator.mu_e);
        take!(gap.sigma, self.estimator.sigma);
        take!(overtake.k_e, self.estimator.k_e);
        take!(overtake.ell_e, self.estimator.ell_e);
        take!(overtake.c1e, self.estimator.c1e);
        take!(overtake.c2e, self.estimator.c2e);
        take!(overtake.mu_e, self.estimator.mu_e);
        take!(overtake.sigma, self.estimator.sigma);
        gap.gamma_scale = self.estimator.gamma_scale;
        overtake.gamma_scale = self.estimator.gamma_scale;

        if let Some(tb) = self.experiment.theta_bar {
            if tb < 0.0 {
                bail!("config error: experiment.theta_bar must be non-negative");
            }
            gap.theta_bar = tb;
            overtake.theta_bar = tb;
        }
        if let Some(dt) = self.experiment.dt {
            if dt <= 0.0 {
                bail!("config error: experiment.dt must be positive");
            }
            gap.dt = dt;
            overtake.dt = dt;
        }
        if let Some(tf) = self.experiment.t_final {
            if tf <= 0.0 {
                bail!("config error: experiment.t_final must be positive");
            }
            gap.t_final = tf;
            overtake.t_final = tf;
        }
        gap.infeasible_policy = infeasible;
        overtake.infeasible_policy = infeasible;

        let decimate = self.experiment.decimate.unwrap_or(1);
        if decimate == 0 {
            bail!("config error: experiment.decimate must be at least 1");
        }

        let resolved = Resolved {
            scenario,
            controller,
            theta_bar: match scenario {
                ScenarioId::Gap => gap.theta_bar,
                ScenarioId::Overtake => overtake.theta_bar,
            },
            sweep: self
                .experiment
                .sweep
                .clone()
                .unwrap_or_else(|| vec![1.0, 2.0, 4.0, 6.0, 8.0, 10.0]),
            seed: self.experiment.seed.unwrap_or(0),
            decimate,
            out_dir: self
                .experiment
                .out_dir
                .clone()
                .unwrap_or_else(|| format!("out/{scenario}-{controller}")),
            gap,
            overtake,
        };
        let echo = resolved.echo(infeasible);
        Ok((resolved, echo))
    }
}

impl Resolved {
    /// Fully concrete config layer that reloads to this same resolution.
    fn echo(&self, infeasible: InfeasiblePolicy) -> FileConfig {
        let g = &self.gap;
        let o = &self.overtake;
        FileConfig {
            experiment: ExperimentSection {
                scenario: Some(self.scenario),
                controller: Some(self.controller.to_string()),
                theta_bar: Some(self.theta_bar),
                sweep: Some(self.sweep.clone()),
                dt: Some(self.dt()),
                t_final: Some(self.t_final()),
                seed: Some(self.seed),
                decimate: Some(self.decimate),
                out_dir: Some(self.out_dir.clone()),
            },
            estimator: EstimatorSection {
                k_e: Some(g.k_e),
                ell_e: Some(g.ell_e),
                c1e: Some(g.c1e),
                c2e: Some(g.c2e),
                mu_e: Some(g.mu_e),
                sigma: Some(g.sigma),
                gamma_scale: match self.scenario {
                    ScenarioId::Gap => Some(g.gamma()),
                    ScenarioId::Overtake => Some(o.gamma()),
                },
            },
            sim: SimSection {
                infeasible_policy: Some(
                    match infeasible {
                        InfeasiblePolicy::HoldPrevious => "hold",
                        InfeasiblePolicy::Abort => "abort",
                    }
                    .to_string(),
                ),
            },
            gap: GapSection {
                k_delta: Some(g.k_delta),
                f1: Some(g.f1),
                f2: Some(g.f2),
                theta_true: Some(g.theta_true),
                a: Some(g.a),
                b: Some(g.b),
                x1: Some(g.x1),
                y1: Some(g.y1),
                x2: Some(g.x2),
                y2: Some(g.y2),
                k_v: Some(g.k_v),
                t_horizon: Some(g.t_horizon),
                mu: Some(g.mu),
                q_cost: Some(g.q_cost),
                p0: Some(g.p0),
                p1: Some(g.p1),
                p2: Some(g.p2),
                u_bar: Some(g.u_bar),
                x0: Some(g.x0),
                goal_radius: Some(g.goal_radius),
            },
            overtake: OvertakeSection {
                mass: Some(o.mass),
                l_c: Some(o.l_c),
                w_c: Some(o.w_c),
                e_r: Some(o.e_r),
                e_l: Some(o.e_l),
                speed_limit: Some(o.speed_limit),
                tau: Some(o.tau),
                omega_bar: Some(o.omega_bar),
                a_bar: Some(o.a_bar),
                f_l1: Some(o.f_l1),
                f_l2: Some(o.f_l2),
                theta_true: Some(o.theta_true),
                k_v: Some(o.k_v),
                k_x: Some(o.k_x),
                k_y: Some(o.k_y),
                k_theta: Some(o.k_theta),
                k_vel: Some(o.k_vel),
                mu: Some(o.mu),
                p0: Some(o.p0),
                p_i: Some(o.p_i),
                k_s: Some(o.k_s),
                phase_horizons: Some(o.phase_horizons),
                oncoming_first: Some(o.oncoming_first),
                oncoming_interval: Some(o.oncoming_interval),
                ego0: Some(o.ego0),
                lead0: Some(o.lead0),
            },
        }
    }
}

/// Loads the file (if any), applies `--set` overrides, then the dedicated
/// command-line flags, and resolves.
pub fn load(
    config_path: Option<&str>,
    sets: &[String],
    flags: &[(&str, Option<String>)],
) -> Result<(Resolved, FileConfig)> {
    let mut table = match config_path {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .with_context(|| format!("reading config file {path}"))?;
            text.parse::<toml::Table>()
                .map_err(|e| anyhow!("config error in {path}: {e}"))?
        }
        None => toml::Table::new(),
    };
    for spec in sets {
        FileConfig::apply_set(&mut table, spec)?;
    }
    for (path, value) in flags {
        if let Some(v) = value {
            FileConfig::apply_set(&mut table, &format!("{path}={v}"))?;
        }
    }
    let cfg = FileConfig::from_table(table)?;
    cfg.resolve().map(|(r, echo)| (r, echo))
}
