//! Run summaries and trace emission.
//!
//! Traces are CSV with a fixed column order and floating values printed
//! with 17 significant digits so a parse/re-emit cycle is byte-identical.
//! Summaries are single JSON objects.

use anyhow::{anyhow, bail, Context, Result};
use nalgebra::DVector;
use racbf::estimator::settling_bounds;
use racbf::scenarios::{overtake_decision, Decision};
use racbf::sim::{RunOutcome, SimRun, SimulationTrace, StepStatus};
use serde::{Deserialize, Serialize};
use std::fmt::Write as _;
use std::path::Path;

use crate::config::{Resolved, ScenarioId};

pub const BARRIER_TOL: f64 = -1e-6;
pub const ENVELOPE_TOL: f64 = 1e-6;
pub const SETTLE_TOL: f64 = 1e-3;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunSummary {
    pub scenario: String,
    pub controller: String,
    pub theta_bar: f64,
    pub dt: f64,
    pub t_final: f64,
    pub seed: u64,
    pub outcome: String,
    pub goal_reached: bool,
    pub completion_time: Option<f64>,
    pub min_barrier_values: Vec<f64>,
    pub activation_time: Option<f64>,
    pub settling_time: Option<f64>,
    pub settling_bound_tight: f64,
    pub envelope_violations: usize,
    pub qp_infeasible_steps: usize,
    pub rate_clamp_hits: usize,
    pub decision: Option<String>,
}

impl RunSummary {
    pub fn safety_ok(&self) -> bool {
        self.envelope_violations == 0
            && self.min_barrier_values.iter().all(|h| *h >= BARRIER_TOL)
    }
}

/// Builds the summary from a finished run. The true parameters are the
/// harness's oracle knowledge; they are never fed back into control.
pub fn summarize(resolved: &Resolved, run: &SimRun, theta_true: &DVector<f64>) -> RunSummary {
    let envelope_violations = run
        .trace
        .estimates
        .iter()
        .zip(run.trace.envelope.iter())
        .filter(|(est, eta)| (theta_true - *est).amax() > *eta + ENVELOPE_TOL)
        .count();
    let settling_time = run.t_activate.and_then(|t_act| {
        run.trace
            .times
            .iter()
            .zip(run.trace.estimates.iter())
            .find(|(t, est)| **t >= t_act && (theta_true - *est).amax() <= SETTLE_TOL)
            .map(|(t, _)| t - t_act)
    });
    let gains = &run.final_estimator.gains;
    let (_, settling_bound_tight) = settling_bounds(gains);
    let decision = match resolved.scenario {
        ScenarioId::Overtake => Some(
            overtake_decision(
                run.completion_time,
                resolved.overtake.oncoming_first,
                resolved.overtake.oncoming_interval,
            )
            .to_string(),
        ),
        ScenarioId::Gap => None,
    };
    RunSummary {
        scenario: resolved.scenario.to_string(),
        controller: resolved.controller.to_string(),
        theta_bar: resolved.theta_bar,
        dt: resolved.dt(),
        t_final: resolved.t_final(),
        seed: resolved.seed,
        outcome: match run.outcome {
            RunOutcome::Completed => "completed".into(),
            RunOutcome::Diverged { .. } => "diverged".into(),
            RunOutcome::InfeasibleAbort { .. } => "infeasible-abort".into(),
        },
        goal_reached: run.completion_time.is_some(),
        completion_time: run.completion_time,
        min_barrier_values: run.trace.min_barrier_values(),
        activation_time: run.t_activate,
        settling_time,
        settling_bound_tight,
        envelope_violations,
        qp_infeasible_steps: run.infeasible_steps,
        rate_clamp_hits: run.rate_clamp_hits,
        decision,
    }
}

/// Exit code for a finished run: 0 success, 2 safety violation,
/// 3 divergence or infeasibility abort.
pub fn exit_code_for(summary: &RunSummary) -> u8 {
    if summary.outcome != "completed" {
        3
    } else if !summary.safety_ok() {
        2
    } else {
        0
    }
}

fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

pub fn trace_header(n: usize, m: usize, p: usize, q: usize) -> String {
    let mut h = String::from("t");
    for i in 1..=n {
        let _ = write!(h, ",x{i}");
    }
    for i in 1..=m {
        let _ = write!(h, ",u{i}");
    }
    for i in 1..=p {
        let _ = write!(h, ",theta_hat_{i}");
    }
    h.push_str(",eta");
    for i in 1..=q {
        let _ = write!(h, ",h_{i}");
    }
    for i in 1..=q {
        let _ = write!(h, ",h_r_{i}");
    }
    h.push_str(",V");
    for i in 0..=q {
        let _ = write!(h, ",delta_{i}");
    }
    h.push_str(",qp_status");
    h
}

/// Writes the trace CSV, keeping every `decimate`-th row.
pub fn emit_trace(trace: &SimulationTrace, path: &Path, decimate: usize) -> Result<()> {
    let mut out = String::new();
    let (n, m, p, q) = trace_dims(trace);
    out.push_str(&trace_header(n, m, p, q));
    out.push('\n');
    for k in 0..trace.len() {
        if k % decimate != 0 {
            continue;
        }
        let mut row = fmt_f64(trace.times[k]);
        for v in trace.states[k].iter() {
            row.push(',');
            row.push_str(&fmt_f64(*v));
        }
        for v in trace.controls[k].iter() {
            row.push(',');
            row.push_str(&fmt_f64(*v));
        }
        for v in trace.estimates[k].iter() {
            row.push(',');
            row.push_str(&fmt_f64(*v));
        }
        row.push(',');
        row.push_str(&fmt_f64(trace.envelope[k]));
        for v in trace.barrier_values[k].iter() {
            row.push(',');
            row.push_str(&fmt_f64(*v));
        }
        for v in trace.hr_values[k].iter() {
            row.push(',');
            row.push_str(&fmt_f64(*v));
        }
        row.push(',');
        row.push_str(&fmt_f64(trace.lyapunov_values[k]));
        for v in trace.slacks[k].iter() {
            row.push(',');
            row.push_str(&fmt_f64(*v));
        }
        row.push(',');
        row.push_str(&trace.qp_statuses[k].to_string());
        out.push_str(&row);
        out.push('\n');
    }
    std::fs::write(path, out).with_context(|| format!("writing trace to {}", path.display()))
}

fn trace_dims(trace: &SimulationTrace) -> (usize, usize, usize, usize) {
    if trace.is_empty() {
        return (0, 0, 0, 0);
    }
    (
        trace.states[0].len(),
        trace.controls[0].len(),
        trace.estimates[0].len(),
        trace.barrier_values[0].len(),
    )
}

/// Parses a trace CSV back; the inverse of [`emit_trace`] at decimate 1.
pub fn parse_trace(text: &str) -> Result<SimulationTrace> {
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| anyhow!("empty trace file"))?;
    let cols: Vec<&str> = header.split(',').collect();
    let count = |prefix: &str| cols.iter().filter(|c| {
        c.strip_prefix(prefix)
            .is_some_and(|rest| !rest.is_empty() && rest.chars().all(|ch| ch.is_ascii_digit()))
    }).count();
    let n = count("x");
    let m = count("u");
    let p = count("theta_hat_");
    // "h_<digits>" never matches the "h_r_<digits>" columns.
    let q = count("h_");
    if q != count("h_r_") {
        bail!("inconsistent barrier columns in header");
    }

    let mut trace = SimulationTrace::default();
    for (lineno, line) in lines.enumerate() {
        let fields: Vec<&str> = line.split(',').collect();
        let expect = 1 + n + m + p + 1 + 2 * q + 1 + (q + 1) + 1;
        if fields.len() != expect {
            bail!("line {}: {} fields, expected {expect}", lineno + 2, fields.len());
        }
        let mut at = 0usize;
        let mut next_f64 = |fields: &[&str]| -> Result<f64> {
            let v = fields[at]
                .parse::<f64>()
                .map_err(|e| anyhow!("line {}: {e}", lineno + 2))?;
            at += 1;
            Ok(v)
        };
        trace.times.push(next_f64(&fields)?);
        let mut xs = Vec::with_capacity(n);
        for _ in 0..n {
            xs.push(next_f64(&fields)?);
        }
        trace.states.push(DVector::from_vec(xs));
        let mut us = Vec::with_capacity(m);
        for _ in 0..m {
            us.push(next_f64(&fields)?);
        }
        trace.controls.push(DVector::from_vec(us));
        let mut ths = Vec::with_capacity(p);
        for _ in 0..p {
            ths.push(next_f64(&fields)?);
        }
        trace.estimates.push(DVector::from_vec(ths));
        trace.envelope.push(next_f64(&fields)?);
        let mut hs = Vec::with_capacity(q);
        for _ in 0..q {
            hs.push(next_f64(&fields)?);
        }
        trace.barrier_values.push(DVector::from_vec(hs));
        let mut hrs = Vec::with_capacity(q);
        for _ in 0..q {
            hrs.push(next_f64(&fields)?);
        }
        trace.hr_values.push(DVector::from_vec(hrs));
        trace.lyapunov_values.push(next_f64(&fields)?);
        let mut ds = Vec::with_capacity(q + 1);
        for _ in 0..=q {
            ds.push(next_f64(&fields)?);
        }
        trace.slacks.push(DVector::from_vec(ds));
        trace.qp_statuses.push(
            fields[at]
                .parse::<StepStatus>()
                .map_err(|e| anyhow!("line {}: {e}", lineno + 2))?,
        );
    }
    if trace.times.len() >= 2 {
        trace.dt = trace.times[1] - trace.times[0];
    }
    Ok(trace)
}

/// One row of the sweep comparison table.
#[derive(Debug, Clone)]
pub struct SweepRow {
    pub theta_bar: f64,
    pub t_proposed: Option<f64>,
    pub t_baseline: Option<f64>,
    pub decision_proposed: Option<Decision>,
    pub decision_baseline: Option<Decision>,
    pub error: Option<String>,
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut out =
        String::from("theta_bar,T_proposed,T_baseline,decision_proposed,decision_baseline\n");
    for r in rows {
        let t_p = r.t_proposed.map(fmt_f64).unwrap_or_default();
        let t_b = r.t_baseline.map(fmt_f64).unwrap_or_default();
        let d_p = r
            .decision_proposed
            .map(|d| d.to_string())
            .unwrap_or_else(|| r.error.clone().unwrap_or_default());
        let d_b = r
            .decision_baseline
            .map(|d| d.to_string())
            .unwrap_or_else(|| r.error.clone().unwrap_or_default());
        let _ = writeln!(out, "{},{},{},{},{}", r.theta_bar, t_p, t_b, d_p, d_b);
    }
    out
}
