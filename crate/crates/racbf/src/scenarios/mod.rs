//! Concrete builds of the two case studies and the baseline controller.

pub mod gap;
pub mod overtake;
pub mod policy;

pub use gap::{build_gap, crossed_gap, GapConfig};
pub use overtake::{build_overtake, overtake_decision, Decision, OvertakeBuild, OvertakeConfig, PhaseState};
pub use policy::{ClfCbfQpPolicy, ClfSource, QpWeights, StaticClf};

/// Which controller drives a scenario.
///
/// The robust baseline reconstructs a worst-case comparator: the same QP as
/// the proposed controller but with the envelope frozen at the full box span
/// and no adaptation. The certainty-equivalent kind trusts the current
/// estimate with no margin at all.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ControllerKind {
    Proposed,
    RobustBaseline,
    CertaintyEquivalent,
}

impl std::fmt::Display for ControllerKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            ControllerKind::Proposed => "proposed",
            ControllerKind::RobustBaseline => "robust-baseline",
            ControllerKind::CertaintyEquivalent => "certainty-equivalent",
        };
        f.write_str(s)
    }
}

impl std::str::FromStr for ControllerKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "proposed" => Ok(ControllerKind::Proposed),
            "robust-baseline" => Ok(ControllerKind::RobustBaseline),
            "certainty-equivalent" => Ok(ControllerKind::CertaintyEquivalent),
            other => Err(format!("unknown controller kind: {other}")),
        }
    }
}

/// Gain scale sizing rule shared by the scenarios: the diagonal gain is
/// chosen so the worst-case shrunken-set offset at the reference bound uses
/// 90% of the smallest initial barrier margin.
pub fn auto_gamma_scale(theta_bar_ref: f64, p: usize, initial_margin: f64) -> f64 {
    assert!(initial_margin > 0.0);
    let vartheta = 2.0 * theta_bar_ref;
    (0.5 * vartheta * vartheta * p as f64 / (0.9 * initial_margin)).max(1.0)
}
