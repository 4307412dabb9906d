//! Independent constraint checks on raw trajectories and stationary pairs.
//!
//! Nothing here goes through the solver or the `Dynamics` trait: residuals are
//! recomputed directly from the model matrices so a bug in either cannot hide
//! itself.

use std::fmt;

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::model::{AgentModel, StationaryPoint, Trajectory};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Violation {
    Shape(String),
    InitialState { residual: f64 },
    Dynamics { step: usize, residual: f64 },
    InputBox { step: usize },
    StateBox { step: usize, excess: f64 },
    Terminal { residual: f64 },
    Stationarity { residual: f64 },
    StationaryBox,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::Shape(msg) => write!(f, "malformed data: {msg}"),
            Violation::InitialState { residual } => write!(f, "initial state off by {residual:e}"),
            Violation::Dynamics { step, residual } => {
                write!(f, "dynamics violated at step {step} by {residual:e}")
            }
            Violation::InputBox { step } => write!(f, "input outside its box at step {step}"),
            Violation::StateBox { step, excess } => {
                write!(f, "state outside its box at step {step} by {excess:e}")
            }
            Violation::Terminal { residual } => write!(f, "terminal state misses target by {residual:e}"),
            Violation::Stationarity { residual } => {
                write!(f, "stationary pair is not a fixed point (residual {residual:e})")
            }
            Violation::StationaryBox => write!(f, "stationary pair outside its box"),
        }
    }
}

fn inf_norm(v: &DVector<f64>) -> f64 {
    v.iter().fold(0.0_f64, |m, x| m.max(x.abs()))
}

fn within(v: &DVector<f64>, lo: &DVector<f64>, hi: &DVector<f64>) -> bool {
    v.iter()
        .zip(lo.iter().zip(hi.iter()))
        .all(|(x, (l, h))| *l <= *x && *x <= *h)
}

fn box_excess(v: &DVector<f64>, lo: &DVector<f64>, hi: &DVector<f64>) -> f64 {
    v.iter()
        .zip(lo.iter().zip(hi.iter()))
        .map(|(x, (l, h))| (l - x).max(x - h).max(0.0))
        .fold(0.0, f64::max)
}

/// Checks a stationary pair: fixed point of the dynamics to `tol`, both
/// vectors inside their boxes exactly.
pub fn audit_stationary(model: &AgentModel, sp: &StationaryPoint, tol: f64) -> Vec<Violation> {
    let mut out = Vec::new();
    if sp.x_s.len() != model.a.nrows() || sp.u_s.len() != model.b.ncols() {
        out.push(Violation::Shape("stationary pair dimensions".into()));
        return out;
    }
    let residual = inf_norm(&(&model.a * &sp.x_s + &model.b * &sp.u_s - &sp.x_s));
    if residual > tol {
        out.push(Violation::Stationarity { residual });
    }
    if !within(&sp.x_s, &model.x_lo, &model.x_hi) || !within(&sp.u_s, &model.u_lo, &model.u_hi) {
        out.push(Violation::StationaryBox);
    }
    out
}

/// Checks a trajectory against its initial state, the dynamics, the boxes and
/// the terminal target. Inputs must lie in their box exactly; states within
/// `tol` of theirs.
pub fn audit_trajectory(
    model: &AgentModel,
    x0: &DVector<f64>,
    traj: &Trajectory,
    target: &StationaryPoint,
    tol: f64,
) -> Vec<Violation> {
    let mut out = Vec::new();
    let h = traj.inputs.len();
    if traj.states.len() != h + 1 || h == 0 {
        out.push(Violation::Shape(format!(
            "{} states for {} inputs",
            traj.states.len(),
            h
        )));
        return out;
    }
    let residual = inf_norm(&(&traj.states[0] - x0));
    if residual > 0.0 {
        out.push(Violation::InitialState { residual });
    }
    for k in 0..h {
        let predicted = &model.a * &traj.states[k] + &model.b * &traj.inputs[k];
        let residual = inf_norm(&(predicted - &traj.states[k + 1]));
        if residual > tol {
            out.push(Violation::Dynamics { step: k, residual });
        }
        if !within(&traj.inputs[k], &model.u_lo, &model.u_hi) {
            out.push(Violation::InputBox { step: k });
        }
    }
    for (k, x) in traj.states.iter().enumerate().skip(1) {
        let excess = box_excess(x, &model.x_lo, &model.x_hi);
        if excess > tol {
            out.push(Violation::StateBox { step: k, excess });
        }
    }
    let residual = inf_norm(&(&traj.states[h] - &target.x_s));
    if residual > tol {
        out.push(Violation::Terminal { residual });
    }
    out
}

/// Both checks at once, for a candidate (trajectory, stationary pair).
pub fn audit_candidate(
    model: &AgentModel,
    x0: &DVector<f64>,
    traj: &Trajectory,
    sp: &StationaryPoint,
    tol: f64,
) -> Vec<Violation> {
    let mut out = audit_stationary(model, sp, tol);
    out.extend(audit_trajectory(model, x0, traj, sp, tol));
    out
}
