//! Stage costs: the plate overlap cost, its smoothed surrogate, the
//! neighborhood-cooperative composition and the naive/informed cost values
//! used for conflict detection.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Debug;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{StationaryPoint, Trajectory};
use crate::AgentId;

/// How the non-smooth overlap term is evaluated.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum CostMode {
    /// Piecewise overlap area; used for every reported metric.
    Exact,
    /// Differentiable surrogate with smoothing width `mu`; used by the solver.
    Smoothed { mu: f64 },
}

/// Overlap area of two square plates of side `side` at vertical positions `xi`, `xj`.
pub fn overlap_area(xi: f64, xj: f64, side: f64) -> f64 {
    let gap = (xi - xj).abs();
    if gap >= side {
        0.0
    } else {
        side * (side - gap)
    }
}

/// Differentiable surrogate of [`overlap_area`].
///
/// `side * mu * softplus((side - h(d)) / mu)` where `h` is the Huber smoothing of
/// `|d|` with width `mu`. Differs from the exact area by at most `mu * side * ln 2`.
pub fn smoothed_overlap_area(xi: f64, xj: f64, side: f64, mu: f64) -> f64 {
    smoothed_overlap(xi - xj, side, mu).0
}

fn softplus(t: f64) -> f64 {
    if t > 0.0 {
        t + (-t).exp().ln_1p()
    } else {
        t.exp().ln_1p()
    }
}

fn sigmoid(t: f64) -> f64 {
    if t >= 0.0 {
        1.0 / (1.0 + (-t).exp())
    } else {
        let e = t.exp();
        e / (1.0 + e)
    }
}

/// Huber-smoothed `|d|` and its derivative.
fn smooth_abs(d: f64, mu: f64) -> (f64, f64) {
    if d.abs() >= mu {
        (d.abs(), d.signum())
    } else {
        (d * d / (2.0 * mu) + mu / 2.0, d / mu)
    }
}

/// Smoothed overlap and its derivative with respect to `d = xi - xj`.
fn smoothed_overlap(d: f64, side: f64, mu: f64) -> (f64, f64) {
    let (h, dh) = smooth_abs(d, mu);
    let t = (side - h) / mu;
    (side * mu * softplus(t), -side * sigmoid(t) * dh)
}

/// Overlap value and slope with respect to `d = xi - xj` under `mode`.
fn overlap_with_slope(d: f64, side: f64, mode: CostMode) -> (f64, f64) {
    match mode {
        CostMode::Exact => {
            if d.abs() >= side {
                (0.0, 0.0)
            } else {
                let slope = if d == 0.0 { 0.0 } else { -side * d.signum() };
                (side * (side - d.abs()), slope)
            }
        }
        CostMode::Smoothed { mu } => smoothed_overlap(d, side, mu),
    }
}

/// State and input of one agent at one instant.
#[derive(Debug, Clone, Copy)]
pub struct AgentView<'a> {
    pub x: &'a [f64],
    pub u: &'a [f64],
}

impl<'a> AgentView<'a> {
    pub fn new(x: &'a [f64], u: &'a [f64]) -> Self {
        Self { x, u }
    }
}

/// A local stage cost `l_i(x_i, u_i, x_{-i}, u_{-i})`.
///
/// `upstream` holds the views of the agents in `N-(i)`, in ascending id order.
pub trait StageCost: Send + Sync + Debug {
    fn value(&self, me: AgentView<'_>, upstream: &[AgentView<'_>], mode: CostMode) -> f64;

    /// Adds the gradient with respect to `me` (`wrt = None`) or to `upstream[k]`
    /// (`wrt = Some(k)`) into `gx` / `gu`.
    fn add_gradient(
        &self,
        me: AgentView<'_>,
        upstream: &[AgentView<'_>],
        wrt: Option<usize>,
        mode: CostMode,
        gx: &mut [f64],
        gu: &mut [f64],
    );
}

/// Mean overlap with the physically adjacent plates plus `u^T u`.
///
/// The first state component is the plate's vertical position. With no
/// neighbors the cost reduces to the input penalty.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlateOverlapCost {
    /// Plate side length `L` (m).
    pub side: f64,
}

impl StageCost for PlateOverlapCost {
    fn value(&self, me: AgentView<'_>, upstream: &[AgentView<'_>], mode: CostMode) -> f64 {
        let effort: f64 = me.u.iter().map(|u| u * u).sum();
        if upstream.is_empty() {
            return effort;
        }
        let overlap: f64 = upstream
            .iter()
            .map(|j| overlap_with_slope(me.x[0] - j.x[0], self.side, mode).0)
            .sum();
        overlap / upstream.len() as f64 + effort
    }

    fn add_gradient(
        &self,
        me: AgentView<'_>,
        upstream: &[AgentView<'_>],
        wrt: Option<usize>,
        mode: CostMode,
        gx: &mut [f64],
        gu: &mut [f64],
    ) {
        let weight = if upstream.is_empty() {
            0.0
        } else {
            1.0 / upstream.len() as f64
        };
        match wrt {
            None => {
                for (g, u) in gu.iter_mut().zip(me.u) {
                    *g += 2.0 * u;
                }
                for j in upstream {
                    gx[0] += weight * overlap_with_slope(me.x[0] - j.x[0], self.side, mode).1;
                }
            }
            Some(k) => {
                let j = &upstream[k];
                gx[0] -= weight * overlap_with_slope(me.x[0] - j.x[0], self.side, mode).1;
            }
        }
    }
}

/// Neighbor sets of one agent: who enters its local cost, whose local costs it
/// enters, and the closure of both through its cooperative cost.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CostNeighborhood {
    pub self_id: AgentId,
    /// `N-(i)`
    pub upstream: BTreeSet<AgentId>,
    /// `N+(i)`
    pub downstream: BTreeSet<AgentId>,
    /// `N-(i|J)`: every agent the cooperative cost of `i` depends on.
    pub cost_upstream: BTreeSet<AgentId>,
    /// `N+(i|J)`: every agent whose cooperative cost depends on `i`.
    pub cost_downstream: BTreeSet<AgentId>,
    /// `N-(j)` for every `j` in `N+(i)`.
    pub downstream_upstreams: BTreeMap<AgentId, BTreeSet<AgentId>>,
}

impl CostNeighborhood {
    /// Neighborhood of an agent with no couplings.
    pub fn isolated(self_id: AgentId) -> Self {
        Self {
            self_id,
            upstream: BTreeSet::new(),
            downstream: BTreeSet::new(),
            cost_upstream: BTreeSet::new(),
            cost_downstream: BTreeSet::new(),
            downstream_upstreams: BTreeMap::new(),
        }
    }
}

/// What an agent currently believes about its cost-upstream neighbors.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AssumedNeighborData {
    pub trajectories: BTreeMap<AgentId, Trajectory>,
    pub stationary: BTreeMap<AgentId, StationaryPoint>,
}

impl AssumedNeighborData {
    pub fn insert(&mut self, agent: AgentId, trajectory: Trajectory, stationary: StationaryPoint) {
        self.trajectories.insert(agent, trajectory);
        self.stationary.insert(agent, stationary);
    }

    /// Checks that data is present for exactly `nbhd.cost_upstream`, with horizon `horizon`.
    pub fn check_covers(&self, nbhd: &CostNeighborhood, horizon: usize) -> Result<()> {
        for &j in &nbhd.cost_upstream {
            let traj = self
                .trajectories
                .get(&j)
                .ok_or(Error::IncompleteAssumption { agent: j })?;
            if !self.stationary.contains_key(&j) {
                return Err(Error::IncompleteAssumption { agent: j });
            }
            if traj.horizon() != horizon {
                return Err(Error::HorizonMismatch {
                    expected: horizon,
                    got: traj.horizon(),
                });
            }
        }
        if let Some(extra) = self
            .trajectories
            .keys()
            .chain(self.stationary.keys())
            .find(|j| !nbhd.cost_upstream.contains(j))
        {
            return Err(Error::contract(format!(
                "assumption held for agent {extra} outside the cost-upstream set of {}",
                nbhd.self_id
            )));
        }
        Ok(())
    }

    /// Views of every neighbor at prediction step `k`.
    pub fn at_step<'a>(&'a self, k: usize) -> impl Fn(AgentId) -> Option<AgentView<'a>> + 'a {
        move |j| {
            self.trajectories
                .get(&j)
                .map(|t| AgentView::new(t.states[k].as_slice(), t.inputs[k].as_slice()))
        }
    }

    /// Views of every neighbor's stationary pair.
    pub fn at_stationary<'a>(&'a self) -> impl Fn(AgentId) -> Option<AgentView<'a>> + 'a {
        move |j| {
            self.stationary
                .get(&j)
                .map(|p| AgentView::new(p.x_s.as_slice(), p.u_s.as_slice()))
        }
    }
}

fn resolve<'a>(
    id: AgentId,
    nbhd: &CostNeighborhood,
    own: AgentView<'a>,
    lookup: &dyn Fn(AgentId) -> Option<AgentView<'a>>,
) -> Result<AgentView<'a>> {
    if id == nbhd.self_id {
        Ok(own)
    } else {
        lookup(id).ok_or(Error::IncompleteAssumption { agent: id })
    }
}

fn gather<'a>(
    ids: &BTreeSet<AgentId>,
    nbhd: &CostNeighborhood,
    own: AgentView<'a>,
    lookup: &dyn Fn(AgentId) -> Option<AgentView<'a>>,
) -> Result<Vec<AgentView<'a>>> {
    ids.iter().map(|&j| resolve(j, nbhd, own, lookup)).collect()
}

/// Local stage cost of `nbhd.self_id` with its upstream neighbors drawn from `lookup`.
pub fn local_stage_cost<'a>(
    cost: &dyn StageCost,
    nbhd: &CostNeighborhood,
    own: AgentView<'a>,
    lookup: &dyn Fn(AgentId) -> Option<AgentView<'a>>,
    mode: CostMode,
) -> Result<f64> {
    let upstream = gather(&nbhd.upstream, nbhd, own, lookup)?;
    Ok(cost.value(own, &upstream, mode))
}

/// `J_i = l_i(own, N-(i)) + sum_{j in N+(i)} l_j(j, N-(j))`, with `own` used
/// wherever agent `i` appears and `lookup` everywhere else.
pub fn cooperative_stage_cost<'a>(
    cost: &dyn StageCost,
    nbhd: &CostNeighborhood,
    own: AgentView<'a>,
    lookup: &dyn Fn(AgentId) -> Option<AgentView<'a>>,
    mode: CostMode,
) -> Result<f64> {
    let mut total = local_stage_cost(cost, nbhd, own, lookup, mode)?;
    for (&j, ups) in &nbhd.downstream_upstreams {
        let me = resolve(j, nbhd, own, lookup)?;
        let views = gather(ups, nbhd, own, lookup)?;
        total += cost.value(me, &views, mode);
    }
    Ok(total)
}

/// Gradient of [`cooperative_stage_cost`] with respect to the agent's own state
/// and input, added into `gx` / `gu`.
pub fn add_cooperative_gradient<'a>(
    cost: &dyn StageCost,
    nbhd: &CostNeighborhood,
    own: AgentView<'a>,
    lookup: &dyn Fn(AgentId) -> Option<AgentView<'a>>,
    mode: CostMode,
    gx: &mut [f64],
    gu: &mut [f64],
) -> Result<()> {
    let upstream = gather(&nbhd.upstream, nbhd, own, lookup)?;
    cost.add_gradient(own, &upstream, None, mode, gx, gu);
    for (&j, ups) in &nbhd.downstream_upstreams {
        let me = resolve(j, nbhd, own, lookup)?;
        let views = gather(ups, nbhd, own, lookup)?;
        if let Some(k) = ups.iter().position(|&id| id == nbhd.self_id) {
            cost.add_gradient(me, &views, Some(k), mode, gx, gu);
        }
    }
    Ok(())
}

/// `sum_{k<H} J_i` along the agent's own trajectory against assumed neighbor trajectories.
pub fn horizon_cost(
    cost: &dyn StageCost,
    nbhd: &CostNeighborhood,
    own: &Trajectory,
    assumed: &AssumedNeighborData,
    mode: CostMode,
) -> Result<f64> {
    let mut total = 0.0;
    for k in 0..own.horizon() {
        let view = AgentView::new(own.states[k].as_slice(), own.inputs[k].as_slice());
        let lookup = assumed.at_step(k);
        total += cooperative_stage_cost(cost, nbhd, view, &lookup, mode)?;
    }
    Ok(total)
}

/// `J_i` at the agent's stationary pair against assumed neighbor stationary pairs.
pub fn stationary_cost(
    cost: &dyn StageCost,
    nbhd: &CostNeighborhood,
    own: &StationaryPoint,
    assumed: &AssumedNeighborData,
    mode: CostMode,
) -> Result<f64> {
    let view = AgentView::new(own.x_s.as_slice(), own.u_s.as_slice());
    let lookup = assumed.at_stationary();
    cooperative_stage_cost(cost, nbhd, view, &lookup, mode)
}

/// Naive (pre-exchange) and informed (post-exchange) cost values of an optimum.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CostReport {
    pub naive_stage: f64,
    pub informed_stage: f64,
    pub naive_horizon: f64,
    pub informed_horizon: f64,
}

/// Evaluates the agent's optimum (`trajectory`, `stationary`) against the
/// assumptions it solved with (`before`) and the freshest received optima
/// (`after`), with the exact overlap cost.
pub fn evaluate_cost_report(
    cost: &dyn StageCost,
    nbhd: &CostNeighborhood,
    trajectory: &Trajectory,
    stationary: &StationaryPoint,
    before: &AssumedNeighborData,
    after: &AssumedNeighborData,
    horizon: usize,
) -> Result<CostReport> {
    if trajectory.horizon() != horizon {
        return Err(Error::HorizonMismatch {
            expected: horizon,
            got: trajectory.horizon(),
        });
    }
    for data in [before, after] {
        for t in data.trajectories.values() {
            if t.horizon() != horizon {
                return Err(Error::HorizonMismatch {
                    expected: horizon,
                    got: t.horizon(),
                });
            }
        }
    }
    Ok(CostReport {
        naive_stage: stationary_cost(cost, nbhd, stationary, before, CostMode::Exact)?,
        informed_stage: stationary_cost(cost, nbhd, stationary, after, CostMode::Exact)?,
        naive_horizon: horizon_cost(cost, nbhd, trajectory, before, CostMode::Exact)?,
        informed_horizon: horizon_cost(cost, nbhd, trajectory, after, CostMode::Exact)?,
    })
}

/// `V = sum_i informed_horizon_i`.
pub fn global_cost(informed_horizons: &[f64]) -> f64 {
    informed_horizons.iter().sum()
}
