//! The negotiation engine: per time-step stationary-point negotiation,
//! trajectory negotiation, conflict-triggered hierarchy mutation with
//! rollback, then input application and warm-start shift.
//!
//! All cross-agent data goes through the [`Bus`]; within one hierarchy level
//! agents solve independently (optionally on the rayon pool) and results are
//! folded back in agent-id order, so traces do not depend on scheduling.

use std::sync::Arc;

use log::{debug, warn};
use nalgebra::DVector;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::audit::{audit_candidate, Violation};
use crate::error::{Error, Result};
use crate::hierarchy::{agent_stream, conflict_tolerance, detect_conflict, HierarchyState, Phase, StreamPurpose};
use crate::model::{AgentModel, StationaryPoint, Trajectory, TOL_DYN};
use crate::netsim::{Bus, BusStats, WireSize};
use crate::objective::{
    cooperative_stage_cost, evaluate_cost_report, AgentView, AssumedNeighborData, CostMode, CostNeighborhood,
    CostReport, StageCost,
};
use crate::solver::{LocalProblem, LocalSolver, SolveResult, SolverConfig};
use crate::topology::{greedy_color, EdgeRule, InfluenceGraph};
use crate::AgentId;

/// Initial hierarchy levels.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HierarchyInit {
    /// Every agent starts at level 1.
    AllOne,
    /// Greedy coloring of the conflict graph.
    Universal,
    /// One level per agent, each in `1..=N_q`.
    Explicit(Vec<usize>),
}

/// When the global cost is sampled.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplingMode {
    /// Once per negotiation iteration: `2 N_p` samples per time-step.
    PerIteration,
    /// After every hierarchy level: `2 N_p N_q` samples per time-step.
    PerLevel,
}

/// Direction used when a solve starts on a symmetric saddle.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TieBreak {
    /// Drawn from the agent's own seeded stream (opt-in; the default keeps
    /// hierarchy mutation as the only source of randomness).
    Seeded,
    /// Always the canonical positive direction.
    Positive,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CoordinatorConfig {
    /// `N_q`
    pub levels: usize,
    /// `N_p`
    pub iterations: usize,
    /// `H`
    pub horizon: usize,
    /// `T`
    pub time_steps: usize,
    pub seed: u64,
    pub hierarchy_init: HierarchyInit,
    /// Conflict graph used by [`HierarchyInit::Universal`].
    pub universal_rule: EdgeRule,
    pub sampling: SamplingMode,
    /// Absolute tolerance on `V` for iterations-to-settle.
    pub settle_tol: f64,
    /// Solve agents of one level concurrently.
    pub parallel: bool,
    pub tie_break: TieBreak,
    pub solver: SolverConfig,
}

impl Default for CoordinatorConfig {
    fn default() -> Self {
        Self {
            levels: 2,
            iterations: 5,
            horizon: 5,
            time_steps: 10,
            seed: 1,
            hierarchy_init: HierarchyInit::AllOne,
            universal_rule: EdgeRule::Direct,
            sampling: SamplingMode::PerLevel,
            settle_tol: 1e-6,
            parallel: false,
            tie_break: TieBreak::Positive,
            solver: SolverConfig::default(),
        }
    }
}

impl CoordinatorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.levels == 0 {
            return Err(Error::Config("levels (N_q) must be >= 1".into()));
        }
        if self.horizon == 0 {
            return Err(Error::Config("horizon (H) must be >= 1".into()));
        }
        if !(self.settle_tol > 0.0 && self.settle_tol.is_finite()) {
            return Err(Error::Config(format!(
                "settle_tol must be positive, got {}",
                self.settle_tol
            )));
        }
        if let HierarchyInit::Explicit(levels) = &self.hierarchy_init {
            if let Some(bad) = levels.iter().find(|&&q| q == 0 || q > self.levels) {
                return Err(Error::Config(format!(
                    "explicit hierarchy level {bad} outside 1..={}",
                    self.levels
                )));
            }
        }
        self.solver.validate()
    }
}

/// The last accepted (conflict-free) trajectory and stationary pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateSolution {
    pub trajectory: Trajectory,
    pub stationary: StationaryPoint,
}

impl CandidateSolution {
    /// At rest at `(position, 0)` held by input `position * spring`: a
    /// feasible candidate for any horizon.
    pub fn at_rest(state: DVector<f64>, input: DVector<f64>, horizon: usize) -> Self {
        Self {
            trajectory: Trajectory {
                states: vec![state.clone(); horizon + 1],
                inputs: vec![input.clone(); horizon],
            },
            stationary: StationaryPoint::new(state, input),
        }
    }
}

/// What one agent starts with.
#[derive(Debug, Clone)]
pub struct AgentSetup {
    pub model: AgentModel,
    pub candidate: CandidateSolution,
}

#[derive(Debug, Clone)]
pub struct AgentRuntime {
    pub id: AgentId,
    pub model: AgentModel,
    pub nbhd: CostNeighborhood,
    pub hierarchy: HierarchyState,
    pub candidate: CandidateSolution,
    pub assumed: AssumedNeighborData,
    pub measured_state: DVector<f64>,
    tie_rng: ChaCha8Rng,
}

impl AgentRuntime {
    fn problem<'a>(&'a self, cost: &'a dyn StageCost) -> LocalProblem<'a> {
        LocalProblem {
            model: &self.model,
            cost,
            nbhd: &self.nbhd,
            assumed: &self.assumed,
            x0: &self.measured_state,
        }
    }

    fn draw_tie_break(&mut self, policy: TieBreak) -> f64 {
        match policy {
            TieBreak::Positive => 1.0,
            TieBreak::Seeded => {
                if self.tie_rng.gen::<bool>() {
                    1.0
                } else {
                    -1.0
                }
            }
        }
    }

    fn ingest(&mut self, payload: &Payload, sender: AgentId) {
        match payload {
            Payload::Stationary(sp) => {
                self.assumed.stationary.insert(sender, sp.clone());
            }
            Payload::Trajectory(t) => {
                self.assumed.trajectories.insert(sender, t.clone());
            }
            Payload::Candidate(c) => {
                self.assumed.trajectories.insert(sender, c.trajectory.clone());
                self.assumed.stationary.insert(sender, c.stationary.clone());
            }
        }
    }
}

/// Message contents on the bus.
#[derive(Debug, Clone, PartialEq)]
pub enum Payload {
    /// A fresh stationary optimum.
    Stationary(StationaryPoint),
    /// A fresh trajectory optimum.
    Trajectory(Trajectory),
    /// The sender's current candidate.
    Candidate(CandidateSolution),
}

impl WireSize for Payload {
    fn wire_reals(&self) -> usize {
        let sp = |p: &StationaryPoint| p.x_s.len() + p.u_s.len();
        let tr = |t: &Trajectory| {
            t.states.iter().map(|x| x.len()).sum::<usize>() + t.inputs.iter().map(|u| u.len()).sum::<usize>()
        };
        match self {
            Payload::Stationary(p) => sp(p),
            Payload::Trajectory(t) => tr(t),
            Payload::Candidate(c) => sp(&c.stationary) + tr(&c.trajectory),
        }
    }
}

/// One agent's part of one negotiation iteration.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AgentRecord {
    pub agent: AgentId,
    /// Level at which the agent solved.
    pub level: usize,
    pub level_after: usize,
    pub conflict: bool,
    /// Naive value of the optimum (stage value in the stationary phase,
    /// horizon value in the trajectory phase).
    pub v_hat: f64,
    /// Informed value of the optimum.
    pub v_breve: f64,
    /// False when the local solve failed and the candidate was kept.
    pub solved: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationTrace {
    pub time_step: usize,
    pub phase: Phase,
    /// 1-based iteration within the phase.
    pub iteration: usize,
    pub agents: Vec<AgentRecord>,
    /// Global cost after acceptance and rollback.
    pub global_cost: f64,
    pub cumulative_mutations: u64,
}

/// One point of the global-cost series.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GlobalSample {
    pub index: usize,
    /// 0 for the initialization sample.
    pub time_step: usize,
    pub phase: Option<Phase>,
    pub iteration: usize,
    /// Level barrier after which the sample was taken (per-level series only).
    pub level: Option<usize>,
    pub v: f64,
    pub cumulative_mutations: u64,
    /// Mean candidate stationary position.
    pub mean_target: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditFailure {
    pub time_step: usize,
    pub phase: Option<Phase>,
    pub iteration: usize,
    pub agent: AgentId,
    pub violation: Violation,
}

/// Counters over every local solve of a run.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SolverStats {
    pub solves: u64,
    /// Solves that hit an iteration limit before meeting the tolerances.
    pub unconverged: u64,
    pub infeasible: u64,
    pub kept_warm_start: u64,
    pub inner_iterations: u64,
}

impl SolverStats {
    fn record(&mut self, outcome: &Outcome) {
        self.solves += 1;
        match outcome {
            Outcome::Solved(r) => {
                self.unconverged += u64::from(!r.converged);
                self.kept_warm_start += u64::from(r.kept_warm_start);
                self.inner_iterations += r.inner_iterations as u64;
            }
            Outcome::Failed(_) => self.infeasible += 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub config: CoordinatorConfig,
    pub trace: Vec<IterationTrace>,
    /// One sample per iteration, plus the initialization sample.
    pub per_iteration: Vec<GlobalSample>,
    /// One sample per level barrier, plus the initialization sample.
    pub per_level: Vec<GlobalSample>,
    /// Candidate stationary positions at initialization and after each time-step.
    pub target_history: Vec<Vec<f64>>,
    pub final_positions: Vec<f64>,
    pub final_levels: Vec<usize>,
    pub total_mutations: u64,
    /// Index into [`RunMetrics::samples`] after which `V` stays within `settle_tol`.
    pub iterations_to_settle: usize,
    pub bus: BusStats,
    pub solver_stats: SolverStats,
    pub audit_failures: Vec<AuditFailure>,
    /// Violations found when rolling every final candidate's inputs out from
    /// the final measured state.
    pub rollout_failures: Vec<(AgentId, Violation)>,
}

impl RunMetrics {
    /// The series selected by the configured sampling mode.
    pub fn samples(&self) -> &[GlobalSample] {
        match self.config.sampling {
            SamplingMode::PerIteration => &self.per_iteration,
            SamplingMode::PerLevel => &self.per_level,
        }
    }
}

/// Smallest index `s` with `|V_t - V_s| < tol` for every later `t`.
pub fn iterations_to_settle(values: &[f64], tol: f64) -> usize {
    if values.is_empty() {
        return 0;
    }
    // Walk backwards keeping the running range of the suffix.
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    let mut settle = values.len() - 1;
    for s in (0..values.len()).rev() {
        lo = lo.min(values[s]);
        hi = hi.max(values[s]);
        if (hi - values[s]).max(values[s] - lo) < tol {
            settle = s;
        } else {
            break;
        }
    }
    settle
}

/// Apply the first candidate input to the (disturbance-free) plant, drop it
/// from the sequence, append the stationary input and re-roll the trajectory
/// from the new state. Returns the applied input.
pub fn apply_and_shift(agent: &mut AgentRuntime) -> Result<DVector<f64>> {
    let cand = &mut agent.candidate;
    let applied = cand
        .trajectory
        .inputs
        .first()
        .cloned()
        .ok_or_else(|| Error::contract("candidate has an empty input sequence"))?;
    agent.measured_state = agent.model.try_step(&agent.measured_state, &applied)?;
    let mut inputs: Vec<DVector<f64>> = cand.trajectory.inputs[1..].to_vec();
    inputs.push(cand.stationary.u_s.clone());
    cand.trajectory = agent.model.rollout(&agent.measured_state, &inputs)?;
    Ok(applied)
}

enum Outcome {
    Solved(SolveResult),
    Failed(f64),
}

pub struct Coordinator {
    cfg: CoordinatorConfig,
    cost: Arc<dyn StageCost>,
    solver: LocalSolver,
    agents: Vec<AgentRuntime>,
    bus: Bus<Payload>,
    time_step: usize,
    trace: Vec<IterationTrace>,
    per_iteration: Vec<GlobalSample>,
    per_level: Vec<GlobalSample>,
    target_history: Vec<Vec<f64>>,
    audit_failures: Vec<AuditFailure>,
    solver_stats: SolverStats,
}

impl std::fmt::Debug for Coordinator {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Coordinator")
            .field("agents", &self.agents.len())
            .field("time_step", &self.time_step)
            .finish()
    }
}

impl Coordinator {
    /// Build the agents, assign initial levels, check every initial candidate
    /// and run one communication round so all assumptions are populated.
    pub fn new(
        graph: &InfluenceGraph,
        setups: Vec<AgentSetup>,
        cost: Arc<dyn StageCost>,
        cfg: CoordinatorConfig,
    ) -> Result<Self> {
        cfg.validate()?;
        let n = graph.n_agents();
        if setups.len() != n {
            return Err(Error::Config(format!(
                "{} agent setups for a graph of {n} agents",
                setups.len()
            )));
        }
        let levels = match &cfg.hierarchy_init {
            HierarchyInit::AllOne => vec![1; n],
            HierarchyInit::Universal => {
                let coloring = greedy_color(graph, cfg.universal_rule);
                if coloring.num_colors > cfg.levels {
                    return Err(Error::Config(format!(
                        "universal hierarchy needs {} levels but only {} are configured",
                        coloring.num_colors, cfg.levels
                    )));
                }
                coloring.level_of
            }
            HierarchyInit::Explicit(levels) => {
                if levels.len() != n {
                    return Err(Error::Config(format!(
                        "explicit hierarchy lists {} levels for {n} agents",
                        levels.len()
                    )));
                }
                levels.clone()
            }
        };
        let solver = LocalSolver::new(cfg.solver)?;
        let mut agents = Vec::with_capacity(n);
        for (id, (setup, nbhd)) in setups.into_iter().zip(graph.cost_coupling_sets()).enumerate() {
            setup.model.validate()?;
            let c = &setup.candidate;
            if c.trajectory.horizon() != cfg.horizon {
                return Err(Error::Initialization {
                    agent: id,
                    reason: format!(
                        "initial candidate has horizon {} instead of {}",
                        c.trajectory.horizon(),
                        cfg.horizon
                    ),
                });
            }
            let x0 = c.trajectory.states[0].clone();
            if let Some(v) = audit_candidate(&setup.model, &x0, &c.trajectory, &c.stationary, TOL_DYN).first() {
                return Err(Error::Initialization {
                    agent: id,
                    reason: v.to_string(),
                });
            }
            agents.push(AgentRuntime {
                id,
                hierarchy: HierarchyState::new(
                    levels[id],
                    cfg.levels,
                    agent_stream(cfg.seed, id, StreamPurpose::Mutation),
                )?,
                tie_rng: agent_stream(cfg.seed, id, StreamPurpose::TieBreak),
                model: setup.model,
                nbhd,
                candidate: setup.candidate,
                assumed: AssumedNeighborData::default(),
                measured_state: x0,
            });
        }
        let mut coordinator = Self {
            bus: Bus::new(n),
            cfg,
            cost,
            solver,
            agents,
            time_step: 0,
            trace: Vec::new(),
            per_iteration: Vec::new(),
            per_level: Vec::new(),
            target_history: Vec::new(),
            audit_failures: Vec::new(),
            solver_stats: SolverStats::default(),
        };
        coordinator.communicate()?;
        let v = coordinator.candidate_cost()?;
        coordinator.push_sample(None, 0, None, v, true);
        coordinator.target_history.push(coordinator.targets());
        Ok(coordinator)
    }

    pub fn agents(&self) -> &[AgentRuntime] {
        &self.agents
    }

    pub fn config(&self) -> &CoordinatorConfig {
        &self.cfg
    }

    pub fn trace(&self) -> &[IterationTrace] {
        &self.trace
    }

    pub fn bus_stats(&self) -> BusStats {
        self.bus.stats()
    }

    fn targets(&self) -> Vec<f64> {
        self.agents.iter().map(|a| a.candidate.stationary.x_s[0]).collect()
    }

    fn mutations(&self) -> u64 {
        self.agents.iter().map(|a| a.hierarchy.mutations()).sum()
    }

    fn push_sample(&mut self, phase: Option<Phase>, iteration: usize, level: Option<usize>, v: f64, both: bool) {
        let targets = self.targets();
        let sample = GlobalSample {
            index: 0,
            time_step: self.time_step,
            phase,
            iteration,
            level,
            v,
            cumulative_mutations: self.mutations(),
            mean_target: targets.iter().sum::<f64>() / targets.len() as f64,
        };
        self.per_level.push(GlobalSample {
            index: self.per_level.len(),
            ..sample
        });
        if both {
            self.per_iteration.push(GlobalSample {
                index: self.per_iteration.len(),
                ..sample
            });
        }
    }

    /// Every agent sends its candidate to the agents whose costs it enters.
    pub fn communicate(&mut self) -> Result<()> {
        for a in &self.agents {
            self.bus.broadcast(
                a.id,
                Payload::Candidate(a.candidate.clone()),
                a.nbhd.cost_downstream.iter().copied(),
            )?;
        }
        self.deliver();
        Ok(())
    }

    fn deliver(&mut self) {
        self.bus.barrier();
        for a in &mut self.agents {
            for msg in self.bus.drain(a.id) {
                a.ingest(&msg.payload, msg.sender);
            }
        }
    }

    /// Exact global cost `V = sum_i sum_k J_i` with every agent on the given
    /// trajectory and every neighbor read from the same set.
    fn system_cost(&self, working: &[&Trajectory]) -> Result<f64> {
        let cost = self.cost.as_ref();
        let mut total = 0.0;
        for a in &self.agents {
            let own = working[a.id];
            for k in 0..own.horizon() {
                let lookup = |j: AgentId| {
                    working
                        .get(j)
                        .map(|t| AgentView::new(t.states[k].as_slice(), t.inputs[k].as_slice()))
                };
                let view = AgentView::new(own.states[k].as_slice(), own.inputs[k].as_slice());
                total += cooperative_stage_cost(cost, &a.nbhd, view, &lookup, CostMode::Exact)?;
            }
        }
        Ok(total)
    }

    /// `V` over the current candidates.
    pub fn candidate_cost(&self) -> Result<f64> {
        let working: Vec<&Trajectory> = self.agents.iter().map(|a| &a.candidate.trajectory).collect();
        self.system_cost(&working)
    }

    fn solve_one(&self, agent: &AgentRuntime, phase: Phase, tie: f64) -> Result<Outcome> {
        let problem = agent.problem(self.cost.as_ref());
        let cand = &agent.candidate;
        let res = match phase {
            Phase::Stationary => self
                .solver
                .solve_stationary(problem, &cand.trajectory.inputs, &cand.stationary, tie),
            Phase::Trajectory => self
                .solver
                .solve_trajectory(problem, &cand.stationary, &cand.trajectory.inputs, tie),
        };
        match res {
            Ok(r) => Ok(Outcome::Solved(r)),
            Err(Error::Infeasible { best_residual }) => Ok(Outcome::Failed(best_residual)),
            Err(e) => Err(e),
        }
    }

    /// One negotiation phase: `N_p` iterations of the level loop.
    pub fn negotiate(&mut self, phase: Phase) -> Result<()> {
        for p in 1..=self.cfg.iterations {
            self.iterate(phase, p)?;
        }
        Ok(())
    }

    fn iterate(&mut self, phase: Phase, p: usize) -> Result<()> {
        let n = self.agents.len();
        let levels: Vec<usize> = self.agents.iter().map(|a| a.hierarchy.level()).collect();
        let mut outcomes: Vec<Option<Outcome>> = (0..n).map(|_| None).collect();
        let mut before: Vec<Option<AssumedNeighborData>> = vec![None; n];

        for q in 1..=self.cfg.levels {
            let group: Vec<AgentId> = (0..n).filter(|&i| levels[i] == q).collect();
            let ties: Vec<f64> = group
                .iter()
                .map(|&i| {
                    let policy = self.cfg.tie_break;
                    self.agents[i].draw_tie_break(policy)
                })
                .collect();
            let results: Vec<Result<Outcome>> = if self.cfg.parallel {
                group
                    .par_iter()
                    .zip(ties.par_iter())
                    .map(|(&i, &tie)| self.solve_one(&self.agents[i], phase, tie))
                    .collect()
            } else {
                group
                    .iter()
                    .zip(&ties)
                    .map(|(&i, &tie)| self.solve_one(&self.agents[i], phase, tie))
                    .collect()
            };
            for (&i, res) in group.iter().zip(results) {
                let outcome = res?;
                self.solver_stats.record(&outcome);
                before[i] = Some(self.agents[i].assumed.clone());
                if let Outcome::Solved(r) = &outcome {
                    let payload = match phase {
                        Phase::Stationary => Payload::Stationary(r.stationary.clone()),
                        Phase::Trajectory => Payload::Trajectory(r.trajectory.clone()),
                    };
                    self.bus
                        .broadcast(i, payload, self.agents[i].nbhd.cost_downstream.iter().copied())?;
                }
                outcomes[i] = Some(outcome);
            }
            self.deliver();
            if q < self.cfg.levels {
                let working: Vec<&Trajectory> = (0..n)
                    .map(|i| match &outcomes[i] {
                        Some(Outcome::Solved(r)) => &r.trajectory,
                        _ => &self.agents[i].candidate.trajectory,
                    })
                    .collect();
                let v = self.system_cost(&working)?;
                self.push_sample(Some(phase), p, Some(q), v, false);
            }
        }

        let mut records = Vec::with_capacity(n);
        for i in 0..n {
            let outcome = outcomes[i].take().expect("every agent solves once per iteration");
            let before_i = before[i].take().expect("recorded with the outcome");
            let agent = &mut self.agents[i];
            let level = agent.hierarchy.level();
            let (report, solved, result) = match outcome {
                Outcome::Solved(r) => {
                    let report = evaluate_cost_report(
                        self.cost.as_ref(),
                        &agent.nbhd,
                        &r.trajectory,
                        &r.stationary,
                        &before_i,
                        &agent.assumed,
                        self.cfg.horizon,
                    )?;
                    (report, true, Some(r))
                }
                Outcome::Failed(residual) => {
                    warn!(
                        "agent {i}: {} solve infeasible (residual {residual:e}) at time-step {} iteration {p}; keeping candidate",
                        phase.as_str(),
                        self.time_step
                    );
                    let report = evaluate_cost_report(
                        self.cost.as_ref(),
                        &agent.nbhd,
                        &agent.candidate.trajectory,
                        &agent.candidate.stationary,
                        &before_i,
                        &agent.assumed,
                        self.cfg.horizon,
                    )?;
                    (report, false, None)
                }
            };
            let (v_hat, v_breve) = phase_values(&report, phase);
            let conflict = solved && detect_conflict(&report, phase, conflict_tolerance(v_hat));
            if conflict {
                agent.hierarchy.mutate();
            } else if let Some(r) = result {
                match phase {
                    Phase::Stationary => {
                        agent.candidate.stationary = r.stationary;
                        agent.candidate.trajectory = r.trajectory;
                    }
                    Phase::Trajectory => agent.candidate.trajectory = r.trajectory,
                }
            }
            records.push(AgentRecord {
                agent: i,
                level,
                level_after: agent.hierarchy.level(),
                conflict,
                v_hat,
                v_breve,
                solved,
            });
        }

        self.communicate()?;
        self.audit(Some(phase), p);
        let v = self.candidate_cost()?;
        self.push_sample(Some(phase), p, Some(self.cfg.levels), v, true);
        let conflicts = records.iter().filter(|r| r.conflict).count();
        debug!(
            "t={} {} p={p}: V={v:.12} conflicts={conflicts}",
            self.time_step,
            phase.as_str()
        );
        self.trace.push(IterationTrace {
            time_step: self.time_step,
            phase,
            iteration: p,
            agents: records,
            global_cost: v,
            cumulative_mutations: self.mutations(),
        });
        Ok(())
    }

    fn audit(&mut self, phase: Option<Phase>, iteration: usize) {
        for a in &self.agents {
            let c = &a.candidate;
            for violation in audit_candidate(&a.model, &a.measured_state, &c.trajectory, &c.stationary, TOL_DYN) {
                self.audit_failures.push(AuditFailure {
                    time_step: self.time_step,
                    phase,
                    iteration,
                    agent: a.id,
                    violation,
                });
            }
        }
    }

    /// One full time-step: communicate, negotiate both phases, apply and shift.
    pub fn step(&mut self) -> Result<()> {
        self.time_step += 1;
        self.communicate()?;
        self.negotiate(Phase::Stationary)?;
        self.negotiate(Phase::Trajectory)?;
        for a in &mut self.agents {
            apply_and_shift(a)?;
        }
        self.audit(None, 0);
        self.target_history.push(self.targets());
        Ok(())
    }

    /// Roll every candidate's inputs out from the measured state and check
    /// that it lands on its stationary target.
    pub fn rollout_audit(&self) -> Vec<(AgentId, Violation)> {
        let mut out = Vec::new();
        for a in &self.agents {
            let c = &a.candidate;
            match a.model.rollout(&a.measured_state, &c.trajectory.inputs) {
                Ok(t) => {
                    for v in audit_candidate(&a.model, &a.measured_state, &t, &c.stationary, TOL_DYN) {
                        out.push((a.id, v));
                    }
                }
                Err(e) => out.push((a.id, Violation::Shape(e.to_string()))),
            }
        }
        out
    }

    /// Run the configured number of time-steps and collect the metrics.
    pub fn run(mut self) -> Result<RunMetrics> {
        for _ in 0..self.cfg.time_steps {
            self.step()?;
        }
        Ok(self.finish())
    }

    pub fn finish(self) -> RunMetrics {
        let rollout_failures = self.rollout_audit();
        let series = match self.cfg.sampling {
            SamplingMode::PerIteration => &self.per_iteration,
            SamplingMode::PerLevel => &self.per_level,
        };
        let values: Vec<f64> = series.iter().map(|s| s.v).collect();
        let settle = iterations_to_settle(&values, self.cfg.settle_tol);
        RunMetrics {
            trace: self.trace,
            final_positions: self.agents.iter().map(|a| a.measured_state[0]).collect(),
            final_levels: self.agents.iter().map(|a| a.hierarchy.level()).collect(),
            total_mutations: self.agents.iter().map(|a| a.hierarchy.mutations()).sum(),
            target_history: self.target_history,
            per_iteration: self.per_iteration,
            per_level: self.per_level,
            iterations_to_settle: settle,
            bus: self.bus.stats(),
            solver_stats: self.solver_stats,
            audit_failures: self.audit_failures,
            rollout_failures,
            config: self.cfg,
        }
    }
}

fn phase_values(report: &CostReport, phase: Phase) -> (f64, f64) {
    match phase {
        Phase::Stationary => (report.naive_stage, report.informed_stage),
        Phase::Trajectory => (report.naive_horizon, report.informed_horizon),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::experiments::ExperimentSpec;
    use crate::model::{discretize_plate, PlateParams};
    use crate::objective::PlateOverlapCost;

    fn spec(n: usize, t: usize) -> ExperimentSpec {
        ExperimentSpec {
            n_agents: n,
            time_steps: t,
            ..Default::default()
        }
    }

    fn v2(a: f64, b: f64) -> DVector<f64> {
        DVector::from_vec(vec![a, b])
    }

    #[test]
    fn origin_start_matches_closed_form() {
        // Interior plates enter three cooperative costs, the two ends two.
        let m = spec(10, 0).run(1).unwrap();
        assert_eq!(m.per_iteration.len(), 1);
        assert_eq!(m.per_level.len(), 1);
        assert!(m.trace.is_empty());
        assert_eq!(m.target_history.len(), 1);
        assert!((m.per_iteration[0].v - 5.0 * 0.0625 * 28.0).abs() < 1e-12);
        assert_eq!(m.iterations_to_settle, 0);
    }

    #[test]
    fn initial_round_reaches_every_cost_neighbor() {
        let c = spec(10, 0).build(1).unwrap();
        assert_eq!(c.bus_stats().messages_sent, 34);
        for a in c.agents() {
            let expect: Vec<AgentId> = a.nbhd.cost_upstream.iter().copied().collect();
            let got: Vec<AgentId> = a.assumed.trajectories.keys().copied().collect();
            assert_eq!(got, expect);
        }
    }

    #[test]
    fn hierarchy_initialization() {
        let c = spec(10, 0).build(1).unwrap();
        assert!(c.agents().iter().all(|a| a.hierarchy.level() == 1));
        let mut s = spec(10, 0);
        s.hierarchy_init = HierarchyInit::Universal;
        let c = s.build(1).unwrap();
        let levels: Vec<usize> = c.agents().iter().map(|a| a.hierarchy.level()).collect();
        assert_eq!(levels, vec![1, 2, 1, 2, 1, 2, 1, 2, 1, 2]);
        s.universal_rule = EdgeRule::CostCoupled;
        assert!(matches!(s.build(1), Err(Error::Config(_))));
        s.levels = 3;
        assert!(s.build(1).is_ok());
    }

    #[test]
    fn bad_configurations_are_rejected() {
        let mut s = spec(3, 0);
        s.hierarchy_init = HierarchyInit::Explicit(vec![1, 3, 1]);
        assert!(matches!(s.build(1), Err(Error::Config(_))));
        s.hierarchy_init = HierarchyInit::Explicit(vec![1, 2]);
        assert!(matches!(s.build(1), Err(Error::Config(_))));
        s.hierarchy_init = HierarchyInit::AllOne;
        s.levels = 0;
        assert!(s.build(1).is_err());
    }

    #[test]
    fn infeasible_initial_candidate_names_the_agent() {
        let model = discretize_plate(PlateParams::default(), 1.0)
            .unwrap()
            .with_symmetric_input_bound(0.25)
            .unwrap();
        let ok = CandidateSolution::at_rest(v2(0.0, 0.0), DVector::zeros(1), 5);
        // Resting at 0.1 needs input 0.1, not 0.
        let bad = CandidateSolution::at_rest(v2(0.1, 0.0), DVector::zeros(1), 5);
        let setups = vec![
            AgentSetup {
                model: model.clone(),
                candidate: ok,
            },
            AgentSetup { model, candidate: bad },
        ];
        let err = Coordinator::new(
            &InfluenceGraph::chain(2).unwrap(),
            setups,
            Arc::new(PlateOverlapCost { side: 0.25 }),
            CoordinatorConfig::default(),
        )
        .unwrap_err();
        assert!(matches!(err, Error::Initialization { agent: 1, .. }));
    }

    #[test]
    fn sample_counts_follow_the_sampling_mode() {
        let m = spec(4, 2).run(3).unwrap();
        assert_eq!(m.per_iteration.len(), 1 + 2 * 2 * 5);
        assert_eq!(m.per_level.len(), 1 + 2 * 2 * 5 * 2);
        assert_eq!(m.trace.len(), 2 * 2 * 5);
        assert_eq!(m.target_history.len(), 3);
        for (k, s) in m.per_level.iter().enumerate() {
            assert_eq!(s.index, k);
        }
        // The last level sample of an iteration is that iteration's sample.
        for (it, pl) in m.per_iteration[1..].iter().zip(m.per_level[2..].iter().step_by(2)) {
            assert_eq!((it.v, it.time_step, it.iteration), (pl.v, pl.time_step, pl.iteration));
        }
    }

    #[test]
    fn single_agent_never_conflicts_and_descends() {
        let mut s = spec(1, 3);
        s.initial_positions = Some(vec![0.2]);
        let m = s.run(5).unwrap();
        assert_eq!(m.total_mutations, 0);
        assert!(m.trace.iter().flat_map(|t| &t.agents).all(|r| !r.conflict));
        for w in m.per_iteration.windows(2) {
            if w[0].time_step == w[1].time_step && w[0].time_step > 0 {
                assert!(w[1].v <= w[0].v + 1e-12, "{} -> {}", w[0].v, w[1].v);
            }
        }
        // Alone, the cheapest place to rest is the origin.
        assert!(m.final_positions[0].abs() < 0.2);
    }

    #[test]
    fn one_level_keeps_everyone_at_level_one() {
        let mut s = spec(6, 2);
        s.levels = 1;
        let m = s.run(2).unwrap();
        assert!(m.final_levels.iter().all(|&q| q == 1));
        assert!(m
            .trace
            .iter()
            .flat_map(|t| &t.agents)
            .all(|r| r.level == 1 && r.level_after == 1));
    }

    #[test]
    fn zero_candidate_shift_stays_at_origin() {
        let mut c = spec(2, 0).build(1).unwrap();
        let a = &mut c.agents[0];
        let u = apply_and_shift(a).unwrap();
        assert_eq!(u[0], 0.0);
        assert_eq!(a.measured_state, v2(0.0, 0.0));
        assert!(a.candidate.trajectory.inputs.iter().all(|u| u[0] == 0.0));
        assert!(a.candidate.trajectory.is_consistent(&a.model, TOL_DYN));
    }

    #[test]
    fn shifting_alone_reaches_the_target() {
        let mut s = spec(1, 1);
        s.initial_positions = Some(vec![0.2]);
        let mut c = s.build(1).unwrap();
        c.step().unwrap();
        let mut agent = c.agents[0].clone();
        let target = agent.candidate.stationary.x_s.clone();
        assert!((target[0] - 0.2).abs() > 1e-3, "the solve should move the target");
        for _ in 0..5 {
            apply_and_shift(&mut agent).unwrap();
            assert!(audit_candidate(
                &agent.model,
                &agent.measured_state,
                &agent.candidate.trajectory,
                &agent.candidate.stationary,
                TOL_DYN
            )
            .is_empty());
        }
        assert!((&agent.measured_state - &target).amax() < 1e-8);
    }

    #[test]
    fn conflicted_agents_roll_back_and_rebroadcast_their_candidate() {
        let mut c = spec(10, 0).build(1).unwrap();
        c.time_step = 1;
        let before: Vec<CandidateSolution> = c.agents.iter().map(|a| a.candidate.clone()).collect();
        c.iterate(Phase::Stationary, 1).unwrap();
        let records = &c.trace[0].agents;
        assert!(records.iter().any(|r| r.conflict), "symmetric start must conflict");
        for r in records {
            let now = &c.agents[r.agent].candidate;
            if r.conflict {
                assert_eq!(now, &before[r.agent]);
            } else {
                assert_ne!(now.stationary, before[r.agent].stationary);
            }
            for j in &c.agents[r.agent].nbhd.cost_downstream {
                let seen = &c.agents[*j].assumed;
                assert_eq!(seen.trajectories[&r.agent], now.trajectory);
                assert_eq!(seen.stationary[&r.agent], now.stationary);
            }
        }
        assert!(c.audit_failures.is_empty());
    }

    #[test]
    fn runs_are_reproducible_and_schedule_independent() {
        let s = spec(6, 2);
        let a = s.run(11).unwrap();
        let b = s.run(11).unwrap();
        assert_eq!(a, b);
        let mut p = s.clone();
        p.parallel = true;
        let c = p.run(11).unwrap();
        assert_eq!(a.trace, c.trace);
        assert_eq!(a.per_level, c.per_level);
        assert_eq!(a.final_positions, c.final_positions);
    }

    #[test]
    fn settle_index() {
        assert_eq!(iterations_to_settle(&[], 1e-6), 0);
        assert_eq!(iterations_to_settle(&[5.0, 5.0], 1e-6), 0);
        assert_eq!(iterations_to_settle(&[3.0, 2.0, 1.0, 1.0, 1.0], 1e-6), 2);
        assert_eq!(iterations_to_settle(&[0.0, 1.0, 0.0], 1e-6), 2);
        // Slow drift inside the tolerance still counts as settled.
        assert_eq!(iterations_to_settle(&[9.0, 1.0, 1.0 + 4e-7, 1.0 + 8e-7], 1e-6), 1);
        assert_eq!(iterations_to_settle(&[9.0, 1.0, 1.0 + 6e-7, 1.0 + 1.2e-6], 1e-6), 2);
    }

    #[test]
    fn every_candidate_stays_feasible() {
        let m = spec(5, 3).run(4).unwrap();
        assert!(m.audit_failures.is_empty(), "{:?}", m.audit_failures);
        assert!(m.rollout_failures.is_empty(), "{:?}", m.rollout_failures);
        assert_eq!(m.solver_stats.solves, 5 * 3 * 2 * 5);
    }
}
