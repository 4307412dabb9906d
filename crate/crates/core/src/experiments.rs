//! Canned runs on the suspended-plate benchmark: a seeded multi-run study and
//! the parallel-versus-hierarchy scaling comparison.

use std::sync::Arc;

use nalgebra::DVector;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::coordinator::{
    AgentSetup, CandidateSolution, Coordinator, CoordinatorConfig, HierarchyInit, RunMetrics, SamplingMode, TieBreak,
};
use crate::error::{Error, Result};
use crate::model::{discretize_plate, PlateParams};
use crate::objective::PlateOverlapCost;
use crate::solver::SolverConfig;
use crate::topology::{EdgeRule, InfluenceGraph};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentSpec {
    pub name: String,
    pub n_agents: usize,
    /// `N_q`
    pub levels: usize,
    /// `N_p`
    pub iterations: usize,
    /// `H`
    pub horizon: usize,
    /// Sampling period (s).
    pub dt: f64,
    /// `T`
    pub time_steps: usize,
    /// Symmetric actuation bound (N).
    pub u_bound: f64,
    pub plate: PlateParams,
    /// Plate side length `L` (m).
    pub side: f64,
    pub seeds: Vec<u64>,
    pub hierarchy_init: HierarchyInit,
    pub universal_rule: EdgeRule,
    pub sampling: SamplingMode,
    pub settle_tol: f64,
    pub parallel: bool,
    pub tie_break: TieBreak,
    /// Rest positions the plates start from; all zero when absent.
    pub initial_positions: Option<Vec<f64>>,
    pub solver: SolverConfig,
}

impl Default for ExperimentSpec {
    fn default() -> Self {
        let c = CoordinatorConfig::default();
        Self {
            name: "plates".into(),
            n_agents: 10,
            levels: c.levels,
            iterations: c.iterations,
            horizon: c.horizon,
            dt: 1.0,
            time_steps: c.time_steps,
            u_bound: 0.25,
            plate: PlateParams::default(),
            side: 0.25,
            seeds: vec![1, 2, 3, 4, 5],
            hierarchy_init: c.hierarchy_init,
            universal_rule: c.universal_rule,
            sampling: c.sampling,
            settle_tol: c.settle_tol,
            parallel: c.parallel,
            tie_break: c.tie_break,
            initial_positions: None,
            solver: c.solver,
        }
    }
}

impl ExperimentSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_agents == 0 {
            return Err(Error::Config("n_agents must be >= 1".into()));
        }
        if self.seeds.is_empty() {
            return Err(Error::Config("seeds must not be empty".into()));
        }
        let positive = [
            ("dt", self.dt),
            ("side", self.side),
            ("plate.mass", self.plate.mass),
            ("plate.spring", self.plate.spring),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        if !(self.plate.damping >= 0.0 && self.plate.damping.is_finite()) {
            return Err(Error::Config(format!(
                "plate.damping must be non-negative, got {}",
                self.plate.damping
            )));
        }
        if !(self.u_bound >= 0.0 && self.u_bound.is_finite()) {
            return Err(Error::Config(format!(
                "u_bound must be non-negative, got {}",
                self.u_bound
            )));
        }
        if let Some(p) = &self.initial_positions {
            if p.len() != self.n_agents {
                return Err(Error::Config(format!(
                    "initial_positions lists {} plates for n_agents = {}",
                    p.len(),
                    self.n_agents
                )));
            }
        }
        self.coordinator_config(self.seeds[0]).validate()
    }

    pub fn coordinator_config(&self, seed: u64) -> CoordinatorConfig {
        CoordinatorConfig {
            levels: self.levels,
            iterations: self.iterations,
            horizon: self.horizon,
            time_steps: self.time_steps,
            seed,
            hierarchy_init: self.hierarchy_init.clone(),
            universal_rule: self.universal_rule,
            sampling: self.sampling,
            settle_tol: self.settle_tol,
            parallel: self.parallel,
            tie_break: self.tie_break,
            solver: self.solver,
        }
    }

    /// The plate chain for one seed, initialized and ready to run.
    pub fn build(&self, seed: u64) -> Result<Coordinator> {
        self.validate()?;
        let model = discretize_plate(self.plate, self.dt)?.with_symmetric_input_bound(self.u_bound)?;
        let setups = (0..self.n_agents)
            .map(|i| {
                let p = self.initial_positions.as_ref().map_or(0.0, |v| v[i]);
                AgentSetup {
                    model: model.clone(),
                    candidate: CandidateSolution::at_rest(
                        DVector::from_vec(vec![p, 0.0]),
                        DVector::from_vec(vec![p * self.plate.spring]),
                        self.horizon,
                    ),
                }
            })
            .collect();
        let graph = InfluenceGraph::chain(self.n_agents)?;
        Coordinator::new(
            &graph,
            setups,
            Arc::new(PlateOverlapCost { side: self.side }),
            self.coordinator_config(seed),
        )
    }

    pub fn run(&self, seed: u64) -> Result<RunMetrics> {
        self.build(seed)?.run()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedSummary {
    pub seed: u64,
    pub iterations_to_settle: usize,
    pub final_v: f64,
    pub total_mutations: u64,
    pub final_positions: Vec<f64>,
}

impl SeedSummary {
    fn of(seed: u64, m: &RunMetrics) -> Self {
        Self {
            seed,
            iterations_to_settle: m.iterations_to_settle,
            final_v: m.samples().last().map_or(f64::NAN, |s| s.v),
            total_mutations: m.total_mutations,
            final_positions: m.final_positions.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyReport {
    pub spec: ExperimentSpec,
    pub runs: Vec<(u64, RunMetrics)>,
    pub summary: Vec<SeedSummary>,
}

/// Run every seed of `spec` (concurrently; results in seed order).
pub fn plate_study(spec: &ExperimentSpec) -> Result<StudyReport> {
    spec.validate()?;
    let runs: Vec<(u64, RunMetrics)> = spec
        .seeds
        .par_iter()
        .map(|&seed| spec.run(seed).map(|m| (seed, m)))
        .collect::<Result<_>>()?;
    let summary = runs.iter().map(|(s, m)| SeedSummary::of(*s, m)).collect();
    Ok(StudyReport {
        spec: spec.clone(),
        runs,
        summary,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Single level: every agent solves at once.
    Parallel,
    /// `N_q` levels from the base spec, all agents starting at level 1.
    Hierarchy,
}

impl Variant {
    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Parallel => "parallel",
            Variant::Hierarchy => "hierarchy",
        }
    }

    pub fn apply(self, base: &ExperimentSpec, n_agents: usize) -> ExperimentSpec {
        let mut spec = base.clone();
        spec.n_agents = n_agents;
        spec.initial_positions = None;
        spec.hierarchy_init = HierarchyInit::AllOne;
        if self == Variant::Parallel {
            spec.levels = 1;
        }
        spec
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalingRow {
    pub n_agents: usize,
    pub variant: Variant,
    pub settle_per_seed: Vec<usize>,
    pub median_settle: f64,
}

pub fn median(values: &[usize]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let mut v = values.to_vec();
    v.sort_unstable();
    let mid = v.len() / 2;
    if v.len() % 2 == 1 {
        v[mid] as f64
    } else {
        (v[mid - 1] + v[mid]) as f64 / 2.0
    }
}

/// Median iterations-to-settle for every `(N, variant)` pair over the base
/// spec's seeds.
pub fn scaling_comparison(base: &ExperimentSpec, ns: &[usize], variants: &[Variant]) -> Result<Vec<ScalingRow>> {
    if ns.is_empty() {
        return Err(Error::Config("scaling comparison needs at least one N".into()));
    }
    let jobs: Vec<(usize, Variant, u64)> = ns
        .iter()
        .flat_map(|&n| {
            variants
                .iter()
                .flat_map(move |&v| base.seeds.iter().map(move |&s| (n, v, s)))
        })
        .collect();
    let settles: Vec<usize> = jobs
        .par_iter()
        .map(|&(n, v, s)| v.apply(base, n).run(s).map(|m| m.iterations_to_settle))
        .collect::<Result<_>>()?;
    let mut rows = Vec::new();
    let mut it = settles.into_iter();
    for &n in ns {
        for &variant in variants {
            let settle_per_seed: Vec<usize> = it.by_ref().take(base.seeds.len()).collect();
            rows.push(ScalingRow {
                n_agents: n,
                variant,
                median_settle: median(&settle_per_seed),
                settle_per_seed,
            });
        }
    }
    Ok(rows)
}
