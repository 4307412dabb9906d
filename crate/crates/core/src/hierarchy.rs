//! Per-agent hierarchy levels, conflict detection and conflict-triggered
//! random level mutation.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::objective::CostReport;
use crate::AgentId;

/// Relative tolerance applied to conflict comparisons.
pub const CONFLICT_REL_TOL: f64 = 1e-9;

/// Negotiation phase of one time-step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Stationary,
    Trajectory,
}

impl Phase {
    pub fn as_str(self) -> &'static str {
        match self {
            Phase::Stationary => "stationary",
            Phase::Trajectory => "trajectory",
        }
    }
}

impl std::str::FromStr for Phase {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "stationary" => Ok(Phase::Stationary),
            "trajectory" => Ok(Phase::Trajectory),
            other => Err(Error::Config(format!("unknown phase '{other}'"))),
        }
    }
}

/// Independent random streams owned by one agent.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum StreamPurpose {
    Mutation = 0,
    /// Direction choices when the local solver starts on a symmetric saddle.
    TieBreak = 1,
}

/// Stream for `(global_seed, agent, purpose)`. Streams of different agents or
/// purposes never overlap, so draws are independent of scheduling order.
pub fn agent_stream(global_seed: u64, agent: AgentId, purpose: StreamPurpose) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(global_seed);
    rng.set_stream(((agent as u64) << 4) | purpose as u64);
    rng
}

#[derive(Debug, Clone)]
pub struct HierarchyState {
    level: usize,
    num_levels: usize,
    mutations: u64,
    rng: ChaCha8Rng,
}

impl HierarchyState {
    /// `level` must lie in `1..=num_levels`.
    pub fn new(level: usize, num_levels: usize, rng: ChaCha8Rng) -> Result<Self> {
        if num_levels == 0 {
            return Err(Error::Config("number of hierarchy levels must be >= 1".into()));
        }
        if level == 0 || level > num_levels {
            return Err(Error::Config(format!(
                "hierarchy level {level} outside 1..={num_levels}"
            )));
        }
        Ok(Self {
            level,
            num_levels,
            mutations: 0,
            rng,
        })
    }

    pub fn level(&self) -> usize {
        self.level
    }

    pub fn num_levels(&self) -> usize {
        self.num_levels
    }

    pub fn mutations(&self) -> u64 {
        self.mutations
    }

    /// Redraw the level uniformly over all levels (the current one included)
    /// and count the mutation.
    pub fn mutate(&mut self) -> usize {
        self.level = self.rng.gen_range(1..=self.num_levels);
        self.mutations += 1;
        self.level
    }
}

/// `eps = 1e-9 * max(1, |naive|)`.
pub fn conflict_tolerance(naive: f64) -> f64 {
    CONFLICT_REL_TOL * naive.abs().max(1.0)
}

/// Whether the informed value exceeds the naive value by more than `eps`.
pub fn detect_conflict(report: &CostReport, phase: Phase, eps: f64) -> bool {
    let (naive, informed) = match phase {
        Phase::Stationary => (report.naive_stage, report.informed_stage),
        Phase::Trajectory => (report.naive_horizon, report.informed_horizon),
    };
    informed > naive + eps
}
