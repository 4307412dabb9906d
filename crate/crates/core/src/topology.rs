//! Influence graphs, the cost-coupling neighbor sets they induce, and greedy
//! vertex coloring used to pick the number of hierarchy levels.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::objective::CostNeighborhood;
use crate::AgentId;

/// Directed influence graph: `j` in `upstream[i]` means agent `j`'s state or
/// input enters agent `i`'s local stage cost.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InfluenceGraph {
    upstream: Vec<BTreeSet<AgentId>>,
    downstream: Vec<BTreeSet<AgentId>>,
}

impl InfluenceGraph {
    /// Build from directed `(from, to)` edges, where `from` influences `to`.
    pub fn from_edges(n_agents: usize, edges: &[(AgentId, AgentId)]) -> Result<Self> {
        if n_agents == 0 {
            return Err(Error::contract("graph needs at least one agent"));
        }
        let mut upstream = vec![BTreeSet::new(); n_agents];
        let mut downstream = vec![BTreeSet::new(); n_agents];
        for &(from, to) in edges {
            if from >= n_agents || to >= n_agents {
                return Err(Error::contract(format!(
                    "edge ({from}, {to}) references an agent outside 0..{n_agents}"
                )));
            }
            if from == to {
                return Err(Error::contract(format!("self-loop on agent {from}")));
            }
            upstream[to].insert(from);
            downstream[from].insert(to);
        }
        Ok(Self { upstream, downstream })
    }

    /// Path graph: each agent is influenced by its physical neighbors `i-1`, `i+1`.
    pub fn chain(n: usize) -> Result<Self> {
        if n == 0 {
            return Err(Error::contract("chain needs at least one agent"));
        }
        let edges: Vec<_> = (0..n.saturating_sub(1))
            .flat_map(|i| [(i, i + 1), (i + 1, i)])
            .collect();
        Self::from_edges(n, &edges)
    }

    pub fn n_agents(&self) -> usize {
        self.upstream.len()
    }

    pub fn upstream(&self, i: AgentId) -> &BTreeSet<AgentId> {
        &self.upstream[i]
    }

    pub fn downstream(&self, i: AgentId) -> &BTreeSet<AgentId> {
        &self.downstream[i]
    }

    pub fn edge_count(&self) -> usize {
        self.upstream.iter().map(BTreeSet::len).sum()
    }

    /// Cost-coupling closure for every agent.
    ///
    /// `cost_upstream(i) = N-(i) ∪ N+(i) ∪ ⋃_{j ∈ N+(i)} N-(j)` without `i`;
    /// `cost_downstream` is its transpose.
    pub fn cost_coupling_sets(&self) -> Vec<CostNeighborhood> {
        let n = self.n_agents();
        let cost_upstream: Vec<BTreeSet<AgentId>> = (0..n)
            .map(|i| {
                let mut set: BTreeSet<AgentId> = self.upstream[i].iter().chain(&self.downstream[i]).copied().collect();
                for &j in &self.downstream[i] {
                    set.extend(self.upstream[j].iter().copied());
                }
                set.remove(&i);
                set
            })
            .collect();
        let mut cost_downstream = vec![BTreeSet::new(); n];
        for (i, set) in cost_upstream.iter().enumerate() {
            for &j in set {
                cost_downstream[j].insert(i);
            }
        }
        (0..n)
            .map(|i| CostNeighborhood {
                self_id: i,
                upstream: self.upstream[i].clone(),
                downstream: self.downstream[i].clone(),
                cost_upstream: cost_upstream[i].clone(),
                cost_downstream: cost_downstream[i].clone(),
                downstream_upstreams: self.downstream[i]
                    .iter()
                    .map(|&j| (j, self.upstream[j].clone()))
                    .collect(),
            })
            .collect()
    }
}

/// Which pairs of agents must receive different colors.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EdgeRule {
    /// Agents adjacent in the influence graph.
    Direct,
    /// Agents in each other's cost-coupling closure.
    CostCoupled,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Coloring {
    /// Color (hierarchy level) of each agent, in `1..=num_colors`.
    pub level_of: Vec<usize>,
    pub num_colors: usize,
}

/// Undirected conflict edges under `rule`, as sorted adjacency sets.
pub fn conflict_adjacency(g: &InfluenceGraph, rule: EdgeRule) -> Vec<BTreeSet<AgentId>> {
    let n = g.n_agents();
    let mut adj = vec![BTreeSet::new(); n];
    match rule {
        EdgeRule::Direct => {
            for i in 0..n {
                for &j in g.upstream(i).iter().chain(g.downstream(i)) {
                    adj[i].insert(j);
                    adj[j].insert(i);
                }
            }
        }
        EdgeRule::CostCoupled => {
            for nb in g.cost_coupling_sets() {
                for &j in &nb.cost_upstream {
                    adj[nb.self_id].insert(j);
                    adj[j].insert(nb.self_id);
                }
            }
        }
    }
    adj
}

/// Greedy coloring in agent-id order, smallest feasible color first.
///
/// The color count upper-bounds the chromatic number of the selected conflict graph.
pub fn greedy_color(g: &InfluenceGraph, rule: EdgeRule) -> Coloring {
    let adj = conflict_adjacency(g, rule);
    let mut level_of = vec![0usize; g.n_agents()];
    let mut num_colors = 0;
    for i in 0..g.n_agents() {
        let taken: BTreeSet<usize> = adj[i].iter().map(|&j| level_of[j]).filter(|&c| c > 0).collect();
        let color = (1..).find(|c| !taken.contains(c)).expect("unbounded range");
        level_of[i] = color;
        num_colors = num_colors.max(color);
    }
    Coloring { level_of, num_colors }
}
