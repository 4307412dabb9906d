use std::collections::{BTreeMap, BTreeSet};

use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;

use shdempc::audit::audit_trajectory;
use shdempc::hierarchy::{agent_stream, HierarchyState, StreamPurpose};
use shdempc::model::{discretize_plate, AgentModel, Dynamics, PlateParams, StationaryPoint, TOL_DYN};
use shdempc::netsim::{Bus, WireSize};
use shdempc::objective::{
    cooperative_stage_cost, overlap_area, smoothed_overlap_area, AgentView, CostMode, PlateOverlapCost,
};
use shdempc::topology::{conflict_adjacency, greedy_color, EdgeRule, InfluenceGraph};

fn plate() -> AgentModel {
    discretize_plate(PlateParams::default(), 1.0)
        .unwrap()
        .with_symmetric_input_bound(0.25)
        .unwrap()
}

fn arb_graph() -> impl Strategy<Value = InfluenceGraph> {
    (1usize..9).prop_flat_map(|n| {
        prop::collection::vec((0..n, 0..n), 0..20).prop_map(move |edges| {
            let edges: Vec<_> = edges.into_iter().filter(|(a, b)| a != b).collect();
            InfluenceGraph::from_edges(n, &edges).unwrap()
        })
    })
}

/// `exp(M)` by scaling and squaring of a truncated Taylor series.
fn expm_series(m: &DMatrix<f64>) -> DMatrix<f64> {
    let norm = m.iter().fold(0.0_f64, |a, x| a.max(x.abs())) * m.nrows() as f64;
    let squarings = if norm > 0.5 {
        (norm / 0.5).log2().ceil() as u32
    } else {
        0
    };
    let scaled = m / 2f64.powi(squarings as i32);
    let mut term = DMatrix::identity(m.nrows(), m.ncols());
    let mut sum = term.clone();
    for k in 1..30 {
        term = &term * &scaled / k as f64;
        sum += &term;
    }
    for _ in 0..squarings {
        sum = &sum * &sum;
    }
    sum
}

#[test]
fn zoh_matches_series_exponential() {
    for &(m, k, c, dt) in &[(1.0, 1.0, 1.0, 1.0), (2.0, 0.5, 0.1, 0.3), (0.5, 3.0, 0.0, 2.0)] {
        let model = discretize_plate(
            PlateParams {
                mass: m,
                spring: k,
                damping: c,
            },
            dt,
        )
        .unwrap();
        // Augmented generator [[Ac, Bc], [0, 0]] integrates the input exactly.
        let aug = DMatrix::from_row_slice(3, 3, &[0.0, 1.0, 0.0, -k / m, -c / m, 1.0 / m, 0.0, 0.0, 0.0]) * dt;
        let e = expm_series(&aug);
        for i in 0..2 {
            for j in 0..2 {
                assert!((model.a[(i, j)] - e[(i, j)]).abs() < 1e-12, "A[{i},{j}]");
            }
            assert!((model.b[(i, 0)] - e[(i, 2)]).abs() < 1e-12, "B[{i}]");
        }
    }
}

#[test]
fn smoothing_error_is_bounded() {
    let side = 0.25;
    for &mu in &[1e-2, 1e-3] {
        let bound = mu * side * std::f64::consts::LN_2 + 1e-9;
        for k in 0..=10_000 {
            let gap = -0.5 + k as f64 * 1e-4;
            let err = (overlap_area(gap, 0.0, side) - smoothed_overlap_area(gap, 0.0, side, mu)).abs();
            assert!(err <= bound, "mu={mu} gap={gap} err={err}");
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn coloring_separates_conflicting_agents(g in arb_graph(), coupled in any::<bool>()) {
        let rule = if coupled { EdgeRule::CostCoupled } else { EdgeRule::Direct };
        let adj = conflict_adjacency(&g, rule);
        let c = greedy_color(&g, rule);
        let max_degree = adj.iter().map(BTreeSet::len).max().unwrap_or(0);
        prop_assert!(c.num_colors <= max_degree + 1);
        for (i, nbrs) in adj.iter().enumerate() {
            prop_assert!((1..=c.num_colors).contains(&c.level_of[i]));
            for &j in nbrs {
                prop_assert_ne!(c.level_of[i], c.level_of[j]);
            }
        }
    }

    #[test]
    fn coupling_sets_are_dual_and_closed(g in arb_graph()) {
        let sets = g.cost_coupling_sets();
        for s in &sets {
            let i = s.self_id;
            let mut expect: BTreeSet<usize> = g.upstream(i).union(g.downstream(i)).copied().collect();
            for &j in g.downstream(i) {
                expect.extend(g.upstream(j).iter().copied());
            }
            expect.remove(&i);
            prop_assert_eq!(&s.cost_upstream, &expect);
            prop_assert!(!s.cost_downstream.contains(&i));
            for &j in &s.cost_downstream {
                prop_assert!(sets[j].cost_upstream.contains(&i));
            }
            for &j in &s.cost_upstream {
                prop_assert!(sets[j].cost_downstream.contains(&i));
            }
        }
    }

    #[test]
    fn rollouts_are_consistent(
        x0 in prop::array::uniform2(-1.0f64..1.0),
        us in prop::collection::vec(-0.25f64..0.25, 1..8),
    ) {
        let m = plate();
        let x0 = DVector::from_column_slice(&x0);
        let inputs: Vec<_> = us.iter().map(|&u| DVector::from_element(1, u)).collect();
        let t = m.rollout(&x0, &inputs).unwrap();
        prop_assert!(t.is_consistent(&m, TOL_DYN));
        let target = StationaryPoint::new(t.terminal().clone(), DVector::zeros(1));
        prop_assert!(audit_trajectory(&m, &x0, &t, &target, TOL_DYN).is_empty());
    }

    #[test]
    fn zoh_agrees_with_fine_explicit_integration(
        x in prop::array::uniform2(-1.0f64..1.0),
        u in -1.0f64..1.0,
    ) {
        let m = plate();
        let exact = m.step(&DVector::from_column_slice(&x), &DVector::from_element(1, u));
        // Explicit midpoint: forward Euler at this resolution is only good to ~1e-5.
        let steps = 10_000;
        let h = 1.0 / steps as f64;
        let f = |p: f64, v: f64| (v, u - p - v);
        let (mut p, mut v) = (x[0], x[1]);
        for _ in 0..steps {
            let (dp, dv) = f(p, v);
            let (mp, mv) = f(p + 0.5 * h * dp, v + 0.5 * h * dv);
            p += h * mp;
            v += h * mv;
        }
        prop_assert!((exact[0] - p).abs() < 1e-6);
        prop_assert!((exact[1] - v).abs() < 1e-6);
    }

    #[test]
    fn spring_equilibria_are_stationary(u in -0.25f64..0.25) {
        let m = plate();
        let sp = StationaryPoint::new(DVector::from_vec(vec![u, 0.0]), DVector::from_element(1, u));
        prop_assert!(m.is_stationary(&sp, 1e-9));
    }

    #[test]
    fn cooperative_cost_ignores_agents_outside_the_closure(
        xs in prop::collection::vec(-0.3f64..0.3, 8),
        nudge in -0.3f64..0.3,
        who in 0usize..8,
    ) {
        let g = InfluenceGraph::chain(8).unwrap();
        let nb = &g.cost_coupling_sets()[who];
        let cost = PlateOverlapCost { side: 0.25 };
        let states: Vec<[f64; 2]> = xs.iter().map(|&p| [p, 0.0]).collect();
        let input = [0.1];
        let eval = |states: &Vec<[f64; 2]>| {
            let lookup = |j: usize| states.get(j).map(|s| AgentView::new(&s[..], &input[..]));
            cooperative_stage_cost(&cost, nb, AgentView::new(&states[who], &input), &lookup, CostMode::Exact).unwrap()
        };
        let base = eval(&states);
        for k in (0..8).filter(|k| *k != who && !nb.cost_upstream.contains(k)) {
            let mut moved = states.clone();
            moved[k][0] += nudge;
            prop_assert_eq!(eval(&moved), base);
        }
    }

    #[test]
    fn mutation_stays_in_range(seed in any::<u64>(), levels in 1usize..6, draws in 1usize..50) {
        let mut h = HierarchyState::new(1, levels, agent_stream(seed, 3, StreamPurpose::Mutation)).unwrap();
        for k in 0..draws {
            let q = h.mutate();
            prop_assert!((1..=levels).contains(&q));
            prop_assert_eq!(h.mutations(), k as u64 + 1);
        }
    }

    #[test]
    fn bus_conserves_messages(sends in prop::collection::vec((0usize..5, prop::collection::btree_set(0usize..5, 0..5)), 0..30)) {
        #[derive(Debug, Clone)]
        struct Tick;
        impl WireSize for Tick {
            fn wire_reals(&self) -> usize { 2 }
        }
        let mut bus = Bus::new(5);
        let mut expected: BTreeMap<usize, usize> = BTreeMap::new();
        for (from, to) in &sends {
            let to: Vec<usize> = to.iter().copied().filter(|t| t != from).collect();
            for &t in &to {
                *expected.entry(t).or_default() += 1;
            }
            bus.broadcast(*from, Tick, to).unwrap();
        }
        let delivered = bus.barrier();
        let stats = bus.stats();
        prop_assert_eq!(stats.messages_sent as usize, delivered);
        prop_assert_eq!(stats.messages_delivered as usize, delivered);
        prop_assert_eq!(stats.bytes_estimate, 16 * stats.messages_sent);
        for a in 0..5 {
            prop_assert_eq!(bus.drain(a).len(), expected.get(&a).copied().unwrap_or(0));
        }
        prop_assert_eq!(bus.barrier(), 0);
    }
}
