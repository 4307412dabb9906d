//! Acceptance suite: one PASS/FAIL line per criterion. Red criteria are
//! reported, not asserted, so the rest of the test run still executes; the
//! process only fails when a criterion cannot be evaluated at all.
//!
//! `SHDEMPC_ACCEPTANCE_QUICK=1` runs the scaling criterion on seed 1 only.

use std::fs;
use std::time::Instant;

use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use shdempc::coordinator::{HierarchyInit, RunMetrics};
use shdempc::experiments::{scaling_comparison, ExperimentSpec, Variant};
use shdempc::model::{discretize_plate, PlateParams, StationaryPoint, Trajectory};
use shdempc::objective::{AssumedNeighborData, CostNeighborhood, PlateOverlapCost};
use shdempc::solver::{check_gradient, LocalProblem, LocalSolver, ProblemKind, SolverConfig};
use shdempc::topology::InfluenceGraph;
use shdempc_cli::audit::audit_tables;
use shdempc_cli::config::RunConfig;
use shdempc_cli::sinks::{self, final_rows, global_rows, trace_rows};

const TARGET_CHANGE_TOL: f64 = 1e-6;
const ORACLE_OBJECTIVE_TOL: f64 = 1e-3;
const GRADIENT_REL_TOL: f64 = 1e-4;
const FD_STEP: f64 = 1e-6;
const GRID_STEP: f64 = 1e-4;

struct Verdict {
    pass: bool,
    details: Vec<String>,
}

fn report(n: usize, title: &str, v: &Verdict, secs: f64) {
    println!(
        "criterion {n}: {} - {title} ({secs:.1}s)",
        if v.pass { "PASS" } else { "FAIL" }
    );
    for d in &v.details {
        println!("    {d}");
    }
}

fn runs(spec: &ExperimentSpec) -> Vec<(u64, RunMetrics)> {
    spec.seeds
        .iter()
        .map(|&s| (s, spec.run(s).unwrap_or_else(|e| panic!("seed {s}: {e}"))))
        .collect()
}

fn monotonicity_findings(spec: &ExperimentSpec, m: &RunMetrics) -> Vec<String> {
    let report = audit_tables(spec, &trace_rows(m), &global_rows(m), &final_rows(m));
    report
        .check("post_resolution_monotonicity")
        .expect("audit always runs the monotonicity check")
        .failures
        .clone()
}

fn criterion_1(spec: &ExperimentSpec, runs: &[(u64, RunMetrics)]) -> Verdict {
    let mut pass = true;
    let details = runs
        .iter()
        .map(|(seed, m)| {
            let last = sinks::last_mutation_time_step(m);
            let quiet = last + 2 <= spec.time_steps;
            pass &= quiet;
            format!(
                "seed {seed}: {} mutations, last in time-step {last} of {}{}",
                m.total_mutations,
                spec.time_steps,
                if quiet { "" } else { " (inside the final 2)" }
            )
        })
        .collect();
    Verdict { pass, details }
}

fn criterion_2(spec: &ExperimentSpec, runs: &[(u64, RunMetrics)]) -> Verdict {
    let mut pass = true;
    let mut details = Vec::new();
    for (seed, m) in runs {
        let f = monotonicity_findings(spec, m);
        pass &= f.is_empty();
        details.push(format!("seed {seed}: {} rises after the last mutation", f.len()));
        details.extend(f.into_iter().take(3).map(|s| format!("  {s}")));
    }
    Verdict { pass, details }
}

fn criterion_3(spec: &ExperimentSpec, runs: &[(u64, RunMetrics)]) -> Verdict {
    let mut pass = true;
    let mut details = Vec::new();
    for (seed, m) in runs {
        let rows = trace_rows(m);
        let conflicts = rows.iter().filter(|r| r.conflict).count();
        let worst = rows
            .iter()
            .filter(|r| r.conflict)
            .map(|r| r.v_breve - r.v_hat)
            .fold(0.0, f64::max);
        // Without mutations the monotonicity check covers every iteration.
        let rises = if conflicts == 0 {
            monotonicity_findings(spec, m).len()
        } else {
            0
        };
        pass &= conflicts == 0 && rises == 0;
        details.push(format!(
            "seed {seed}: {conflicts} conflicts (largest V_breve - V_hat {worst:.3e}), {rises} rises, final V {:.6}",
            m.samples().last().map_or(f64::NAN, |s| s.v)
        ));
    }
    Verdict { pass, details }
}

/// A labelled spec and its per-seed runs.
type Study<'a> = (&'a str, &'a ExperimentSpec, &'a [(u64, RunMetrics)]);

fn criterion_4(all: &[Study<'_>]) -> Verdict {
    let mut pass = true;
    let mut details = Vec::new();
    for (label, spec, runs) in all {
        for (seed, m) in runs.iter() {
            let csv = audit_tables(spec, &trace_rows(m), &global_rows(m), &final_rows(m));
            pass &= m.audit_failures.is_empty() && csv.ok();
            details.push(format!(
                "{label} seed {seed}: {} candidate audits failed, trace audit {}, {} solves ({} infeasible)",
                m.audit_failures.len(),
                if csv.ok() { "clean" } else { "FAILED" },
                m.solver_stats.solves,
                m.solver_stats.infeasible
            ));
        }
    }
    Verdict { pass, details }
}

fn criterion_5(runs: &[(u64, RunMetrics)]) -> Verdict {
    let mut pass = true;
    let details = runs
        .iter()
        .map(|(seed, m)| {
            let change = sinks::final_target_change(m);
            pass &= change < TARGET_CHANGE_TOL && m.rollout_failures.is_empty();
            format!(
                "seed {seed}: target change over the final time-step {change:.3e}, {} rollout failures",
                m.rollout_failures.len()
            )
        })
        .collect();
    Verdict { pass, details }
}

fn criterion_6(quick: bool) -> Verdict {
    let mut base = ExperimentSpec {
        time_steps: RunConfig::default().scaling.time_steps,
        ..Default::default()
    };
    if quick {
        base.seeds = vec![1];
    }
    let ns = [10, 20, 40, 80];
    let rows = scaling_comparison(&base, &ns, &[Variant::Parallel, Variant::Hierarchy]).expect("scaling runs");
    let median = |n: usize, v: Variant| {
        rows.iter()
            .find(|r| r.n_agents == n && r.variant == v)
            .map(|r| r.median_settle)
            .expect("every (N, variant) pair is run")
    };
    let (p10, p80) = (median(10, Variant::Parallel), median(80, Variant::Parallel));
    let parallel_grows = p80 > p10 && p80 >= 2.0 * p10;
    let h10 = median(10, Variant::Hierarchy);
    let hierarchy_flat = ns.iter().all(|&n| {
        let h = median(n, Variant::Hierarchy);
        h <= 2.0 * h10 && h10 <= 2.0 * h
    });
    let mut details: Vec<String> = rows
        .iter()
        .map(|r| {
            format!(
                "N={:>2} {:<9} median {:>6.1} per seed {:?}",
                r.n_agents,
                r.variant.as_str(),
                r.median_settle,
                r.settle_per_seed
            )
        })
        .collect();
    let samples = |levels: usize| 1 + base.time_steps * 2 * base.iterations * levels;
    details.push(format!(
        "run lengths: {} samples (parallel), {} samples (hierarchy); parallel N=80 >= 2x N=10: {parallel_grows}; hierarchy within 2x of N=10: {hierarchy_flat}",
        samples(1),
        samples(base.levels)
    ));
    if quick {
        details.push("quick mode: seed 1 only".into());
    }
    Verdict {
        pass: parallel_grows && hierarchy_flat,
        details,
    }
}

fn criterion_7() -> Verdict {
    let model = discretize_plate(PlateParams::default(), 1.0)
        .unwrap()
        .with_symmetric_input_bound(0.25)
        .unwrap();
    let side = 0.25;
    let cost = PlateOverlapCost { side };
    let solver = LocalSolver::new(SolverConfig::default()).unwrap();
    let horizon = 5;
    let warm = vec![DVector::zeros(1); horizon];
    let parked = |pos: f64| {
        let sp = StationaryPoint::new(DVector::from_vec(vec![pos, 0.0]), DVector::from_vec(vec![pos]));
        let t = Trajectory {
            states: vec![sp.x_s.clone(); horizon + 1],
            inputs: vec![sp.u_s.clone(); horizon],
        };
        (t, sp)
    };
    // Exact cooperative stationary cost of a plate parked at `u` (the spring
    // makes the stationary position equal the stationary input).
    let grid_min = |neighbor: Option<f64>| {
        let n = (0.25 / GRID_STEP).round() as i64;
        (-n..=n)
            .map(|k| {
                let u = k as f64 * GRID_STEP;
                match neighbor {
                    None => u * u,
                    Some(p) => {
                        let d = (u - p).abs();
                        let overlap = if d < side { side * (side - d) } else { 0.0 };
                        2.0 * overlap + u * u + p * p
                    }
                }
            })
            .fold(f64::INFINITY, f64::min)
    };

    let mut pass = true;
    let mut details = Vec::new();
    let mut worst_objective: f64 = 0.0;
    let isolated = CostNeighborhood::isolated(0);
    let none = AssumedNeighborData::default();
    for x0 in [0.0, 0.1, -0.2] {
        let x0 = DVector::from_vec(vec![x0, 0.0]);
        let p = LocalProblem {
            model: &model,
            cost: &cost,
            nbhd: &isolated,
            assumed: &none,
            x0: &x0,
        };
        let r = solver
            .solve_stationary(p, &warm, &StationaryPoint::origin(2, 1), 1.0)
            .unwrap();
        worst_objective = worst_objective.max((r.objective_exact - grid_min(None)).abs());
    }
    let pair = InfluenceGraph::chain(2).unwrap().cost_coupling_sets()[0].clone();
    let origin = DVector::zeros(2);
    for neighbor in [0.0, 0.05, 0.1, 0.2, -0.12] {
        let mut assumed = AssumedNeighborData::default();
        let (t, s) = parked(neighbor);
        assumed.insert(1, t, s);
        let p = LocalProblem {
            model: &model,
            cost: &cost,
            nbhd: &pair,
            assumed: &assumed,
            x0: &origin,
        };
        let r = solver
            .solve_stationary(p, &warm, &StationaryPoint::origin(2, 1), 1.0)
            .unwrap();
        worst_objective = worst_objective.max((r.objective_exact - grid_min(Some(neighbor))).abs());
    }
    pass &= worst_objective <= ORACLE_OBJECTIVE_TOL;
    details.push(format!(
        "stationary solves vs {GRID_STEP:e} grid: largest objective gap {worst_objective:.3e} (8 instances)"
    ));

    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut worst_gradient: f64 = 0.0;
    for _ in 0..100 {
        let mut assumed = AssumedNeighborData::default();
        let (t, s) = parked(rng.gen_range(-0.25..0.25));
        assumed.insert(1, t, s);
        let x0 = DVector::from_vec(vec![rng.gen_range(-0.2..0.2), rng.gen_range(-0.1..0.1)]);
        let p = LocalProblem {
            model: &model,
            cost: &cost,
            nbhd: &pair,
            assumed: &assumed,
            x0: &x0,
        };
        let inputs: Vec<_> = (0..horizon)
            .map(|_| DVector::from_vec(vec![rng.gen_range(-0.25..0.25)]))
            .collect();
        let sp = StationaryPoint::new(
            DVector::from_vec(vec![rng.gen_range(-0.25..0.25), rng.gen_range(-0.1..0.1)]),
            DVector::from_vec(vec![rng.gen_range(-0.25..0.25)]),
        );
        for kind in [ProblemKind::Trajectory, ProblemKind::Stationary] {
            let mu = SolverConfig::default().mu_smooth;
            worst_gradient = worst_gradient.max(check_gradient(p, kind, &inputs, &sp, mu, FD_STEP).unwrap());
        }
    }
    pass &= worst_gradient <= GRADIENT_REL_TOL;
    details.push(format!(
        "gradients vs central differences (h={FD_STEP:e}) at 100 points: largest relative error {worst_gradient:.3e}"
    ));
    Verdict { pass, details }
}

fn criterion_8() -> Verdict {
    let tmp = tempfile::tempdir().unwrap();
    let mut pass = true;
    let mut details = Vec::new();
    let cases = [
        ("plates seed 1", HierarchyInit::AllOne, 1),
        ("universal seed 2", HierarchyInit::Universal, 2),
    ];
    for (label, init, seed) in cases {
        let mut dirs = Vec::new();
        for (k, parallel) in [false, false, true].into_iter().enumerate() {
            let mut cfg = RunConfig::default();
            cfg.experiment.hierarchy_init = init.clone();
            cfg.experiment.seeds = vec![seed];
            cfg.experiment.parallel = parallel;
            let dir = tmp.path().join(format!("{seed}-{k}"));
            let m = cfg.experiment.run(seed).unwrap();
            sinks::write_run(&dir, &cfg, &m).unwrap();
            dirs.push(dir);
        }
        let files = [
            sinks::TRACE_FILE,
            sinks::GLOBAL_FILE,
            sinks::FINAL_FILE,
            sinks::STATS_FILE,
        ];
        let same = files.iter().all(|f| {
            let a = fs::read(dirs[0].join(f)).unwrap();
            a == fs::read(dirs[1].join(f)).unwrap() && a == fs::read(dirs[2].join(f)).unwrap()
        });
        pass &= same;
        details.push(format!(
            "{label}: serial, serial and parallel CSVs {}",
            if same { "byte-identical" } else { "DIFFER" }
        ));
    }
    Verdict { pass, details }
}

fn main() {
    // Only the test harness's own listing mode passes this; there is nothing to list.
    if std::env::args().any(|a| a == "--list") {
        return;
    }
    let quick = std::env::var_os("SHDEMPC_ACCEPTANCE_QUICK").is_some();

    let plates = ExperimentSpec::default();
    let universal = ExperimentSpec {
        hierarchy_init: HierarchyInit::Universal,
        ..Default::default()
    };
    let t = Instant::now();
    let plate_runs = runs(&plates);
    let plate_secs = t.elapsed().as_secs_f64();
    let t = Instant::now();
    let universal_runs = runs(&universal);
    let universal_secs = t.elapsed().as_secs_f64();

    let mut passed = 0;
    let mut check = |n: usize, title: &str, f: &mut dyn FnMut() -> Verdict, shared: f64| {
        let t = Instant::now();
        let v = f();
        report(n, title, &v, shared + t.elapsed().as_secs_f64());
        passed += usize::from(v.pass);
    };
    check(
        1,
        "hierarchy mutations stop before the final 2 time-steps",
        &mut || criterion_1(&plates, &plate_runs),
        plate_secs,
    );
    check(
        2,
        "global cost non-increasing within time-steps after the last mutation",
        &mut || criterion_2(&plates, &plate_runs),
        0.0,
    );
    check(
        3,
        "universal hierarchy: no conflicts, monotone from the first iteration",
        &mut || criterion_3(&universal, &universal_runs),
        universal_secs,
    );
    check(
        4,
        "every candidate passes the independent constraint audit",
        &mut || {
            criterion_4(&[
                ("plates", &plates, &plate_runs),
                ("universal", &universal, &universal_runs),
            ])
        },
        0.0,
    );
    check(
        5,
        "stationary targets settle and candidates reach them",
        &mut || criterion_5(&plate_runs),
        0.0,
    );
    check(
        6,
        "parallel settling grows with N, hierarchy settling does not",
        &mut || criterion_6(quick),
        0.0,
    );
    check(
        7,
        "local solver agrees with grid and finite-difference oracles",
        &mut criterion_7,
        0.0,
    );
    check(
        8,
        "byte-identical CSVs across runs and parallel solving",
        &mut criterion_8,
        0.0,
    );
    println!("acceptance: {passed}/8 criteria pass");
}
