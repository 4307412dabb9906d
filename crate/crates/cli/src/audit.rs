//! Re-checks the invariants of an emitted run from its CSV files alone.

use std::fmt;
use std::path::Path;

use shdempc::coordinator::SamplingMode;
use shdempc::experiments::ExperimentSpec;
use shdempc::hierarchy::conflict_tolerance;

use crate::config::RunConfig;
use crate::sinks::{self, FinalRow, GlobalRow, TraceRow};
use crate::CliError;

/// Relative tolerance of the post-resolution monotonicity check.
pub const MONOTONE_REL_TOL: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq)]
pub struct Check {
    pub name: &'static str,
    /// Invariants fail the audit; properties are reported only.
    pub required: bool,
    pub failures: Vec<String>,
}

impl Check {
    fn new(name: &'static str, required: bool) -> Self {
        Self {
            name,
            required,
            failures: Vec::new(),
        }
    }

    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AuditReport {
    pub checks: Vec<Check>,
}

impl AuditReport {
    /// True when every required check passed.
    pub fn ok(&self) -> bool {
        self.checks.iter().all(|c| c.passed() || !c.required)
    }

    pub fn check(&self, name: &str) -> Option<&Check> {
        self.checks.iter().find(|c| c.name == name)
    }
}

impl fmt::Display for AuditReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for c in &self.checks {
            let tag = match (c.passed(), c.required) {
                (true, _) => "ok  ",
                (false, true) => "FAIL",
                (false, false) => "warn",
            };
            writeln!(f, "{tag} {} ({} findings)", c.name, c.failures.len())?;
            for msg in c.failures.iter().take(5) {
                writeln!(f, "     {msg}")?;
            }
            if c.failures.len() > 5 {
                writeln!(f, "     ... {} more", c.failures.len() - 5)?;
            }
        }
        Ok(())
    }
}

/// Expected `global.csv` length: the initialization sample plus one sample
/// per iteration (or per level barrier) of both phases of every time-step.
pub fn expected_samples(spec: &ExperimentSpec) -> usize {
    let per_iteration = match spec.sampling {
        SamplingMode::PerIteration => 1,
        SamplingMode::PerLevel => spec.levels,
    };
    1 + spec.time_steps * 2 * spec.iterations * per_iteration
}

pub fn audit_tables(spec: &ExperimentSpec, trace: &[TraceRow], global: &[GlobalRow], fin: &[FinalRow]) -> AuditReport {
    let nq = spec.levels;
    let in_range = |q: usize| (1..=nq).contains(&q);

    let mut levels = Check::new("levels_in_range", true);
    for r in trace {
        if !in_range(r.level) || !in_range(r.level_after) {
            levels.failures.push(format!(
                "t={} {} p={} agent {}: levels {} -> {} outside 1..={nq}",
                r.time_step, r.phase, r.iteration, r.agent, r.level, r.level_after
            ));
        }
    }
    for r in fin {
        if !in_range(r.level) {
            levels
                .failures
                .push(format!("final level {} of agent {} outside 1..={nq}", r.level, r.agent));
        }
    }

    let mut dichotomy = Check::new("conflict_rule", true);
    for r in trace {
        let expect = r.solved && r.v_breve > r.v_hat + conflict_tolerance(r.v_hat);
        if r.conflict != expect {
            dichotomy.failures.push(format!(
                "t={} {} p={} agent {}: conflict={} but V_hat={:e} V_breve={:e} solved={}",
                r.time_step, r.phase, r.iteration, r.agent, r.conflict, r.v_hat, r.v_breve, r.solved
            ));
        }
        if !r.conflict && r.level_after != r.level {
            dichotomy.failures.push(format!(
                "t={} {} p={} agent {}: level changed without a conflict",
                r.time_step, r.phase, r.iteration, r.agent
            ));
        }
    }

    let mut accounting = Check::new("mutation_accounting", true);
    let conflicts = trace.iter().filter(|r| r.conflict).count() as u64;
    let last = global.last().map_or(0, |g| g.cumulative_mutations);
    if last != conflicts {
        accounting.failures.push(format!(
            "global.csv ends at {last} mutations, trace.csv has {conflicts} conflicts"
        ));
    }
    for w in global.windows(2) {
        if w[1].cumulative_mutations < w[0].cumulative_mutations {
            accounting
                .failures
                .push(format!("cumulative mutations decrease at sample {}", w[1].sample));
        }
    }

    let mut counts = Check::new("row_counts", true);
    let want = expected_samples(spec);
    if global.len() != want {
        counts
            .failures
            .push(format!("global.csv has {} rows, expected {want}", global.len()));
    }
    if let Some(bad) = global.iter().enumerate().find(|(i, g)| g.sample != *i) {
        counts
            .failures
            .push(format!("sample index {} at row {}", bad.1.sample, bad.0));
    }
    let want_trace = spec.time_steps * 2 * spec.iterations * spec.n_agents;
    if trace.len() != want_trace {
        counts
            .failures
            .push(format!("trace.csv has {} rows, expected {want_trace}", trace.len()));
    }
    if fin.len() != spec.n_agents || fin.iter().enumerate().any(|(i, r)| r.agent != i) {
        counts.failures.push(format!(
            "final.csv must list agents 0..{} in order ({} rows)",
            spec.n_agents,
            fin.len()
        ));
    }

    AuditReport {
        checks: vec![levels, dichotomy, accounting, counts, monotonicity(spec, global)],
    }
}

/// After the last mutation, `V` at the end of each iteration must not rise
/// within a time-step. Level-barrier samples inside an iteration are skipped.
fn monotonicity(spec: &ExperimentSpec, global: &[GlobalRow]) -> Check {
    let mut check = Check::new("post_resolution_monotonicity", false);
    let last_mutation = global
        .windows(2)
        .rposition(|w| w[1].cumulative_mutations != w[0].cumulative_mutations)
        .map_or(0, |i| i + 1);
    let ends: Vec<&GlobalRow> = global
        .iter()
        .filter(|g| g.time_step > 0 && g.level == Some(spec.levels))
        .collect();
    for w in ends.windows(2) {
        if w[1].sample <= last_mutation || w[0].time_step != w[1].time_step {
            continue;
        }
        let tol = MONOTONE_REL_TOL * w[0].v.abs().max(1.0);
        if w[1].v > w[0].v + tol {
            check.failures.push(format!(
                "t={} V rises by {:e} from sample {} to {}",
                w[1].time_step,
                w[1].v - w[0].v,
                w[0].sample,
                w[1].sample
            ));
        }
    }
    check
}

/// Audit the run directory `dir` (as written by `run` or one seed of `study`).
pub fn audit_dir(dir: &Path) -> Result<AuditReport, CliError> {
    let cfg = RunConfig::load(&dir.join(sinks::CONFIG_FILE))?;
    let trace = sinks::read_trace(&dir.join(sinks::TRACE_FILE))?;
    let global = sinks::read_global(&dir.join(sinks::GLOBAL_FILE))?;
    let fin = sinks::read_final(&dir.join(sinks::FINAL_FILE))?;
    Ok(audit_tables(&cfg.experiment, &trace, &global, &fin))
}
