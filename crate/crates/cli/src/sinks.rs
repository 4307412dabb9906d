//! CSV persistence. Floats are written with 17 significant digits so that
//! parsing a file recovers every value bit for bit.

use std::fs;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use shdempc::coordinator::RunMetrics;
use shdempc::experiments::{ScalingRow, StudyReport};
use shdempc::hierarchy::Phase;

use crate::config::RunConfig;
use crate::CliError;

pub const TRACE_FILE: &str = "trace.csv";
pub const GLOBAL_FILE: &str = "global.csv";
pub const FINAL_FILE: &str = "final.csv";
pub const STATS_FILE: &str = "stats.csv";
pub const CONFIG_FILE: &str = "config.toml";
pub const SUMMARY_FILE: &str = "summary.csv";
pub const SCALING_FILE: &str = "scaling.csv";
pub const SCALING_MEDIAN_FILE: &str = "scaling_median.csv";

pub fn fmt_f64(x: f64) -> String {
    format!("{x:.16e}")
}

fn phase_str(p: Option<Phase>) -> &'static str {
    p.map_or("init", Phase::as_str)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub time_step: usize,
    pub phase: String,
    pub iteration: usize,
    pub agent: usize,
    pub level: usize,
    pub level_after: usize,
    pub conflict: bool,
    #[serde(rename = "V_hat")]
    pub v_hat: f64,
    #[serde(rename = "V_breve")]
    pub v_breve: f64,
    pub solved: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GlobalRow {
    pub sample: usize,
    pub time_step: usize,
    /// `init` for the sample taken before the first time-step.
    pub phase: String,
    pub iteration: usize,
    /// Empty for the initialization sample.
    pub level: Option<usize>,
    #[serde(rename = "V")]
    pub v: f64,
    pub cumulative_mutations: u64,
    pub mean_target: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinalRow {
    pub agent: usize,
    pub position: f64,
    pub level: usize,
}

pub fn trace_rows(m: &RunMetrics) -> Vec<TraceRow> {
    m.trace
        .iter()
        .flat_map(|it| {
            it.agents.iter().map(move |a| TraceRow {
                time_step: it.time_step,
                phase: it.phase.as_str().into(),
                iteration: it.iteration,
                agent: a.agent,
                level: a.level,
                level_after: a.level_after,
                conflict: a.conflict,
                v_hat: a.v_hat,
                v_breve: a.v_breve,
                solved: a.solved,
            })
        })
        .collect()
}

pub fn global_rows(m: &RunMetrics) -> Vec<GlobalRow> {
    m.samples()
        .iter()
        .map(|s| GlobalRow {
            sample: s.index,
            time_step: s.time_step,
            phase: phase_str(s.phase).into(),
            iteration: s.iteration,
            level: s.level,
            v: s.v,
            cumulative_mutations: s.cumulative_mutations,
            mean_target: s.mean_target,
        })
        .collect()
}

pub fn final_rows(m: &RunMetrics) -> Vec<FinalRow> {
    m.final_positions
        .iter()
        .zip(&m.final_levels)
        .enumerate()
        .map(|(agent, (&position, &level))| FinalRow { agent, position, level })
        .collect()
}

fn bool_str(b: bool) -> String {
    b.to_string()
}

fn write_table(path: &Path, header: &[&str], rows: impl IntoIterator<Item = Vec<String>>) -> Result<(), CliError> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    w.write_record(header).map_err(|e| csv_error(path, e))?;
    for row in rows {
        w.write_record(&row).map_err(|e| csv_error(path, e))?;
    }
    w.flush().map_err(|e| CliError::io(path, e))
}

fn csv_error(path: &Path, e: csv::Error) -> CliError {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => CliError::io(path, io),
        other => CliError::data(path, format!("{other:?}")),
    }
}

pub fn write_trace(path: &Path, rows: &[TraceRow]) -> Result<(), CliError> {
    let header = [
        "time_step",
        "phase",
        "iteration",
        "agent",
        "level",
        "level_after",
        "conflict",
        "V_hat",
        "V_breve",
        "solved",
    ];
    write_table(
        path,
        &header,
        rows.iter().map(|r| {
            vec![
                r.time_step.to_string(),
                r.phase.clone(),
                r.iteration.to_string(),
                r.agent.to_string(),
                r.level.to_string(),
                r.level_after.to_string(),
                bool_str(r.conflict),
                fmt_f64(r.v_hat),
                fmt_f64(r.v_breve),
                bool_str(r.solved),
            ]
        }),
    )
}

pub fn write_global(path: &Path, rows: &[GlobalRow]) -> Result<(), CliError> {
    let header = [
        "sample",
        "time_step",
        "phase",
        "iteration",
        "level",
        "V",
        "cumulative_mutations",
        "mean_target",
    ];
    write_table(
        path,
        &header,
        rows.iter().map(|r| {
            vec![
                r.sample.to_string(),
                r.time_step.to_string(),
                r.phase.clone(),
                r.iteration.to_string(),
                r.level.map_or_else(String::new, |q| q.to_string()),
                fmt_f64(r.v),
                r.cumulative_mutations.to_string(),
                fmt_f64(r.mean_target),
            ]
        }),
    )
}

pub fn write_final(path: &Path, rows: &[FinalRow]) -> Result<(), CliError> {
    write_table(
        path,
        &["agent", "position", "level"],
        rows.iter()
            .map(|r| vec![r.agent.to_string(), fmt_f64(r.position), r.level.to_string()]),
    )
}

/// Counters that do not fit the per-row tables.
pub fn write_stats(path: &Path, m: &RunMetrics) -> Result<(), CliError> {
    let s = &m.solver_stats;
    let rows = [
        ("total_mutations", m.total_mutations.to_string()),
        ("iterations_to_settle", m.iterations_to_settle.to_string()),
        ("audit_failures", m.audit_failures.len().to_string()),
        ("rollout_failures", m.rollout_failures.len().to_string()),
        ("solves", s.solves.to_string()),
        ("unconverged", s.unconverged.to_string()),
        ("infeasible", s.infeasible.to_string()),
        ("kept_warm_start", s.kept_warm_start.to_string()),
        ("inner_iterations", s.inner_iterations.to_string()),
        ("messages_sent", m.bus.messages_sent.to_string()),
        ("rounds", m.bus.rounds.to_string()),
        ("bytes_estimate", m.bus.bytes_estimate.to_string()),
    ];
    write_table(
        path,
        &["metric", "value"],
        rows.into_iter().map(|(k, v)| vec![k.to_string(), v]),
    )
}

pub fn write_config(dir: &Path, cfg: &RunConfig) -> Result<PathBuf, CliError> {
    let path = dir.join(CONFIG_FILE);
    fs::write(&path, cfg.to_toml()).map_err(|e| CliError::io(&path, e))?;
    Ok(path)
}

pub fn ensure_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))
}

/// Everything one run produces: the three tables, the counters and the
/// config echo (which must name exactly the seed that was run).
pub fn write_run(dir: &Path, cfg: &RunConfig, m: &RunMetrics) -> Result<(), CliError> {
    ensure_dir(dir)?;
    write_config(dir, cfg)?;
    if cfg.output.csv {
        write_trace(&dir.join(TRACE_FILE), &trace_rows(m))?;
        write_global(&dir.join(GLOBAL_FILE), &global_rows(m))?;
        write_final(&dir.join(FINAL_FILE), &final_rows(m))?;
        write_stats(&dir.join(STATS_FILE), m)?;
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub seed: u64,
    pub iterations_to_settle: usize,
    #[serde(rename = "final_V")]
    pub final_v: f64,
    pub total_mutations: u64,
    /// 0 when the run never mutated.
    pub last_mutation_time_step: usize,
    pub max_final_target_change: f64,
    pub audit_failures: usize,
    pub rollout_failures: usize,
}

/// Largest per-agent change of the stationary target over the last time-step.
pub fn final_target_change(m: &RunMetrics) -> f64 {
    match m.target_history.as_slice() {
        [.., prev, last] => prev.iter().zip(last).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max),
        _ => 0.0,
    }
}

pub fn last_mutation_time_step(m: &RunMetrics) -> usize {
    m.trace
        .iter()
        .filter(|it| it.agents.iter().any(|a| a.conflict))
        .map(|it| it.time_step)
        .max()
        .unwrap_or(0)
}

pub fn summary_rows(report: &StudyReport) -> Vec<SummaryRow> {
    report
        .runs
        .iter()
        .zip(&report.summary)
        .map(|((seed, m), s)| SummaryRow {
            seed: *seed,
            iterations_to_settle: s.iterations_to_settle,
            final_v: s.final_v,
            total_mutations: s.total_mutations,
            last_mutation_time_step: last_mutation_time_step(m),
            max_final_target_change: final_target_change(m),
            audit_failures: m.audit_failures.len(),
            rollout_failures: m.rollout_failures.len(),
        })
        .collect()
}

pub fn write_summary(path: &Path, rows: &[SummaryRow]) -> Result<(), CliError> {
    let header = [
        "seed",
        "iterations_to_settle",
        "final_V",
        "total_mutations",
        "last_mutation_time_step",
        "max_final_target_change",
        "audit_failures",
        "rollout_failures",
    ];
    write_table(
        path,
        &header,
        rows.iter().map(|r| {
            vec![
                r.seed.to_string(),
                r.iterations_to_settle.to_string(),
                fmt_f64(r.final_v),
                r.total_mutations.to_string(),
                r.last_mutation_time_step.to_string(),
                fmt_f64(r.max_final_target_change),
                r.audit_failures.to_string(),
                r.rollout_failures.to_string(),
            ]
        }),
    )
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalingSeedRow {
    pub n_agents: usize,
    pub variant: String,
    pub seed: u64,
    pub iterations_to_settle: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalingMedianRow {
    pub n_agents: usize,
    pub variant: String,
    pub median_iterations_to_settle: f64,
}

pub fn write_scaling(dir: &Path, rows: &[ScalingRow], seeds: &[u64]) -> Result<(), CliError> {
    let path = dir.join(SCALING_FILE);
    write_table(
        &path,
        &["n_agents", "variant", "seed", "iterations_to_settle"],
        rows.iter().flat_map(|r| {
            seeds.iter().zip(&r.settle_per_seed).map(move |(s, k)| {
                vec![
                    r.n_agents.to_string(),
                    r.variant.as_str().to_string(),
                    s.to_string(),
                    k.to_string(),
                ]
            })
        }),
    )?;
    let path = dir.join(SCALING_MEDIAN_FILE);
    write_table(
        &path,
        &["n_agents", "variant", "median_iterations_to_settle"],
        rows.iter().map(|r| {
            vec![
                r.n_agents.to_string(),
                r.variant.as_str().to_string(),
                fmt_f64(r.median_settle),
            ]
        }),
    )
}

pub fn read_table<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>, CliError> {
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_error(path, e))?;
    r.deserialize()
        .enumerate()
        .map(|(i, row)| row.map_err(|e| CliError::data(path, format!("row {}: {e}", i + 1))))
        .collect()
}

pub fn read_trace(path: &Path) -> Result<Vec<TraceRow>, CliError> {
    read_table(path)
}

pub fn read_global(path: &Path) -> Result<Vec<GlobalRow>, CliError> {
    read_table(path)
}

pub fn read_final(path: &Path) -> Result<Vec<FinalRow>, CliError> {
    read_table(path)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn seventeen_significant_digits_round_trip() {
        for x in [0.1, 1.0 / 3.0, -2.5e-300, 6.02214076e23, f64::MIN_POSITIVE, 0.0] {
            let s = fmt_f64(x);
            assert_eq!(s.split('e').next().unwrap().trim_start_matches('-').len(), 18, "{s}");
            assert_eq!(s.parse::<f64>().unwrap().to_bits(), x.to_bits());
        }
    }

    #[test]
    fn tables_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let trace = vec![TraceRow {
            time_step: 1,
            phase: "stationary".into(),
            iteration: 2,
            agent: 3,
            level: 1,
            level_after: 2,
            conflict: true,
            v_hat: 0.1 + 0.2,
            v_breve: 1.0 / 7.0,
            solved: true,
        }];
        let global = vec![
            GlobalRow {
                sample: 0,
                time_step: 0,
                phase: "init".into(),
                iteration: 0,
                level: None,
                v: 8.75,
                cumulative_mutations: 0,
                mean_target: 0.0,
            },
            GlobalRow {
                sample: 1,
                time_step: 1,
                phase: "trajectory".into(),
                iteration: 5,
                level: Some(2),
                v: std::f64::consts::PI,
                cumulative_mutations: 4,
                mean_target: -1e-17,
            },
        ];
        let fin = vec![FinalRow {
            agent: 0,
            position: 0.123_456_789_012_345_67,
            level: 2,
        }];
        write_trace(&dir.path().join("t.csv"), &trace).unwrap();
        write_global(&dir.path().join("g.csv"), &global).unwrap();
        write_final(&dir.path().join("f.csv"), &fin).unwrap();
        assert_eq!(read_trace(&dir.path().join("t.csv")).unwrap(), trace);
        assert_eq!(read_global(&dir.path().join("g.csv")).unwrap(), global);
        assert_eq!(read_final(&dir.path().join("f.csv")).unwrap(), fin);
    }

    #[test]
    fn malformed_rows_name_the_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("final.csv");
        fs::write(&path, "agent,position,level\n0,abc,1\n").unwrap();
        let err = read_final(&path).unwrap_err();
        assert!(matches!(err, CliError::Data { .. }));
        assert!(err.to_string().contains("final.csv"), "{err}");
    }
}
