//! Static SVG figures rendered from emitted CSV files. Deliberately minimal:
//! axes, ticks, polylines and a legend.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::sinks::{self, FinalRow, GlobalRow, ScalingMedianRow};
use crate::CliError;

const W: f64 = 640.0;
const H: f64 = 400.0;
const MARGIN: (f64, f64, f64, f64) = (70.0, 20.0, 40.0, 50.0); // left, right, top, bottom
const COLORS: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf"];

#[derive(Debug, Clone)]
pub struct Series {
    pub name: String,
    pub points: Vec<(f64, f64)>,
    /// Markers instead of a polyline.
    pub scatter: bool,
}

impl Series {
    pub fn line(name: &str, points: Vec<(f64, f64)>) -> Self {
        Self {
            name: name.into(),
            points,
            scatter: false,
        }
    }

    pub fn scatter(name: &str, points: Vec<(f64, f64)>) -> Self {
        Self {
            name: name.into(),
            points,
            scatter: true,
        }
    }
}

fn bounds(series: &[Series]) -> (f64, f64, f64, f64) {
    let pts = series
        .iter()
        .flat_map(|s| s.points.iter())
        .filter(|(x, y)| x.is_finite() && y.is_finite());
    let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for &(x, y) in pts {
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(y);
        y1 = y1.max(y);
    }
    if !x0.is_finite() {
        return (0.0, 1.0, 0.0, 1.0);
    }
    let pad = |lo: f64, hi: f64| {
        if hi - lo > 1e-12 * hi.abs().max(1.0) {
            (lo, hi)
        } else {
            (lo - 0.5 * lo.abs().max(1.0), hi + 0.5 * hi.abs().max(1.0))
        }
    };
    let (x0, x1) = pad(x0, x1);
    let (y0, y1) = pad(y0, y1);
    (x0, x1, y0, y1)
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// A complete SVG document.
pub fn chart(title: &str, xlabel: &str, ylabel: &str, series: &[Series]) -> String {
    let (l, r, t, b) = MARGIN;
    let (x0, x1, y0, y1) = bounds(series);
    let px = |x: f64| l + (x - x0) / (x1 - x0) * (W - l - r);
    let py = |y: f64| H - b - (y - y0) / (y1 - y0) * (H - t - b);

    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(svg, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    let _ = writeln!(
        svg,
        r#"<text x="{}" y="20" text-anchor="middle" font-size="14">{}</text>"#,
        W / 2.0,
        escape(title)
    );
    let _ = writeln!(
        svg,
        r#"<rect x="{l}" y="{t}" width="{}" height="{}" fill="none" stroke="black"/>"#,
        W - l - r,
        H - t - b
    );
    for k in 0..=4 {
        let f = k as f64 / 4.0;
        let (xv, yv) = (x0 + f * (x1 - x0), y0 + f * (y1 - y0));
        let _ = writeln!(
            svg,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{}</text>"#,
            px(xv),
            H - b + 16.0,
            tick(xv)
        );
        let _ = writeln!(
            svg,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="end">{}</text>"#,
            l - 6.0,
            py(yv) + 4.0,
            tick(yv)
        );
    }
    let _ = writeln!(
        svg,
        r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{}</text>"#,
        l + (W - l - r) / 2.0,
        H - 12.0,
        escape(xlabel)
    );
    let _ = writeln!(
        svg,
        r#"<text transform="translate(16,{:.1}) rotate(-90)" text-anchor="middle">{}</text>"#,
        t + (H - t - b) / 2.0,
        escape(ylabel)
    );

    for (k, s) in series.iter().enumerate() {
        let color = COLORS[k % COLORS.len()];
        if s.scatter {
            for &(x, y) in &s.points {
                let _ = writeln!(
                    svg,
                    r#"<circle cx="{:.2}" cy="{:.2}" r="3" fill="{color}"/>"#,
                    px(x),
                    py(y)
                );
            }
        } else {
            let pts: Vec<String> = s
                .points
                .iter()
                .map(|&(x, y)| format!("{:.2},{:.2}", px(x), py(y)))
                .collect();
            let _ = writeln!(
                svg,
                r#"<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{}"/>"#,
                pts.join(" ")
            );
        }
        let ly = t + 14.0 + 16.0 * k as f64;
        let _ = writeln!(
            svg,
            r#"<rect x="{:.1}" y="{:.1}" width="10" height="10" fill="{color}"/><text x="{:.1}" y="{:.1}">{}</text>"#,
            W - r - 150.0,
            ly - 9.0,
            W - r - 135.0,
            ly,
            escape(&s.name)
        );
    }
    svg.push_str("</svg>\n");
    svg
}

fn tick(v: f64) -> String {
    if v != 0.0 && (v.abs() < 1e-3 || v.abs() >= 1e5) {
        format!("{v:.2e}")
    } else {
        format!("{v:.4}")
            .trim_end_matches('0')
            .trim_end_matches('.')
            .to_string()
    }
}

fn save(path: PathBuf, svg: String, written: &mut Vec<PathBuf>) -> Result<(), CliError> {
    fs::write(&path, svg).map_err(|e| CliError::io(&path, e))?;
    written.push(path);
    Ok(())
}

pub fn global_figures(global: &[GlobalRow]) -> Vec<(&'static str, String)> {
    let by_sample = |f: fn(&GlobalRow) -> f64| global.iter().map(|g| (g.sample as f64, f(g))).collect::<Vec<_>>();
    vec![
        (
            "global_cost.svg",
            chart("Global cost", "sample", "V", &[Series::line("V", by_sample(|g| g.v))]),
        ),
        (
            "mutations.svg",
            chart(
                "Cumulative hierarchy mutations",
                "sample",
                "mutations",
                &[Series::line("mutations", by_sample(|g| g.cumulative_mutations as f64))],
            ),
        ),
        (
            "mean_target.svg",
            chart(
                "Mean stationary target",
                "sample",
                "position (m)",
                &[Series::line("mean target", by_sample(|g| g.mean_target))],
            ),
        ),
    ]
}

pub fn final_figure(fin: &[FinalRow]) -> String {
    chart(
        "Final plate positions",
        "agent",
        "position (m)",
        &[Series::scatter(
            "position",
            fin.iter().map(|r| (r.agent as f64, r.position)).collect(),
        )],
    )
}

pub fn scaling_figure(rows: &[ScalingMedianRow]) -> String {
    let mut names: Vec<&str> = rows.iter().map(|r| r.variant.as_str()).collect();
    names.dedup();
    let series: Vec<Series> = names
        .iter()
        .map(|name| {
            Series::line(
                name,
                rows.iter()
                    .filter(|r| r.variant == *name)
                    .map(|r| (r.n_agents as f64, r.median_iterations_to_settle))
                    .collect(),
            )
        })
        .collect();
    chart("Median iterations to settle", "N", "samples", &series)
}

/// Render every figure whose CSV exists in `dir`; returns the files written.
pub fn render_dir(dir: &Path) -> Result<Vec<PathBuf>, CliError> {
    let mut written = Vec::new();
    let global = dir.join(sinks::GLOBAL_FILE);
    if global.exists() {
        for (name, svg) in global_figures(&sinks::read_global(&global)?) {
            save(dir.join(name), svg, &mut written)?;
        }
    }
    let fin = dir.join(sinks::FINAL_FILE);
    if fin.exists() {
        save(
            dir.join("final_positions.svg"),
            final_figure(&sinks::read_final(&fin)?),
            &mut written,
        )?;
    }
    let scaling = dir.join(sinks::SCALING_MEDIAN_FILE);
    if scaling.exists() {
        let rows: Vec<ScalingMedianRow> = sinks::read_table(&scaling)?;
        save(dir.join("scaling.svg"), scaling_figure(&rows), &mut written)?;
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn chart_is_well_formed_and_escaped() {
        let svg = chart(
            "a < b",
            "x",
            "y",
            &[
                Series::line("one", vec![(0.0, 1.0), (1.0, 2.0)]),
                Series::scatter("two", vec![(0.5, 1.5)]),
            ],
        );
        assert!(svg.starts_with("<svg") && svg.ends_with("</svg>\n"));
        assert!(svg.contains("a &lt; b"));
        assert_eq!(svg.matches("<polyline").count(), 1);
        assert_eq!(svg.matches("<circle").count(), 1);
    }

    #[test]
    fn flat_and_empty_series_do_not_divide_by_zero() {
        for s in [vec![], vec![(1.0, 3.0), (1.0, 3.0)]] {
            let svg = chart("flat", "x", "y", &[Series::line("s", s)]);
            assert!(!svg.contains("NaN") && !svg.contains("inf"), "{svg}");
        }
    }
}
