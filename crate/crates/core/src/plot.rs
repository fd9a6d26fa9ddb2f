//! Static SVG figures.

use std::f64::consts::PI;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use plotters::prelude::*;

use crate::baselines::TvlqrGains;
use crate::error::{Error, Result};
use crate::simulate::{ErrorStats, RolloutResult};

const SIZE: (u32, u32) = (800, 600);
const PALETTE: [RGBColor; 6] = [
    RGBColor(31, 119, 180),
    RGBColor(255, 127, 14),
    RGBColor(44, 160, 44),
    RGBColor(214, 39, 40),
    RGBColor(148, 103, 189),
    RGBColor(140, 86, 75),
];

fn plot_err<E: std::fmt::Display>(e: E) -> Error {
    Error::Config(format!("plot: {e}"))
}

/// Maps an angle into `[−π, π]`.
pub fn wrap_angle(theta: f64) -> f64 {
    let wrapped = (theta + PI).rem_euclid(2.0 * PI) - PI;
    if wrapped == -PI && theta > 0.0 { PI } else { wrapped }
}

fn extent(points: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = points
        .filter(|v| v.is_finite())
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)));
    if !lo.is_finite() {
        return (-1.0, 1.0);
    }
    let pad = ((hi - lo) * 0.05).max(1e-9);
    (lo - pad, hi + pad)
}

fn phase_points(states: &[DVector<f64>], wrap: bool) -> Vec<(f64, f64)> {
    states
        .iter()
        .map(|x| {
            let a = if wrap { wrap_angle(x[0]) } else { x[0] };
            (a, x[1])
        })
        .collect()
}

/// First two state components of every rollout over the nominal trajectory.
/// Wrapping applies to the first component only.
pub fn phase_overlay(
    path: &Path,
    title: &str,
    nominal: &[DVector<f64>],
    rollouts: &[RolloutResult],
    wrap: bool,
) -> Result<()> {
    if nominal.first().map_or(0, |x| x.len()) < 2 {
        return Err(Error::Config("phase plot needs at least two state components".into()));
    }
    let nominal_pts = phase_points(nominal, wrap);
    let runs: Vec<Vec<(f64, f64)>> = rollouts.iter().map(|r| phase_points(&r.states, wrap)).collect();
    let all = || nominal_pts.iter().chain(runs.iter().flatten());
    let xr = extent(all().map(|p| p.0));
    let yr = extent(all().map(|p| p.1));

    let root = SVGBackend::new(path, SIZE).into_drawing_area();
    root.fill(&WHITE).map_err(plot_err)?;
    let mut chart = ChartBuilder::on(&root)
        .caption(title, ("sans-serif", 22))
        .margin(12)
        .x_label_area_size(40)
        .y_label_area_size(60)
        .build_cartesian_2d(xr.0..xr.1, yr.0..yr.1)
        .map_err(plot_err)?;
    chart
        .configure_mesh()
        .x_desc("x0")
        .y_desc("x1")
        .draw()
        .map_err(plot_err)?;
    for (i, pts) in runs.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()].mix(0.6);
        chart
            .draw_series(LineSeries::new(pts.iter().copied(), color.stroke_width(1)))
            .map_err(plot_err)?;
    }
    chart
        .draw_series(LineSeries::new(nominal_pts.iter().copied(), BLACK.stroke_width(3)))
        .map_err(plot_err)?
        .label("nominal")
        .legend(|(x, y)| PathElement::new(vec![(x, y), (x + 20, y)], BLACK.stroke_width(3)));
    chart
        .configure_series_labels()
        .background_style(WHITE.mix(0.8))
        .border_style(BLACK)
        .draw()
        .map_err(plot_err)?;
    root.present().map_err(plot_err)
}

/// Mean `‖δx_k‖` with a ±1 std band for each labelled series.
pub fn error_band(path: &Path, title: &str, series: &[(&str, &ErrorStats)]) -> Result<()> {
    let horizon = series.iter().map(|(_, s)| s.mean.len()).max().unwrap_or(1).max(2) - 1;
    let (_, hi) = extent(
        series
            .iter()
            .flat_map(|(_, s)| s.mean.iter().zip(&s.std).map(|(m, d)| m + d)),
    );

    let root = SVGBackend::new(path, SIZE).into_drawing_area();
    root.fill(&WHITE).map_err(plot_err)?;
    let mut chart = ChartBuilder::on(&root)
        .caption(title, ("sans-serif", 22))
        .margin(12)
        .x_label_area_size(40)
        .y_label_area_size(60)
        .build_cartesian_2d(0f64..horizon as f64, 0f64..hi.max(1e-9))
        .map_err(plot_err)?;
    chart
        .configure_mesh()
        .x_desc("k")
        .y_desc("|dx|")
        .draw()
        .map_err(plot_err)?;
    for (i, (label, stats)) in series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let finite: Vec<(f64, f64, f64)> = stats
            .mean
            .iter()
            .zip(&stats.std)
            .enumerate()
            .filter(|(_, (m, _))| m.is_finite())
            .map(|(k, (m, d))| (k as f64, *m, *d))
            .collect();
        if finite.is_empty() {
            continue;
        }
        let band: Vec<(f64, f64)> = finite
            .iter()
            .map(|&(k, m, d)| (k, m + d))
            .chain(finite.iter().rev().map(|&(k, m, d)| (k, (m - d).max(0.0))))
            .collect();
        chart
            .draw_series(std::iter::once(Polygon::new(band, color.mix(0.2).filled())))
            .map_err(plot_err)?;
        chart
            .draw_series(LineSeries::new(finite.iter().map(|&(k, m, _)| (k, m)), color.stroke_width(2)))
            .map_err(plot_err)?
            .label(format!("{label} ({} of {} runs kept)", stats.kept(), stats.runs))
            .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 20, y)], color.stroke_width(2)));
    }
    chart
        .configure_series_labels()
        .background_style(WHITE.mix(0.8))
        .border_style(BLACK)
        .draw()
        .map_err(plot_err)?;
    root.present().map_err(plot_err)
}

fn panel<DB: DrawingBackend>(
    area: &DrawingArea<DB, plotters::coord::Shift>,
    title: &str,
    lines: &[(String, Vec<f64>)],
) -> Result<()>
where
    DB::ErrorType: 'static,
{
    let horizon = lines.iter().map(|(_, v)| v.len()).max().unwrap_or(1).max(2) - 1;
    let yr = extent(lines.iter().flat_map(|(_, v)| v.iter().copied()));
    let mut chart = ChartBuilder::on(area)
        .caption(title, ("sans-serif", 18))
        .margin(10)
        .x_label_area_size(30)
        .y_label_area_size(60)
        .build_cartesian_2d(0f64..horizon as f64, yr.0..yr.1)
        .map_err(plot_err)?;
    chart.configure_mesh().x_desc("k").draw().map_err(plot_err)?;
    for (i, (label, values)) in lines.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        chart
            .draw_series(LineSeries::new(
                values.iter().enumerate().map(|(k, &v)| (k as f64, v)),
                color.stroke_width(2),
            ))
            .map_err(plot_err)?
            .label(label.clone())
            .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 20, y)], color.stroke_width(2)));
    }
    chart
        .configure_series_labels()
        .background_style(WHITE.mix(0.8))
        .border_style(BLACK)
        .draw()
        .map_err(plot_err)?;
    Ok(())
}

/// Three stacked panels: nominal controls, the constant static gain and
/// the LQR gains as `−K_k`.
pub fn gains_figure(path: &Path, controls: &[DVector<f64>], gain: &DMatrix<f64>, lqr: &TvlqrGains) -> Result<()> {
    let horizon = controls.len();
    let (n_u, n_x) = gain.shape();
    let mut open = Vec::new();
    for i in 0..n_u {
        open.push((format!("u{i}"), controls.iter().map(|u| u[i]).collect()));
    }
    let mut fixed = Vec::new();
    let mut varying = Vec::new();
    for i in 0..n_u {
        for j in 0..n_x {
            fixed.push((format!("w{i}{j}"), vec![gain[(i, j)]; horizon]));
            varying.push((format!("-k{i}{j}"), lqr.k.iter().map(|k| -k[(i, j)]).collect()));
        }
    }

    let root = SVGBackend::new(path, (800, 900)).into_drawing_area();
    root.fill(&WHITE).map_err(plot_err)?;
    let areas = root.split_evenly((3, 1));
    panel(&areas[0], "open-loop control", &open)?;
    panel(&areas[1], "static feedback gain", &fixed)?;
    panel(&areas[2], "LQR feedback gain", &varying)?;
    root.present().map_err(plot_err)
}
