//! CSV and JSON artifacts. Numbers are written with 12 significant digits.

use std::fmt::Write as _;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::baselines::TvlqrGains;
use crate::error::{Error, Result};
use crate::simulate::{DmaxRow, ErrorStats, MonteCarlo};
use crate::solver::IterationRecord;
use crate::transcription::{DecisionVector, Layout};

/// Fixed-precision scientific notation, `nan`/`inf` spelled out.
pub fn fmt(x: f64) -> String {
    if x.is_nan() {
        "nan".into()
    } else if x.is_infinite() {
        if x > 0.0 { "inf".into() } else { "-inf".into() }
    } else {
        format!("{x:.11e}")
    }
}

fn header(prefix: &str, n: usize) -> Vec<String> {
    (0..n).map(|i| format!("{prefix}{i}")).collect()
}

/// `k,x0..,u0..`; the terminal row leaves the control columns empty.
pub fn solution_csv(decision: &DecisionVector) -> String {
    let n_x = decision.states[0].len();
    let n_u = decision.controls.first().map_or(0, |u| u.len());
    let mut cols = vec!["k".to_string()];
    cols.extend(header("x", n_x));
    cols.extend(header("u", n_u));
    let mut out = cols.join(",") + "\n";
    for (k, x) in decision.states.iter().enumerate() {
        let mut row = vec![k.to_string()];
        row.extend(x.iter().map(|&v| fmt(v)));
        match decision.controls.get(k) {
            Some(u) => row.extend(u.iter().map(|&v| fmt(v))),
            None => row.extend(std::iter::repeat_n(String::new(), n_u)),
        }
        out += &row.join(",");
        out.push('\n');
    }
    out
}

/// `i,j,w` for every entry of `W`.
pub fn gain_csv(gain: &DMatrix<f64>) -> String {
    let mut out = String::from("i,j,w\n");
    for i in 0..gain.nrows() {
        for j in 0..gain.ncols() {
            let _ = writeln!(out, "{i},{j},{}", fmt(gain[(i, j)]));
        }
    }
    out
}

pub fn history_csv(history: &[IterationRecord]) -> String {
    let mut out = String::from("iter,objective,feasibility,penalty_weight,grad_norm,inner_iterations\n");
    for h in history {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{}",
            h.iter,
            fmt(h.objective),
            fmt(h.feasibility),
            fmt(h.penalty_weight),
            fmt(h.grad_norm),
            h.inner_iterations
        );
    }
    out
}

/// One row per simulated state: `run,k,x0..,u0..,dev_norm,saturated`.
pub fn rollouts_csv(mc: &MonteCarlo) -> String {
    let n_x = mc
        .rollouts
        .iter()
        .find_map(|r| r.states.first().map(|x| x.len()))
        .unwrap_or(0);
    let n_u = mc
        .rollouts
        .iter()
        .find_map(|r| r.controls.first().map(|u| u.len()))
        .unwrap_or(0);
    let mut cols = vec!["run".to_string(), "k".to_string()];
    cols.extend(header("x", n_x));
    cols.extend(header("u", n_u));
    cols.push("dev_norm".into());
    cols.push("saturated".into());
    let mut out = cols.join(",") + "\n";
    for (run, r) in mc.rollouts.iter().enumerate() {
        for (k, x) in r.states.iter().enumerate() {
            let mut row = vec![run.to_string(), k.to_string()];
            row.extend(x.iter().map(|&v| fmt(v)));
            match r.controls.get(k) {
                Some(u) if k + 1 < r.states.len() || r.diverged() => row.extend(u.iter().map(|&v| fmt(v))),
                _ => row.extend(std::iter::repeat_n(String::new(), n_u)),
            }
            row.push(fmt(r.deviations[k].norm()));
            row.push(match r.saturated.get(k) {
                Some(&s) if k + 1 < r.states.len() || r.diverged() => u8::from(s).to_string(),
                _ => String::new(),
            });
            out += &row.join(",");
            out.push('\n');
        }
    }
    out
}

/// `k,mean,std,kept_runs,divergent_runs`.
pub fn stats_csv(stats: &ErrorStats) -> String {
    let mut out = String::from("k,mean,std,kept_runs,divergent_runs\n");
    for k in 0..stats.mean.len() {
        let _ = writeln!(
            out,
            "{k},{},{},{},{}",
            fmt(stats.mean[k]),
            fmt(stats.std[k]),
            stats.kept(),
            stats.divergent()
        );
    }
    out
}

/// Static gain next to the LQR gain in the same sign convention (`δu = W δx`, so `−K_k`).
pub fn gains_comparison_csv(gain: &DMatrix<f64>, lqr: &TvlqrGains, controls: &[DVector<f64>]) -> String {
    let (n_u, n_x) = gain.shape();
    let mut cols = vec!["k".to_string()];
    cols.extend(header("u", n_u));
    for i in 0..n_u {
        for j in 0..n_x {
            cols.push(format!("w_{i}_{j}"));
        }
    }
    for i in 0..n_u {
        for j in 0..n_x {
            cols.push(format!("lqr_{i}_{j}"));
        }
    }
    let mut out = cols.join(",") + "\n";
    for (k, kk) in lqr.k.iter().enumerate() {
        let mut row = vec![k.to_string()];
        row.extend(controls[k].iter().map(|&v| fmt(v)));
        for i in 0..n_u {
            for j in 0..n_x {
                row.push(fmt(gain[(i, j)]));
            }
        }
        for i in 0..n_u {
            for j in 0..n_x {
                row.push(fmt(-kk[(i, j)]));
            }
        }
        out += &row.join(",");
        out.push('\n');
    }
    out
}

pub fn dmax_csv(rows: &[DmaxRow]) -> String {
    let mut out = String::from("k,d_max_gain,eigengap_gain,d_max_open_loop\n");
    for r in rows {
        let _ = writeln!(out, "{},{},{},{}", r.k, fmt(r.with_gain), fmt(r.eigengap), fmt(r.open_loop));
    }
    out
}

/// Run summary written as `summary.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub model: String,
    pub status: String,
    pub objective: f64,
    pub max_defect: f64,
    pub grad_norm: f64,
    pub iterations: usize,
    pub outer_iterations: usize,
    pub initial_clamped: bool,
    pub degenerate_knots: Vec<usize>,
    pub dmax_sum_with_gain: f64,
    pub dmax_sum_open_loop: f64,
    /// Share of knots with `d_max <= ε_k²` when tolerances are configured.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub epsilon_satisfied_fraction: Option<f64>,
    pub gain: Vec<f64>,
    pub terminal_state: Vec<f64>,
    pub wall_time_s: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub failure: Option<String>,
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::Config(format!("cannot write {}: {e}", path.display())))
}

fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))
}

fn parse_field(field: &str, path: &Path, line: usize) -> Result<f64> {
    field
        .trim()
        .parse()
        .map_err(|_| Error::Config(format!("{}:{line}: bad number {field:?}", path.display())))
}

/// States and controls of a stored trajectory.
pub type Trajectory = (Vec<DVector<f64>>, Vec<DVector<f64>>);

/// Reads a `solution.csv` back into states and controls.
pub fn read_solution_csv(path: &Path, layout: &Layout) -> Result<Trajectory> {
    let text = read_text(path)?;
    let mut states = Vec::new();
    let mut controls = Vec::new();
    for (line_no, line) in text.lines().enumerate().skip(1) {
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 1 + layout.n_x + layout.n_u {
            return Err(Error::Config(format!(
                "{}:{}: expected {} columns",
                path.display(),
                line_no + 1,
                1 + layout.n_x + layout.n_u
            )));
        }
        let x = fields[1..=layout.n_x]
            .iter()
            .map(|f| parse_field(f, path, line_no + 1))
            .collect::<Result<Vec<_>>>()?;
        states.push(DVector::from_vec(x));
        if fields[1 + layout.n_x].is_empty() {
            continue;
        }
        let u = fields[1 + layout.n_x..]
            .iter()
            .map(|f| parse_field(f, path, line_no + 1))
            .collect::<Result<Vec<_>>>()?;
        controls.push(DVector::from_vec(u));
    }
    if states.len() != layout.horizon + 1 || controls.len() != layout.horizon {
        return Err(Error::Config(format!(
            "{} holds {} states and {} controls, expected {} and {}",
            path.display(),
            states.len(),
            controls.len(),
            layout.horizon + 1,
            layout.horizon
        )));
    }
    Ok((states, controls))
}

pub fn read_gain_csv(path: &Path, n_u: usize, n_x: usize) -> Result<DMatrix<f64>> {
    let text = read_text(path)?;
    let mut gain = DMatrix::from_element(n_u, n_x, f64::NAN);
    for (line_no, line) in text.lines().enumerate().skip(1) {
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        let bad = || Error::Config(format!("{}:{}: malformed gain row", path.display(), line_no + 1));
        if fields.len() != 3 {
            return Err(bad());
        }
        let i: usize = fields[0].parse().map_err(|_| bad())?;
        let j: usize = fields[1].parse().map_err(|_| bad())?;
        if i >= n_u || j >= n_x {
            return Err(bad());
        }
        gain[(i, j)] = parse_field(fields[2], path, line_no + 1)?;
    }
    if gain.iter().any(|v| v.is_nan()) {
        return Err(Error::Config(format!("{} does not define every gain entry", path.display())));
    }
    Ok(gain)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn twelve_significant_digits() {
        assert_eq!(fmt(std::f64::consts::PI), "3.14159265359e0");
        assert_eq!(fmt(-0.00012345678901234), "-1.23456789012e-4");
        assert_eq!(fmt(f64::NAN), "nan");
    }

    #[test]
    fn solution_round_trip() {
        let layout = Layout {
            n_x: 2,
            n_u: 1,
            horizon: 3,
        };
        let decision = DecisionVector {
            states: (0..4).map(|k| DVector::from_column_slice(&[k as f64 * 0.5, -1.25])).collect(),
            controls: (0..3).map(|k| DVector::from_element(1, k as f64 - 1.0)).collect(),
            gain: DMatrix::from_row_slice(1, 2, &[-2.5, -7.25]),
        };
        let dir = tempfile::tempdir().unwrap();
        let sol = dir.path().join("solution.csv");
        let gain = dir.path().join("gain.csv");
        write_text(&sol, &solution_csv(&decision)).unwrap();
        write_text(&gain, &gain_csv(&decision.gain)).unwrap();
        let (states, controls) = read_solution_csv(&sol, &layout).unwrap();
        assert_eq!(states, decision.states);
        assert_eq!(controls, decision.controls);
        assert_eq!(read_gain_csv(&gain, 1, 2).unwrap(), decision.gain);
        assert!(read_gain_csv(&gain, 1, 3).is_err());
        assert!(read_solution_csv(&sol, &Layout { horizon: 4, ..layout }).is_err());
    }
}
