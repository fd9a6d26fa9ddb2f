//! Command-line pipelines: optimize, simulate, compare and check-gradients.
//!
//! Exit codes: 0 success, 1 configuration or I/O error, 2 iteration cap,
//! stationarity not reached or gradient check above threshold, 3 numeric failure.

use std::ffi::OsString;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Parser, Subcommand, ValueEnum};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::baselines::tvlqr;
use crate::config::RunConfig;
use crate::dynamics::discrete_jacobians;
use crate::error::{Error, Result};
use crate::plot;
use crate::report::{self, Summary};
use crate::simulate::{compare_dmax_profile, monte_carlo, Nominal};
use crate::solver::{project_to_box, solve, SolveStatus};
use crate::transcription::{build_nlp, check_gradient, DecisionVector, Nlp, TrajectoryNlp};

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 1;
pub const EXIT_NOT_CONVERGED: i32 = 2;
pub const EXIT_NUMERIC: i32 = 3;

/// Gate for `check-gradients`.
pub const GRADIENT_THRESHOLD: f64 = 1e-4;

#[derive(Debug, Parser)]
#[command(name = "robust-trajopt", version, about = "Trajectory and static feedback gain optimization with a worst-case deviation penalty")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Feedback {
    On,
    Off,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Solve the trajectory problem and write solution.csv, gain.csv, history.csv and summary.json.
    Optimize { config: PathBuf },
    /// Monte-Carlo rollouts of a stored solution under noise and parameter mismatch.
    Simulate {
        config: PathBuf,
        dir: PathBuf,
        #[arg(long, value_enum, default_value = "on")]
        feedback: Feedback,
        /// Overrides `runs` from the config.
        #[arg(long)]
        runs: Option<usize>,
        /// Wrap the first state component to [-pi, pi] in the phase plot.
        #[arg(long)]
        wrap_angles: bool,
    },
    /// TVLQR along a stored solution next to the static gain, plus the d_max profile.
    Compare { config: PathBuf, dir: PathBuf },
    /// Analytic against finite-difference objective gradients at random points.
    CheckGradients {
        config: PathBuf,
        #[arg(long, default_value_t = 5)]
        samples: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, hide = true)]
        corrupt_gradient: bool,
    },
}

/// Parses `args` (program name first) and runs one command.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    let outcome = match cli.command {
        Command::Optimize { config } => cmd_optimize(&config),
        Command::Simulate {
            config,
            dir,
            feedback,
            runs,
            wrap_angles,
        } => cmd_simulate(&config, &dir, feedback == Feedback::On, runs, wrap_angles),
        Command::Compare { config, dir } => cmd_compare(&config, &dir),
        Command::CheckGradients {
            config,
            samples,
            seed,
            corrupt_gradient,
        } => cmd_check_gradients(&config, samples, seed, corrupt_gradient),
    };
    match outcome {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code_for(&e)
        }
    }
}

pub fn exit_code_for(e: &Error) -> i32 {
    match e {
        Error::Config(_) | Error::Dimension { .. } => EXIT_CONFIG,
        Error::Numeric(_) | Error::NoConvergence { .. } | Error::Degenerate { .. } => EXIT_NUMERIC,
    }
}

pub fn exit_code_for_status(status: SolveStatus) -> i32 {
    match status {
        SolveStatus::Converged => EXIT_OK,
        SolveStatus::FeasibleButNotStationary | SolveStatus::IterationCap => EXIT_NOT_CONVERGED,
        SolveStatus::NumericFailure => EXIT_NUMERIC,
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::Config(format!("cannot create {}: {e}", dir.display())))
}

fn nominal_of(decision: &DecisionVector, dt: f64) -> Nominal {
    Nominal {
        states: decision.states.clone(),
        controls: decision.controls.clone(),
        dt,
    }
}

fn cmd_optimize(path: &Path) -> Result<i32> {
    let config = RunConfig::load(path)?;
    let out = config.resolved_output_dir();
    create_dir(&out)?;
    report::write_text(&out.join("effective_config.json"), &config.effective()?.to_json())?;

    let spec = config.problem_spec()?;
    let nlp = build_nlp(spec)?;
    let start = Instant::now();
    let result = solve(&nlp, &config.solver, &DVector::zeros(nlp.num_variables()))?;
    let wall_time_s = start.elapsed().as_secs_f64();
    let decision = nlp.unpack(&result.solution)?;

    report::write_text(&out.join("solution.csv"), &report::solution_csv(&decision))?;
    report::write_text(&out.join("gain.csv"), &report::gain_csv(&decision.gain))?;
    report::write_text(&out.join("history.csv"), &report::history_csv(&result.history))?;

    let spec = nlp.spec();
    let (dmax_gain, dmax_open, eps_fraction) =
        match compare_dmax_profile(&spec.model, &nominal_of(&decision, spec.dt), &decision.gain, &spec.s_schedule, &spec.p) {
            Ok(rows) => {
                let eps_fraction = spec.epsilon_schedule.as_ref().map(|eps| {
                    let ok = rows.iter().zip(eps).filter(|(r, e)| r.with_gain <= *e * *e).count();
                    ok as f64 / rows.len() as f64
                });
                (
                    rows.iter().map(|r| r.with_gain).sum(),
                    rows.iter().map(|r| r.open_loop).sum(),
                    eps_fraction,
                )
            }
            Err(_) => (f64::NAN, f64::NAN, None),
        };
    let degenerate_knots = match nlp.objective_gradient_with_report(&result.solution) {
        Ok((_, knots)) => knots,
        Err(_) => Vec::new(),
    };
    let summary = Summary {
        model: spec.model.name().to_string(),
        status: result.status.as_str().to_string(),
        objective: result.objective,
        max_defect: result.max_defect,
        grad_norm: result.grad_norm,
        iterations: result.iterations,
        outer_iterations: result.history.len(),
        initial_clamped: result.initial_clamped,
        degenerate_knots,
        dmax_sum_with_gain: dmax_gain,
        dmax_sum_open_loop: dmax_open,
        epsilon_satisfied_fraction: eps_fraction,
        gain: decision.gain.transpose().iter().copied().collect(),
        terminal_state: decision.states[spec.horizon].iter().copied().collect(),
        wall_time_s,
        failure: result.failure.clone(),
    };
    let json = serde_json::to_string_pretty(&summary).map_err(|e| Error::Config(format!("summary: {e}")))?;
    report::write_text(&out.join("summary.json"), &json)?;

    eprintln!(
        "{}: objective {:.6e}, max defect {:.3e}, {} iterations, W = {:?}, wrote {}",
        result.status.as_str(),
        result.objective,
        result.max_defect,
        result.iterations,
        summary.gain,
        out.display()
    );
    Ok(exit_code_for_status(result.status))
}

fn load_solution(config: &RunConfig, dir: &Path) -> Result<(RunConfig, DecisionVector)> {
    let spec = config.problem_spec()?;
    let layout = spec.layout();
    let (states, controls) = report::read_solution_csv(&dir.join("solution.csv"), &layout)?;
    let decision = DecisionVector {
        states,
        controls,
        gain: DMatrix::zeros(layout.n_u, layout.n_x),
    };
    Ok((config.clone(), decision))
}

fn cmd_simulate(path: &Path, dir: &Path, feedback: bool, runs: Option<usize>, wrap: bool) -> Result<i32> {
    let config = RunConfig::load(path)?;
    let (config, mut decision) = load_solution(&config, dir)?;
    let model = config.plant_model()?;
    if feedback {
        decision.gain = report::read_gain_csv(&dir.join("gain.csv"), model.n_u(), model.n_x())?;
    }
    let runs = runs.unwrap_or(config.runs);
    let nominal = nominal_of(&decision, config.dt);
    let gain = feedback.then_some(&decision.gain);
    let mc = monte_carlo(
        &model,
        &nominal,
        gain,
        &config.noise,
        runs,
        config.noise.seed,
        &config.mismatch_schedule(),
    )?;

    let mode = if feedback { "closed" } else { "open" };
    report::write_text(&dir.join(format!("rollouts_{mode}.csv")), &report::rollouts_csv(&mc))?;
    report::write_text(&dir.join(format!("stats_{mode}.csv")), &report::stats_csv(&mc.stats))?;
    let label = if feedback { "closed loop" } else { "open loop" };
    plot::phase_overlay(
        &dir.join(format!("phase_{mode}.svg")),
        &format!("{} {label}", model.name()),
        &nominal.states,
        &mc.rollouts,
        wrap,
    )?;
    plot::error_band(
        &dir.join(format!("error_band_{mode}.svg")),
        &format!("{} {label} deviation", model.name()),
        &[(label, &mc.stats)],
    )?;
    eprintln!(
        "{label}: {} runs, {} divergent, terminal |dx| mean {:.4e} std {:.4e} max {:.4e}",
        mc.stats.runs,
        mc.stats.divergent(),
        mc.stats.terminal_mean,
        mc.stats.terminal_std,
        mc.stats.terminal_max
    );
    Ok(EXIT_OK)
}

fn cmd_compare(path: &Path, dir: &Path) -> Result<i32> {
    let config = RunConfig::load(path)?;
    let (config, mut decision) = load_solution(&config, dir)?;
    let spec = config.problem_spec()?;
    decision.gain = report::read_gain_csv(&dir.join("gain.csv"), spec.model.n_u(), spec.model.n_x())?;

    let mut a_seq = Vec::with_capacity(spec.horizon);
    let mut b_seq = Vec::with_capacity(spec.horizon);
    for k in 0..spec.horizon {
        let jac = discrete_jacobians(&spec.model, &decision.states[k], &decision.controls[k], spec.dt)?;
        a_seq.push(jac.a);
        b_seq.push(jac.b);
    }
    let lqr = tvlqr(&a_seq, &b_seq, &spec.q, &spec.r, &spec.q_terminal)?;
    report::write_text(
        &dir.join("gains_comparison.csv"),
        &report::gains_comparison_csv(&decision.gain, &lqr, &decision.controls),
    )?;
    plot::gains_figure(&dir.join("gains.svg"), &decision.controls, &decision.gain, &lqr)?;

    let rows = compare_dmax_profile(
        &spec.model,
        &nominal_of(&decision, spec.dt),
        &decision.gain,
        &spec.s_schedule,
        &spec.p,
    )?;
    report::write_text(&dir.join("dmax_profile.csv"), &report::dmax_csv(&rows))?;
    let with_gain: f64 = rows.iter().map(|r| r.with_gain).sum();
    let open: f64 = rows.iter().map(|r| r.open_loop).sum();
    eprintln!("sum d_max: {with_gain:.6e} with W, {open:.6e} with W = 0");
    Ok(EXIT_OK)
}

/// Random decision vector near the straight line from `x0` to the goal, clamped to the bounds.
pub fn random_decision(nlp: &TrajectoryNlp, rng: &mut ChaCha8Rng) -> DVector<f64> {
    let spec = nlp.spec();
    let l = nlp.layout();
    let mut v = DVector::zeros(l.num_variables());
    for k in 0..=l.horizon {
        let s = k as f64 / l.horizon as f64;
        for j in 0..l.n_x {
            let line = (1.0 - s) * spec.x0[j] + s * spec.x_goal[j];
            v[l.state_offset(k) + j] = line + rng.gen_range(-0.5..0.5);
        }
    }
    for k in 0..l.horizon {
        for j in 0..l.n_u {
            v[l.control_offset(k) + j] = rng.gen_range(-1.0..1.0);
        }
    }
    for i in 0..l.n_u * l.n_x {
        v[l.gain_offset() + i] = rng.gen_range(-1.0..1.0);
    }
    project_to_box(&v, nlp.bounds())
}

fn cmd_check_gradients(path: &Path, samples: usize, seed: u64, corrupt: bool) -> Result<i32> {
    if samples == 0 {
        return Err(Error::Config("samples must be >= 1".into()));
    }
    let config = RunConfig::load(path)?;
    let nlp = build_nlp(config.problem_spec()?)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for i in 0..samples {
        let v = random_decision(&nlp, &mut rng);
        let (mut analytic, degenerate) = nlp.objective_gradient_with_report(&v)?;
        if corrupt {
            analytic *= 1.01;
        }
        let check = check_gradient(&nlp, &v, &analytic, &degenerate)?;
        eprintln!(
            "sample {i}: relative error {:.3e}, degenerate knots {:?}",
            check.relative_error, check.degenerate_knots
        );
        worst = worst.max(check.relative_error);
    }
    let pass = worst < GRADIENT_THRESHOLD;
    println!(
        "max relative error {worst:.3e} ({} threshold {GRADIENT_THRESHOLD:e})",
        if pass { "below" } else { "above" }
    );
    Ok(if pass { EXIT_OK } else { EXIT_NOT_CONVERGED })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn status_mapping() {
        assert_eq!(exit_code_for_status(SolveStatus::Converged), 0);
        assert_eq!(exit_code_for_status(SolveStatus::IterationCap), 2);
        assert_eq!(exit_code_for_status(SolveStatus::FeasibleButNotStationary), 2);
        assert_eq!(exit_code_for_status(SolveStatus::NumericFailure), 3);
        assert_eq!(exit_code_for(&Error::Config("x".into())), 1);
        assert_eq!(exit_code_for(&Error::Numeric("x".into())), 3);
    }

    #[test]
    fn bad_arguments_exit_one() {
        assert_eq!(run(["robust-trajopt", "optimise", "x.json"]), EXIT_CONFIG);
        assert_eq!(run(["robust-trajopt", "simulate", "a.json", "dir", "--feedback=maybe"]), EXIT_CONFIG);
        assert_eq!(run(["robust-trajopt", "optimize", "/nonexistent/config.json"]), EXIT_CONFIG);
    }
}
