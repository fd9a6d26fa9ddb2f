//! Noisy rollouts of a nominal trajectory, with or without the static gain,
//! and Monte-Carlo error statistics over many seeded runs.

use nalgebra::{DMatrix, DVector};
use rand::distributions::{Distribution, Uniform};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dynamics::{discrete_jacobians, step_euler, DynamicsModel};
use crate::error::{check_len, Error, Result};
use crate::robust_metric::{d_max_term, DeviationWeight, EllipsoidShape};

/// Rollouts stop once `‖x̂_k‖` exceeds this.
pub const DIVERGENCE_THRESHOLD: f64 = 1e3;

/// Per-step additive noise `ω_i ~ U(−a_i, a_i)` and an optional random
/// initial deviation drawn uniformly from the Euclidean ball of `initial_radius`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseSpec {
    pub bounds: Vec<f64>,
    #[serde(default)]
    pub initial_radius: f64,
    pub seed: u64,
}

impl NoiseSpec {
    pub fn new(bounds: Vec<f64>, seed: u64) -> Result<Self> {
        let spec = Self {
            bounds,
            initial_radius: 0.0,
            seed,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn silent(n_x: usize) -> Self {
        Self {
            bounds: vec![0.0; n_x],
            initial_radius: 0.0,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(a) = self.bounds.iter().find(|a| !(**a >= 0.0 && a.is_finite())) {
            return Err(Error::Config(format!("noise bounds must be finite and >= 0, got {a}")));
        }
        if !(self.initial_radius >= 0.0 && self.initial_radius.is_finite()) {
            return Err(Error::Config(format!(
                "initial deviation radius must be finite and >= 0, got {}",
                self.initial_radius
            )));
        }
        Ok(())
    }

    pub fn with_seed(&self, seed: u64) -> Self {
        Self { seed, ..self.clone() }
    }
}

/// Nominal open-loop plan to track.
#[derive(Debug, Clone, PartialEq)]
pub struct Nominal {
    pub states: Vec<DVector<f64>>,
    pub controls: Vec<DVector<f64>>,
    pub dt: f64,
}

impl Nominal {
    pub fn horizon(&self) -> usize {
        self.controls.len()
    }

    fn validate(&self, model: &DynamicsModel) -> Result<()> {
        check_len("nominal states", self.controls.len() + 1, self.states.len())?;
        for x in &self.states {
            check_len("nominal state", model.n_x(), x.len())?;
        }
        for u in &self.controls {
            check_len("nominal control", model.n_u(), u.len())?;
        }
        Ok(())
    }
}

/// Named parameter overrides applied to the simulated plant.
pub type Mismatch = Vec<(String, f64)>;

#[derive(Debug, Clone, PartialEq)]
pub struct RolloutResult {
    /// Simulated states; shorter than `T + 1` when the run diverged.
    pub states: Vec<DVector<f64>>,
    /// Applied (clamped) controls.
    pub controls: Vec<DVector<f64>>,
    /// `x̂_k − x_k` for every simulated state.
    pub deviations: Vec<DVector<f64>>,
    pub saturated: Vec<bool>,
    /// Noise added after each step.
    pub noise: Vec<DVector<f64>>,
    /// Index of the first state beyond the divergence threshold.
    pub diverged_at: Option<usize>,
}

impl RolloutResult {
    pub fn diverged(&self) -> bool {
        self.diverged_at.is_some()
    }

    pub fn deviation_norms(&self) -> Vec<f64> {
        self.deviations.iter().map(|d| d.norm()).collect()
    }
}

fn plant(model: &DynamicsModel, mismatch: &[(String, f64)]) -> Result<DynamicsModel> {
    let mut plant = model.clone();
    for (name, value) in mismatch {
        plant = plant.with_parameter(name, *value)?;
    }
    Ok(plant)
}

fn out_of_range(x: &DVector<f64>) -> bool {
    x.iter().any(|v| !v.is_finite()) || x.norm() > DIVERGENCE_THRESHOLD
}

fn sample_ball(rng: &mut ChaCha8Rng, n: usize, radius: f64) -> DVector<f64> {
    if radius == 0.0 || n == 0 {
        return DVector::zeros(n);
    }
    let dir: DVector<f64> = DVector::from_fn(n, |_, _| StandardNormal.sample(&mut *rng));
    let u: f64 = Uniform::new(0.0, 1.0).sample(rng);
    let norm = dir.norm();
    if norm == 0.0 {
        return DVector::zeros(n);
    }
    dir * (radius * u.powf(1.0 / n as f64) / norm)
}

/// Rolls out `nominal` on the (possibly mismatched) plant with fresh noise
/// each step. With `gain` the control is `clamp(u_k + W δx_k)`, otherwise `clamp(u_k)`.
pub fn rollout(
    model: &DynamicsModel,
    nominal: &Nominal,
    gain: Option<&DMatrix<f64>>,
    noise: &NoiseSpec,
    mismatch: &[(String, f64)],
) -> Result<RolloutResult> {
    noise.validate()?;
    check_len("noise bounds", model.n_x(), noise.bounds.len())?;
    let mut rng = ChaCha8Rng::seed_from_u64(noise.seed);
    let delta0 = sample_ball(&mut rng, model.n_x(), noise.initial_radius);
    rollout_inner(model, nominal, gain, noise, mismatch, &delta0, &mut rng)
}

/// Like [`rollout`] but starting from a given deviation `δx_0`.
pub fn rollout_from(
    model: &DynamicsModel,
    nominal: &Nominal,
    gain: Option<&DMatrix<f64>>,
    noise: &NoiseSpec,
    mismatch: &[(String, f64)],
    delta0: &DVector<f64>,
) -> Result<RolloutResult> {
    noise.validate()?;
    check_len("noise bounds", model.n_x(), noise.bounds.len())?;
    check_len("initial deviation", model.n_x(), delta0.len())?;
    let mut rng = ChaCha8Rng::seed_from_u64(noise.seed);
    rollout_inner(model, nominal, gain, noise, mismatch, delta0, &mut rng)
}

fn rollout_inner(
    model: &DynamicsModel,
    nominal: &Nominal,
    gain: Option<&DMatrix<f64>>,
    noise: &NoiseSpec,
    mismatch: &[(String, f64)],
    delta0: &DVector<f64>,
    rng: &mut ChaCha8Rng,
) -> Result<RolloutResult> {
    nominal.validate(model)?;
    if let Some(w) = gain {
        if w.shape() != (model.n_u(), model.n_x()) {
            return Err(Error::Config(format!(
                "gain must be {}x{}, got {:?}",
                model.n_u(),
                model.n_x(),
                w.shape()
            )));
        }
    }
    let plant = plant(model, mismatch)?;
    let draws: Vec<Uniform<f64>> = noise.bounds.iter().map(|&a| Uniform::new_inclusive(-a, a)).collect();

    let horizon = nominal.horizon();
    let mut x = &nominal.states[0] + delta0;
    let mut result = RolloutResult {
        states: Vec::with_capacity(horizon + 1),
        controls: Vec::with_capacity(horizon),
        deviations: Vec::with_capacity(horizon + 1),
        saturated: Vec::with_capacity(horizon),
        noise: Vec::with_capacity(horizon),
        diverged_at: None,
    };
    if out_of_range(&x) {
        result.diverged_at = Some(0);
        return Ok(result);
    }
    result.deviations.push(&x - &nominal.states[0]);
    result.states.push(x.clone());

    for k in 0..horizon {
        let delta = &result.deviations[k];
        let wanted = match gain {
            Some(w) => &nominal.controls[k] + w * delta,
            None => nominal.controls[k].clone(),
        };
        let applied = plant.control_bounds.clamp(&wanted);
        result.saturated.push(applied != wanted);

        let omega = DVector::from_iterator(draws.len(), draws.iter().map(|d| d.sample(&mut *rng)));
        let next = match step_euler(&plant, &x, &applied, nominal.dt) {
            Ok(next) => next + &omega,
            Err(Error::Numeric(_)) => DVector::from_element(x.len(), f64::NAN),
            Err(e) => return Err(e),
        };
        result.controls.push(applied);
        result.noise.push(omega);
        if out_of_range(&next) {
            result.diverged_at = Some(k + 1);
            break;
        }
        result.deviations.push(&next - &nominal.states[k + 1]);
        result.states.push(next.clone());
        x = next;
    }
    Ok(result)
}

/// Per-step statistics of `‖δx_k‖` over the non-divergent runs.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ErrorStats {
    pub mean: Vec<f64>,
    /// Population standard deviation.
    pub std: Vec<f64>,
    pub runs: usize,
    /// Indices of runs that crossed the divergence threshold.
    pub diverged_runs: Vec<usize>,
    pub terminal_mean: f64,
    pub terminal_std: f64,
    pub terminal_max: f64,
}

impl ErrorStats {
    pub fn divergent(&self) -> usize {
        self.diverged_runs.len()
    }

    pub fn kept(&self) -> usize {
        self.runs - self.divergent()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MonteCarlo {
    pub stats: ErrorStats,
    pub rollouts: Vec<RolloutResult>,
}

/// Runs `runs` rollouts, run `i` seeded with `base_seed + i` and using
/// `mismatch[i % len]` when the schedule is non-empty.
pub fn monte_carlo(
    model: &DynamicsModel,
    nominal: &Nominal,
    gain: Option<&DMatrix<f64>>,
    noise: &NoiseSpec,
    runs: usize,
    base_seed: u64,
    mismatch: &[Mismatch],
) -> Result<MonteCarlo> {
    if runs == 0 {
        return Err(Error::Config("monte carlo needs at least one run".into()));
    }
    let rollouts: Vec<RolloutResult> = (0..runs)
        .into_par_iter()
        .map(|i| {
            let seeded = noise.with_seed(base_seed.wrapping_add(i as u64));
            let overrides: &[(String, f64)] = if mismatch.is_empty() {
                &[]
            } else {
                &mismatch[i % mismatch.len()]
            };
            rollout(model, nominal, gain, &seeded, overrides)
        })
        .collect::<Result<_>>()?;
    let stats = error_stats(&rollouts, nominal.horizon());
    Ok(MonteCarlo { stats, rollouts })
}

/// Aggregates deviation norms in run order; divergent runs are excluded.
pub fn error_stats(rollouts: &[RolloutResult], horizon: usize) -> ErrorStats {
    let diverged_runs: Vec<usize> = rollouts
        .iter()
        .enumerate()
        .filter(|(_, r)| r.diverged())
        .map(|(i, _)| i)
        .collect();
    let kept: Vec<Vec<f64>> = rollouts
        .iter()
        .filter(|r| !r.diverged())
        .map(|r| r.deviation_norms())
        .collect();
    let mut mean = vec![f64::NAN; horizon + 1];
    let mut std = vec![f64::NAN; horizon + 1];
    if !kept.is_empty() {
        let n = kept.len() as f64;
        for k in 0..=horizon {
            let m = kept.iter().map(|r| r[k]).sum::<f64>() / n;
            let var = kept.iter().map(|r| (r[k] - m) * (r[k] - m)).sum::<f64>() / n;
            mean[k] = m;
            std[k] = var.sqrt();
        }
    }
    let terminal_max = kept.iter().map(|r| r[horizon]).fold(f64::NAN, f64::max);
    ErrorStats {
        terminal_mean: mean[horizon],
        terminal_std: std[horizon],
        terminal_max,
        mean,
        std,
        runs: rollouts.len(),
        diverged_runs,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct DmaxRow {
    pub k: usize,
    pub with_gain: f64,
    /// Eigengap of the scaled Gram matrix under the solved gain.
    pub eigengap: f64,
    pub open_loop: f64,
}

/// `d_max` at every knot with the solved gain and with `W = 0`.
pub fn compare_dmax_profile(
    model: &DynamicsModel,
    nominal: &Nominal,
    gain: &DMatrix<f64>,
    s_schedule: &[EllipsoidShape],
    p: &DeviationWeight,
) -> Result<Vec<DmaxRow>> {
    nominal.validate(model)?;
    check_len("ellipsoid schedule", nominal.horizon(), s_schedule.len())?;
    let zero = DMatrix::zeros(gain.nrows(), gain.ncols());
    (0..nominal.horizon())
        .into_par_iter()
        .map(|k| {
            let jac = discrete_jacobians(model, &nominal.states[k], &nominal.controls[k], nominal.dt)?;
            let term = d_max_term(&jac.a, &jac.b, gain, &s_schedule[k], p)?;
            Ok(DmaxRow {
                k,
                with_gain: term.d_max,
                eigengap: term.eigengap,
                open_loop: d_max_term(&jac.a, &jac.b, &zero, &s_schedule[k], p)?.d_max,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::{make_double_integrator, make_linear, make_pendulum, BoxBounds, PendulumParams};
    use crate::linalg::jacobi_eigen;

    fn replay(model: &DynamicsModel, controls: &[f64], x0: &[f64], dt: f64) -> Nominal {
        let mut states = vec![DVector::from_column_slice(x0)];
        let controls: Vec<_> = controls.iter().map(|&u| DVector::from_element(1, u)).collect();
        for u in &controls {
            let next = step_euler(model, states.last().unwrap(), u, dt).unwrap();
            states.push(next);
        }
        Nominal { states, controls, dt }
    }

    fn pendulum_nominal() -> (DynamicsModel, Nominal) {
        let model = make_pendulum(PendulumParams::default()).unwrap();
        let controls: Vec<f64> = (0..60).map(|k| 1.7 * (k as f64 * 0.2).sin()).collect();
        let nominal = replay(&model, &controls, &[0.0, 0.0], 1.0 / 30.0);
        (model, nominal)
    }

    #[test]
    fn noiseless_replay_tracks_exactly() {
        let (model, nominal) = pendulum_nominal();
        let r = rollout(&model, &nominal, None, &NoiseSpec::silent(2), &[]).unwrap();
        assert!(r.deviations.iter().all(|d| d.amax() == 0.0));
        assert_eq!(r.states.len(), 61);
    }

    #[test]
    fn linear_deviation_follows_closed_loop_powers() {
        let model = make_double_integrator();
        let dt = 0.1;
        let nominal = replay(&model, &vec![0.3; 40], &[1.0, -0.5], dt);
        let w = DMatrix::from_row_slice(1, 2, &[-2.0, -3.0]);
        let delta0 = DVector::from_column_slice(&[0.2, -0.1]);
        let r = rollout_from(&model, &nominal, Some(&w), &NoiseSpec::silent(2), &[], &delta0).unwrap();
        let jac = discrete_jacobians(&model, &nominal.states[0], &nominal.controls[0], dt).unwrap();
        let m = &jac.a + &jac.b * &w;
        let mut expected = delta0.clone();
        for d in &r.deviations {
            assert!((d - &expected).amax() < 1e-12);
            expected = &m * expected;
        }
    }

    #[test]
    fn contracting_gain_shrinks_deviation_monotonically() {
        // lightly unstable 2-state plant with full actuation
        let model = make_linear(
            DMatrix::from_row_slice(2, 2, &[0.5, 1.0, -0.3, 0.2]),
            DMatrix::identity(2, 2),
        )
        .unwrap();
        let dt = 0.1;
        let controls: Vec<_> = (0..60).map(|_| DVector::zeros(2)).collect();
        let mut states = vec![DVector::zeros(2)];
        for u in &controls {
            states.push(step_euler(&model, states.last().unwrap(), u, dt).unwrap());
        }
        let nominal = Nominal { states, controls, dt };
        let w = DMatrix::from_row_slice(2, 2, &[-3.0, -1.0, 0.3, -2.0]);
        let jac = discrete_jacobians(&model, &nominal.states[0], &nominal.controls[0], dt).unwrap();
        let m = &jac.a + &jac.b * &w;
        let (values, _) = jacobi_eigen(&(m.transpose() * &m));
        assert!(values[0] < 1.0, "{values}");
        let delta0 = DVector::from_column_slice(&[0.5, 0.5]);
        let r = rollout_from(&model, &nominal, Some(&w), &NoiseSpec::silent(2), &[], &delta0).unwrap();
        let norms = r.deviation_norms();
        assert!(norms.windows(2).all(|p| p[1] < p[0]));

        let open = rollout_from(&model, &nominal, None, &NoiseSpec::silent(2), &[], &delta0).unwrap();
        assert!(open.deviation_norms()[60] > norms[60]);
    }

    #[test]
    fn noise_stays_within_bounds_and_is_seeded() {
        let (model, nominal) = pendulum_nominal();
        let noise = NoiseSpec::new(vec![0.2, 0.05], 9).unwrap();
        let a = rollout(&model, &nominal, None, &noise, &[]).unwrap();
        let b = rollout(&model, &nominal, None, &noise, &[]).unwrap();
        assert_eq!(a, b);
        for w in &a.noise {
            assert!(w[0].abs() <= 0.2 && w[1].abs() <= 0.05);
        }
        let c = rollout(&model, &nominal, None, &noise.with_seed(10), &[]).unwrap();
        assert_ne!(a.noise, c.noise);
    }

    #[test]
    fn saturation_flags_mark_clamped_steps() {
        let (model, nominal) = pendulum_nominal();
        let w = DMatrix::from_row_slice(1, 2, &[-30.0, -5.0]);
        let noise = NoiseSpec::new(vec![0.2, 0.05], 4).unwrap();
        let r = rollout(&model, &nominal, Some(&w), &noise, &[]).unwrap();
        assert!(r.saturated.iter().any(|&s| s));
        for k in 0..r.controls.len() {
            let wanted = &nominal.controls[k] + &w * &r.deviations[k];
            assert!(model.control_bounds.contains(&r.controls[k]));
            assert_eq!(r.saturated[k], r.controls[k] != wanted);
        }
    }

    #[test]
    fn divergent_run_is_truncated() {
        let model = make_double_integrator();
        let nominal = replay(&model, &vec![0.0; 50], &[0.0, 0.0], 0.1);
        let w = DMatrix::from_row_slice(1, 2, &[100.0, 100.0]);
        let r = rollout_from(&model, &nominal, Some(&w), &NoiseSpec::silent(2), &[], &DVector::from_column_slice(&[1.0, 0.0])).unwrap();
        let k = r.diverged_at.expect("diverges");
        assert_eq!(r.states.len(), k);
        let stats = error_stats(&[r], 50);
        assert_eq!(stats.divergent(), 1);
        assert!(stats.terminal_mean.is_nan());
    }

    #[test]
    fn single_run_and_silent_runs_have_zero_spread() {
        let (model, nominal) = pendulum_nominal();
        let noise = NoiseSpec::new(vec![0.2, 0.05], 1).unwrap();
        let one = monte_carlo(&model, &nominal, None, &noise, 1, 7, &[]).unwrap();
        assert!(one.stats.std.iter().all(|&s| s == 0.0));
        let silent = monte_carlo(&model, &nominal, None, &NoiseSpec::silent(2), 12, 7, &[]).unwrap();
        assert_eq!(silent.stats.runs, 12);
        assert!(silent.stats.std.iter().all(|&s| s == 0.0));
        assert!(silent.rollouts.windows(2).all(|p| p[0] == p[1]));
    }

    #[test]
    fn monte_carlo_is_deterministic() {
        let (model, nominal) = pendulum_nominal();
        let noise = NoiseSpec::new(vec![0.2, 0.05], 0).unwrap();
        let w = DMatrix::from_row_slice(1, 2, &[-2.0, -1.0]);
        let a = monte_carlo(&model, &nominal, Some(&w), &noise, 12, 100, &[]).unwrap();
        let b = monte_carlo(&model, &nominal, Some(&w), &noise, 12, 100, &[]).unwrap();
        assert_eq!(a, b);
        assert!(a.stats.std.iter().all(|&s| s >= 0.0));
    }

    #[test]
    fn mismatch_schedule_alternates() {
        let (model, nominal) = pendulum_nominal();
        let schedule = vec![vec![("damping".to_string(), 0.15)], vec![("damping".to_string(), 0.05)]];
        let mc = monte_carlo(&model, &nominal, None, &NoiseSpec::silent(2), 4, 0, &schedule).unwrap();
        assert_eq!(mc.rollouts[0], mc.rollouts[2]);
        assert_ne!(mc.rollouts[0], mc.rollouts[1]);
        assert!(monte_carlo(&model, &nominal, None, &NoiseSpec::silent(2), 2, 0, &[vec![("nope".to_string(), 1.0)]]).is_err());
    }

    #[test]
    fn initial_ball_sample_respects_radius() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..1000 {
            assert!(sample_ball(&mut rng, 3, 0.3).norm() <= 0.3 + 1e-15);
        }
    }

    #[test]
    fn dmax_profile_columns() {
        let (model, nominal) = pendulum_nominal();
        let s = vec![EllipsoidShape::from_slice(&[1.0, 5.5]).unwrap(); nominal.horizon()];
        let p = DeviationWeight::identity(2);
        let zero = DMatrix::zeros(1, 2);
        let rows = compare_dmax_profile(&model, &nominal, &zero, &s, &p).unwrap();
        assert!(rows.iter().all(|r| r.with_gain == r.open_loop));
        let w = DMatrix::from_row_slice(1, 2, &[-2.5, -7.4]);
        let rows = compare_dmax_profile(&model, &nominal, &w, &s, &p).unwrap();
        assert_eq!(rows.len(), 60);
        assert!(rows.iter().all(|r| r.with_gain >= 0.0 && r.open_loop >= 0.0));
    }

    #[test]
    fn invalid_noise_rejected() {
        assert!(NoiseSpec::new(vec![-0.1, 0.0], 0).is_err());
        let (model, nominal) = pendulum_nominal();
        assert!(rollout(&model, &nominal, None, &NoiseSpec::silent(3), &[]).is_err());
        let _ = BoxBounds::unbounded(2);
    }
}
