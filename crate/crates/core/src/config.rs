//! JSON run configuration.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::dynamics::{
    make_ballbeam, make_double_integrator, make_pendulum, BallBeamParams, BoxBounds, DynamicsModel, PendulumParams,
};
use crate::error::{Error, Result};
use crate::robust_metric::{DeviationWeight, EllipsoidShape};
use crate::simulate::{Mismatch, NoiseSpec};
use crate::solver::SolverConfig;
use crate::transcription::ProblemSpec;

/// Environment variable that overrides `output_dir`.
pub const OUTPUT_DIR_ENV: &str = "ROBUST_TRAJOPT_OUTPUT_DIR";

/// A matrix given either by its diagonal or by full rows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum MatrixSpec {
    Diagonal(Vec<f64>),
    Full(Vec<Vec<f64>>),
}

impl MatrixSpec {
    pub fn to_matrix(&self, n: usize, name: &str) -> Result<DMatrix<f64>> {
        match self {
            MatrixSpec::Diagonal(d) => {
                if d.len() != n {
                    return Err(Error::Config(format!("{name} diagonal needs {n} entries, got {}", d.len())));
                }
                Ok(DMatrix::from_diagonal(&DVector::from_column_slice(d)))
            }
            MatrixSpec::Full(rows) => {
                if rows.len() != n || rows.iter().any(|r| r.len() != n) {
                    return Err(Error::Config(format!("{name} must be {n}x{n}")));
                }
                Ok(DMatrix::from_fn(n, n, |i, j| rows[i][j]))
            }
        }
    }
}

/// Box bounds where `null` means unbounded on that side.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BoundsSpec {
    pub lower: Vec<Option<f64>>,
    pub upper: Vec<Option<f64>>,
}

impl BoundsSpec {
    pub fn to_bounds(&self, n: usize, name: &str) -> Result<BoxBounds> {
        if self.lower.len() != n || self.upper.len() != n {
            return Err(Error::Config(format!("{name} needs {n} lower and upper entries")));
        }
        let lower = DVector::from_iterator(n, self.lower.iter().map(|v| v.unwrap_or(f64::NEG_INFINITY)));
        let upper = DVector::from_iterator(n, self.upper.iter().map(|v| v.unwrap_or(f64::INFINITY)));
        BoxBounds::new(lower, upper).map_err(|e| Error::Config(format!("{name}: {e}")))
    }

    pub fn from_bounds(b: &BoxBounds) -> Self {
        let finite = |v: f64| v.is_finite().then_some(v);
        Self {
            lower: b.lower.iter().map(|&v| finite(v)).collect(),
            upper: b.upper.iter().map(|&v| finite(v)).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    /// `pendulum`, `ballbeam` or `double_integrator`.
    pub name: String,
    #[serde(default)]
    pub parameters: BTreeMap<String, f64>,
}

impl ModelSpec {
    pub fn build(&self) -> Result<DynamicsModel> {
        let mut model = match self.name.as_str() {
            "pendulum" => make_pendulum(PendulumParams::default())?,
            "ballbeam" => make_ballbeam(BallBeamParams::default())?,
            "double_integrator" => make_double_integrator(),
            other => {
                return Err(Error::Config(format!(
                    "unknown model {other:?}; expected pendulum, ballbeam or double_integrator"
                )))
            }
        };
        for (name, value) in &self.parameters {
            model = model.with_parameter(name, *value)?;
        }
        Ok(model)
    }
}

fn default_runs() -> usize {
    12
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("output")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelSpec,
    pub horizon: usize,
    pub dt: f64,
    pub x0: Vec<f64>,
    pub x_goal: Vec<f64>,
    pub q: MatrixSpec,
    pub r: MatrixSpec,
    pub q_terminal: MatrixSpec,
    pub alpha: f64,
    /// Shared ellipsoid diagonal, used when `s_schedule` is absent.
    pub s: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub s_schedule: Option<Vec<Vec<f64>>>,
    /// Deviation weight; identity when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub p: Option<MatrixSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub state_bounds: Option<BoundsSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub control_bounds: Option<BoundsSpec>,
    /// Row-major box on `W`; unbounded when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gain_bounds: Option<BoundsSpec>,
    /// Per-knot tolerances, reported but not enforced.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub epsilon: Option<Vec<f64>>,
    #[serde(default)]
    pub solver: SolverConfig,
    pub noise: NoiseSpec,
    #[serde(default = "default_runs")]
    pub runs: usize,
    /// Plant parameter overrides, applied to run `i` as entry `i % len`.
    #[serde(default)]
    pub mismatch: Vec<BTreeMap<String, f64>>,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let config: Self = serde_json::from_str(text).map_err(|e| Error::Config(format!("invalid config: {e}")))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Checks everything that can be checked without running anything.
    pub fn validate(&self) -> Result<()> {
        self.problem_spec()?.validate()?;
        self.solver.validate()?;
        self.noise.validate()?;
        let model = self.model.build()?;
        if self.noise.bounds.len() != model.n_x() {
            return Err(Error::Config(format!(
                "noise bounds need {} entries, got {}",
                model.n_x(),
                self.noise.bounds.len()
            )));
        }
        if self.runs == 0 {
            return Err(Error::Config("runs must be >= 1".into()));
        }
        for overrides in &self.mismatch {
            for (name, value) in overrides {
                model.with_parameter(name, *value)?;
            }
        }
        Ok(())
    }

    pub fn build_model(&self) -> Result<DynamicsModel> {
        self.model.build()
    }

    pub fn problem_spec(&self) -> Result<ProblemSpec> {
        let model = self.model.build()?;
        let n_x = model.n_x();
        let n_u = model.n_u();
        let q = self.q.to_matrix(n_x, "q")?;
        let r = self.r.to_matrix(n_u, "r")?;
        let q_terminal = self.q_terminal.to_matrix(n_x, "q_terminal")?;
        let shape = EllipsoidShape::from_slice(&self.s)?;
        let mut spec = ProblemSpec::new(
            model,
            self.horizon,
            self.dt,
            DVector::from_column_slice(&self.x0),
            DVector::from_column_slice(&self.x_goal),
            (q, r, q_terminal),
            self.alpha,
            shape,
        );
        if let Some(schedule) = &self.s_schedule {
            spec.s_schedule = schedule
                .iter()
                .map(|d| EllipsoidShape::from_slice(d))
                .collect::<Result<_>>()?;
        }
        if let Some(p) = &self.p {
            spec.p = DeviationWeight::new(p.to_matrix(n_x, "p")?)?;
        }
        if let Some(b) = &self.state_bounds {
            spec.state_bounds = b.to_bounds(n_x, "state_bounds")?;
        }
        if let Some(b) = &self.control_bounds {
            spec.control_bounds = b.to_bounds(n_u, "control_bounds")?;
        }
        if let Some(b) = &self.gain_bounds {
            spec.gain_bounds = Some(b.to_bounds(n_x * n_u, "gain_bounds")?);
        }
        spec.epsilon_schedule = self.epsilon.clone();
        Ok(spec)
    }

    /// The simulated plant uses the configured bounds too.
    pub fn plant_model(&self) -> Result<DynamicsModel> {
        let spec = self.problem_spec()?;
        let mut model = spec.model;
        model.state_bounds = spec.state_bounds;
        model.control_bounds = spec.control_bounds;
        Ok(model)
    }

    pub fn mismatch_schedule(&self) -> Vec<Mismatch> {
        self.mismatch
            .iter()
            .map(|m| m.iter().map(|(k, v)| (k.clone(), *v)).collect())
            .collect()
    }

    /// Every optional field made explicit, so the written config is self-describing.
    pub fn effective(&self) -> Result<Self> {
        let spec = self.problem_spec()?;
        let mut out = self.clone();
        out.state_bounds = Some(BoundsSpec::from_bounds(&spec.state_bounds));
        out.control_bounds = Some(BoundsSpec::from_bounds(&spec.control_bounds));
        out.p = Some(MatrixSpec::Full(
            (0..spec.p.matrix().nrows())
                .map(|i| spec.p.matrix().row(i).iter().copied().collect())
                .collect(),
        ));
        let mut params: BTreeMap<String, f64> = BTreeMap::new();
        for (name, value) in spec.model.parameters() {
            params.insert(name.to_string(), value);
        }
        out.model.parameters = params;
        Ok(out)
    }

    /// `output_dir`, unless overridden by the environment.
    pub fn resolved_output_dir(&self) -> PathBuf {
        match std::env::var_os(OUTPUT_DIR_ENV) {
            Some(dir) if !dir.is_empty() => PathBuf::from(dir),
            _ => self.output_dir.clone(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) const PENDULUM: &str = r#"{
        "model": {"name": "pendulum", "parameters": {"length": 0.5, "inertia": 0.25}},
        "horizon": 120,
        "dt": 0.03333333333333333,
        "x0": [0.0, 0.0],
        "x_goal": [3.141592653589793, 0.0],
        "q": [1.0, 0.1],
        "r": [0.1],
        "q_terminal": [100.0, 10.0],
        "alpha": 10.0,
        "s": [1.0, 5.5],
        "noise": {"bounds": [0.2, 0.05], "seed": 7},
        "output_dir": "out/pendulum"
    }"#;

    #[test]
    fn parses_pendulum_defaults() {
        let c = RunConfig::from_json(PENDULUM).unwrap();
        assert_eq!(c.runs, 12);
        let spec = c.problem_spec().unwrap();
        assert_eq!(spec.layout().num_variables(), 364);
        assert_eq!(spec.control_bounds.upper[0], 1.7);
        assert_eq!(spec.model.parameters()[1], ("length", 0.5));
    }

    #[test]
    fn unknown_keys_rejected() {
        let text = PENDULUM.replace("\"alpha\"", "\"alpah\"");
        let err = RunConfig::from_json(&text).unwrap_err();
        assert!(err.to_string().contains("alpah"), "{err}");
    }

    #[test]
    fn zero_horizon_names_the_violation() {
        let text = PENDULUM.replace("\"horizon\": 120", "\"horizon\": 0");
        let err = RunConfig::from_json(&text).unwrap_err();
        assert!(err.to_string().contains("horizon"), "{err}");
    }

    #[test]
    fn effective_config_round_trips() {
        let c = RunConfig::from_json(PENDULUM).unwrap();
        let eff = c.effective().unwrap();
        let back = RunConfig::from_json(&eff.to_json()).unwrap();
        assert_eq!(back, eff);
        assert_eq!(back.problem_spec().unwrap(), c.problem_spec().unwrap());
        assert_eq!(back.effective().unwrap(), eff);
    }

    #[test]
    fn full_matrices_and_bounds() {
        let text = PENDULUM
            .replace("\"q\": [1.0, 0.1]", "\"q\": [[1.0, 0.2], [0.2, 0.1]]")
            .replace(
                "\"alpha\": 10.0,",
                "\"alpha\": 10.0, \"gain_bounds\": {\"lower\": [-20, null], \"upper\": [20, null]},",
            );
        let c = RunConfig::from_json(&text).unwrap();
        let spec = c.problem_spec().unwrap();
        assert_eq!(spec.q[(0, 1)], 0.2);
        let gb = spec.gain_bounds.unwrap();
        assert_eq!(gb.lower[1], f64::NEG_INFINITY);
        assert_eq!(gb.upper[0], 20.0);
    }

    #[test]
    fn bad_mismatch_parameter_rejected() {
        let text = PENDULUM.replace("\"runs\"", "\"x\"").replace(
            "\"output_dir\"",
            "\"mismatch\": [{\"friction\": 1.0}], \"output_dir\"",
        );
        assert!(RunConfig::from_json(&text).is_err());
    }
}
