//! Continuous-time models, explicit-Euler discretization and Jacobians.
//!
//! A [`DynamicsModel`] pairs a vector field `ẋ = f(x, u)` (with analytic
//! Jacobians) with box bounds on states and controls. The discrete map used
//! everywhere else is `x_{k+1} = x_k + dt · f(x_k, u_k)`.

use nalgebra::{DMatrix, DVector};

use crate::error::{check_len, Error, Result};

pub type StateVector = DVector<f64>;
pub type ControlVector = DVector<f64>;

/// Axis-aligned box `lower <= v <= upper`. Infinite entries mean unbounded.
#[derive(Debug, Clone, PartialEq)]
pub struct BoxBounds {
    pub lower: DVector<f64>,
    pub upper: DVector<f64>,
}

impl BoxBounds {
    pub fn new(lower: DVector<f64>, upper: DVector<f64>) -> Result<Self> {
        check_len("box bounds", lower.len(), upper.len())?;
        for i in 0..lower.len() {
            if lower[i].is_nan() || upper[i].is_nan() || lower[i] > upper[i] {
                return Err(Error::Config(format!(
                    "bound {i}: lower {} exceeds upper {}",
                    lower[i], upper[i]
                )));
            }
        }
        Ok(Self { lower, upper })
    }

    pub fn unbounded(n: usize) -> Self {
        Self {
            lower: DVector::from_element(n, f64::NEG_INFINITY),
            upper: DVector::from_element(n, f64::INFINITY),
        }
    }

    pub fn symmetric(limits: &[f64]) -> Result<Self> {
        let upper = DVector::from_column_slice(limits);
        Self::new(-upper.clone(), upper)
    }

    pub fn dim(&self) -> usize {
        self.lower.len()
    }

    pub fn contains(&self, v: &DVector<f64>) -> bool {
        v.len() == self.dim()
            && v.iter()
                .zip(self.lower.iter().zip(self.upper.iter()))
                .all(|(x, (lo, hi))| *lo <= *x && *x <= *hi)
    }

    pub fn clamp(&self, v: &DVector<f64>) -> DVector<f64> {
        DVector::from_iterator(
            v.len(),
            v.iter()
                .zip(self.lower.iter().zip(self.upper.iter()))
                .map(|(x, (lo, hi))| x.max(*lo).min(*hi)),
        )
    }
}

/// Discrete-time Jacobians of the Euler map: `A = ∂x_{k+1}/∂x_k`, `B = ∂x_{k+1}/∂u_k`.
#[derive(Debug, Clone, PartialEq)]
pub struct JacobianPair {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PendulumParams {
    pub mass: f64,
    pub length: f64,
    pub inertia: f64,
    pub damping: f64,
    pub gravity: f64,
}

impl Default for PendulumParams {
    fn default() -> Self {
        Self {
            mass: 1.0,
            length: 1.0,
            inertia: 1.0,
            damping: 0.1,
            gravity: 9.81,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BallBeamParams {
    pub mass: f64,
    pub radius: f64,
    pub inertia: f64,
    /// Viscous friction of the ball on the beam.
    pub viscous_friction: f64,
    /// Dry friction coefficient, applied as `b₂·m·g·cos θ`.
    pub dry_friction: f64,
    pub gravity: f64,
    /// Servo time constant.
    pub tau: f64,
}

impl Default for BallBeamParams {
    fn default() -> Self {
        let mass = 0.05;
        let radius = 0.01;
        Self {
            mass,
            radius,
            inertia: 0.4 * mass * radius * radius,
            viscous_friction: 0.1,
            dry_friction: 0.01,
            gravity: 9.81,
            tau: 0.1,
        }
    }
}

/// The concrete vector fields shipped with the library.
#[derive(Debug, Clone, PartialEq)]
pub enum ModelKind {
    /// `I θ̈ + b θ̇ + m g l sin θ = u`, state `[θ, θ̇]`.
    Pendulum(PendulumParams),
    /// Ball rolling on a servo-driven beam, state `[x, ẋ, θ, θ̇]`, control `θ_cmd`.
    ///
    /// The beam follows `τ² θ̈ + 2τ θ̇ + θ = θ_cmd`.
    BallBeam(BallBeamParams),
    /// `ẋ₁ = x₂`, `ẋ₂ = u`.
    DoubleIntegrator,
    /// `ẋ = A x + B u` with arbitrary dimensions.
    Linear { a: DMatrix<f64>, b: DMatrix<f64> },
}

impl ModelKind {
    pub fn name(&self) -> &'static str {
        match self {
            ModelKind::Pendulum(_) => "pendulum",
            ModelKind::BallBeam(_) => "ballbeam",
            ModelKind::DoubleIntegrator => "double_integrator",
            ModelKind::Linear { .. } => "linear",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DynamicsModel {
    kind: ModelKind,
    pub state_bounds: BoxBounds,
    pub control_bounds: BoxBounds,
}

/// Default pendulum torque limit.
pub const PENDULUM_TORQUE_LIMIT: f64 = 1.7;

pub fn make_pendulum(params: PendulumParams) -> Result<DynamicsModel> {
    validate_pendulum(&params)?;
    Ok(DynamicsModel {
        kind: ModelKind::Pendulum(params),
        state_bounds: BoxBounds::unbounded(2),
        control_bounds: BoxBounds::symmetric(&[PENDULUM_TORQUE_LIMIT])?,
    })
}

pub fn make_ballbeam(params: BallBeamParams) -> Result<DynamicsModel> {
    validate_ballbeam(&params)?;
    let state_bounds = BoxBounds::new(
        DVector::from_column_slice(&[-0.5, f64::NEG_INFINITY, -0.5, f64::NEG_INFINITY]),
        DVector::from_column_slice(&[0.5, f64::INFINITY, 0.5, f64::INFINITY]),
    )?;
    Ok(DynamicsModel {
        kind: ModelKind::BallBeam(params),
        state_bounds,
        control_bounds: BoxBounds::symmetric(&[0.25])?,
    })
}

pub fn make_double_integrator() -> DynamicsModel {
    DynamicsModel {
        kind: ModelKind::DoubleIntegrator,
        state_bounds: BoxBounds::unbounded(2),
        control_bounds: BoxBounds::unbounded(1),
    }
}

/// Continuous-time linear system, unbounded.
pub fn make_linear(a: DMatrix<f64>, b: DMatrix<f64>) -> Result<DynamicsModel> {
    if !a.is_square() || a.nrows() == 0 || b.nrows() != a.nrows() || b.ncols() == 0 {
        return Err(Error::Config(format!(
            "linear model needs square A and B with matching rows, got {:?} and {:?}",
            a.shape(),
            b.shape()
        )));
    }
    if a.iter().chain(b.iter()).any(|v| !v.is_finite()) {
        return Err(Error::Config("linear model matrices must be finite".into()));
    }
    let (n_x, n_u) = (a.nrows(), b.ncols());
    Ok(DynamicsModel {
        kind: ModelKind::Linear { a, b },
        state_bounds: BoxBounds::unbounded(n_x),
        control_bounds: BoxBounds::unbounded(n_u),
    })
}

fn validate_pendulum(p: &PendulumParams) -> Result<()> {
    let positive = [
        ("mass", p.mass),
        ("length", p.length),
        ("inertia", p.inertia),
        ("gravity", p.gravity),
    ];
    for (name, value) in positive {
        if !(value > 0.0 && value.is_finite()) {
            return Err(Error::Config(format!("pendulum {name} must be positive, got {value}")));
        }
    }
    if !(p.damping >= 0.0 && p.damping.is_finite()) {
        return Err(Error::Config(format!(
            "pendulum damping must be nonnegative, got {}",
            p.damping
        )));
    }
    Ok(())
}

fn validate_ballbeam(p: &BallBeamParams) -> Result<()> {
    let positive = [
        ("mass", p.mass),
        ("radius", p.radius),
        ("inertia", p.inertia),
        ("gravity", p.gravity),
        ("tau", p.tau),
    ];
    for (name, value) in positive {
        if !(value > 0.0 && value.is_finite()) {
            return Err(Error::Config(format!("ballbeam {name} must be positive, got {value}")));
        }
    }
    for (name, value) in [
        ("viscous_friction", p.viscous_friction),
        ("dry_friction", p.dry_friction),
    ] {
        if !value.is_finite() {
            return Err(Error::Config(format!("ballbeam {name} must be finite")));
        }
    }
    Ok(())
}

impl DynamicsModel {
    pub fn kind(&self) -> &ModelKind {
        &self.kind
    }

    pub fn name(&self) -> &'static str {
        self.kind.name()
    }

    pub fn n_x(&self) -> usize {
        match &self.kind {
            ModelKind::Pendulum(_) | ModelKind::DoubleIntegrator => 2,
            ModelKind::BallBeam(_) => 4,
            ModelKind::Linear { a, .. } => a.nrows(),
        }
    }

    pub fn n_u(&self) -> usize {
        match &self.kind {
            ModelKind::Linear { b, .. } => b.ncols(),
            _ => 1,
        }
    }

    /// Named physical parameters of the model.
    pub fn parameters(&self) -> Vec<(&'static str, f64)> {
        match &self.kind {
            ModelKind::Pendulum(p) => vec![
                ("mass", p.mass),
                ("length", p.length),
                ("inertia", p.inertia),
                ("damping", p.damping),
                ("gravity", p.gravity),
            ],
            ModelKind::BallBeam(p) => vec![
                ("mass", p.mass),
                ("radius", p.radius),
                ("inertia", p.inertia),
                ("viscous_friction", p.viscous_friction),
                ("dry_friction", p.dry_friction),
                ("gravity", p.gravity),
                ("tau", p.tau),
            ],
            ModelKind::DoubleIntegrator | ModelKind::Linear { .. } => Vec::new(),
        }
    }

    /// Returns a copy with one named parameter replaced. Bounds are kept.
    pub fn with_parameter(&self, name: &str, value: f64) -> Result<Self> {
        let kind = match &self.kind {
            ModelKind::Pendulum(p) => {
                let mut p = *p;
                match name {
                    "mass" => p.mass = value,
                    "length" => p.length = value,
                    "inertia" => p.inertia = value,
                    "damping" => p.damping = value,
                    "gravity" => p.gravity = value,
                    _ => return Err(unknown_parameter(self.name(), name)),
                }
                validate_pendulum(&p)?;
                ModelKind::Pendulum(p)
            }
            ModelKind::BallBeam(p) => {
                let mut p = *p;
                match name {
                    "mass" => p.mass = value,
                    "radius" => p.radius = value,
                    "inertia" => p.inertia = value,
                    "viscous_friction" => p.viscous_friction = value,
                    "dry_friction" => p.dry_friction = value,
                    "gravity" => p.gravity = value,
                    "tau" => p.tau = value,
                    _ => return Err(unknown_parameter(self.name(), name)),
                }
                validate_ballbeam(&p)?;
                ModelKind::BallBeam(p)
            }
            ModelKind::DoubleIntegrator | ModelKind::Linear { .. } => {
                return Err(unknown_parameter(self.name(), name))
            }
        };
        Ok(Self {
            kind,
            state_bounds: self.state_bounds.clone(),
            control_bounds: self.control_bounds.clone(),
        })
    }

    fn check_dims(&self, x: &StateVector, u: &ControlVector) -> Result<()> {
        check_len("state", self.n_x(), x.len())?;
        check_len("control", self.n_u(), u.len())
    }

    /// Continuous-time vector field `ẋ = f(x, u)`.
    pub fn vector_field(&self, x: &StateVector, u: &ControlVector) -> Result<StateVector> {
        self.check_dims(x, u)?;
        Ok(self.eval(x, u))
    }

    fn eval(&self, x: &StateVector, u: &ControlVector) -> StateVector {
        match &self.kind {
            ModelKind::Pendulum(p) => {
                let (theta, omega) = (x[0], x[1]);
                let accel = (u[0]
                    - p.damping * omega
                    - p.mass * p.gravity * p.length * theta.sin())
                    / p.inertia;
                DVector::from_column_slice(&[omega, accel])
            }
            ModelKind::BallBeam(p) => {
                let (pos, vel, theta, omega) = (x[0], x[1], x[2], x[3]);
                let denom = p.inertia / (p.radius * p.radius) + p.mass;
                let ball = (p.mass * pos * omega * omega
                    - p.viscous_friction * vel
                    - p.dry_friction * p.mass * p.gravity * theta.cos()
                    - p.mass * p.gravity * theta.sin())
                    / denom;
                let beam = (u[0] - theta - 2.0 * p.tau * omega) / (p.tau * p.tau);
                DVector::from_column_slice(&[vel, ball, omega, beam])
            }
            ModelKind::DoubleIntegrator => DVector::from_column_slice(&[x[1], u[0]]),
            ModelKind::Linear { a, b } => a * x + b * u,
        }
    }

    /// Analytic continuous-time Jacobians `(∂f/∂x, ∂f/∂u)`.
    pub fn continuous_jacobians(
        &self,
        x: &StateVector,
        u: &ControlVector,
    ) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
        self.check_dims(x, u)?;
        Ok(self.continuous_jacobians_unchecked(x))
    }

    fn continuous_jacobians_unchecked(&self, x: &StateVector) -> (DMatrix<f64>, DMatrix<f64>) {
        match &self.kind {
            ModelKind::Pendulum(p) => {
                let fx = DMatrix::from_row_slice(
                    2,
                    2,
                    &[
                        0.0,
                        1.0,
                        -p.mass * p.gravity * p.length * x[0].cos() / p.inertia,
                        -p.damping / p.inertia,
                    ],
                );
                let fu = DMatrix::from_row_slice(2, 1, &[0.0, 1.0 / p.inertia]);
                (fx, fu)
            }
            ModelKind::BallBeam(p) => {
                let (pos, theta, omega) = (x[0], x[2], x[3]);
                let denom = p.inertia / (p.radius * p.radius) + p.mass;
                let mg = p.mass * p.gravity;
                let tau2 = p.tau * p.tau;
                #[rustfmt::skip]
                let fx = DMatrix::from_row_slice(4, 4, &[
                    0.0, 1.0, 0.0, 0.0,
                    p.mass * omega * omega / denom,
                    -p.viscous_friction / denom,
                    (p.dry_friction * mg * theta.sin() - mg * theta.cos()) / denom,
                    2.0 * p.mass * pos * omega / denom,
                    0.0, 0.0, 0.0, 1.0,
                    0.0, 0.0, -1.0 / tau2, -2.0 / p.tau,
                ]);
                let fu = DMatrix::from_row_slice(4, 1, &[0.0, 0.0, 0.0, 1.0 / tau2]);
                (fx, fu)
            }
            ModelKind::DoubleIntegrator => (
                DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 0.0, 0.0]),
                DMatrix::from_row_slice(2, 1, &[0.0, 1.0]),
            ),
            ModelKind::Linear { a, b } => (a.clone(), b.clone()),
        }
    }
}

fn unknown_parameter(model: &str, name: &str) -> Error {
    Error::Config(format!("model {model} has no parameter {name:?}"))
}

fn check_dt(dt: f64) -> Result<()> {
    if !(dt > 0.0 && dt.is_finite()) {
        return Err(Error::Config(format!("time step must be positive, got {dt}")));
    }
    Ok(())
}

/// One explicit-Euler step `x + dt · f(x, u)`.
pub fn step_euler(
    model: &DynamicsModel,
    x: &StateVector,
    u: &ControlVector,
    dt: f64,
) -> Result<StateVector> {
    check_dt(dt)?;
    let xdot = model.vector_field(x, u)?;
    let next = x + xdot * dt;
    if let Some(i) = next.iter().position(|v| !v.is_finite()) {
        return Err(Error::Numeric(format!(
            "{} Euler step produced non-finite state component {i}",
            model.name()
        )));
    }
    Ok(next)
}

/// `A = I + dt·∂f/∂x`, `B = dt·∂f/∂u` evaluated at `(x, u)`.
pub fn discrete_jacobians(
    model: &DynamicsModel,
    x: &StateVector,
    u: &ControlVector,
    dt: f64,
) -> Result<JacobianPair> {
    check_dt(dt)?;
    let (fx, fu) = model.continuous_jacobians(x, u)?;
    let n = model.n_x();
    Ok(JacobianPair {
        a: DMatrix::identity(n, n) + fx * dt,
        b: fu * dt,
    })
}

/// Central-difference approximation of [`discrete_jacobians`] through [`step_euler`].
pub fn finite_diff_jacobians(
    model: &DynamicsModel,
    x: &StateVector,
    u: &ControlVector,
    dt: f64,
    h: f64,
) -> Result<JacobianPair> {
    if !(h > 0.0) {
        return Err(Error::Config(format!("perturbation size must be positive, got {h}")));
    }
    let (n_x, n_u) = (model.n_x(), model.n_u());
    let mut a = DMatrix::zeros(n_x, n_x);
    let mut b = DMatrix::zeros(n_x, n_u);
    for j in 0..n_x {
        let mut xp = x.clone();
        let mut xm = x.clone();
        xp[j] += h;
        xm[j] -= h;
        let col = (step_euler(model, &xp, u, dt)? - step_euler(model, &xm, u, dt)?) / (2.0 * h);
        a.set_column(j, &col);
    }
    for j in 0..n_u {
        let mut up = u.clone();
        let mut um = u.clone();
        up[j] += h;
        um[j] -= h;
        let col = (step_euler(model, x, &up, dt)? - step_euler(model, x, &um, dt)?) / (2.0 * h);
        b.set_column(j, &col);
    }
    Ok(JacobianPair { a, b })
}
